"""A worm spreading through ten nodes, and how detection latency bounds it.

Run with ``python demos/04_outbreak.py``.
"""

# %%
import numpy as np

from vmguard import Injection, Scenario, run_scenario

# %% certain spread around a ring: the first halt comes L ticks after the
# injection, by which time at most L + 1 nodes carry the worm
for latency in range(5):
    sc = Scenario(seed=1, num_nodes=10, topology="ring", propagation_probability=1.0,
                  detector_latency=latency, max_ticks=latency + 5, injections=[Injection(2, "n1", "W1")])
    _, m = run_scenario(sc)
    print(f"latency {latency}: infected when first halted = {m.infected_at_first_halt}")

# %% probabilistic spread on a complete graph, averaged over seeds
rows = []
for p in (0.1, 0.3, 0.6):
    for latency in (0, 2):
        spread, downtime = [], []
        for seed in range(8):
            sc = Scenario(seed=seed, num_nodes=10, propagation_probability=p, detector_latency=latency,
                          max_ticks=15, injections=[Injection(2, "n1", "W2")])
            _, m = run_scenario(sc)
            spread.append(m.propagation_count)
            downtime += m.downtimes
        rows.append((p, latency, np.mean(spread), np.mean(downtime)))

print(" p    latency  mean propagations  mean downtime")
for p, latency, spread, downtime in rows:
    print(f"{p:<4} {latency:>7} {spread:>18.1f} {downtime:>14.1f}")
