"""One infection, start to finish: halt, snapshot, transfer, store, replace.

Run with ``python demos/02_infection_handling.py``.
"""

# %%
import tempfile

from vmguard import Injection, Scenario, Simulation, evidence_list, evidence_verify

evidence_dir = tempfile.mkdtemp()
scenario = Scenario(seed=42, num_nodes=1, detector_latency=2, provisioning_delay=1, max_ticks=10,
                    injections=[Injection(tick=5, node_id="n1", pattern_id="W1")])

# %% run it and show the interesting part of the trace
with Simulation(scenario, evidence_dir) as sim:
    trace, metrics = sim.run()
    interesting = {"inject", "halt", "snapshot", "report", "stored", "transfer_ok", "clean_vm", "replace"}
    for e in trace.events:
        if e.kind in interesting:
            print(e.line()[:110])

    # %% the guest that was infected is retired, its replacement runs a clean image
    for vm in sim.agents["n1"].stack.guest_vms:
        print(vm, "clean" if vm.payload_hash in sim.catalog.clean_hashes else "modified")

# %% the evidence outlives the simulation and still verifies
(row,) = evidence_list(evidence_dir)
print(row)
for check in evidence_verify(evidence_dir, row.hash).checks:
    print(f"  {check.name:<40} {check.passed}")

# %%
print(metrics.to_text())
