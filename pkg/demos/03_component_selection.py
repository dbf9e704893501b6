"""Picking security components to fit a node's CPU and memory budget.

Run with ``python demos/03_component_selection.py``.
"""

# %%
from vmguard import NodeProfile, Pki, default_catalog, select_components
from vmguard.errors import InfeasibleProfile

catalog = default_catalog(Pki(seed=1))
for c in catalog.entries:
    print(f"{c.component_id:<12} cpu={c.cpu_cost} mem={c.mem_cost} {sorted(c.capabilities)}")

# %% the cheapest set covering every required capability within both budgets
wants = [["SignatureScan"], ["SignatureScan", "FirewallFilter"], ["SignatureScan", "FirewallFilter", "AnomalyScan"]]
for cpu, mem in [(16, 16), (6, 4), (5, 4)]:
    for needs in wants:
        profile = NodeProfile("n1", "Desktop", cpu, mem, frozenset(needs))
        try:
            chosen = select_components(profile, catalog.entries)
            cost = sum(c.cpu_cost + c.mem_cost for c in chosen)
            picked = f"{[c.component_id for c in chosen]} (cost {cost})"
        except InfeasibleProfile:
            picked = "infeasible"
        print(f"budget {cpu:>2}/{mem:<2} needs {','.join(needs):<40} -> {picked}")

# %% a handheld only asks for signature scanning
handheld = NodeProfile("m1", "MobileHandheld", 2, 1, frozenset({"SignatureScan"}))
print([c.component_id for c in select_components(handheld, catalog.entries)])
