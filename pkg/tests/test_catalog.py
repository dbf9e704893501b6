import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_force_selection, comp, random_catalog, random_profile
from vmguard.catalog import (
    DEFAULT_MANIFESTS,
    EXACT_LIMIT,
    ComponentCatalog,
    satisfies,
    select_components,
)
from vmguard.errors import InfeasibleProfile, UnknownManifest
from vmguard.model import Capability, NodeProfile

def selection_key(profile, entries):
    try:
        chosen = select_components(profile, entries)
    except InfeasibleProfile:
        return None
    assert satisfies(profile, chosen)
    return (sum(c.cpu_cost + c.mem_cost for c in chosen), tuple(c.component_id for c in chosen))


class TestDefaultCatalog:
    def test_desktop(self, catalog):
        p = NodeProfile("n", "Desktop", 16, 16, frozenset({Capability.SIGNATURE_SCAN, Capability.FIREWALL_FILTER}))
        # fw-basic + sig-lite costs 5, sig-pro costs 6
        assert [c.component_id for c in select_components(p, catalog.entries)] == ["fw-basic", "sig-lite"]

    def test_mobile(self, catalog):
        p = NodeProfile("n", "MobileHandheld", 2, 1, frozenset({Capability.SIGNATURE_SCAN}))
        assert [c.component_id for c in select_components(p, catalog.entries)] == ["sig-lite"]

    def test_budget_too_small(self, catalog):
        p = NodeProfile("n", "MobileHandheld", 1, 1, frozenset({Capability.SIGNATURE_SCAN}))
        with pytest.raises(InfeasibleProfile):
            select_components(p, catalog.entries)

    def test_unknown_capability(self, catalog):
        p = NodeProfile("n", "Desktop", 99, 99, frozenset({"Sandboxing"}))
        with pytest.raises(InfeasibleProfile):
            select_components(p, catalog.entries)

    def test_empty_catalog(self):
        with pytest.raises(ValueError):
            select_components(NodeProfile("n", "Desktop", 1, 1, frozenset({"A"})), [])

    def test_integrity(self, pki, catalog):
        assert catalog.check(pki.publisher.public_key) == []

    def test_clean_images(self, catalog):
        for manifest in DEFAULT_MANIFESTS:
            assert catalog.clean_image(manifest).app_manifest == manifest
        with pytest.raises(UnknownManifest):
            catalog.clean_image(("games",))

    def test_save_load(self, catalog, tmp_path):
        catalog.save(tmp_path)
        loaded = ComponentCatalog.load(tmp_path)
        assert loaded.entries == catalog.entries
        assert loaded.security_env_image == catalog.security_env_image
        assert loaded.clean_guest_images == catalog.clean_guest_images
        assert loaded.env_config == catalog.env_config


class TestAgainstBruteForce:
    def test_oracle_sanity(self):
        entries = [comp("x", "A", 1, 1), comp("y", "B", 1, 1), comp("z", "AB", 2, 1)]
        p = NodeProfile("n", "Desktop", 5, 5, frozenset("AB"))
        assert brute_force_selection(p, entries) == (3, ("z",))
        assert brute_force_selection(NodeProfile("n", "Desktop", 0, 0, frozenset("A")), entries) is None

    def test_tie_breaks_on_ids(self):
        entries = [comp("b", "A", 1, 1), comp("a", "A", 1, 1)]
        p = NodeProfile("n", "Desktop", 5, 5, frozenset("A"))
        assert selection_key(p, entries) == (2, ("a",))

    def test_zero_cost_components_not_added(self):
        entries = [comp("a", "A", 1, 0), comp("free", "B", 0, 0)]
        p = NodeProfile("n", "Desktop", 5, 5, frozenset("A"))
        # equal cost with and without "free"; the shorter id tuple is smaller
        assert selection_key(p, entries) == brute_force_selection(p, entries) == (1, ("a",))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_exact_regime(self, seed, n):
        r = random.Random(seed)
        entries = random_catalog(r, n)
        p = random_profile(r)
        assert selection_key(p, entries) == brute_force_selection(p, entries)

    def test_exact_up_to_limit(self):
        r = random.Random(11)
        for _ in range(20):
            entries = random_catalog(r, EXACT_LIMIT - 1)
            p = random_profile(r)
            assert selection_key(p, entries) == brute_force_selection(p, entries)

    def test_greedy_regime_is_sound_not_optimal(self):
        r = random.Random(5)
        for _ in range(30):
            entries = random_catalog(r, EXACT_LIMIT + 1)
            p = random_profile(r)
            got, best = selection_key(p, entries), brute_force_selection(p, entries)
            if got is not None:
                assert best is not None and got[0] >= best[0]

    def test_greedy_can_miss_optimum(self):
        # "cheap" has the best cost per capability, so greedy takes it and then
        # needs a 4-cost component for B; "both" alone costs 4
        core = [comp("both", "AB", 4, 0), comp("cheap", "A", 1, 0), comp("onlyb", "B", 4, 0)]
        filler = [comp(f"f{i:02d}", "D", 9, 9) for i in range(EXACT_LIMIT)]
        p = NodeProfile("n", "Desktop", 99, 99, frozenset("AB"))
        assert brute_force_selection(p, core) == selection_key(p, core) == (4, ("both",))
        assert selection_key(p, core + filler)[0] == 5
