import pytest

from vmguard.catalog import core_image, default_catalog, default_ruleset
from vmguard.crypto import Pki, ToyScheme
from vmguard.detection import SignatureRule


@pytest.fixture(scope="session")
def pki():
    return Pki(1)


@pytest.fixture(scope="session")
def toy_pki():
    return Pki(1, scheme=ToyScheme())


@pytest.fixture(scope="session")
def rules() -> list[SignatureRule]:
    return default_ruleset(1)


@pytest.fixture(scope="session")
def catalog(pki, rules):
    return default_catalog(pki, rules)


@pytest.fixture(scope="session")
def core(pki):
    return core_image(pki)


@pytest.fixture(scope="session")
def three_bundle_store(tmp_path_factory):
    """Evidence store from a simulator run: n1 infected twice, n2 once."""
    from vmguard.simulator import Injection, Scenario, Simulation

    root = tmp_path_factory.mktemp("evidence")
    scenario = Scenario(
        seed=3, num_nodes=2, detector_latency=1, max_ticks=14,
        injections=[Injection(3, "n1", "W1"), Injection(5, "n2", "W2"), Injection(9, "n1", "W3")],
    )
    with Simulation(scenario, root) as sim:
        trace, metrics = sim.run()
    assert metrics.evidence_count == 3
    return root


def pytest_terminal_summary(terminalreporter):
    from _report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
