"""``vmguard`` command line: serve, agent, simulate, evidence list|verify.

Exit codes: 0 success, 1 usage, 2 runtime error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
from pathlib import Path

from .catalog import default_ruleset
from .crypto import Pki
from .errors import IntegritySelfCheckFailed, VmGuardError
from .evidence import EvidenceQuery, evidence_list, evidence_verify

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("vmguard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _inject_arg(text: str) -> tuple[int, str]:
    cycle, sep, rule = text.partition(":")
    if not sep or not rule:
        raise argparse.ArgumentTypeError(f"expected CYCLE:RULE_ID, got {text!r}")
    try:
        return int(cycle), rule
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cycle in {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # repeated on every subcommand so the flags work on either side of it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="deterministic key/ruleset seed")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")

    p = _Parser(prog="vmguard", description="Virtualization-based node security: server, agent, simulator.")
    p.add_argument("--seed", type=int, default=None, help="deterministic key/ruleset seed")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", parents=[common], help="run the security server")
    s.add_argument("--listen", default="127.0.0.1:7400", help="host:port (port 0 picks a free one)")
    s.add_argument("--catalog", required=True, type=Path, help="catalog directory (defaults written if empty)")
    s.add_argument("--evidence", required=True, type=Path, help="evidence store directory")
    s.add_argument("--tick-seconds", type=float, default=1.0)
    s.add_argument("--lease-ticks", type=int, default=600)

    a = sub.add_parser("agent", parents=[common], help="run one node agent against a server")
    a.add_argument("--server", required=True, help="host:port of the security server")
    a.add_argument("--profile", required=True, type=Path, help="key=value node profile file")
    a.add_argument("--stack", required=True, type=Path, help="layer-stack directory (defaults written if empty)")
    a.add_argument("--cycles", type=int, default=30, help="guard cycles to run after admission")
    a.add_argument("--tick-seconds", type=float, default=1.0)
    a.add_argument("--exposure-latency", type=int, default=0)
    a.add_argument("--connect-attempts", type=int, default=10, help="admission attempts, 0.5 s apart")
    a.add_argument("--inject", action="append", type=_inject_arg, default=[], metavar="CYCLE:RULE_ID",
                   help="append a ruleset pattern to the first running guest at that cycle")

    m = sub.add_parser("simulate", parents=[common], help="run a scenario file deterministically")
    m.add_argument("--scenario", required=True, type=Path)
    m.add_argument("--trace-out", required=True, type=Path)
    m.add_argument("--metrics-out", required=True, type=Path)
    m.add_argument("--evidence", type=Path, help="keep the evidence store here instead of a temp dir")

    e = sub.add_parser("evidence", parents=[common], help="inspect an evidence store")
    esub = e.add_subparsers(dest="evidence_command", required=True, parser_class=_Parser)
    el = esub.add_parser("list", parents=[common], help="list stored bundles as TSV")
    el.add_argument("--store", required=True, type=Path)
    el.add_argument("--node")
    el.add_argument("--from", dest="tick_from", type=int)
    el.add_argument("--to", dest="tick_to", type=int)
    ev = esub.add_parser("verify", parents=[common], help="re-hash a bundle and check its custody chain")
    ev.add_argument("--store", required=True, type=Path)
    ev.add_argument("hash")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_serve(args) -> int:
    from .live import LiveServer, WallClock, open_server, parse_address

    core = open_server(args.catalog, args.evidence, args.seed or 0, lease_ticks=args.lease_ticks)
    server = LiveServer(core, parse_address(args.listen), WallClock(args.tick_seconds))
    host, port = server.address
    print(f"listening={host}:{port}", flush=True)
    print(f"stored_bundles={len(core.store)}", flush=True)

    def _stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_agent(args) -> int:
    from .live import SocketLink, WallClock, boot_with_retry, load_profile, load_stack, make_live_agent, \
        parse_address, run_agent

    seed = args.seed or 0
    profile = load_profile(args.profile)
    stack = load_stack(args.stack, profile.node_id, Pki(seed))
    patterns = {r.rule_id: r.pattern for r in default_ruleset(seed)}
    injections = {}
    for cycle, rule in args.inject:
        if rule not in patterns:
            raise UsageError(f"unknown rule {rule!r}; known: {', '.join(sorted(patterns))}")
        injections[cycle] = patterns[rule]

    link = SocketLink(parse_address(args.server))
    agent = make_live_agent(profile, stack, seed, link, exposure_latency=args.exposure_latency)
    clock = WallClock(args.tick_seconds)
    try:
        boot = boot_with_retry(agent, clock, attempts=args.connect_attempts)
    except IntegritySelfCheckFailed as exc:
        print("admitted=0")
        print("reason=IntegritySelfCheckFailed")
        log.error("%s", exc)
        return EXIT_VERIFY
    print(f"admitted={int(boot.admitted)}", flush=True)
    if not boot.admitted:
        print(f"reason={boot.reason}")
        return EXIT_RUNTIME if boot.reason == "Unreachable" else EXIT_VERIFY
    try:
        run_agent(agent, clock, args.cycles, injections)
    finally:
        link.close()
    incidents = list(agent.incidents.values())
    print(f"incidents={len(incidents)}")
    print(f"evidence={','.join(i.address or '' for i in incidents)}")
    print(f"downtimes={','.join(str(i.downtime) for i in incidents if i.downtime is not None)}")
    print(f"backlog={agent.backlog}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulator import Simulation, load_scenario

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    with Simulation(scenario, args.evidence) as sim:
        trace, metrics = sim.run()
    args.trace_out.write_text(trace.text())
    args.metrics_out.write_text(metrics.to_text())
    return EXIT_OK


def cmd_evidence(args) -> int:
    if args.evidence_command == "list":
        rows = evidence_list(args.store, EvidenceQuery(args.node, args.tick_from, args.tick_to))
        for e in rows:
            print(f"{e.node_id}\t{e.vm_id}\t{e.tick}\t{e.hash}")
        return EXIT_OK
    report = evidence_verify(args.store, args.hash)
    for c in report.checks:
        status = "skip" if c.passed is None else ("pass" if c.passed else "fail")
        print(f"{c.name}\t{status}")
    return EXIT_OK if report.ok else EXIT_VERIFY


COMMANDS = {"serve": cmd_serve, "agent": cmd_agent, "simulate": cmd_simulate, "evidence": cmd_evidence}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vmguard: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VmGuardError, OSError, ValueError) as exc:
        print(f"vmguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
