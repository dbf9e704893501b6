"""Reference implementations used only as test oracles: deliberately naive."""


def brute_force_selection(profile, entries):
    """Cheapest covering set within both budgets by enumerating every subset
    as a bitmask; ties go to the smallest sorted id tuple. None if infeasible."""
    entries = list(entries)
    best = None
    for mask in range(1 << len(entries)):
        chosen = [entries[i] for i in range(len(entries)) if mask >> i & 1]
        cpu = sum(c.cpu_cost for c in chosen)
        mem = sum(c.mem_cost for c in chosen)
        if cpu > profile.cpu_budget or mem > profile.mem_budget:
            continue
        covered = set()
        for c in chosen:
            covered |= c.capabilities
        if not set(profile.required_capabilities) <= covered:
            continue
        key = (cpu + mem, tuple(sorted(c.component_id for c in chosen)))
        if best is None or key < best:
            best = key
    return best


def naive_first_match(data: bytes, rules):
    """Index of the first rule (in ruleset order) whose pattern occurs in
    ``data``, checked by comparing at every offset. None if none occurs."""
    for idx, rule in enumerate(rules):
        p = rule.pattern
        for start in range(len(data) - len(p) + 1):
            if all(data[start + k] == p[k] for k in range(len(p))):
                return idx
    return None


def random_scan_instance(r):
    """(data, rules) over a 3-letter alphabet so that patterns overlap and
    occur by chance; about half the instances get a pattern planted."""
    from vmguard.detection import SignatureRule

    alphabet = b"abc"
    rules = []
    for i in range(r.randint(1, 5)):
        pattern = bytes(r.choice(alphabet) for _ in range(r.randint(4, 7)))
        rules.append(SignatureRule(f"R{i}", pattern))
    data = bytearray(r.choice(alphabet) for _ in range(r.randint(0, 80)))
    if r.random() < 0.5 and data:
        p = r.choice(rules).pattern
        at = r.randint(0, len(data))
        data[at:at] = p
    return bytes(data), rules


CAPS = ["A", "B", "C", "D"]


def comp(cid, caps, cpu, mem):
    from vmguard.model import SecurityComponentDescriptor

    return SecurityComponentDescriptor(cid, 1, frozenset(caps), cpu, mem, b"\x00" * 32)


def random_catalog(r, n: int):
    return [
        comp(f"c{i:02d}", r.sample(CAPS, r.randint(1, 3)), r.randint(0, 6), r.randint(0, 6))
        for i in range(n)
    ]


def random_profile(r):
    from vmguard.model import NodeClass, NodeProfile

    return NodeProfile("n", NodeClass.DESKTOP, r.randint(0, 14), r.randint(0, 14),
                       frozenset(r.sample(CAPS, r.randint(1, 3))))
