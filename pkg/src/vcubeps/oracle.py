"""Trace validators for causal pub/sub runs.

Everything here reads :class:`~vcubeps.simnet.TraceRecord` rows only; no
protocol object is imported.  Each ``check_*`` returns a list of
:class:`Violation`; :func:`validate` bundles them into a :class:`Report`.

Message identity is ``(source, topic, counter)``.  Happens-before follows the
publisher: ``m -> m'`` when the publisher of ``m'`` delivered ``m`` before it
delivered (published) ``m'``, closed transitively.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

from .simnet import parse_cb

CHECKS = (
    "causal_safety",
    "integrity",
    "fifo_reception",
    "cb_exactness",
    "coverage",
    "membership",
    "liveness",
)


@dataclass(frozen=True)
class Violation:
    check: str
    run_id: Optional[int]
    node: Optional[int]
    msg: Optional[tuple]
    detail: str

    def as_dict(self) -> dict:
        return {
            "check": self.check,
            "run_id": self.run_id,
            "node": self.node,
            "msg": list(self.msg) if self.msg is not None else None,
            "detail": self.detail,
        }


@dataclass
class Report:
    violations: list[Violation] = field(default_factory=list)
    # liveness stalls explained by a dependency the receiver cannot resolve
    stalls: list[Violation] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_check(self) -> dict[str, int]:
        out = {c: 0 for c in CHECKS}
        for v in self.violations:
            out[v.check] += 1
        return out

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [v.as_dict() for v in self.violations],
            "violations_by_check": self.by_check(),
            "stalls": [v.as_dict() for v in self.stalls],
            "counts": dict(self.counts),
        }


def _mid(r) -> tuple:
    return (r.msg_source, r.msg_topic, r.msg_counter)


def _runs(records: Sequence) -> dict[Any, list]:
    out: dict[Any, list] = defaultdict(list)
    for r in records:
        out[r.run_id].append(r)
    return out


# -- happens-before ------------------------------------------------------------


class HappensBefore:
    """Per-topic happens-before closure over published messages.

    Messages are numbered in publication order; ancestor sets are int bitsets.
    """

    def __init__(self, records: Sequence) -> None:
        self.index: dict[tuple, int] = {}
        self.ids: list[tuple] = []
        self.anc: list[int] = []  # all HB predecessors
        self.direct: list[int] = []  # delivered by the publisher beforehand
        self.imm: list[int] = []  # transitive reduction
        closure: dict[tuple, int] = defaultdict(int)
        dset: dict[tuple, int] = defaultdict(int)
        covered: dict[tuple, int] = defaultdict(int)
        for r in records:
            if r.kind != "deliver":
                continue
            mid = _mid(r)
            key = (r.node, r.msg_topic)
            if r.node == r.msg_source and mid not in self.index:
                k = len(self.ids)
                self.index[mid] = k
                self.ids.append(mid)
                self.anc.append(closure[key])
                self.direct.append(dset[key])
                self.imm.append(dset[key] & ~covered[key])
            k = self.index.get(mid)
            if k is None:
                continue  # delivered before its publisher did: integrity reports it
            bit = 1 << k
            closure[key] |= bit | self.anc[k]
            dset[key] |= bit
            covered[key] |= self.anc[k]

    def ids_of(self, bits: int) -> set[tuple]:
        out = set()
        while bits:
            low = bits & -bits
            out.add(self.ids[low.bit_length() - 1])
            bits ^= low
        return out

    def bits_of(self, ids: Iterable[tuple]) -> Optional[int]:
        b = 0
        for mid in ids:
            k = self.index.get(mid)
            if k is None:
                return None
            b |= 1 << k
        return b

    def immediate_predecessors(self, mid: tuple) -> set[tuple]:
        return self.ids_of(self.imm[self.index[mid]])

    def ancestors(self, mid: tuple) -> set[tuple]:
        return self.ids_of(self.anc[self.index[mid]])


# -- individual checkers --------------------------------------------------------


def check_causal_safety(records: Sequence) -> list[Violation]:
    """No node delivers a message before one of its HB predecessors it also delivers."""
    out = []
    for run_id, recs in _runs(records).items():
        hb = HappensBefore(recs)
        all_del: dict[tuple, int] = defaultdict(int)
        for r in recs:
            if r.kind == "deliver":
                k = hb.index.get(_mid(r))
                if k is not None:
                    all_del[(r.node, r.msg_topic)] |= 1 << k
        seen: dict[tuple, int] = defaultdict(int)
        for r in recs:
            if r.kind != "deliver":
                continue
            k = hb.index.get(_mid(r))
            if k is None:
                continue
            key = (r.node, r.msg_topic)
            late = hb.anc[k] & all_del[key] & ~seen[key]
            if late:
                out.append(Violation("causal_safety", run_id, r.node, _mid(r),
                                     f"delivered before predecessors {sorted(hb.ids_of(late))}"))
            seen[key] |= 1 << k
    return out


def _subscription_epochs(recs: Sequence) -> dict[tuple, list[tuple[int, int]]]:
    """``(node, topic) -> [(start_index, end_index)]`` from successful app calls."""
    epochs: dict[tuple, list] = defaultdict(list)
    open_at: dict[tuple, int] = {}
    for idx, r in enumerate(recs):
        if r.detail != "OK":
            continue
        key = (r.node, r.msg_topic)
        if r.kind == "subscribe":
            open_at[key] = idx
        elif r.kind == "unsubscribe" and key in open_at:
            epochs[key].append((open_at.pop(key), idx))
    end = len(recs)
    for key, start in open_at.items():
        epochs[key].append((start, end))
    return epochs


def _in_epoch(epochs: list[tuple[int, int]], idx: int) -> bool:
    return any(a < idx < b for a, b in epochs)


def check_integrity(records: Sequence) -> list[Violation]:
    """Deliveries are unique, of published messages, to subscribers; publishers self-deliver."""
    out = []
    for run_id, recs in _runs(records).items():
        published = set()
        for r in recs:
            if r.kind == "publish" and r.detail == "OK":
                published.add(_mid(r))
        epochs = _subscription_epochs(recs)
        seen = set()
        self_delivered = set()
        for idx, r in enumerate(recs):
            if r.kind != "deliver":
                continue
            mid = _mid(r)
            if (r.node, mid) in seen:
                out.append(Violation("integrity", run_id, r.node, mid, "delivered twice"))
                continue
            seen.add((r.node, mid))
            if mid not in published:
                out.append(Violation("integrity", run_id, r.node, mid,
                                     "delivered but never published"))
                continue
            if r.node == r.msg_source:
                self_delivered.add(mid)
            elif mid not in self_delivered:
                out.append(Violation("integrity", run_id, r.node, mid,
                                     "delivered before its publisher delivered it"))
            elif not _in_epoch(epochs.get((r.node, r.msg_topic), []), idx):
                out.append(Violation("integrity", run_id, r.node, mid,
                                     "delivered while not subscribed"))
        for mid in sorted(published - self_delivered, key=repr):
            out.append(Violation("integrity", run_id, mid[0], mid,
                                 "publisher never delivered its own message"))
    return out


def check_fifo_reception(records: Sequence) -> list[Violation]:
    """Per (receiver, source, topic), received broadcast counters strictly increase."""
    out = []
    for run_id, recs in _runs(records).items():
        last: dict[tuple, int] = {}
        for r in recs:
            if r.kind != "receive" or r.msg_kind == "ACK":
                continue
            key = (r.node, r.msg_source, r.msg_topic)
            prev = last.get(key)
            if prev is not None and r.msg_counter <= prev:
                out.append(Violation("fifo_reception", run_id, r.node, _mid(r),
                                     f"received after counter {prev}"))
            else:
                last[key] = r.msg_counter
    return out


def _starts(recs: Sequence) -> dict[tuple, tuple[int, Any]]:
    out = {}
    for idx, r in enumerate(recs):
        if r.kind == "start":
            out[(r.msg_kind,) + _mid(r)] = (idx, r)
    return out


def check_cb_exactness(records: Sequence) -> list[Violation]:
    """Compare each PUB's barrier with the HB graph.

    Immediate predecessors must be in the barrier and the barrier may only name
    messages the publisher had delivered.  When the publisher had delivered
    every HB predecessor the barrier must equal the immediate predecessors.
    """
    out = []
    for run_id, recs in _runs(records).items():
        hb = HappensBefore(recs)
        for (kind, *mid), (_, r) in _starts(recs).items():
            if kind != "PUB":
                continue
            mid = tuple(mid)
            k = hb.index.get(mid)
            if k is None:
                continue
            topic = mid[1]
            cb_ids = {(s, topic, c) for s, c in parse_cb(r.detail)}
            cb = hb.bits_of(cb_ids)
            if cb is None:
                out.append(Violation("cb_exactness", run_id, r.node, mid,
                                     f"barrier names unpublished messages {sorted(cb_ids)}"))
                continue
            if r.cb_size is not None and r.cb_size != len(cb_ids):
                out.append(Violation("cb_exactness", run_id, r.node, mid,
                                     "cb_size disagrees with barrier"))
            imm, direct, anc = hb.imm[k], hb.direct[k], hb.anc[k]
            if imm & ~cb:
                out.append(Violation("cb_exactness", run_id, r.node, mid,
                                     f"missing immediate predecessors {sorted(hb.ids_of(imm & ~cb))}"))
            if cb & ~direct:
                out.append(Violation("cb_exactness", run_id, r.node, mid,
                                     f"barrier names undelivered {sorted(hb.ids_of(cb & ~direct))}"))
            if direct == anc and cb != imm:
                out.append(Violation("cb_exactness", run_id, r.node, mid,
                                     f"barrier {sorted(cb_ids)} is not the immediate "
                                     f"predecessor set {sorted(hb.ids_of(imm))}"))
    return out


# -- membership and coverage ------------------------------------------------------


class ViewHistory:
    """Subscriber sets every node's view held over time, rebuilt from view records."""

    def __init__(self, recs: Sequence) -> None:
        self._at: dict[tuple, list[int]] = defaultdict(list)
        self._members: dict[tuple, list[frozenset]] = defaultdict(list)
        self._entries: dict[tuple, dict] = defaultdict(dict)
        for idx, r in enumerate(recs):
            if r.kind == "view_reset":
                key = (r.node, r.msg_topic)
                self._entries[key] = {}
            elif r.kind == "view":
                key = (r.node, r.msg_topic)
                self._entries[key][r.peer] = (r.msg_kind, r.msg_counter)
            else:
                continue
            ents = self._entries[key]
            self._at[key].append(idx)
            self._members[key].append(frozenset(n for n, (op, _) in ents.items() if op == "SUB"))

    def members_before(self, node: int, topic: Any, idx: int) -> frozenset:
        at = self._at.get((node, topic))
        if not at:
            return frozenset()
        k = bisect.bisect_left(at, idx)
        return self._members[(node, topic)][k - 1] if k else frozenset()

    def changed_between(self, node: int, topic: Any, lo: int, hi: int) -> bool:
        at = self._at.get((node, topic))
        if not at:
            return False
        k = bisect.bisect_right(at, lo)
        return k < len(at) and at[k] < hi

    def final(self, node: int, topic: Any) -> dict:
        return dict(self._entries.get((node, topic), {}))


def _first_per_cluster(i: int, candidates: Iterable[int], h: int) -> list[int]:
    """First candidate of each of ``i``'s clusters ``1..h`` (ordered by xor distance)."""
    best: dict[int, int] = {}
    for j in candidates:
        if j == i:
            continue
        x = i ^ j
        s = x.bit_length()
        if s <= h and (s not in best or x < best[s] ^ i):
            best[s] = j
    return [best[s] for s in sorted(best)]


def _region(i: int, h: int) -> set[int]:
    """Nodes in clusters ``1..h`` of ``i``."""
    lo = (i >> h) << h
    return set(range(lo, lo + (1 << h))) - {i}


def _dones(recs: Sequence) -> dict[tuple, int]:
    out = {}
    for idx, r in enumerate(recs):
        if r.kind == "done" and r.node == r.msg_source:
            out.setdefault((r.msg_kind,) + _mid(r), idx)
    return out


def compute_expected_receivers(
    recs: Sequence, msg_kind: str, mid: tuple, n_nodes: int,
    views: Optional[ViewHistory] = None, flood_uns: bool = True,
    index: Optional[tuple[dict, dict]] = None,
) -> tuple[set[int], set[int]]:
    """``(expected, uncertain)`` receivers of one broadcast.

    The tree is replayed with every forwarder's view as it stood when the
    broadcast started.  Below a forwarder whose view changed before the
    broadcast completed, receivers are classed as uncertain instead.  SUB,
    and with ``flood_uns`` (repaired nodes) UNS, go to every node.
    """
    views = views or ViewHistory(recs)
    d = n_nodes.bit_length() - 1
    src, topic, _ = mid
    starts, dones = index if index is not None else (_starts(recs), _dones(recs))
    key = (msg_kind,) + mid
    if key not in starts:
        raise KeyError(f"no start record for {msg_kind} {mid}")
    t0, _ = starts[key]
    t1 = dones.get(key, len(recs))
    wildcard = msg_kind == "SUB" or (flood_uns and msg_kind == "UNS")
    everyone = range(n_nodes)

    def kids(node: int, h: int) -> list[int]:
        pool = everyone if wildcard else views.members_before(node, topic, t0)
        return _first_per_cluster(node, pool, h)

    expected: set[int] = set()
    uncertain: set[int] = set()
    stack = [(k, (src ^ k).bit_length() - 1) for k in kids(src, d)]
    while stack:
        node, h = stack.pop()
        expected.add(node)
        if not wildcard and views.changed_between(node, topic, t0, t1):
            uncertain |= _region(node, h)
            continue
        stack.extend((k, (node ^ k).bit_length() - 1) for k in kids(node, h))
    return expected, uncertain


def check_coverage(records: Sequence, n_nodes: int, flood_uns: bool = True) -> list[Violation]:
    """Every expected receiver of every broadcast received it; nobody else did."""
    out = []
    for run_id, recs in _runs(records).items():
        views = ViewHistory(recs)
        received: dict[tuple, set[int]] = defaultdict(set)
        for r in recs:
            if r.kind == "receive" and r.msg_kind != "ACK":
                received[(r.msg_kind,) + _mid(r)].add(r.node)
        index = (_starts(recs), _dones(recs))
        for key in index[0]:
            kind, mid = key[0], key[1:]
            expected, uncertain = compute_expected_receivers(recs, kind, mid, n_nodes, views,
                                                             flood_uns, index)
            got = received.get(key, set())
            for j in sorted(expected - got):
                out.append(Violation("coverage", run_id, j, mid, f"{kind} never received"))
            for j in sorted(got - expected - uncertain):
                out.append(Violation("coverage", run_id, j, mid, f"{kind} received unexpectedly"))
    return out


def check_membership_convergence(records: Sequence) -> list[Violation]:
    """At the end, subscribers' views list exactly the current subscribers."""
    out = []
    for run_id, recs in _runs(records).items():
        views = ViewHistory(recs)
        last_op: dict[tuple, tuple[str, int]] = {}
        for r in recs:
            if r.kind in ("subscribe", "unsubscribe") and r.detail == "OK":
                last_op[(r.node, r.msg_topic)] = (r.kind, r.msg_counter)
        subs: dict[Any, dict[int, int]] = defaultdict(dict)
        for (node, topic), (op, c) in last_op.items():
            if op == "subscribe":
                subs[topic][node] = c
        for (node, topic), (op, _) in sorted(last_op.items(), key=repr):
            if op != "subscribe":
                continue
            view = views.final(node, topic)
            for s, c in sorted(subs[topic].items()):
                entry = view.get(s)
                if entry is None or entry[0] != "SUB" or entry[1] != c:
                    out.append(Violation("membership", run_id, node, (s, topic, c),
                                         f"subscriber missing from view (entry {entry})"))
            for s, (kind, c) in sorted(view.items()):
                if kind != "SUB" or s in subs[topic]:
                    continue
                out.append(Violation("membership", run_id, node, (s, topic, c),
                                     "departed node still in view"))
    return out


def _effective_epoch_start(recs: Sequence, node: int, topic: Any, sub_idx: int,
                          purge_at_done: bool = True) -> int:
    """Receptions before the node's previous UNS completes are purged by it.

    Repaired nodes purge when they unsubscribe, so their epoch starts at the
    subscribe call itself.
    """
    if not purge_at_done:
        return sub_idx
    uns = None
    for idx in range(sub_idx - 1, -1, -1):
        r = recs[idx]
        if r.kind == "unsubscribe" and r.node == node and r.msg_topic == topic and r.detail == "OK":
            uns = (node, topic, r.msg_counter)
            break
    if uns is None:
        return sub_idx
    for idx in range(sub_idx + 1, len(recs)):
        r = recs[idx]
        if r.kind == "done" and r.msg_kind == "UNS" and r.node == node and _mid(r) == uns:
            return idx
    return len(recs)


def check_liveness(records: Sequence, held_guard: bool = True,
                   purge_at_done: bool = False) -> tuple[list[Violation], list[Violation]]:
    """Messages a subscriber received but never delivered by the end of the run.

    Returns ``(violations, stalls)``.  A stuck message is a stall when one of
    its unsatisfied barrier entries was never received by that subscriber in
    its current subscription, directly or through another stalled message;
    only a later message from that source could release it.  Anything else
    stuck is a violation.  ``held_guard`` mirrors repaired nodes, which never
    skip a barrier entry they hold undelivered; ``purge_at_done`` mirrors
    unrepaired nodes, which keep held messages until their UNS completes.
    """
    violations, stalls = [], []
    for run_id, recs in _runs(records).items():
        epochs = _subscription_epochs(recs)
        end = len(recs)
        cbs = {}
        for (kind, *mid), (_, r) in _starts(recs).items():
            if kind == "PUB":
                cbs[tuple(mid)] = parse_cb(r.detail)
        delivered = set()
        last_del: dict[tuple, int] = {}
        for r in recs:
            if r.kind == "deliver":
                delivered.add((r.node, _mid(r)))
                k = (r.node, r.msg_topic, r.msg_source)
                last_del[k] = max(last_del.get(k, -1), r.msg_counter)
        starts_at = {}
        for key, ep in epochs.items():
            if ep[-1][1] == end:
                starts_at[key] = _effective_epoch_start(recs, key[0], key[1], ep[-1][0],
                                                       purge_at_done)
        pending: dict[tuple, set[tuple]] = defaultdict(set)
        received: dict[tuple, set[tuple]] = defaultdict(set)
        first_rec: dict[tuple, dict[int, int]] = defaultdict(dict)
        for idx, r in enumerate(recs):
            if r.kind != "receive" or r.msg_kind not in ("PUB", "UNS"):
                continue
            key = (r.node, r.msg_topic)
            lo = starts_at.get(key)
            if lo is None or idx <= lo:
                continue
            fr = first_rec[key]
            if r.msg_kind == "UNS":
                fr.pop(r.msg_source, None)
                continue
            fr.setdefault(r.msg_source, r.msg_counter)
            received[key].add(_mid(r))
            if (r.node, _mid(r)) not in delivered:
                pending[key].add(_mid(r))
        for key, mids in sorted(pending.items(), key=repr):
            node, topic = key
            fr = first_rec[key]

            def open_entries(mid):
                return [
                    (s, topic, c) for s, c in sorted(cbs.get(mid, ()))
                    if last_del.get((node, topic, s), -1) < c
                    and (not fr.get(s, -1) > c or (held_guard and (s, topic, c) in mids))
                ]

            explained: dict[tuple, list] = {}
            changed = True
            while changed:
                changed = False
                for mid in mids:
                    if mid in explained:
                        continue
                    why = [e for e in open_entries(mid)
                           if e not in received[key] or e in explained]
                    if why:
                        explained[mid] = why
                        changed = True
            for mid in sorted(mids, key=repr):
                if mid in explained:
                    stalls.append(Violation("liveness", run_id, node, mid,
                                            f"waits on {explained[mid]}"))
                else:
                    violations.append(Violation("liveness", run_id, node, mid,
                                                "received but never delivered"))
    return violations, stalls


def trace_config(records: Sequence) -> dict[str, str]:
    """``key=value`` pairs from the trace's ``config`` records."""
    out = {}
    for r in records:
        if r.kind == "config" and r.detail:
            for item in r.detail.split():
                k, _, v = item.partition("=")
                out[k] = v
    return out


def trace_size(records: Sequence) -> Optional[int]:
    """Node count announced by the run's ``config`` record, if any."""
    n = trace_config(records).get("n")
    return int(n) if n else None


def validate(records: Sequence, n_nodes: Optional[int] = None,
             checks: Sequence[str] = CHECKS) -> Report:
    """Run the selected checkers; ``n_nodes`` defaults to the trace's config record."""
    records = list(records)
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    config = trace_config(records)
    repaired = config.get("repairs") != "0"
    if n_nodes is None:
        n_nodes = trace_size(records)
    if n_nodes is None:
        top = max((r.node for r in records if r.node is not None), default=0)
        n_nodes = 1 << max(1, top.bit_length())
    rep = Report()
    single = {
        "causal_safety": check_causal_safety,
        "integrity": check_integrity,
        "fifo_reception": check_fifo_reception,
        "cb_exactness": check_cb_exactness,
        "membership": check_membership_convergence,
    }
    for name in CHECKS:
        if name not in checks:
            continue
        if name in single:
            rep.violations += single[name](records)
        elif name == "coverage":
            rep.violations += check_coverage(records, n_nodes, repaired)
        else:
            live, stalls = check_liveness(records, held_guard=repaired,
                                          purge_at_done=not repaired)
            rep.violations += live
            rep.stalls = stalls
    rep.counts = {
        "records": len(records),
        "deliveries": sum(1 for r in records if r.kind == "deliver"),
        "broadcasts": sum(1 for r in records if r.kind == "start"),
    }
    return rep
