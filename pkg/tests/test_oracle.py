import io

import pytest

from vcubeps import experiments as ex
from vcubeps import oracle
from vcubeps.protocol import VCubeNode
from vcubeps.simnet import (
    TRACE_FIELDS,
    DelayModel,
    Simulator,
    TraceRecord,
    dump_trace,
    format_cb,
    parse_cb,
    read_trace,
)


class Trace:
    """Hand-written trace builder; every call appends rows at a fresh time."""

    def __init__(self, n=4, subscribers=range(4)):
        self.rows = []
        self.t = 0
        self.rows.append(self._row("config", None, detail=f"n={n} repairs=1"))
        for i in subscribers:
            self.rows.append(self._row("subscribe", i, src=i, c=0, detail="OK"))

    def _row(self, kind, node, peer=None, mk=None, src=None, c=None, cb_size=None, detail=None):
        self.t += 1
        return TraceRecord(0, float(self.t), kind, node, peer, mk, src, "t", c, cb_size, False, detail)

    def publish(self, node, c, cb=()):
        self.rows.append(self._row("deliver", node, mk="PUB", src=node, c=c, cb_size=len(cb)))
        self.rows.append(self._row("start", node, mk="PUB", src=node, c=c, cb_size=len(cb),
                                   detail=format_cb(cb)))
        self.rows.append(self._row("publish", node, src=node, c=c, detail="OK"))
        return self

    def deliver(self, node, src, c):
        self.rows.append(self._row("deliver", node, mk="PUB", src=src, c=c))
        return self


def patch(r, **kw):
    return TraceRecord(*(kw.get(f, v) for f, v in zip(TRACE_FIELDS, r)))


def fig2(p3_order=((0, 1), (1, 1), (2, 1), (1, 2))):
    # p0 publishes; p2 answers it; p1 publishes, catches up, then publishes again
    tr = Trace()
    tr.publish(0, 1)
    tr.deliver(2, 0, 1).publish(2, 1, [(0, 1)])
    tr.publish(1, 1)
    tr.deliver(1, 0, 1).deliver(1, 2, 1).publish(1, 2, [(2, 1), (1, 1)])
    tr.deliver(0, 2, 1).deliver(0, 1, 1).deliver(0, 1, 2)
    for src, c in p3_order:
        tr.deliver(3, src, c)
    return tr.rows


def test_fig2_replay_is_clean():
    rows = fig2()
    assert oracle.check_causal_safety(rows) == []
    assert oracle.check_integrity(rows) == []
    assert oracle.check_cb_exactness(rows) == []


def test_fig2_barrier_skips_indirect_dependency():
    hb = oracle.HappensBefore(fig2())
    assert hb.immediate_predecessors((1, "t", 2)) == {(2, "t", 1), (1, "t", 1)}
    assert hb.ancestors((1, "t", 2)) == {(0, "t", 1), (2, "t", 1), (1, "t", 1)}


def test_fig2_out_of_order_delivery_is_one_violation():
    rows = fig2([(0, 1), (2, 1), (1, 2), (1, 1)])
    v = oracle.check_causal_safety(rows)
    assert len(v) == 1
    assert v[0].node == 3 and v[0].msg == (1, "t", 2)


def test_late_joiner_skipping_a_dependency_is_not_a_violation():
    assert oracle.check_causal_safety(fig2([(1, 1), (1, 2)])) == []


def test_fig2_barrier_with_indirect_entry_is_inexact():
    rows = fig2()
    k = next(i for i, r in enumerate(rows) if r.kind == "start" and r.node == 1 and r.msg_counter == 2)
    cb = [(0, 1), (2, 1), (1, 1)]
    rows[k] = patch(rows[k], cb_size=3, detail=format_cb(cb))
    v = oracle.check_cb_exactness(rows)
    assert len(v) == 1 and "immediate predecessor" in v[0].detail


def test_isolated_publish_has_empty_barrier():
    rows = Trace().publish(2, 1).rows
    assert oracle.check_cb_exactness(rows) == []
    assert oracle.HappensBefore(rows).immediate_predecessors((2, "t", 1)) == set()


def test_chain_of_five():
    tr = Trace()
    for c in range(1, 6):
        tr.publish(0, c, [(0, c - 1)] if c > 1 else [])
    assert oracle.check_cb_exactness(tr.rows) == []
    hb = oracle.HappensBefore(tr.rows)
    for c in range(2, 6):
        assert hb.immediate_predecessors((0, "t", c)) == {(0, "t", c - 1)}
    # dropping one link leaves an immediate predecessor out
    bad = Trace()
    for c in range(1, 6):
        bad.publish(0, c, [(0, c - 1)] if c not in (1, 3) else [])
    v = oracle.check_cb_exactness(bad.rows)
    assert {x.msg for x in v} == {(0, "t", 3)}
    assert any("missing" in x.detail for x in v)


def test_integrity_examples():
    rows = fig2()
    assert oracle.check_integrity(rows + [rows[-1]]) != []
    dup = oracle.check_integrity(rows + [rows[-1]])
    assert len(dup) == 1 and dup[0].detail == "delivered twice"
    ghost = Trace().deliver(2, 1, 9).rows
    assert [v.detail for v in oracle.check_integrity(ghost)] == ["delivered but never published"]
    outsider = Trace(subscribers=[0]).publish(0, 1).deliver(3, 0, 1).rows
    assert [v.detail for v in oracle.check_integrity(outsider)] == ["delivered while not subscribed"]


# -- real runs, mutated -------------------------------------------------------------


@pytest.fixture(scope="module")
def clean():
    res = ex.run_scenario(ex.Scenario("several_publishers", 16, publisher_pct=50.0), 2,
                          trace=True, validate=True)
    assert res.report.ok
    return res.records


def _index(rows, pred):
    return next(i for i, r in enumerate(rows) if pred(r))


def test_mutation_duplicate_delivery(clean):
    k = _index(clean, lambda r: r.kind == "deliver" and r.node != r.msg_source)
    rows = clean[:k + 1] + [clean[k]] + clean[k + 1:]
    assert oracle.validate(rows).by_check()["integrity"] == 1


def test_mutation_reordered_receptions():
    sim = _sim()
    for i in range(8):
        _then(sim, i, "subscribe")
        sim.run()
    for _ in range(3):
        _then(sim, 5, "publish")
    sim.run()
    rows = sim.records
    assert oracle.check_fifo_reception(rows) == []
    recv = [i for i, r in enumerate(rows) if r.kind == "receive" and r.msg_kind == "PUB" and r.node == 0]
    assert len(recv) == 3
    rows[recv[0]], rows[recv[2]] = rows[recv[2]], rows[recv[0]]
    v = oracle.check_fifo_reception(rows)
    assert len(v) == 2 and {x.node for x in v} == {0}


def test_mutation_dropped_reception(clean):
    k = _index(clean, lambda r: r.kind == "receive" and r.msg_kind == "PUB")
    rows = clean[:k] + clean[k + 1:]
    v = oracle.check_coverage(rows, 16)
    assert any(x.node == clean[k].node and "never received" in x.detail for x in v)


def test_mutation_inflated_barrier(clean):
    k = _index(clean, lambda r: r.kind == "start" and r.msg_kind == "PUB" and r.cb_size)
    r = clean[k]
    # add the publisher's own later message: published, but not yet delivered by it
    later = next(x for x in clean[k + 1:] if x.kind == "start" and x.msg_kind == "PUB")
    cb = set(parse_cb(r.detail)) | {(later.msg_source, later.msg_counter)}
    rows = list(clean)
    rows[k] = patch(r, cb_size=len(cb), detail=format_cb(cb))
    assert oracle.check_cb_exactness(rows) != []


def test_mutation_lost_view_entry(clean):
    k = max(i for i, r in enumerate(clean) if r.kind == "view" and r.node != r.peer)
    r = clean[k]
    # replace the last view update with one naming the peer as departed
    rows = list(clean)
    rows[k] = patch(r, msg_kind="UNS")
    assert oracle.check_membership_convergence(rows) != []


def test_validation_is_idempotent(clean):
    a = oracle.validate(clean).as_dict()
    assert oracle.validate(clean).as_dict() == a
    reread = read_trace(io.StringIO(dump_trace(clean)))
    assert oracle.validate(reread).as_dict() == a


def test_unknown_check_rejected(clean):
    with pytest.raises(ValueError):
        oracle.validate(clean, checks=["telepathy"])


# -- expected receivers --------------------------------------------------------------


def _sim(n=8):
    sim = Simulator(n, DelayModel(), trace=True)
    sim.attach([VCubeNode(i, n.bit_length() - 1, sim) for i in range(n)])
    sim.note("config", None, None, f"n={n} repairs=1")
    return sim


def _then(sim, node, op, topic="t"):
    sim.schedule_action(sim.now + 1, sim.app_call, node, op, topic)


def test_expected_receivers_stable_membership():
    sim = _sim()
    for i in (0, 2, 3, 5, 7):
        _then(sim, i, "subscribe")
        sim.run()
    _then(sim, 2, "publish")
    sim.run()
    start = next(r for r in sim.records if r.kind == "start" and r.msg_kind == "PUB")
    mid = (2, "t", start.msg_counter)
    assert oracle.compute_expected_receivers(sim.records, "PUB", mid, 8) == ({0, 3, 5, 7}, set())
    # the SUB flood of the first subscriber reaches everyone else
    assert oracle.compute_expected_receivers(sim.records, "SUB", (0, "t", 0), 8)[0] == set(range(1, 8))
    assert oracle.validate(sim.records).ok


def test_midflight_subscriber_is_not_guaranteed():
    sim = _sim()
    for i in (0, 2, 3, 5):
        _then(sim, i, "subscribe")
        sim.run()
    t = sim.now + 1
    sim.schedule_action(t, sim.app_call, 2, "publish", "t")
    sim.schedule_action(t, sim.app_call, 6, "subscribe", "t")
    sim.run()
    start = next(r for r in sim.records if r.kind == "start" and r.msg_kind == "PUB")
    expected, _ = oracle.compute_expected_receivers(sim.records, "PUB", (2, "t", start.msg_counter), 8)
    assert 6 not in expected and {0, 3, 5} <= expected
    assert oracle.check_coverage(sim.records, 8) == []
    with pytest.raises(KeyError):
        oracle.compute_expected_receivers(sim.records, "PUB", (7, "t", 1), 8)
