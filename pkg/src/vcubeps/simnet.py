"""Deterministic discrete-event engine with a packet-switched delay model.

Every copy of a message costs ``t_pc`` of processing, then waits in the
sender's single output queue (``t_q``), is transmitted in ``t_t`` and
propagates for ``t_pp``.  Events are ordered by ``(time, seq)``.
"""

from __future__ import annotations

import hashlib
import heapq
import io
import operator
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, TextIO

from .protocol import Kind, Message

TRACE_SCHEMA = "vcubeps-trace/1"
TRACE_FIELDS = (
    "run_id",
    "time",
    "kind",
    "node",
    "peer",
    "msg_kind",
    "msg_source",
    "msg_topic",
    "msg_counter",
    "cb_size",
    "is_forwarder_copy",
    "detail",
)

# event kinds
_ARRIVAL = 0
_ARRIVAL_QUEUED = 1
_ACTION = 2

DEFAULT_MAX_EVENTS = 500_000_000


class LivelockError(RuntimeError):
    pass


@dataclass(frozen=True)
class DelayModel:
    t_pc: float = 1
    t_t: float = 1
    t_pp: float = 100
    # "shared": ACK/SUB/UNS and tree-maintenance traffic queue behind data.
    # "bypass": that control traffic pays t_pc + t_t + t_pp but never queues.
    control: str = "shared"

    def __post_init__(self) -> None:
        if min(self.t_pc, self.t_t, self.t_pp) < 0:
            raise ValueError("delay components must be non-negative")
        if self.control not in ("shared", "bypass"):
            raise ValueError(f"unknown control queueing {self.control!r}")

    @property
    def hop(self) -> float:
        return self.t_pc + self.t_t + self.t_pp


def rng_stream(seed: int, label: str) -> random.Random:
    """Independent reproducible random source for ``(seed, label)``."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:16], "big"))


@dataclass
class QueueStats:
    """Per-node output-queue accounting."""

    enqueued: int = 0
    completed: int = 0
    # integral of backlog (waiting + in transmission) over time
    area: float = 0.0
    wait_total: float = 0.0
    first_enqueue: Optional[float] = None
    last_done: float = 0.0
    # PUB copies forwarded on behalf of another publisher
    relayed: int = 0
    relay_area: float = 0.0

    def relay_queue_size(self, t_t: float = 1) -> float:
        """Mean queue length (itself included) found by this node's relayed PUB copies."""
        if not self.relayed:
            return 0.0
        return self.relay_area / self.relayed / t_t


class TraceRecord(tuple):
    """One trace row; field order follows :data:`TRACE_FIELDS`."""

    __slots__ = ()

    def __new__(cls, *values):
        return tuple.__new__(cls, values)


for _k, _name in enumerate(TRACE_FIELDS):
    setattr(TraceRecord, _name, property(operator.itemgetter(_k)))
del _k, _name


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def write_trace(records: Iterable[tuple], out: TextIO) -> None:
    out.write(f"# {TRACE_SCHEMA}\n")
    out.write("\t".join(TRACE_FIELDS) + "\n")
    for r in records:
        out.write("\t".join(_fmt(v) for v in r) + "\n")


def dump_trace(records: Iterable[tuple]) -> str:
    buf = io.StringIO()
    write_trace(records, buf)
    return buf.getvalue()


_INT_FIELDS = {"run_id", "node", "peer", "msg_source", "msg_counter", "cb_size"}


def read_trace(stream: TextIO) -> list[TraceRecord]:
    header = stream.readline().strip()
    if header != f"# {TRACE_SCHEMA}":
        raise ValueError(f"unsupported trace header {header!r}")
    names = stream.readline().rstrip("\n").split("\t")
    if tuple(names) != TRACE_FIELDS:
        raise ValueError("trace column layout does not match schema")
    out = []
    for line in stream:
        if not line.strip():
            continue
        cols = line.rstrip("\n").split("\t")
        vals: list[Any] = []
        for name, c in zip(TRACE_FIELDS, cols):
            if c == "":
                vals.append(None)
            elif name in _INT_FIELDS:
                vals.append(int(c))
            elif name == "time":
                f = float(c)
                vals.append(int(f) if f.is_integer() else f)
            elif name == "is_forwarder_copy":
                vals.append(c == "1")
            elif name == "msg_topic":
                vals.append(int(c) if c.lstrip("-").isdigit() else c)
            else:
                vals.append(c)
        out.append(TraceRecord(*vals))
    return out


def format_cb(cb: Iterable[tuple[int, int]]) -> str:
    return ";".join(f"{s}:{c}" for s, c in sorted(cb))


def parse_cb(text: Optional[str]) -> frozenset:
    if not text:
        return frozenset()
    return frozenset(tuple(int(x) for x in part.split(":")) for part in text.split(";"))


class Simulator:
    """Event loop driving one protocol automaton per node.

    Automata are attached with :meth:`attach`; they call back into
    :meth:`send` and :meth:`deliver`.  ``observers`` receive
    ``on_send/on_receive/on_deliver`` callbacks for metrics; the full trace is
    kept only when ``trace=True``.
    """

    def __init__(
        self,
        n_nodes: int,
        delay: DelayModel = DelayModel(),
        *,
        run_id: int = 0,
        trace: bool = True,
        max_events: int = DEFAULT_MAX_EVENTS,
        observers: Iterable[Any] = (),
    ) -> None:
        self.n = n_nodes
        self.delay = delay
        self.run_id = run_id
        self.now: float = 0
        self.nodes: list[Any] = []
        self.max_events = max_events
        self.events_processed = 0
        self.records: Optional[list[TraceRecord]] = [] if trace else None
        self.observers = list(observers)
        self.queues = [QueueStats() for _ in range(n_nodes)]
        self._busy = [0.0] * n_nodes
        self._heap: list[tuple] = []
        self._seq = 0
        self._bypass = delay.control == "bypass"

    # -- wiring -----------------------------------------------------------

    def attach(self, nodes: list[Any]) -> None:
        if len(nodes) != self.n:
            raise ValueError("need exactly one automaton per node")
        self.nodes = nodes

    def _record(self, kind: str, node: int, peer, msg, cb_size=None, fwd=False, detail=None):
        if msg is None:
            self.records.append(
                TraceRecord(self.run_id, self.now, kind, node, peer, None, None, None, None,
                            cb_size, fwd, detail)
            )
        else:
            self.records.append(
                TraceRecord(self.run_id, self.now, kind, node, peer, msg.kind.name, msg.source,
                            msg.topic, msg.counter, cb_size, fwd, detail)
            )

    # -- network --------------------------------------------------------------

    def send(self, src: int, dst: int, msg: Any, control: Optional[bool] = None) -> float:
        """Queue one copy of ``msg`` at ``src``; returns its arrival time."""
        if src == dst:
            raise ValueError("a node does not send to itself")
        d = self.delay
        ready = self.now + d.t_pc
        if control is None:
            control = getattr(msg, "kind", None) != Kind.PUB
        if control and self._bypass:
            start = ready
            ev_kind = _ARRIVAL
        else:
            ev_kind = _ARRIVAL_QUEUED
            busy = self._busy[src]
            start = ready if ready >= busy else busy
            done = start + d.t_t
            self._busy[src] = done
            q = self.queues[src]
            q.enqueued += 1
            q.area += done - ready
            q.wait_total += start - ready
            if q.first_enqueue is None:
                q.first_enqueue = ready
            q.last_done = done
            if not control and msg.source != src:
                q.relayed += 1
                q.relay_area += done - ready
        arrival = start + d.t_t + d.t_pp
        self._seq += 1
        heapq.heappush(self._heap, (arrival, self._seq, ev_kind, dst, src, msg))
        if self.records is not None:
            cb = msg.cb if getattr(msg, "kind", None) == Kind.PUB else None
            self._record("send", src, dst, msg, None if cb is None else len(cb),
                         detail=f"q={start - ready:g}")
        for ob in self.observers:
            ob.on_send(self, src, dst, msg, start - ready)
        return arrival

    def deliver(self, node: int, msg: Any) -> None:
        if self.records is not None:
            self._record("deliver", node, None, msg, len(msg.cb))
        for ob in self.observers:
            ob.on_deliver(self, node, msg)

    # -- protocol trace hooks ------------------------------------------------

    def view_changed(self, node: int, topic: Any, entry) -> None:
        if self.records is not None:
            if entry is None:
                self.records.append(TraceRecord(self.run_id, self.now, "view_reset", node, None,
                                                None, None, topic, None, None, False, None))
            else:
                self.records.append(TraceRecord(self.run_id, self.now, "view", node, entry.node,
                                                entry.op.name, entry.node, topic,
                                                entry.reg_counter, None, False, None))

    def propagation_started(self, node: int, msg: Any) -> None:
        if self.records is not None:
            cb_size = len(msg.cb) if msg.kind == Kind.PUB else None
            detail = format_cb(msg.cb) if msg.kind == Kind.PUB else None
            self._record("start", node, None, msg, cb_size, detail=detail)
        for ob in self.observers:
            ob.on_start(self, node, msg)

    def propagation_done(self, node: int, msg: Any) -> None:
        if self.records is not None:
            self._record("done", node, None, msg)
        for ob in self.observers:
            hook = getattr(ob, "on_done", None)
            if hook is not None:
                hook(self, node, msg)

    def app_call(self, node: int, op: str, topic: Any, payload: bytes = b"") -> bool:
        """Invoke ``subscribe``/``unsubscribe``/``publish`` on a node and trace it."""
        automaton = self.nodes[node]
        if op == "publish":
            ok = automaton.publish(topic, payload)
        elif op == "subscribe":
            ok = automaton.subscribe(topic)
        elif op == "unsubscribe":
            ok = automaton.unsubscribe(topic)
        else:
            raise ValueError(f"unknown application call {op!r}")
        counter = getattr(automaton, "counter", None)
        self.record_app(node, op, topic, counter - 1 if ok and counter is not None else None, ok)
        return ok

    def record_app(self, node: int, op: str, topic: Any, counter: Optional[int], ok: bool) -> None:
        if self.records is not None:
            self.records.append(TraceRecord(
                self.run_id, self.now, op, node, None, None, node, topic,
                counter, None, False, "OK" if ok else "NOK"))
        for ob in self.observers:
            ob.on_app(self, node, op, topic, ok)

    def note(self, kind: str, node: int, topic: Any = None, detail: Optional[str] = None) -> None:
        """Record a scenario-level event (subscribe, publish, churn, ...)."""
        if self.records is not None:
            self.records.append(TraceRecord(self.run_id, self.now, kind, node, None, None, None,
                                            topic, None, None, False, detail))

    # -- scheduling -----------------------------------------------------------

    def schedule_action(self, at: float, fn: Callable, *args) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} < now {self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, _ACTION, fn, args, None))

    def run(self, until: Optional[float] = None) -> None:
        """Process events in (time, seq) order until the queue is empty."""
        heap = self._heap
        pop = heapq.heappop
        nodes = self.nodes
        records = self.records
        observers = self.observers
        limit = self.max_events
        count = self.events_processed
        while heap:
            if until is not None and heap[0][0] > until:
                break
            ev = pop(heap)
            self.now = ev[0]
            count += 1
            if count > limit:
                self.events_processed = count
                raise LivelockError(f"event limit {limit} exceeded at t={self.now}")
            if ev[2] != _ACTION:
                dst, src, msg = ev[3], ev[4], ev[5]
                if ev[2] == _ARRIVAL_QUEUED:
                    self.queues[src].completed += 1
                node = nodes[dst]
                if records is not None or observers:
                    fwd = False
                    if msg.kind == Kind.PUB:
                        fwd = node.is_forwarder(msg.topic)
                    if records is not None:
                        cb = len(msg.cb) if msg.kind == Kind.PUB else None
                        self._record("receive", dst, src, msg, cb, fwd)
                    for ob in observers:
                        ob.on_receive(self, dst, src, msg, fwd)
                node.on_receive(msg, src)
            else:
                ev[3](*ev[4])
        self.events_processed = count

    @property
    def quiescent(self) -> bool:
        return not self._heap
