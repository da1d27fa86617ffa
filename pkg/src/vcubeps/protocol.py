"""VCube-PS node automaton: causal topic broadcast over per-publisher trees.

A :class:`VCubeNode` is driven by three entry points: the application calls
(:meth:`~VCubeNode.subscribe`, :meth:`~VCubeNode.unsubscribe`,
:meth:`~VCubeNode.publish`) and :meth:`~VCubeNode.on_receive`.  Outbound
traffic and deliveries go to a ``net`` object exposing ``send(src, dst, msg)``
and ``deliver(node, msg)``; the optional hooks ``view_changed``,
``propagation_started`` and ``propagation_done`` are used for tracing.

Blocking tasks are rendered as run-to-completion handlers: a per-topic
``busy`` flag stands for "waiting for the root ACKs of the current broadcast".
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple, Optional

from .topology import children, cluster_index

DEFAULT_MAX_TOPICS = 4096


class ProtocolError(RuntimeError):
    """A broken protocol invariant (unknown ACK, duplicate or reordered message)."""


class Kind(enum.IntEnum):
    SUB = 0
    UNS = 1
    PUB = 2
    ACK = 3


class MsgId(NamedTuple):
    source: int
    topic: Any
    counter: int


class ViewEntry(NamedTuple):
    node: int
    op: Kind
    reg_counter: int


class Message:
    """SUB/UNS/PUB/ACK envelope.

    ``cb`` is the causal barrier (PUB only), ``data`` the membership piggyback
    (ACK only, a ``{node: ViewEntry}`` map).  Copies of one broadcast share a
    single instance; nothing mutates it once it is on the wire.
    """

    __slots__ = ("kind", "source", "topic", "counter", "payload", "cb", "data")

    def __init__(
        self,
        kind: Kind,
        source: int,
        topic: Any,
        counter: int,
        payload: Optional[bytes] = None,
        cb: frozenset = frozenset(),
        data: Optional[dict] = None,
    ) -> None:
        self.kind = kind
        self.source = source
        self.topic = topic
        self.counter = counter
        self.payload = payload
        self.cb = cb
        self.data = data

    @property
    def id(self) -> MsgId:
        return MsgId(self.source, self.topic, self.counter)

    def __repr__(self) -> str:
        return (
            f"Message({self.kind.name}, s={self.source}, t={self.topic!r}, "
            f"c={self.counter}, cb={sorted(self.cb)})"
        )


@dataclass
class AckLedgerEntry:
    parent: Optional[int]
    pending_count: int
    msg: MsgId
    gathered_membership: dict = field(default_factory=dict)
    kind: Kind = Kind.PUB


class TopicState:
    """Per-topic slice of a node's state, created on first use."""

    __slots__ = (
        "view",
        "members",
        "br_queue",
        "causal_barrier",
        "not_delvs",
        "msgs",
        "last_delvs",
        "first_rec",
        "busy",
        "task_active",
        "current",
        "shared_view",
        "waiting",
        "candidates",
    )

    def __init__(self) -> None:
        self.view: dict[int, ViewEntry] = {}
        # nodes whose view entry is SUB; what children() is computed over
        self.members: set[int] = set()
        self.br_queue: deque[Message] = deque()
        self.causal_barrier: set[tuple[int, int]] = set()
        self.not_delvs: dict[tuple[int, int], frozenset] = {}
        self.msgs: dict[tuple[int, int], Message] = {}
        self.last_delvs: dict[int, int] = {}
        self.first_rec: dict[int, int] = {}
        self.busy = False
        self.task_active = False
        self.current: Optional[Message] = None
        # view/members alias another node's until the first local change
        self.shared_view = False
        # blocked not_delvs keys indexed by the source they wait on
        self.waiting: dict[int, set[tuple[int, int]]] = {}
        self.candidates: set[tuple[int, int]] = set()


def update_view(set1: Iterable[ViewEntry], set2: Iterable[ViewEntry]) -> set[ViewEntry]:
    """Merge two membership sets keeping, per node, the entry with the larger counter."""
    best: dict[int, ViewEntry] = {}
    for entry in (*set1, *set2):
        cur = best.get(entry.node)
        if cur is None or entry.reg_counter > cur.reg_counter:
            best[entry.node] = entry
    return set(best.values())


def _merge_into(target: dict, entries: Iterable[ViewEntry]) -> list[ViewEntry]:
    """In-place max-counter merge of ``entries`` into ``target``; returns what changed."""
    changed = []
    for e in entries:
        cur = target.get(e.node)
        if cur is None or e.reg_counter > cur.reg_counter:
            target[e.node] = e
            changed.append(e)
    return changed


class VCubeNode:
    def __init__(
        self,
        node_id: int,
        dimension: int,
        net: Any,
        max_topics: int = DEFAULT_MAX_TOPICS,
        repairs: bool = True,
    ) -> None:
        if not 0 <= node_id < (1 << dimension):
            raise ValueError(f"node {node_id} outside a {dimension}-cube")
        self.id = node_id
        self.d = dimension
        self.net = net
        self.max_topics = max_topics
        # False runs the bare algorithm.  Repaired nodes flood UNS like SUB
        # and track membership while unsubscribed (so views converge under
        # churn), never skip a barrier entry held in not_delvs through
        # first_rec, and always answer a SUB with their own entry.
        self.repairs = repairs
        self.counter = 0
        self.topics: dict[Any, TopicState] = {}
        self.acks: dict[MsgId, AckLedgerEntry] = {}
        # last non-ACK counter received per (source, topic); FIFO/duplicate guard
        self._last_rx: dict[tuple[int, Any], int] = {}
        self._view_hook = getattr(net, "view_changed", None)
        self._start_hook = getattr(net, "propagation_started", None)
        self._done_hook = getattr(net, "propagation_done", None)

    # -- helpers -----------------------------------------------------------

    def topic(self, t: Any) -> TopicState:
        ts = self.topics.get(t)
        if ts is None:
            if len(self.topics) >= self.max_topics:
                raise ProtocolError(f"node {self.id}: more than {self.max_topics} topics")
            ts = self.topics[t] = TopicState()
        return ts

    def is_subscribed(self, t: Any) -> bool:
        ts = self.topics.get(t)
        if ts is None:
            return False
        e = ts.view.get(self.id)
        return e is not None and e.op == Kind.SUB

    is_member = is_subscribed

    def is_forwarder(self, t: Any) -> bool:
        """A PUB copy reaching a non-subscriber is only being relayed."""
        return not self.is_subscribed(t)

    def _set_entry(self, t: Any, ts: TopicState, entry: ViewEntry) -> None:
        if ts.shared_view:
            _unshare(ts)
        ts.view[entry.node] = entry
        if entry.op == Kind.SUB:
            ts.members.add(entry.node)
        else:
            ts.members.discard(entry.node)
        if self._view_hook is not None:
            self._view_hook(self.id, t, entry)

    def _flooded(self, kind: Kind) -> bool:
        """SUB (and, repaired, UNS) broadcasts go to every node, not just members."""
        return kind == Kind.SUB or (kind == Kind.UNS and self.repairs)

    def _merge_view(self, t: Any, ts: TopicState, entries: Iterable[ViewEntry]) -> None:
        for e in entries:
            cur = ts.view.get(e.node)
            if cur is None or e.reg_counter > cur.reg_counter:
                self._set_entry(t, ts, e)

    # -- application interface --------------------------------------------

    def subscribe(self, t: Any) -> bool:
        if self.is_subscribed(t):
            return False
        ts = self.topic(t)
        if not self.repairs:
            ts.view = {}
            ts.members = set()
            ts.shared_view = False
            if self._view_hook is not None:
                self._view_hook(self.id, t, None)
        self._set_entry(t, ts, ViewEntry(self.id, Kind.SUB, self.counter))
        self.co_broadcast(Kind.SUB, t)
        return True

    def unsubscribe(self, t: Any) -> bool:
        if not self.is_subscribed(t):
            return False
        ts = self.topics[t]
        if ts.shared_view:
            _unshare(ts)
        del ts.view[self.id]
        ts.members.discard(self.id)
        if self._view_hook is not None:
            self._view_hook(self.id, t, ViewEntry(self.id, Kind.UNS, self.counter))
        if self.repairs:
            # drop the epoch now; a resubscription must not inherit held messages
            _purge_pending(ts)
        self.co_broadcast(Kind.UNS, t)
        return True

    def publish(self, t: Any, payload: bytes = b"") -> bool:
        if not self.is_subscribed(t):
            return False
        self.co_broadcast(Kind.PUB, t, payload)
        return True

    # -- broadcast machinery ----------------------------------------------

    def co_broadcast(self, kind: Kind, t: Any, payload: Optional[bytes] = None) -> Message:
        if kind == Kind.ACK:
            raise ValueError("ACKs are not broadcast")
        m = Message(kind, self.id, t, self.counter, payload)
        self.counter += 1
        ts = self.topic(t)
        if kind == Kind.SUB:
            ts.task_active = True
        ts.br_queue.append(m)
        self.pump_propagation(t)
        return m

    def pump_propagation(self, t: Any) -> None:
        """Start queued broadcasts for ``t`` until one has to wait for ACKs."""
        ts = self.topics[t]
        while ts.task_active and not ts.busy and ts.br_queue:
            m = ts.br_queue.popleft()
            i = self.id
            if m.kind == Kind.PUB:
                if i not in ts.first_rec:
                    ts.first_rec[i] = m.counter
                self.net.deliver(i, m)
                ts.last_delvs[i] = m.counter
                m.cb = frozenset(ts.causal_barrier)
                ts.causal_barrier = {(i, m.counter)}
            membership = None if self._flooded(m.kind) else ts.members
            chd = children(i, membership, self.d, self.d)
            if self._start_hook is not None:
                self._start_hook(i, m)
            for k in chd:
                self.net.send(i, k, m)
            if chd:
                key = MsgId(i, t, m.counter)
                self.acks[key] = AckLedgerEntry(None, len(chd), key, {}, m.kind)
                ts.busy = True
                ts.current = m
            else:
                self._finish(t, ts, m)

    def _finish(self, t: Any, ts: TopicState, m: Message) -> None:
        """Post-ACK tail of the propagation loop for broadcast ``m``."""
        ts.busy = False
        ts.current = None
        if self._done_hook is not None:
            self._done_hook(self.id, m)
        if m.kind == Kind.UNS:
            if not self.repairs:
                _purge_pending(ts)
            if not ts.br_queue:
                ts.task_active = False

    # -- reception ----------------------------------------------------------

    def on_receive(self, m: Message, frm: int) -> None:
        i = self.id
        t = m.topic
        if m.kind != Kind.ACK:
            key = (m.source, t)
            last = self._last_rx.get(key)
            if last is not None and m.counter <= last:
                raise ProtocolError(
                    f"node {i}: {m!r} received after counter {last} from the same source"
                )
            self._last_rx[key] = m.counter
            h = cluster_index(i, frm) - 1
            if self._flooded(m.kind):
                chd = children(i, None, h, self.d)
            else:
                ts0 = self.topics.get(t)
                chd = children(i, ts0.members, h, self.d) if ts0 is not None else []
            if not chd:
                self.send_acks(
                    frm, Message(Kind.ACK, m.source, t, m.counter, data={}), m.kind
                )
            else:
                mid = MsgId(m.source, t, m.counter)
                self.acks[mid] = AckLedgerEntry(frm, len(chd), mid, {}, m.kind)
                for k in chd:
                    self.net.send(i, k, m)
            data = None
        else:
            mid = MsgId(m.source, t, m.counter)
            entry = self.acks.get(mid)
            if entry is None:
                raise ProtocolError(f"node {i}: ACK for unknown broadcast {mid}")
            _merge_into(entry.gathered_membership, m.data.values())
            data = entry.gathered_membership
            entry.pending_count -= 1
            if entry.pending_count == 0:
                del self.acks[mid]
                if entry.parent is not None:
                    self.send_acks(
                        entry.parent,
                        Message(Kind.ACK, m.source, t, m.counter, data=data),
                        entry.kind,
                    )

        if self.repairs and m.kind in (Kind.SUB, Kind.UNS):
            ts = self.topic(t)
        else:
            ts = self.topics.get(t)
        if ts is not None:
            own = ts.view.get(i)
            subscribed = own is not None and own.op == Kind.SUB
            # repaired nodes keep their view current while not subscribed
            if subscribed or self.repairs:
                kind = m.kind
                if kind == Kind.PUB:
                    if subscribed:
                        self._accept(t, ts, m)
                elif kind == Kind.ACK:
                    self._merge_view(t, ts, data.values())
                else:
                    self._merge_view(t, ts, (ViewEntry(m.source, kind, m.counter),))
                    if kind == Kind.UNS:
                        ts.first_rec.pop(m.source, None)

        if m.kind == Kind.ACK and entry.pending_count == 0 and entry.parent is None:
            # the root's wait is over; next queued broadcast may start
            ts = self.topics[t]
            self._finish(t, ts, ts.current)
            self.pump_propagation(t)

    def _accept(self, t: Any, ts: TopicState, m: Message) -> None:
        """Hold a received PUB in not_delvs and deliver whatever it unblocks."""
        s, c = m.source, m.counter
        if s not in ts.first_rec:
            ts.first_rec[s] = c
            woken = ts.waiting.pop(s, None)
            if woken:
                ts.candidates.update(woken)
        ts.not_delvs[(s, c)] = m.cb
        ts.msgs[(s, c)] = m
        ts.candidates.add((s, c))
        self.check_delivery(t)

    def send_acks(self, parent: int, ack: Message, acked: Kind = Kind.SUB) -> None:
        """Forward ``ack`` to ``parent``, adding our own entry when answering a joiner.

        Only ACKs of SUB floods carry membership; ``acked`` is the kind of the
        broadcast being acknowledged.
        """
        t = ack.topic
        ts = self.topics.get(t)
        if acked == Kind.SUB and ts is not None:
            own = ts.view.get(self.id)
            known = not self.repairs and ack.source in ts.first_rec
            if own is not None and own.op == Kind.SUB and not known:
                _merge_into(ack.data, (own,))
        self.net.send(self.id, parent, ack)

    # -- causal delivery ------------------------------------------------------

    def check_cb(self, t: Any, cb: Iterable[tuple[int, int]]) -> bool:
        ts = self.topics.get(t)
        if ts is None:
            return not cb
        held = ts.not_delvs if self.repairs else None
        return _blocker(ts.last_delvs, ts.first_rec, cb, held) is None

    def check_delivery(self, t: Any) -> list[MsgId]:
        """Deliver every pending message of ``t`` whose barrier is satisfied.

        Equivalent to repeated ascending scans of ``not_delvs``; only messages
        whose blocking source made progress are re-examined.
        """
        ts = self.topics[t]
        delivered: list[MsgId] = []
        if not ts.candidates:
            return delivered
        last, first, waiting = ts.last_delvs, ts.first_rec, ts.waiting
        not_delvs = ts.not_delvs
        held = not_delvs if self.repairs else None
        cur = sorted(ts.candidates)
        ts.candidates.clear()
        nxt: list = []
        while cur:
            while cur:
                key = heapq.heappop(cur)
                cb = not_delvs.get(key)
                if cb is None:
                    continue
                blocked_on = _blocker(last, first, cb, held)
                if blocked_on is not None:
                    waiting.setdefault(blocked_on, set()).add(key)
                    continue
                m = ts.msgs.pop(key)
                del not_delvs[key]
                self.net.deliver(self.id, m)
                s, c = key
                last[s] = c
                ts.causal_barrier.difference_update(cb)
                ts.causal_barrier.add(key)
                delivered.append(MsgId(s, t, c))
                woken = waiting.pop(s, None)
                if woken:
                    for w in woken:
                        heapq.heappush(cur if w > key else nxt, w)
            cur, nxt = nxt, []
            heapq.heapify(cur)
        return delivered


def _purge_pending(ts: TopicState) -> None:
    ts.msgs.clear()
    ts.not_delvs.clear()
    ts.first_rec.clear()
    ts.waiting.clear()
    ts.candidates.clear()


def bootstrap_topic(nodes: list[VCubeNode], t: Any, members: Iterable[int]) -> None:
    """Install the state left behind by completed, non-overlapping SUB floods.

    Every node in ``members`` ends up subscribed with a converged view, as if
    each had called ``subscribe(t)`` and waited for quiescence before the next
    one did; no traffic is generated.  Repaired nodes outside ``members``
    get the same view, having seen every SUB flood.
    """
    members = sorted(set(members))
    entries = []
    for j in members:
        node = nodes[j]
        if node.is_subscribed(t) or node.topics.get(t, TopicState()).br_queue:
            raise ProtocolError(f"node {j} already active on {t!r}")
        entries.append(ViewEntry(j, Kind.SUB, node.counter))
        node.counter += 1
    for node in nodes:
        for e in entries:
            if e.node != node.id:
                node._last_rx[(e.node, t)] = e.reg_counter
    view = {e.node: e for e in entries}
    members = set(view)
    holders = [nodes[e.node] for e in entries]
    holders += [n for n in nodes if n.repairs and n.id not in members]
    for node in holders:
        ts = node.topic(t)
        ts.view = view
        ts.members = members
        ts.shared_view = True
        hook = node._view_hook
        if hook is not None:
            hook(node.id, t, None)
            for other in entries:
                hook(node.id, t, other)
        ts.task_active = node.id in members


def _unshare(ts: TopicState) -> None:
    ts.view = dict(ts.view)
    ts.members = set(ts.members)
    ts.shared_view = False


def _blocker(
    last: dict, first: dict, cb: Iterable[tuple[int, int]], held: Optional[dict] = None
) -> Optional[int]:
    """Source of the first unsatisfied barrier entry, or ``None``.

    With ``held`` given, an entry still waiting in that map never counts as
    satisfied through ``first``.
    """
    for s, c in cb:
        ld = last.get(s)
        if ld is not None and ld >= c:
            continue
        fr = first.get(s)
        if fr is not None and fr > c and (held is None or (s, c) not in held):
            continue
        return s
    return None
