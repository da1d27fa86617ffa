"""Single-root-per-topic (SRPT) comparison systems.

SRPT-S keeps one static tree per topic made of subscribers plus the
forwarders on their routes to the root; SRPT-B builds the tree over brokers and
lets every broker unicast to the subscribers attached to it.  Routes toward the
root correct differing id bits from the lowest to the highest one, the way a
hypercube DHT would route a join to a rendezvous node.

Both systems run over :class:`~vcubeps.simnet.Simulator` and deliver on
reception (no causal ordering).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

from .protocol import Kind


class Role(enum.Enum):
    SUBSCRIBER = "subscriber"
    FORWARDER = "forwarder"
    BROKER = "broker"


class Phase(enum.IntEnum):
    UP = 0  # publisher -> root
    DOWN = 1  # root -> tree
    BS = 2  # broker -> attached subscriber


def bitfix_parent(x: int, root: int) -> int:
    """Next hop from ``x`` toward ``root``: flip the lowest differing bit."""
    diff = x ^ root
    if not diff:
        raise ValueError("the root has no parent")
    return x ^ (diff & -diff)


def bitfix_path(x: int, root: int) -> list[int]:
    path = [x]
    while x != root:
        x = bitfix_parent(x, root)
        path.append(x)
    return path


@dataclass
class SrptTree:
    """One topic's tree.  Node ids are overlay ids; ``index_of`` maps them to
    positions in the routing hypercube (identity for SRPT-S)."""

    topic: Any
    root: int
    parent_of: dict[int, int] = field(default_factory=dict)
    member_role: dict[int, Role] = field(default_factory=dict)
    children_of: dict[int, set[int]] = field(default_factory=dict)
    index_of: Optional[dict[int, int]] = None
    node_at: Optional[Sequence[int]] = None
    member_kind: Role = Role.SUBSCRIBER

    def _idx(self, node: int) -> int:
        return node if self.index_of is None else self.index_of[node]

    def _node(self, idx: int) -> int:
        return idx if self.node_at is None else self.node_at[idx]

    def route_parent(self, node: int) -> int:
        return self._node(bitfix_parent(self._idx(node), self._idx(self.root)))

    def in_tree(self, node: int) -> bool:
        return node in self.member_role

    def children(self, node: int) -> list[int]:
        kids = self.children_of.get(node)
        if not kids:
            return []
        base = self._idx(node)
        return sorted(kids, key=lambda k: self._idx(k) ^ base)

    def is_member(self, node: int) -> bool:
        return self.member_role.get(node, Role.FORWARDER) is not Role.FORWARDER

    def members(self) -> set[int]:
        return {n for n, r in self.member_role.items() if r is not Role.FORWARDER}

    def forwarders(self) -> set[int]:
        return {n for n, r in self.member_role.items() if r is Role.FORWARDER}

    def depth(self, node: int) -> int:
        k = 0
        while node != self.root:
            node = self.parent_of[node]
            k += 1
        return k

    def join(self, node: int) -> list[tuple[int, int]]:
        """Graft ``node``'s route; returns the added ``(child, parent)`` edges."""
        if node in self.member_role:
            self.member_role[node] = self.member_kind
            return []
        self.member_role[node] = self.member_kind
        added = []
        x = node
        while x != self.root:
            p = self.route_parent(x)
            self.parent_of[x] = p
            self.children_of.setdefault(p, set()).add(x)
            added.append((x, p))
            if p in self.member_role:
                break
            self.member_role[p] = Role.FORWARDER
            x = p
        return added

    def leave(self, node: int) -> list[tuple[int, int]]:
        """Drop ``node``'s membership; returns the removed ``(child, parent)`` edges."""
        if node == self.root:
            raise ValueError("the root does not leave its own tree")
        if not self.is_member(node):
            raise ValueError(f"node {node} is not a member of {self.topic!r}")
        removed = []
        if self.children_of.get(node):
            self.member_role[node] = Role.FORWARDER
            return removed
        x = node
        while x != self.root and not self.children_of.get(x):
            if x != node and self.is_member(x):
                break
            p = self.parent_of.pop(x)
            del self.member_role[x]
            self.children_of.pop(x, None)
            self.children_of[p].discard(x)
            removed.append((x, p))
            x = p
        return removed

    def check(self) -> None:
        """Structural invariants: tree rooted at ``root``, forwarders on member routes."""
        for n in self.member_role:
            seen = set()
            x = n
            while x != self.root:
                if x in seen:
                    raise AssertionError(f"cycle through {x}")
                seen.add(x)
                x = self.parent_of[x]
        for n in self.forwarders():
            if n == self.root:
                continue
            if not self.children_of.get(n):
                raise AssertionError(f"forwarder {n} has no dependants")
        for p, kids in self.children_of.items():
            for k in kids:
                if self.parent_of.get(k) != p:
                    raise AssertionError(f"edge {k}->{p} inconsistent")


def build_srpt_tree(
    topic: Any,
    root: int,
    members: Iterable[int],
    d: int,
    *,
    node_ids: Optional[Sequence[int]] = None,
    member_kind: Role = Role.SUBSCRIBER,
) -> SrptTree:
    """Union of the bit-correction routes of ``members`` toward ``root``.

    With ``node_ids`` the routing hypercube is over positions ``0..len-1`` and
    ``node_ids[k]`` is the overlay node at position ``k`` (broker trees).
    """
    n = 1 << d if node_ids is None else len(node_ids)
    if node_ids is not None and (n & (n - 1) or n < 1):
        raise ValueError("a broker tree needs a power-of-two broker count")
    tree = SrptTree(topic, root, member_kind=member_kind)
    if node_ids is not None:
        tree.node_at = list(node_ids)
        tree.index_of = {node: k for k, node in enumerate(node_ids)}
    members = sorted(set(members))
    for mnode in members:
        if not (0 <= tree._idx(mnode) < n):
            raise ValueError(f"member {mnode} outside the routing space")
    tree.member_role[root] = member_kind if root in members else Role.FORWARDER
    for mnode in members:
        tree.join(mnode)
    return tree


@dataclass
class BrokerAssignment:
    brokers: list[int]
    attach: dict[int, int]

    @classmethod
    def even(cls, brokers: Sequence[int], subscribers: Iterable[int]) -> "BrokerAssignment":
        brokers = list(brokers)
        attach = {}
        for k, s in enumerate(sorted(subscribers)):
            attach[s] = brokers[k % len(brokers)]
        return cls(brokers, attach)

    def attached(self, broker: int) -> list[int]:
        return sorted(s for s, b in self.attach.items() if b == broker)

    def check(self) -> None:
        counts = {b: 0 for b in self.brokers}
        for b in self.attach.values():
            counts[b] += 1
        if max(counts.values()) - min(counts.values()) > 1:
            raise AssertionError("subscribers are not evenly spread over brokers")


class SrptMessage:
    __slots__ = ("kind", "phase", "source", "topic", "counter", "payload", "cb", "stamp")

    def __init__(self, kind, phase, source, topic, counter, payload=None, stamp=None):
        self.kind = kind
        self.phase = phase
        self.source = source
        self.topic = topic
        self.counter = counter
        self.payload = payload
        self.cb = frozenset()
        self.stamp = stamp

    def __repr__(self) -> str:
        return f"SrptMessage({self.kind.name}/{self.phase.name}, s={self.source}, c={self.counter})"


class SrptSystem:
    """Shared tree state plus one :class:`SrptNode` per overlay node.

    ``brokers`` switches to SRPT-B: trees are built over the broker set and the
    ``assignment`` maps every subscriber to its broker.
    """

    def __init__(self, sim: Any, d: int, *, assignment: Optional[BrokerAssignment] = None):
        self.sim = sim
        self.d = d
        self.trees: dict[Any, SrptTree] = {}
        self.assignment = assignment
        self._attached: dict[int, list[int]] = {}
        if assignment is not None:
            for s, b in sorted(assignment.attach.items()):
                self._attached.setdefault(b, []).append(s)
        self.nodes = [SrptNode(i, self) for i in range(1 << d)]
        self.restructure_edges = 0

    @property
    def broker_mode(self) -> bool:
        return self.assignment is not None

    def create_topic(self, topic: Any, root: int, members: Iterable[int]) -> SrptTree:
        members = set(members)
        if self.broker_mode:
            brokers = self.assignment.brokers
            if root not in brokers:
                raise ValueError("the SRPT-B root must be a broker")
            bdim = len(brokers).bit_length() - 1
            tree = build_srpt_tree(topic, root, brokers, bdim, node_ids=brokers,
                                   member_kind=Role.BROKER)
            self.subscribers = {topic: members}
        else:
            tree = build_srpt_tree(topic, root, members, self.d)
        self.trees[topic] = tree
        return tree

    def is_member(self, node: int, topic: Any) -> bool:
        if self.broker_mode:
            return node in self.subscribers.get(topic, ())
        tree = self.trees.get(topic)
        return tree is not None and tree.is_member(node)

    def attached(self, broker: int) -> list[int]:
        return self._attached.get(broker, [])

    # -- churn -------------------------------------------------------------

    def join(self, node: int, topic: Any) -> list[tuple[int, int]]:
        edges = self.trees[topic].join(node)
        self._charge(edges, Kind.SUB, topic)
        return edges

    def leave(self, node: int, topic: Any) -> list[tuple[int, int]]:
        edges = self.trees[topic].leave(node)
        self._charge(edges, Kind.UNS, topic)
        return edges

    def _charge(self, edges, kind, topic) -> None:
        for child, parent in edges:
            self.restructure_edges += 1
            self.sim.send(child, parent, SrptMessage(kind, Phase.UP, child, topic, 0),
                          control=True)


class SrptNode:
    def __init__(self, node_id: int, system: SrptSystem):
        self.id = node_id
        self.system = system
        self.counter = 0

    def is_member(self, topic: Any) -> bool:
        return self.system.is_member(self.id, topic)

    def is_forwarder(self, topic: Any) -> bool:
        tree = self.system.trees.get(topic)
        return (
            tree is not None
            and tree.member_role.get(self.id) is Role.FORWARDER
            and not self.is_member(topic)
        )

    def subscribe(self, topic: Any) -> bool:
        if self.is_member(topic):
            return False
        self.counter += 1
        self.system.join(self.id, topic)
        return True

    def unsubscribe(self, topic: Any) -> bool:
        if not self.is_member(topic):
            return False
        self.counter += 1
        self.system.leave(self.id, topic)
        return True

    def publish(self, topic: Any, payload: bytes = b"") -> bool:
        """srpt_publish: one hop to the root, then down the topic tree.

        Under brokers a client only talks to its own broker, which relays the
        message to the root.
        """
        if not self.is_member(topic):
            return False
        sys_ = self.system
        m = SrptMessage(Kind.PUB, Phase.UP, self.id, topic, self.counter, payload)
        self.counter += 1
        sim = sys_.sim
        sim.deliver(self.id, m)
        if hasattr(sim, "propagation_started"):
            sim.propagation_started(self.id, m)
        tree = sys_.trees[topic]
        if self.id == tree.root:
            self._disseminate(m)
        elif sys_.broker_mode:
            sim.send(self.id, sys_.assignment.attach[self.id], m)
        else:
            sim.send(self.id, tree.root, m)
        return True

    def _disseminate(self, m: SrptMessage) -> None:
        sys_ = self.system
        sim = sys_.sim
        tree = sys_.trees[m.topic]
        down = m if m.phase == Phase.DOWN else SrptMessage(
            Kind.PUB, Phase.DOWN, m.source, m.topic, m.counter, m.payload)
        for k in tree.children(self.id):
            sim.send(self.id, k, down)
        if sys_.broker_mode:
            bs = SrptMessage(Kind.PUB, Phase.BS, m.source, m.topic, m.counter, m.payload,
                             stamp=sim.now)
            for s in sys_.attached(self.id):
                sim.send(self.id, s, bs)

    def on_receive(self, m: SrptMessage, frm: int) -> None:
        if m.kind != Kind.PUB:
            return
        if m.source != self.id and self.is_member(m.topic):
            self.system.sim.deliver(self.id, m)
        if m.phase == Phase.UP and self.id != self.system.trees[m.topic].root:
            self.system.sim.send(self.id, self.system.trees[m.topic].root, m)
        elif m.phase != Phase.BS:
            self._disseminate(m)
