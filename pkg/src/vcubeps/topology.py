"""Cluster arithmetic over the virtual d-dimensional hypercube.

Node ``i`` sees the other ``N - 1`` nodes grouped into ``d`` clusters; cluster
``s`` holds ``2**(s-1)`` nodes in a fixed order.  Everything here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Collection, Iterator, Optional

MAX_DIMENSION = 16


@dataclass(frozen=True)
class HypercubeConfig:
    dimension: int

    def __post_init__(self) -> None:
        if not 1 <= self.dimension <= MAX_DIMENSION:
            raise ValueError(
                f"dimension must be in [1, {MAX_DIMENSION}], got {self.dimension}"
            )

    @property
    def size(self) -> int:
        return 1 << self.dimension

    @classmethod
    def for_size(cls, n_nodes: int) -> "HypercubeConfig":
        if n_nodes < 2 or n_nodes & (n_nodes - 1):
            raise ValueError(f"node count must be a power of two >= 2, got {n_nodes}")
        return cls(n_nodes.bit_length() - 1)


def _check_node(i: int, d: int) -> None:
    if not 0 <= i < (1 << d):
        raise ValueError(f"node {i} outside [0, {1 << d})")


def _check_cluster(s: int, d: int) -> None:
    if not 1 <= s <= d:
        raise ValueError(f"cluster index {s} outside [1, {d}]")


@lru_cache(maxsize=4096)
def _cluster_recursive(i: int, s: int) -> tuple[int, ...]:
    head = i ^ (1 << (s - 1))
    out = [head]
    for k in range(1, s):
        out.extend(_cluster_recursive(head, k))
    return tuple(out)


def cluster_members(i: int, s: int, d: int) -> list[int]:
    """Ordered members of cluster ``s`` of node ``i`` (recursive definition).

    The first member is the hypercube neighbour ``i ^ 2**(s-1)``; it is followed
    by the concatenation of that neighbour's clusters ``1 .. s-1``.
    """
    _check_node(i, d)
    _check_cluster(s, d)
    return list(_cluster_recursive(i, s))


def iter_cluster(i: int, s: int) -> Iterator[int]:
    """Closed form of :func:`cluster_members` without range checks.

    The k-th member of cluster ``s`` of ``i`` is ``i ^ (2**(s-1) + k)``.
    """
    base = 1 << (s - 1)
    for k in range(base):
        yield i ^ (base + k)


def cluster_index(i: int, j: int) -> int:
    """Index of the cluster of ``i`` that contains ``j``."""
    if i == j:
        raise ValueError("cluster_index needs two distinct nodes")
    if i < 0 or j < 0:
        raise ValueError("node ids must be non-negative")
    return (i ^ j).bit_length()


def children(
    i: int, membership: Optional[Collection[int]], h: int, d: int
) -> list[int]:
    """Children of ``i`` in clusters ``1 .. h``.

    ``membership`` of ``None`` is the wildcard: the first node of every cluster
    qualifies.  Otherwise each cluster contributes its first node found in
    ``membership``, if any.  The result is ordered by cluster index.
    """
    if not 0 <= h <= d:
        raise ValueError(f"h={h} outside [0, {d}]")
    if membership is None:
        return [i ^ (1 << (s - 1)) for s in range(1, h + 1)]
    out = []
    for s in range(1, h + 1):
        base = 1 << (s - 1)
        for k in range(base):
            j = i ^ (base + k)
            if j in membership:
                out.append(j)
                break
    return out


def sub_vcube(i: int, k: int, d: int) -> set[int]:
    """Nodes of the ``2**(k-1)``-node sub-hypercube that contains ``i``."""
    _check_node(i, d)
    _check_cluster(k, d)
    shift = k - 1
    lo = (i >> shift) << shift
    return set(range(lo, lo + (1 << shift)))
