"""Simulation of colored multitype pure-birth trees and their type counts."""

from __future__ import annotations

import heapq
import json
import math
import os
from dataclasses import dataclass

import numba
import numpy as np

from .edge_process import EdgeRealization, jump_table, sample_edge
from .params import ModelParams

DEFAULT_MAX_LINEAGES = 1_000_000
MAX_LINEAGES_ENV = "MPBT_MAX_LINEAGES"


class GrowthLimitError(RuntimeError):
    """Raised when a requested tree would be too large to hold in memory."""

    def __init__(self, estimate: float, cap: int):
        super().__init__(
            f"expected lineage count {estimate:.4g} exceeds cap {cap} "
            f"(set {MAX_LINEAGES_ENV} to raise it)"
        )
        self.estimate = estimate
        self.cap = cap


def max_lineages() -> int:
    raw = os.environ.get(MAX_LINEAGES_ENV)
    return int(float(raw)) if raw else DEFAULT_MAX_LINEAGES


def growth_rate(params: ModelParams) -> float:
    """Leading eigenvalue of ``A = S + D``, the exponential growth rate."""
    return float(np.max(np.linalg.eigvals(params.derived.A).real))


def expected_lineages(params: ModelParams, T: float, bifurcating_root: bool = False) -> float:
    est = math.exp(growth_rate(params) * T)
    return 2 * est if bifurcating_root else est


@dataclass(frozen=True, eq=False)
class _Topology:
    depth: float
    parent: tuple[int, ...]
    time: tuple[float, ...]
    children: tuple[tuple[int, ...], ...]

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    def leaves(self) -> list[int]:
        return [v for v, ch in enumerate(self.children) if not ch and v != 0]

    def branch_length(self, v: int) -> float:
        return self.time[v] - self.time[self.parent[v]]

    def to_newick(self) -> str:
        """Newick string with leaves labelled ``n<id>`` and ``%.12g`` lengths."""
        out: dict[int, str] = {}
        stack = [(0, False)]
        while stack:
            v, expanded = stack.pop()
            ch = self.children[v]
            if ch and not expanded:
                stack.append((v, True))
                stack.extend((c, False) for c in reversed(ch))
                continue
            s = "(" + ",".join(out.pop(c) for c in ch) + ")" if ch else f"n{v}"
            if v != 0:
                s += ":" + format(self.branch_length(v), ".12g")
            out[v] = s
        return out[0] + ";"


@dataclass(frozen=True, eq=False)
class MetricTree(_Topology):
    """Uncolored tree: topology and node times only."""


@dataclass(frozen=True, eq=False)
class ColoredTree(_Topology):
    """Tree with the full hidden type history on every edge.

    Node 0 is the root at time 0.  Every other node ``v`` carries the edge
    ``edges[v]`` from ``parent[v]`` to ``v``; ``time[v]`` is the tree time at
    ``v`` so leaves sit at ``depth``.
    """

    edges: tuple[EdgeRealization | None, ...] = ()
    n_types: int = 0

    @property
    def root_type(self) -> int:
        return self.edges[self.children[0][0]].start_type

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "n_types": self.n_types,
            "nodes": [
                {
                    "id": v,
                    "parent": self.parent[v],
                    "time": self.time[v],
                    "children": list(self.children[v]),
                    "edge": None if self.edges[v] is None else self.edges[v].to_dict(),
                }
                for v in range(self.n_nodes)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ColoredTree":
        nodes = sorted(data["nodes"], key=lambda n: n["id"])
        return cls(
            depth=float(data["depth"]),
            parent=tuple(int(n["parent"]) for n in nodes),
            time=tuple(float(n["time"]) for n in nodes),
            children=tuple(tuple(int(c) for c in n["children"]) for n in nodes),
            edges=tuple(None if n["edge"] is None else EdgeRealization.from_dict(n["edge"]) for n in nodes),
            n_types=int(data["n_types"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ColoredTree":
        return cls.from_dict(json.loads(text))


def simulate_tree(
    params: ModelParams,
    T: float,
    rng: np.random.Generator,
    bifurcating_root: bool = False,
    cap: int | None = None,
) -> ColoredTree:
    """Grow a colored tree of depth ``T``.

    Pending lineages sit in a queue ordered by start time; each one is run
    with :func:`sample_edge` up to the horizon ``T - start`` and, if it
    speciates, enqueues two daughters in its end type.  This is equivalent to
    advancing all tips in lock step because the edge process is
    time-homogeneous and lineages are independent.
    """
    if not T > 0:
        raise ValueError(f"depth must be positive, got {T}")
    cap = max_lineages() if cap is None else cap
    est = expected_lineages(params, T, bifurcating_root)
    if est > cap:
        raise GrowthLimitError(est, cap)

    root_type = int(rng.choice(params.m, p=params.pi))
    parent = [-1]
    time = [0.0]
    children: list[list[int]] = [[]]
    edges: list[EdgeRealization | None] = [None]
    queue = [(0.0, 0, 0, root_type)]
    if bifurcating_root:
        queue.append((0.0, 1, 0, root_type))
    counter = len(queue)
    while queue:
        start, _, par, typ = heapq.heappop(queue)
        edge = sample_edge(params, typ, T - start, rng)
        v = len(parent)
        parent.append(par)
        children[par].append(v)
        children.append([])
        edges.append(edge)
        if edge.speciated:
            t_node = start + edge.length
            time.append(t_node)
            for _ in range(2):
                heapq.heappush(queue, (t_node, counter, v, edge.end_type))
                counter += 1
        else:
            time.append(T)
    return ColoredTree(
        depth=float(T),
        parent=tuple(parent),
        time=tuple(time),
        children=tuple(tuple(c) for c in children),
        edges=tuple(edges),
        n_types=params.m,
    )


def uncolor(tree: ColoredTree) -> MetricTree:
    return MetricTree(depth=tree.depth, parent=tree.parent, time=tree.time, children=tree.children)


@dataclass(frozen=True, eq=False)
class TypeCount:
    t: float
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def freqs(self) -> np.ndarray:
        if self.total == 0:
            raise ValueError("relative frequencies undefined with no lineages")
        return self.counts / self.total


def edges_at(tree: ColoredTree, t: float) -> list[int]:
    """Non-root nodes whose incoming edge exists at time ``t``.

    An edge exists on ``[parent time, node time)``, except that edges ending
    at the tree depth also cover ``t = depth``.
    """
    T = tree.depth
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    tp, tn = tree.time, tree.parent
    return [
        v
        for v in range(1, tree.n_nodes)
        if tp[tn[v]] <= t and (t < tp[v] or (t == T and tp[v] == T))
    ]


def type_counts(tree: ColoredTree, t: float) -> TypeCount:
    """Number of lineages of each type alive at tree time ``t``."""
    counts = np.zeros(tree.n_types, dtype=np.int64)
    for v in edges_at(tree, t):
        counts[tree.edges[v].type_at(t - tree.time[tree.parent[v]])] += 1
    return TypeCount(t=t, counts=counts)


@dataclass(frozen=True)
class JumpDistribution:
    total_rate: float
    speciate_prob: float
    switch_probs: np.ndarray


def jump_distribution(params: ModelParams, i: int) -> JumpDistribution:
    """Event rate of a type-i lineage and how an event resolves: speciation
    (replaced by two type-i lineages) or a switch to type j."""
    if not 0 <= i < params.m:
        raise ValueError(f"type {i} out of range")
    lam = params.lam[i]
    s = params.s_offdiag[i]
    total = lam + s.sum()
    return JumpDistribution(float(total), float(lam / total), s / total)


@numba.njit(inline="always")
def _rotl(x, k):
    return (x << numba.uint64(k)) | (x >> numba.uint64(64 - k))


@numba.njit(inline="always")
def _uniform(s):
    # xoshiro256+; the numba port of np.random is ~3x slower here
    result = s[0] + s[3]
    t = s[1] << numba.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return (result >> numba.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _count_process(start, rates, T, state):
    m = rates.shape[0]
    total = np.zeros(m)
    for i in range(m):
        for j in range(m + 1):
            total[i] += rates[i, j]
    n_rep = start.size
    out = np.zeros((n_rep, m), dtype=np.int64)
    n = np.zeros(m, dtype=np.int64)
    for r in range(n_rep):
        n[:] = 0
        n[start[r]] = 1
        t = 0.0
        while True:
            W = 0.0
            for i in range(m):
                W += n[i] * total[i]
            t -= math.log(1.0 - _uniform(state)) / W
            if t >= T:
                break
            x = _uniform(state) * W
            i = 0
            while i < m - 1 and x >= n[i] * total[i]:
                x -= n[i] * total[i]
                i += 1
            x /= n[i]
            j = 0
            while j < m and x >= rates[i, j]:
                x -= rates[i, j]
                j += 1
            if j == m:
                n[i] += 1
            else:
                n[i] -= 1
                n[j] += 1
        out[r] = n
    return out


def simulate_type_counts(
    params: ModelParams,
    T: float,
    n_replicates: int,
    rng: np.random.Generator,
    start_type: int | None = None,
) -> np.ndarray:
    """Exact draws of the type-count vector at time ``T`` without building trees.

    Runs the counting process directly: each type-i lineage has an event at
    rate ``lambda_i + sum_j s_ij`` that is a speciation (one extra type-i
    lineage) or a switch.  Rows of the result are independent replicates.
    Starting types come from ``pi`` unless ``start_type`` is given.
    """
    # rate table: columns 0..m-1 switch targets, column m speciation
    rates = np.hstack([params.s_offdiag, params.lam[:, None]])
    if start_type is None:
        start = rng.choice(params.m, size=n_replicates, p=params.pi)
    else:
        start = np.full(n_replicates, start_type)
    state = rng.integers(1, 2**63, size=4, dtype=np.uint64)
    return _count_process(start.astype(np.int64), rates, float(T), state)
