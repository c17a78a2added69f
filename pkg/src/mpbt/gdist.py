"""Edge-length triples around a node.

For a lineage alive at time ``t`` the observable triple is its residual
length until it speciates, followed by the lengths of its two daughter
edges.  As the tree depth grows the triple's law converges to

    G_inf(t0, t1, t2) = sum_ij u_i P_{i-, j+}(t0) F_j(t1) F_j(t2),

a mixture over the speciation type ``j`` of products of univariate laws.
This module extracts triples from trees and evaluates and samples ``G_inf``.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .edge_process import sample_edge, sample_speciation
from .linalg import EigenPair, exp_action_left, exp_action_right, leading_left_eigenpair
from .params import ModelParams
from .tree_sim import ColoredTree, edges_at, simulate_tree, simulate_type_counts


class ExtractionMode(str, enum.Enum):
    ONE_PER_TREE = "one-per-tree"
    ALL_ELIGIBLE = "all-eligible"


@dataclass(frozen=True)
class EdgeTriple:
    """Residual parent length ``l0`` and daughter lengths ``l1``, ``l2``.

    ``hidden`` is ``(type at the extraction time, speciation type)`` when the
    source was colored; it never leaves the process through the CSV writer.
    ``correlated`` marks triples that share a tree with other triples.
    """

    l0: float
    l1: float
    l2: float
    hidden: tuple[int, int] | None = None
    correlated: bool = False

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.l0, self.l1, self.l2)


def triples_array(triples) -> np.ndarray:
    """``(n, 3)`` float array from EdgeTriples or anything array-like."""
    if isinstance(triples, np.ndarray):
        arr = np.asarray(triples, dtype=float)
    else:
        triples = list(triples)
        if triples and isinstance(triples[0], EdgeTriple):
            arr = np.array([tr.as_tuple() for tr in triples], dtype=float)
        else:
            arr = np.asarray(triples, dtype=float)
    return arr.reshape(-1, 3)


def extract_triples(
    tree: ColoredTree,
    t: float | None = None,
    mode: ExtractionMode | str = ExtractionMode.ONE_PER_TREE,
    rng: np.random.Generator | None = None,
) -> list[EdgeTriple]:
    """Triples around the nodes ending the edges alive at time ``t``.

    An edge alive at ``t`` is eligible when it speciates before the depth
    ``T`` and both daughters do too, i.e. ``l1, l2 < T - t - l0``.  In
    one-per-tree mode a single alive edge is drawn uniformly and dropped if
    ineligible; in all-eligible mode every eligible edge contributes, and the
    resulting triples are dependent.
    """
    mode = ExtractionMode(mode)
    rng = np.random.default_rng() if rng is None else rng
    T = tree.depth
    t = T / 2 if t is None else t
    if not 0 < t < T:
        raise ValueError(f"extraction time must lie in (0, {T}), got {t}")
    alive = edges_at(tree, t)
    assert alive, "a pure-birth tree always has a lineage before its depth"
    if mode is ExtractionMode.ONE_PER_TREE:
        alive = [alive[int(rng.integers(len(alive)))]]
    out = []
    for v in alive:
        triple = _triple_at(tree, v, t, rng)
        if triple is not None:
            out.append(triple)
    if mode is ExtractionMode.ALL_ELIGIBLE and len(out) > 1:
        out = [EdgeTriple(*tr.as_tuple(), hidden=tr.hidden, correlated=True) for tr in out]
    return out


def _triple_at(tree: ColoredTree, v: int, t: float, rng) -> EdgeTriple | None:
    T = tree.depth
    kids = tree.children[v]
    if not kids:
        return None
    l0 = tree.time[v] - t
    lens = [tree.branch_length(c) for c in kids]
    if not all(len(tree.children[c]) > 0 and x < T - t - l0 for c, x in zip(kids, lens)):
        return None
    if rng.random() < 0.5:
        lens.reverse()
    edge = tree.edges[v]
    hidden = (edge.type_at(t - tree.time[tree.parent[v]]), edge.end_type)
    return EdgeTriple(l0, lens[0], lens[1], hidden=hidden)


def sample_tree_triples(
    params: ModelParams,
    T: float,
    n_trees: int,
    rng: np.random.Generator,
    t: float | None = None,
    mode: ExtractionMode | str = ExtractionMode.ONE_PER_TREE,
    engine: str = "tree",
) -> list[EdgeTriple]:
    """Triples from ``n_trees`` independent depth-``T`` trees, grown lazily.

    Only the part of each tree a triple can depend on is generated: the tree
    up to time ``t`` (as a colored tree, or with ``engine="counts"`` as its
    type-count vector) and then the continuation of the chosen lineage(s)
    and their daughters up to ``T``.  By the Markov property and independence
    of lineages this has the same law as :func:`extract_triples` applied to
    full trees of depth ``T``.
    """
    mode = ExtractionMode(mode)
    t = T / 2 if t is None else t
    if not 0 < t < T:
        raise ValueError(f"extraction time must lie in (0, {T}), got {t}")
    out: list[EdgeTriple] = []
    if engine == "counts":
        counts = simulate_type_counts(params, t, n_trees, rng)
        for row in counts:
            if mode is ExtractionMode.ONE_PER_TREE:
                types = [int(rng.choice(params.m, p=row / row.sum()))]
            else:
                types = np.repeat(np.arange(params.m), row).tolist()
            out.extend(_continue(params, types, T, t, rng, mode))
    elif engine == "tree":
        for _ in range(n_trees):
            tree = simulate_tree(params, t, rng)
            types = [tree.edges[v].end_type for v in tree.leaves()]
            if mode is ExtractionMode.ONE_PER_TREE:
                types = [types[int(rng.integers(len(types)))]]
            out.extend(_continue(params, types, T, t, rng, mode))
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return out


def _continue(params, types, T, t, rng, mode):
    found = []
    for i in types:
        parent = sample_edge(params, i, T - t, rng)
        if not parent.speciated:
            continue
        room = T - t - parent.length
        j = parent.end_type
        a = sample_edge(params, j, room, rng)
        b = sample_edge(params, j, room, rng)
        if a.speciated and b.speciated:
            found.append(EdgeTriple(parent.length, a.length, b.length, hidden=(i, j)))
    if mode is ExtractionMode.ALL_ELIGIBLE and len(found) > 1:
        found = [EdgeTriple(*tr.as_tuple(), hidden=tr.hidden, correlated=True) for tr in found]
    return found


class _Analytic:
    """Per-parameter quantities shared by the G_inf evaluations."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.U = params.derived.U
        self.lam = params.lam
        self.eig: EigenPair = leading_left_eigenpair(params.derived.A)
        self.u = self.eig.u
        # U^{-1} D, so that P_{-,+}(tau) = (exp(U tau) - I) U^{-1} D
        self.UinvD = np.linalg.solve(self.U, params.derived.D)
        self.weights = -self.u @ self.UinvD

    def parent_cdf(self, tau0):
        """Rows ``sum_i u_i P_{i-, j+}(tau0)`` over j."""
        return (exp_action_left(self.U, self.u, tau0) - self.u) @ self.UinvD

    def parent_density(self, tau0):
        """Rows ``sum_i u_i (exp(U tau0) D)_{ij}`` over j."""
        return exp_action_left(self.U, self.u, tau0) * self.lam

    def child_cdf(self, tau):
        return 1.0 - exp_action_right(self.U, np.ones(self.params.m), tau)

    def child_density(self, tau):
        return exp_action_right(self.U, self.lam, tau)


def _analytic(params: ModelParams) -> _Analytic:
    cached = params.__dict__.get("_gdist_analytic")
    if cached is None:
        cached = _Analytic(params)
        object.__setattr__(params, "_gdist_analytic", cached)
    return cached


def _taus(tau0, tau1, tau2):
    t0, t1, t2 = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (tau0, tau1, tau2)))
    if np.any(t0 < 0) or np.any(t1 < 0) or np.any(t2 < 0):
        raise ValueError("edge lengths must be non-negative")
    return t0.shape, t0.ravel(), t1.ravel(), t2.ravel()


def g_infinity_cdf(params: ModelParams, tau0, tau1, tau2):
    """Limit joint cdf of (residual, daughter, daughter) lengths; broadcasts."""
    an = _analytic(params)
    shape, t0, t1, t2 = _taus(tau0, tau1, tau2)
    val = np.sum(an.parent_cdf(t0) * an.child_cdf(t1) * an.child_cdf(t2), axis=1)
    val = np.clip(val, 0.0, 1.0).reshape(shape)
    return float(val) if val.ndim == 0 else val


def g_infinity_density(params: ModelParams, tau0, tau1, tau2):
    """Joint density ``sum_ij u_i (exp(U t0) D)_ij f_j(t1) f_j(t2)``."""
    an = _analytic(params)
    shape, t0, t1, t2 = _taus(tau0, tau1, tau2)
    kids = an.child_density(np.concatenate([t1, t2]))
    val = np.sum(an.parent_density(t0) * kids[: t1.size] * kids[t1.size :], axis=1)
    val = np.maximum(val, 0.0).reshape(shape)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """``G_inf = sum_j weights[j] * mu1_j(t0) * F_j(t1) * F_j(t2)``."""

    params: ModelParams
    weights: np.ndarray

    def first_cdf(self, tau):
        """cdf of the residual-length component for each j, shape (n, m)."""
        an = _analytic(self.params)
        return an.parent_cdf(np.atleast_1d(tau)) / self.weights

    def first_density(self, tau):
        an = _analytic(self.params)
        return an.parent_density(np.atleast_1d(tau)) / self.weights

    def child_cdf(self, tau):
        return _analytic(self.params).child_cdf(np.atleast_1d(tau))

    def child_density(self, tau):
        return _analytic(self.params).child_density(np.atleast_1d(tau))

    def cdf(self, tau0, tau1, tau2):
        _, t0, t1, t2 = _taus(tau0, tau1, tau2)
        return np.sum(self.weights * self.first_cdf(t0) * self.child_cdf(t1) * self.child_cdf(t2), axis=1)


def mixture_components(params: ModelParams) -> MixtureSpec:
    w = _analytic(params).weights.copy()
    w.setflags(write=False)
    return MixtureSpec(params=params, weights=w)


def sample_triple_analytic(params: ModelParams, rng: np.random.Generator) -> EdgeTriple:
    """One exact draw from ``G_inf``: start type from the leading left
    eigenvector, an unbounded parent edge, then two daughters from its end type."""
    an = _analytic(params)
    i = int(rng.choice(params.m, p=an.u))
    parent = sample_edge(params, i, rng=rng)
    j = parent.end_type
    a = sample_edge(params, j, rng=rng)
    b = sample_edge(params, j, rng=rng)
    return EdgeTriple(parent.length, a.length, b.length, hidden=(i, j))


def sample_triples_analytic(params: ModelParams, n: int, rng: np.random.Generator):
    """Vectorised version of :func:`sample_triple_analytic`.

    Returns ``(lengths, hidden)`` with shapes ``(n, 3)`` and ``(n, 2)``.
    """
    an = _analytic(params)
    start = rng.choice(params.m, size=n, p=an.u)
    l0, j = sample_speciation(params, start, rng)
    l1, _ = sample_speciation(params, j, rng)
    l2, _ = sample_speciation(params, j, rng)
    return np.column_stack([l0, l1, l2]), np.column_stack([start, j])


def function_gram(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gram matrix ``sum_k w_k v_a(x_k) v_b(x_k)`` of functions sampled on a grid."""
    return (values * weights[:, None]).T @ values


def independence_grams(params: ModelParams, upper: float | None = None, n_grid: int = 400):
    """Gram matrices behind the linear-independence premise of the mixture
    decomposition: the daughter cdfs ``F_j`` (all m together) and each pair
    of unnormalised residual cdfs ``sum_i u_i P_{i-, j+}``.

    Returns ``(gram_F, {(a, b): gram_pair})`` on a Gauss-Legendre grid over
    ``[0, upper]``.
    """
    an = _analytic(params)
    if upper is None:
        upper = 20.0 / float(np.min(params.lam))
    x, w = np.polynomial.legendre.leggauss(n_grid)
    x = 0.5 * upper * (x + 1.0)
    w = 0.5 * upper * w
    gram_F = function_gram(an.child_cdf(x), w)
    nu = an.parent_cdf(x)
    m = params.m
    pairs = {(a, b): function_gram(nu[:, [a, b]], w) for a in range(m) for b in range(a + 1, m)}
    return gram_F, pairs


def write_triples_csv(path, triples, metadata: dict | None = None) -> None:
    """``l0,l1,l2`` CSV with ``%.12g`` values; hidden types are never written.

    ``metadata`` goes to a ``<path>.json`` sidecar.
    """
    arr = triples_array(triples)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l0", "l1", "l2"])
        for row in arr:
            w.writerow([format(x, ".12g") for x in row])
    if metadata is not None:
        Path(str(path) + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def read_triples_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["l0", "l1", "l2"]:
            raise ValueError(f"{path}: expected header l0,l1,l2, got {header}")
        rows = [[float(x) for x in row] for row in reader if row]
    return np.array(rows, dtype=float).reshape(-1, 3)
