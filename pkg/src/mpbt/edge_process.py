"""The single-edge process: a 2m-state Markov chain whose transient states
``i-`` are "growing in type i" and whose absorbing states ``j+`` are
"speciated while in type j".

Analytic quantities are exact functions of ``U = S - diag(lambda)``; sampling
runs the embedded jump chain with competing exponential clocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .linalg import matrix_exp, phi
from .params import ModelParams


def _check_tau(tau):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or not np.all(np.isfinite(tau)):
        raise ValueError(f"tau must be finite and non-negative, got {tau}")
    return tau


def transition_matrix(params: ModelParams, tau: float) -> np.ndarray:
    """``P(tau) = [[exp(U tau), f(U tau) D tau], [0, I]]``."""
    tau = float(_check_tau(tau))
    m = params.m
    U, D = params.derived.U, params.derived.D
    P = np.zeros((2 * m, 2 * m))
    P[:m, :m] = matrix_exp(U, tau)
    P[:m, m:] = phi(U * tau) @ D * tau
    P[m:, m:] = np.eye(m)
    return P


def speciation_cdf(params: ModelParams, tau) -> np.ndarray:
    """``F(tau) = 1 - exp(U tau) 1``: per start type, P(speciated by tau).

    Accepts a scalar (returns shape (m,)) or a 1-d array (returns (n, m)).
    """
    tau = _check_tau(tau)
    E = matrix_exp(params.derived.U, tau)
    return 1.0 - E.sum(axis=-1)


def speciation_density(params: ModelParams, tau) -> np.ndarray:
    """``exp(U tau) lambda``, the density of the speciation time per start type."""
    tau = _check_tau(tau)
    return matrix_exp(params.derived.U, tau) @ params.lam


def joint_parent_density(params: ModelParams, tau) -> np.ndarray:
    """``exp(U tau) D``: entry (i, j) is the density of speciating at time tau
    in type j having started in type i."""
    tau = _check_tau(tau)
    return matrix_exp(params.derived.U, tau) * params.lam


def absorption_probs(params: ModelParams) -> np.ndarray:
    """``-U^{-1} D``: entry (i, j) is P(edge started in i eventually speciates in j)."""
    U, D = params.derived.U, params.derived.D
    try:
        P = -np.linalg.solve(U, D)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"U is numerically singular: {exc}") from exc
    if not np.all(np.isfinite(P)):
        raise np.linalg.LinAlgError("U is numerically singular")
    return P


@dataclass(frozen=True)
class EdgeRealization:
    """One colored edge.

    ``segments`` lists (type, duration) pairs in order along the edge.  If
    ``speciated`` the edge ends in a speciation while in ``end_type``,
    otherwise it was cut at the horizon while in ``end_type``.
    """

    length: float
    end_type: int
    speciated: bool
    segments: tuple[tuple[int, float], ...]

    @property
    def start_type(self) -> int:
        return self.segments[0][0]

    def type_at(self, tau: float) -> int:
        """Type active at offset ``tau`` from the edge start (later segment
        wins on a boundary, the last segment covers the endpoint)."""
        acc = 0.0
        for typ, dur in self.segments:
            acc += dur
            if tau < acc:
                return typ
        return self.segments[-1][0]

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "end_type": self.end_type,
            "speciated": self.speciated,
            "segments": [[t, d] for t, d in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeRealization":
        return cls(
            length=float(d["length"]),
            end_type=int(d["end_type"]),
            speciated=bool(d["speciated"]),
            segments=tuple((int(t), float(x)) for t, x in d["segments"]),
        )


@lru_cache(maxsize=64)
def _jump_table_cached(key):
    lam, s_off, m = key
    lam = np.array(lam)
    s_off = np.array(s_off).reshape(m, m)
    total = lam + s_off.sum(axis=1)
    # columns 0..m-1: switch targets, column m: speciation
    probs = np.hstack([s_off, lam[:, None]]) / total[:, None]
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    return total, cum


def jump_table(params: ModelParams):
    """Total event rate per type and cumulative outcome probabilities.

    Outcome ``j < m`` is a switch to type j, outcome ``m`` a speciation.
    """
    key = (tuple(params.lam.tolist()), tuple(params.s_offdiag.ravel().tolist()), params.m)
    return _jump_table_cached(key)


def sample_edge(
    params: ModelParams,
    start_type: int,
    horizon: float = math.inf,
    rng: np.random.Generator | None = None,
) -> EdgeRealization:
    """Run one edge from ``start_type`` until it speciates or reaches ``horizon``."""
    if rng is None:
        rng = np.random.default_rng()
    m = params.m
    if not 0 <= start_type < m:
        raise ValueError(f"start_type {start_type} out of range for m={m}")
    total, cum = jump_table(params)
    typ = int(start_type)
    elapsed = 0.0
    segments = []
    while True:
        wait = rng.exponential(1.0 / total[typ])
        if elapsed + wait >= horizon:
            rest = horizon - elapsed
            if rest > 0 or not segments:
                segments.append((typ, rest))
            return EdgeRealization(horizon, typ, False, tuple(segments))
        elapsed += wait
        segments.append((typ, wait))
        outcome = int(np.searchsorted(cum[typ], rng.random(), side="right"))
        if outcome == m:
            return EdgeRealization(elapsed, typ, True, tuple(segments))
        typ = outcome


def sample_speciation(params: ModelParams, start_types, rng: np.random.Generator):
    """Vectorised unbounded edge sampler without segment bookkeeping.

    Returns ``(lengths, end_types)`` for each entry of ``start_types``.
    """
    m = params.m
    total, cum = jump_table(params)
    typ = np.array(start_types, dtype=np.int64)
    n = typ.size
    length = np.zeros(n)
    active = np.arange(n)
    while active.size:
        cur = typ[active]
        length[active] += rng.exponential(1.0, active.size) / total[cur]
        draw = rng.random(active.size)
        outcome = (draw[:, None] >= cum[cur]).sum(axis=1)
        outcome = np.minimum(outcome, m)
        done = outcome == m
        switched = ~done
        typ[active[switched]] = outcome[switched]
        active = active[switched]
    return length, typ
