"""Recovering (lambda, S) from edge-length triples by maximum likelihood.

The likelihood uses the limiting triple density ``G_inf``.  It is invariant
under relabelling the types, so estimates are only meaningful up to a
permutation; :func:`canonicalize` fixes that gauge by sorting types by
speciation rate.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .gdist import (
    ExtractionMode,
    extract_triples,
    g_infinity_density,
    sample_tree_triples,
    sample_triples_analytic,
    triples_array,
)
from .linalg import ConvergenceError
from .params import ModelParams, validate
from .tree_sim import simulate_tree

DENSITY_FLOOR = 1e-300
TIE_WARN_RTOL = 1e-3


class FitError(RuntimeError):
    """No optimizer start converged."""


class CanonicalizationError(ValueError):
    """Speciation rates tie, so sorting by them does not fix the labels."""


def _check_perm(sigma, m):
    sigma = np.asarray(sigma, dtype=int)
    if sigma.shape != (m,) or sorted(sigma.tolist()) != list(range(m)):
        raise ValueError(f"{sigma.tolist()} is not a permutation of range({m})")
    return sigma


def apply_permutation(params: ModelParams, sigma) -> ModelParams:
    """Relabel types so that new type k is old type ``sigma[k]``.

    With ``P`` the permutation matrix ``P[k, sigma[k]] = 1`` this is
    ``lambda -> P lambda``, ``S -> P S P^T``, ``pi -> P pi``.
    """
    sigma = _check_perm(sigma, params.m)
    return ModelParams(
        pi=params.pi[sigma],
        lam=params.lam[sigma],
        S=params.S[np.ix_(sigma, sigma)],
    )


def canonicalize(params: ModelParams, rtol: float = 1e-9) -> tuple[ModelParams, np.ndarray]:
    """Sort types by ascending speciation rate; return (params, permutation)."""
    sigma = np.argsort(params.lam, kind="stable")
    lam = params.lam[sigma]
    gaps = np.diff(lam)
    if np.any(gaps <= rtol * max(float(lam.max()), 1e-300)):
        raise CanonicalizationError(f"speciation rates tie: {params.lam.tolist()}")
    return apply_permutation(params, sigma), sigma


def _nll(X: np.ndarray, params: ModelParams) -> tuple[float, int]:
    dens = g_infinity_density(params, X[:, 0], X[:, 1], X[:, 2])
    low = dens < DENSITY_FLOOR
    return float(-np.sum(np.log(np.where(low, DENSITY_FLOOR, dens)))), int(low.sum())


def negative_loglik(triples, params: ModelParams) -> float:
    """``-sum log g_inf(l0, l1, l2)`` with densities floored at 1e-300."""
    X = triples_array(triples)
    if X.shape[0] == 0:
        raise ValueError("no triples")
    value, floored = _nll(X, params)
    if floored:
        warnings.warn(f"{floored} triple densities floored at {DENSITY_FLOOR}", RuntimeWarning)
    return value


def pack(params: ModelParams) -> np.ndarray:
    """Log-rates: ``log lambda`` then row-major off-diagonal ``log s_ij``."""
    off = ~np.eye(params.m, dtype=bool)
    return np.log(np.concatenate([params.lam, params.S[off]]))


def unpack(theta, m: int) -> ModelParams:
    theta = np.clip(np.asarray(theta, dtype=float), -40.0, 40.0)
    rates = np.exp(theta)
    S = np.zeros((m, m))
    S[~np.eye(m, dtype=bool)] = rates[m:]
    return ModelParams(pi=np.full(m, 1.0 / m), lam=rates[:m], S=S)


@dataclass
class OptimizerConfig:
    """Nelder-Mead settings; tolerances apply to the mean per-triple NLL
    and to log-rates."""

    xatol: float = 1e-8
    fatol: float = 1e-11
    maxiter_per_dim: int = 4000
    restarts: int = 2
    init_low: float = 1e-2
    init_high: float = 10.0
    # Every start first runs at loose tolerance, on a random subsample of
    # this many triples when there are more (0 disables subsampling); the
    # ``polish`` best are then refined on the full data (0 refines all).
    subsample: int = 10_000
    polish: int = 3
    n_jobs: int = 1


@dataclass
class StartResult:
    x0: np.ndarray
    x: np.ndarray
    fun: float
    success: bool
    nfev: int
    message: str


def _objective(theta, X, m):
    try:
        params = unpack(theta, m)
        value, _ = _nll(X, params)
    except (ConvergenceError, np.linalg.LinAlgError, ValueError, FloatingPointError):
        return math.inf
    return value / X.shape[0] if math.isfinite(value) else math.inf


def _nelder_mead(x, X, m, xatol, fatol, config):
    dim = x.size
    return minimize(
        _objective, x, args=(X, m), method="Nelder-Mead",
        options={
            "xatol": xatol, "fatol": fatol,
            "maxiter": config.maxiter_per_dim * dim, "maxfev": config.maxiter_per_dim * dim * 2,
            "adaptive": dim > 4,
        },
    )


def _refine(x0, X, m, config: OptimizerConfig, xatol=None, fatol=None, restarts=None) -> StartResult:
    xatol = config.xatol if xatol is None else xatol
    fatol = config.fatol if fatol is None else fatol
    restarts = config.restarts if restarts is None else restarts
    x = np.asarray(x0, dtype=float)
    nfev = 0
    for _ in range(1 + restarts):
        res = _nelder_mead(x, X, m, xatol, fatol, config)
        nfev += res.nfev
        moved = np.max(np.abs(res.x - x))
        x = res.x
        # a fresh simplex around the optimum guards against premature collapse
        if res.success and moved < 100 * xatol:
            break
    return StartResult(np.asarray(x0), x, float(res.fun), bool(res.success), nfev, str(res.message))


def _coarse(x0, X, m, config):
    return _refine(x0, X, m, config, 1e3 * config.xatol, 1e3 * config.fatol, 0)


def _map(fn, items, config, *args):
    if config.n_jobs > 1 and len(items) > 1:
        k = len(items)
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            return list(pool.map(fn, items, *([a] * k for a in args)))
    return [fn(x, *args) for x in items]


@dataclass
class FitResult:
    params_hat: ModelParams
    loglik: float
    n_triples: int
    starts: int
    best_start_index: int
    converged: bool
    permutation: np.ndarray
    n_floored: int = 0
    pi_identified: bool = False
    start_losses: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "params_hat": self.params_hat.to_dict(),
            "pi_identified": self.pi_identified,
            "loglik": self.loglik,
            "n_triples": self.n_triples,
            "starts": self.starts,
            "best_start_index": self.best_start_index,
            "converged": self.converged,
            "permutation": self.permutation.tolist(),
            "n_floored": self.n_floored,
            "start_losses": list(self.start_losses),
            "wall_time": self.wall_time,
        }


def fit_mle(
    triples,
    m: int,
    n_starts: int = 20,
    rng: np.random.Generator | None = None,
    config: OptimizerConfig | None = None,
    initial_points=None,
) -> FitResult:
    """Maximum-likelihood (lambda, S) from triples, best of several starts.

    Optimises over log-rates so every iterate has positive rates.  Starts are
    log-uniform on ``[init_low, init_high]`` unless ``initial_points`` (a
    list of ModelParams) is given.  Every start is first run at loose
    tolerance (on a random subsample of ``config.subsample`` triples when the
    data are larger) and only the ``config.polish`` best are refined on the
    full data; ``polish=0`` refines every start.  The winner is
    canonicalised; ``pi`` is not identifiable from triples and is reported
    as uniform.
    """
    X = triples_array(triples)
    if X.shape[0] == 0:
        raise ValueError("no triples")
    if m < 1:
        raise ValueError("m must be positive")
    config = config or OptimizerConfig()
    rng = np.random.default_rng() if rng is None else rng
    dim = m * m
    if initial_points is not None:
        x0s = [pack(p) for p in initial_points]
    else:
        lo, hi = np.log(config.init_low), np.log(config.init_high)
        x0s = [rng.uniform(lo, hi, size=dim) for _ in range(n_starts)]

    t_start = time.perf_counter()
    if len(x0s) > config.polish > 0:
        X_coarse = X
        if 0 < config.subsample < X.shape[0]:
            X_coarse = X[rng.choice(X.shape[0], size=config.subsample, replace=False)]
        coarse = _map(_coarse, x0s, config, X_coarse, m, config)
        order = sorted(range(len(x0s)), key=lambda k: coarse[k].fun)[: config.polish]
        fine = _map(_refine, [coarse[k].x for k in order], config, X, m, config)
        results = [StartResult(x0s[k], r.x, r.fun, r.success, r.nfev, r.message) for k, r in zip(order, fine)]
        index = order
    else:
        results = _map(_refine, x0s, config, X, m, config)
        index = list(range(len(x0s)))
    elapsed = time.perf_counter() - t_start

    ok = [k for k, r in enumerate(results) if r.success and math.isfinite(r.fun)]
    if not ok:
        msgs = "; ".join(f"start {index[k]}: {r.message} (loss {r.fun:.6g})" for k, r in enumerate(results))
        raise FitError(f"no start converged: {msgs}")
    best = min(ok, key=lambda k: results[k].fun)
    raw = unpack(results[best].x, m)
    lam = np.sort(raw.lam)
    if m > 1 and np.min(np.diff(lam)) < TIE_WARN_RTOL * lam.max():
        warnings.warn(
            f"fitted speciation rates nearly tie ({raw.lam.tolist()}); label order is unstable",
            RuntimeWarning,
        )
    canon, sigma = canonicalize(raw, rtol=0.0)
    nll, floored = _nll(X, canon)
    return FitResult(
        params_hat=canon,
        loglik=-nll,
        n_triples=X.shape[0],
        starts=len(x0s),
        best_start_index=index[best],
        converged=True,
        permutation=sigma,
        n_floored=floored,
        start_losses=[r.fun * X.shape[0] for r in results],
        wall_time=elapsed,
    )


@dataclass(frozen=True)
class SimulatedTrees:
    """Triple source: trees of depth ``T`` cut at ``t`` (default ``T/2``).

    One-per-tree draws one triple per tree until ``n_triples`` are collected.
    All-eligible takes every eligible triple from a single tree, or from as
    many trees as needed when ``n_triples`` is given.
    """

    T: float
    mode: ExtractionMode = ExtractionMode.ONE_PER_TREE
    t: float | None = None


ANALYTIC = "analytic"


@dataclass
class RecoveryReport:
    true_canonical: ModelParams
    fit_canonical: ModelParams
    lambda_rel_error: np.ndarray
    s_rel_error: np.ndarray
    max_rel_error: float
    fit: FitResult
    n_triples: int
    source: str
    seed: int | None

    def alignment(self) -> np.ndarray:
        """Relabelling of the fit that best matches the truth (see :func:`best_alignment`)."""
        return best_alignment(self.true_canonical, self.fit_canonical)

    def lambda_order_matches(self) -> bool:
        """Whether sorting the fitted speciation rates labels the types the
        same way as the best overall match to the truth does."""
        return bool(np.array_equal(self.alignment(), np.arange(self.true_canonical.m)))

    def nearest_lambda_matches(self) -> bool:
        """Stricter check: each fitted rate is closest to the true rate with its label."""
        true = self.true_canonical.lam
        nearest = [int(np.argmin(np.abs(true - x))) for x in self.fit_canonical.lam]
        return nearest == list(range(true.size))

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "seed": self.seed,
            "n_triples": self.n_triples,
            "true_canonical": self.true_canonical.to_dict(),
            "fit_canonical": self.fit_canonical.to_dict(),
            "lambda_rel_error": self.lambda_rel_error.tolist(),
            "s_rel_error": self.s_rel_error.tolist(),
            "max_rel_error": self.max_rel_error,
            "lambda_order_matches": self.lambda_order_matches(),
            "nearest_lambda_matches": self.nearest_lambda_matches(),
            "fit": self.fit.to_dict(),
        }


def best_alignment(true_params: ModelParams, fitted: ModelParams) -> np.ndarray:
    """Permutation ``sigma`` minimising the summed relative error of
    ``apply_permutation(fitted, sigma)`` against ``true_params`` over all
    speciation and off-diagonal switching rates."""
    m = true_params.m
    off = ~np.eye(m, dtype=bool)
    truth = np.concatenate([true_params.lam, true_params.S[off]])
    best, best_cost = None, math.inf
    for sigma in itertools.permutations(range(m)):
        q = apply_permutation(fitted, sigma)
        cost = float(np.sum(np.abs(np.concatenate([q.lam, q.S[off]]) - truth) / truth))
        if cost < best_cost:
            best, best_cost = np.array(sigma), cost
    return best


def compare(true_params: ModelParams, fitted: ModelParams):
    """Relative errors after canonicalising both sides."""
    t, _ = canonicalize(true_params)
    f, _ = canonicalize(fitted, rtol=0.0)
    lam_err = np.abs(f.lam - t.lam) / t.lam
    off = ~np.eye(t.m, dtype=bool)
    s_err = np.zeros((t.m, t.m))
    s_err[off] = np.abs(f.S[off] - t.S[off]) / t.S[off]
    return t, f, lam_err, s_err, float(max(lam_err.max(), s_err.max()))


def generate_triples(true_params: ModelParams, n_triples, source, rng) -> np.ndarray:
    if source == ANALYTIC:
        X, _ = sample_triples_analytic(true_params, int(n_triples), rng)
        return X
    if not isinstance(source, SimulatedTrees):
        raise ValueError(f"unknown triple source {source!r}")
    mode = ExtractionMode(source.mode)
    t = source.T / 2 if source.t is None else source.t
    rows: list = []
    if mode is ExtractionMode.ALL_ELIGIBLE:
        while True:
            tree = simulate_tree(true_params, source.T, rng)
            rows.extend(tr.as_tuple() for tr in extract_triples(tree, t, mode, rng))
            if n_triples is None or len(rows) >= n_triples:
                break
    else:
        while len(rows) < n_triples:
            batch = sample_tree_triples(true_params, source.T, n_triples - len(rows), rng, t=t, mode=mode)
            rows.extend(tr.as_tuple() for tr in batch)
        rows = rows[:n_triples]
    return np.array(rows, dtype=float).reshape(-1, 3)


def recovery_experiment(
    true_params: ModelParams,
    n_triples: int | None,
    source=ANALYTIC,
    n_starts: int = 20,
    seed: int | None = None,
    config: OptimizerConfig | None = None,
) -> RecoveryReport:
    """Simulate triples from ``true_params``, fit, and report canonical errors."""
    report = validate(true_params)
    if not report.ok:
        raise ValueError(f"true parameters fail assumptions: {[c.name for c in report.failed()]}")
    data_rng, fit_rng = np.random.default_rng(seed).spawn(2)
    X = generate_triples(true_params, n_triples, source, data_rng)
    if X.shape[0] == 0:
        raise FitError("the triple source produced no eligible triples")
    fit = fit_mle(X, true_params.m, n_starts, fit_rng, config)
    t, f, lam_err, s_err, worst = compare(true_params, fit.params_hat)
    label = source if source == ANALYTIC else f"trees(T={source.T}, mode={ExtractionMode(source.mode).value})"
    return RecoveryReport(t, f, lam_err, s_err, worst, fit, X.shape[0], label, seed)
