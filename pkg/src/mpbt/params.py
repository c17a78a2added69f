"""Model parameters for the multitype pure-birth tree model.

A parameter set is the triple (pi, lambda, S): a root distribution over the
``m`` hidden types, a per-type speciation rate and a type-switching rate
matrix whose rows sum to zero.  Types are indexed ``0 .. m-1`` throughout the
package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

DEFAULT_TOL = 1e-9


class ParamsError(ValueError):
    """Structural problem with a parameter set (shapes, non-finite values,
    negative rates).  Distinct from a failed modelling assumption."""


class ParamsFileError(ParamsError):
    """A parameter file could not be parsed."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Root distribution ``pi``, speciation rates ``lam`` and switching
    matrix ``S``.

    The diagonal of ``S`` is always recomputed from the off-diagonal entries
    so that every row sums to zero; whatever diagonal is passed in is ignored.
    """

    pi: np.ndarray
    lam: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if lam.ndim != 1 or lam.size == 0:
            raise ParamsError(f"lambda must be a non-empty vector, got shape {lam.shape}")
        m = lam.size
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        S = np.array(self.S, dtype=float, ndmin=2)
        if pi.shape != (m,):
            raise ParamsError(f"pi has shape {pi.shape}, expected ({m},)")
        if S.shape != (m, m):
            raise ParamsError(f"S has shape {S.shape}, expected ({m}, {m})")
        off = ~np.eye(m, dtype=bool)
        for name, arr in (("pi", pi), ("lambda", lam), ("S", S[off])):
            if not np.all(np.isfinite(arr)):
                raise ParamsError(f"{name} has non-finite entries")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12 * max(1, m):
            raise ParamsError(f"pi must be a probability vector, got {pi.tolist()}")
        if np.any(lam < 0):
            raise ParamsError(f"speciation rates must be non-negative, got {lam.tolist()}")
        if np.any(S[off] < 0):
            raise ParamsError("off-diagonal switching rates must be non-negative")
        S = np.where(off, S, 0.0)
        S[np.diag_indices(m)] = -S.sum(axis=1)
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "S", _frozen(S))

    @classmethod
    def from_rates(cls, lam, s_offdiag=None, pi=None) -> "ModelParams":
        """Build from speciation rates and an off-diagonal switching matrix.

        ``pi`` defaults to uniform; ``s_offdiag`` may be omitted only for m=1.
        """
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        m = lam.size
        if s_offdiag is None:
            if m != 1:
                raise ParamsError("s_offdiag is required when m > 1")
            s_offdiag = np.zeros((1, 1))
        if pi is None:
            pi = np.full(m, 1.0 / m)
        return cls(pi=pi, lam=lam, S=s_offdiag)

    @property
    def m(self) -> int:
        return self.lam.size

    @property
    def s_offdiag(self) -> np.ndarray:
        """Switching rates with a zeroed diagonal."""
        return np.where(np.eye(self.m, dtype=bool), 0.0, self.S)

    @cached_property
    def derived(self) -> "DerivedMatrices":
        return DerivedMatrices.from_params(self)

    def with_pi(self, pi) -> "ModelParams":
        return ModelParams(pi=pi, lam=self.lam, S=self.S)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "pi": self.pi.tolist(),
            "lambda": self.lam.tolist(),
            "s_offdiag": self.s_offdiag.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        missing = [k for k in ("m", "pi", "lambda", "s_offdiag") if k not in data]
        if missing:
            raise ParamsFileError(f"missing field(s): {', '.join(missing)}")
        m = data["m"]
        if not isinstance(m, int) or isinstance(m, bool) or m < 1:
            raise ParamsFileError(f"'m' must be a positive integer, got {m!r}")
        s = np.asarray(data["s_offdiag"], dtype=float)
        if s.shape != (m, m):
            raise ParamsFileError(f"s_offdiag has shape {s.shape}, expected ({m}, {m})")
        off = ~np.eye(m, dtype=bool)
        if np.any(s[off] < 0):
            i, j = np.argwhere((s < 0) & off)[0]
            raise ParamsFileError(f"negative switching rate s_offdiag[{i}][{j}] = {s[i, j]}")
        try:
            return cls(pi=data["pi"], lam=data["lambda"], S=s)
        except ParamsError as exc:
            raise ParamsFileError(str(exc)) from exc

    def __repr__(self):
        return (
            f"ModelParams(pi={self.pi.tolist()}, lam={self.lam.tolist()}, "
            f"s_offdiag={self.s_offdiag.tolist()})"
        )


def load_params(path) -> ModelParams:
    """Read a JSON parameter file.

    Schema::

        {"m": 2, "pi": [0.5, 0.5], "lambda": [0.1, 0.5],
         "s_offdiag": [[0, 0.1], [0.2, 0]]}

    ``s_offdiag[i][j]`` is the rate of switching from type i to type j; the
    diagonal slots are ignored.
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParamsFileError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise ParamsFileError(f"{path}: top level must be a JSON object")
    return ModelParams.from_dict(data)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class DerivedMatrices:
    """``D = diag(lambda)``, ``U = S - D``, ``A = S + D`` and the 2m x 2m edge
    process generator ``Q = [[U, D], [0, 0]]``."""

    D: np.ndarray
    U: np.ndarray
    A: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_params(cls, params: ModelParams) -> "DerivedMatrices":
        m = params.m
        D = np.diag(params.lam)
        U = params.S - D
        A = params.S + D
        Q = np.zeros((2 * m, 2 * m))
        Q[:m, :m] = U
        Q[:m, m:] = D
        return cls(D=_frozen(D), U=_frozen(U), A=_frozen(A), Q=_frozen(Q))


@dataclass(frozen=True)
class AssumptionCheck:
    number: int
    name: str
    passed: bool
    detail: str
    offending: tuple = ()


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[AssumptionCheck, ...]
    genericity_det: float = field(default=math.nan)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "genericity_det": self.genericity_det,
            "assumptions": [
                {
                    "number": c.number,
                    "name": c.name,
                    "passed": c.passed,
                    "detail": c.detail,
                    "offending": [list(o) if isinstance(o, tuple) else o for o in c.offending],
                }
                for c in self.checks
            ],
        }


def genericity_matrix(params: ModelParams) -> np.ndarray:
    """Krylov matrix with columns ``1, U 1, U^2 1, ..., U^(m-1) 1``."""
    U = params.derived.U
    m = params.m
    M = np.empty((m, m))
    col = np.ones(m)
    for k in range(m):
        M[:, k] = col
        col = U @ col
    return M


def genericity_det(params: ModelParams) -> float:
    return float(np.linalg.det(genericity_matrix(params)))


def validate(params: ModelParams, tol: float = DEFAULT_TOL) -> ValidationReport:
    """Check the four genericity assumptions the identifiability result needs.

    1. all speciation rates positive;
    2. all off-diagonal switching rates positive;
    3. the genericity matrix is non-singular, judged by ``|det M|`` relative
       to the product of its column norms (Hadamard's bound);
    4. speciation rates pairwise distinct, relative to ``max(lambda)``.
    """
    m = params.m
    lam = params.lam
    checks = []

    bad = tuple(int(i) for i in np.flatnonzero(lam <= 0))
    checks.append(AssumptionCheck(
        1, "positive speciation rates", not bad,
        "all lambda_i > 0" if not bad else f"lambda_i <= 0 at types {list(bad)}", bad,
    ))

    off = ~np.eye(m, dtype=bool)
    bad = tuple((int(i), int(j)) for i, j in np.argwhere((params.S <= 0) & off))
    checks.append(AssumptionCheck(
        2, "positive switching rates", not bad,
        "all s_ij > 0 for i != j" if not bad else f"s_ij <= 0 at {list(bad)}", bad,
    ))

    M = genericity_matrix(params)
    det = float(np.linalg.det(M))
    scale = float(np.prod(np.linalg.norm(M, axis=0)))
    ok3 = abs(det) > tol * scale
    checks.append(AssumptionCheck(
        3, "genericity matrix non-singular", ok3,
        f"|det M| = {abs(det):.6g}, Hadamard bound {scale:.6g}",
    ))

    thresh = tol * max(float(np.max(np.abs(lam))), 1e-300)
    ties = tuple(
        (i, j) for i in range(m) for j in range(i + 1, m) if abs(lam[i] - lam[j]) <= thresh
    )
    checks.append(AssumptionCheck(
        4, "distinct speciation rates", not ties,
        "all lambda_i distinct" if not ties else f"tied pairs {list(ties)}", ties,
    ))
    return ValidationReport(checks=tuple(checks), genericity_det=det)
