"""Numerical checks of the finite-Koopman and semantic-proximity results.

``edmd_fit`` lifts Gaussian samples with monomials and fits the linear
operator on the lifted coordinates by least squares; residuals are measured
on a held-out split. ``verify_semantic_proximity`` estimates a Lipschitz
constant of an end-to-end map and counts pairs breaking the proximity chain.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError
from .ndmath import lstsq, make_rng

Map = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MonomialBasis:
    """All monomials of total degree <= ``degree`` in ``n`` variables.

    Ordered by total degree, then lexicographically by descending exponent of
    the first variable: for n=2, degree=2 -> 1, x1, x2, x1^2, x1 x2, x2^2.
    """

    n: int
    degree: int

    def __post_init__(self):
        if self.n < 1 or self.degree < 0:
            raise ConfigError("need n >= 1 and degree >= 0")

    @property
    def exponents(self) -> np.ndarray:
        rows = []
        for total in range(self.degree + 1):
            level = [a for a in itertools.product(range(total, -1, -1), repeat=self.n) if sum(a) == total]
            rows += sorted(level, reverse=True)
        return np.array(rows, dtype=np.int64).reshape(-1, self.n)

    @property
    def size(self) -> int:
        return comb(self.n + self.degree, self.degree)


def monomial_lift(basis: MonomialBasis, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != basis.n:
        raise ShapeError(f"state width {x.shape[1]} != basis dimension {basis.n}")
    exps = basis.exponents
    out = np.ones((len(x), len(exps)))
    for j in range(basis.n):
        # integer powers, column by column
        out *= x[:, j:j + 1] ** exps[None, :, j]
    return out[0] if single else out


def identity_lift(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


@dataclass
class EdmdReport:
    degree: int
    lifted_dim: int
    lift_residual: float  # held-out E||xi(Phi x) - C xi(x)||^2 / E||xi(Phi x)||^2
    state_residual: float  # held-out E||Phi x - K xi(x)||^2
    train_state_residual: float
    C: np.ndarray
    K: np.ndarray

    def csv_row(self) -> str:
        return f"{self.degree},{self.lifted_dim},{self.lift_residual!r},{self.state_residual!r},{self.train_state_residual!r}"


EDMD_CSV_HEADER = "degree,d,lift_residual,state_residual,train_state_residual"


def gaussian_samples(n_samples: int, dim: int, seed: int = 0, truncate: float | None = None) -> np.ndarray:
    """Standard normal draws, optionally conditioned on ||x|| <= truncate by rejection."""
    rng = make_rng(seed)
    if truncate is None:
        return rng.standard_normal((n_samples, dim))
    out = np.empty((0, dim))
    while len(out) < n_samples:
        x = rng.standard_normal((2 * n_samples, dim))
        out = np.concatenate([out, x[np.linalg.norm(x, axis=1) <= truncate]])
    return out[:n_samples]


def edmd_fit(phi: Map, basis: MonomialBasis, samples=None, n_samples: int = 4000,
             ridge: float = 1e-10, seed: int = 0, holdout: float = 0.2,
             truncate: float | None = None) -> EdmdReport:
    """Least-squares Koopman matrix on monomial features, scored on held-out samples."""
    X = gaussian_samples(n_samples, basis.n, seed, truncate) if samples is None else np.asarray(samples, float)
    n_fit = int(round((1.0 - holdout) * len(X)))
    if n_fit < basis.size:
        warnings.warn(f"{n_fit} fit samples for {basis.size} features; the fit is underdetermined",
                      stacklevel=2)
    Y = np.asarray(phi(X), dtype=np.float64)
    lift_x = monomial_lift(basis, X)
    lift_y = monomial_lift(basis, Y)
    tr, te = slice(0, n_fit), slice(n_fit, None)
    C = lstsq(lift_x[tr], lift_y[tr], ridge).T
    K = lstsq(lift_x[tr], Y[tr], ridge).T
    lift_err = np.sum((lift_y[te] - lift_x[te] @ C.T) ** 2, axis=1).mean()
    lift_norm = np.sum(lift_y[te] ** 2, axis=1).mean()
    state_err = np.sum((Y[te] - lift_x[te] @ K.T) ** 2, axis=1).mean()
    train_err = np.sum((Y[tr] - lift_x[tr] @ K.T) ** 2, axis=1).mean()
    return EdmdReport(basis.degree, basis.size, float(lift_err / lift_norm), float(state_err),
                      float(train_err), C, K)


def edmd_sweep(phi: Map, n: int, degrees, **kw) -> list[EdmdReport]:
    return [edmd_fit(phi, MonomialBasis(n, deg), **kw) for deg in degrees]


def estimate_operator_norm(C, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on C^T C."""
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if not np.any(C):
        return 0.0
    G = C.T @ C
    v = np.ones(G.shape[0]) + 1e-3 * np.arange(G.shape[0])
    v /= np.linalg.norm(v)
    lam = float(v @ G @ v)
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart on a basis vector
            v = np.eye(G.shape[0])[np.argmax(np.diag(G))]
            continue
        v = w / nw
        new = float(v @ G @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return float(np.sqrt(new))
        lam = new
    warnings.warn(f"power iteration did not converge in {max_iter} iterations; "
                  f"last estimate {np.sqrt(lam)!r}", RuntimeWarning, stacklevel=2)
    return float(np.sqrt(lam))


@dataclass
class ProximityReport:
    n_pairs: int
    lipschitz: float
    lift_constant: float  # max ||x1 - x2|| / ||xi(x1) - xi(x2)|| (1 for the identity lift)
    operator_norm: float  # ||C_T|| of the least-squares fit on the lift
    violation_rate: float  # ||dx0|| > L * lift_constant * ||dxi||
    displayed_violation_rate: float  # ||dx0|| > L * ||C_T|| * ||dxi||
    worst_ratio: float
    skipped: int

    def summary(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.__dict__.items())


def _ball_pairs(n: int, dim: int, radius: float, prior_std: float, rng):
    x1 = prior_std * rng.standard_normal((n, dim))
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, n) ** (1.0 / dim)
    return x1, x1 + r[:, None] * direction


def verify_semantic_proximity(phi: Map, n_pairs: int, radius: float, seed: int = 0,
                              basis: MonomialBasis | None = None, prior_std: float = 1.0,
                              n_calibration: int | None = None, calibrate_on_eval: bool = False,
                              ridge: float = 1e-10, rtol: float = 1e-9) -> ProximityReport:
    """Count evaluation pairs with ||x0^1 - x0^2|| above the calibrated Lipschitz bound.

    Calibration and evaluation pairs are drawn independently; with
    ``calibrate_on_eval`` the constants come from the evaluation pairs
    themselves, which must give zero violations.
    """
    if radius <= 0:
        raise ConfigError("radius must be positive")
    rng = make_rng(seed)
    lift = identity_lift if basis is None else (lambda x: monomial_lift(basis, x))
    e1, e2 = _ball_pairs(n_pairs, 2 if basis is None else basis.n, radius, prior_std, rng)
    if calibrate_on_eval:
        c1, c2 = e1, e2
    else:
        c1, c2 = _ball_pairs(n_calibration or n_pairs, e1.shape[1], radius, prior_std, rng)

    def stats(x1, x2):
        y1, y2 = phi(x1), phi(x2)
        dx = np.linalg.norm(x1 - x2, axis=1)
        dy = np.linalg.norm(y1 - y2, axis=1)
        dxi = np.linalg.norm(lift(x1) - lift(x2), axis=1)
        ok = (dx > 0) & (dxi > 0)
        return dx, dy, dxi, ok, y1, y2

    cdx, cdy, cdxi, cok, cy1, cy2 = stats(c1, c2)
    if not cok.any():
        raise ConfigError("every calibration pair is degenerate; increase the radius")
    lip = float(np.max(cdy[cok] / cdx[cok]))
    lift_const = float(np.max(cdx[cok] / cdxi[cok]))
    xs = np.concatenate([c1, c2])
    C_T = lstsq(lift(xs), lift(np.concatenate([cy1, cy2])), ridge).T
    op_norm = estimate_operator_norm(C_T)

    dx, dy, dxi, ok, _, _ = stats(e1, e2)
    bound = lip * lift_const * dxi[ok]
    viol = dy[ok] > bound * (1.0 + rtol)
    shown = dy[ok] > lip * op_norm * dxi[ok] * (1.0 + rtol)
    m = int(ok.sum())
    # 0/0 (a locally constant map) counts as a ratio of 0
    ratio = np.divide(dy[ok], bound, out=np.where(dy[ok] > 0, np.inf, 0.0), where=bound > 0)
    return ProximityReport(
        n_pairs=m, lipschitz=lip, lift_constant=lift_const, operator_norm=op_norm,
        violation_rate=float(viol.mean()) if m else 0.0,
        displayed_violation_rate=float(shown.mean()) if m else 0.0,
        worst_ratio=float(np.max(ratio)) if m else 0.0,
        skipped=int(n_pairs - m))
