"""Domain types and the objective functions shared by both inference engines.

The model: C data sources X_c (M x N_c) share a basis W (M x K) and carry their
own column-stochastic coefficient matrix H_c (K x N_c) and Gaussian noise
variance sigma2_c::

    X_c = W @ H_c + eps_c,   eps_c ~ N(0, sigma2_c)
    w_ik ~ Laplace(0, lambda)          (scale mixture: w_ik ~ N(0, z_ik), z_ik ~ Exp(lambda))
    h_c[:, j] ~ Dirichlet(alpha0)
    sigma2_c ~ InvGamma(a0, b0)
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

Z_FLOOR = 1e-10
SIGMA2_FLOOR = 1e-12
COLUMN_SUM_TOL = 1e-8


class BJMDError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(BJMDError, ValueError):
    def __init__(self, message, source=None):
        if source is not None:
            message = f"source {source}: {message}"
        super().__init__(message)
        self.source = source


class InvariantViolationError(BJMDError, ValueError):
    def __init__(self, invariant, detail=""):
        msg = f"invariant violated: {invariant}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.invariant = invariant


class NumericOverflowError(BJMDError, FloatingPointError):
    pass


class SolverFailure(BJMDError, RuntimeError):
    pass


def _as_matrix(x, name):
    a = np.asarray(x, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class MultiViewData:
    """C dense matrices sharing the feature (row) dimension."""

    sources: tuple

    def __init__(self, sources: Sequence[np.ndarray]):
        mats = tuple(_as_matrix(x, f"X[{c}]") for c, x in enumerate(sources))
        if len(mats) < 1:
            raise InvariantViolationError("C >= 1", "no sources given")
        M = mats[0].shape[0]
        if M < 1:
            raise InvariantViolationError("M >= 1")
        for c, x in enumerate(mats):
            if x.shape[0] != M:
                raise DimensionMismatchError(f"has {x.shape[0]} rows, expected {M}", source=c)
            if x.shape[1] < 1:
                raise InvariantViolationError("N_c >= 1", f"source {c} has no columns")
            if not np.all(np.isfinite(x)):
                raise InvariantViolationError("finite entries", f"source {c}")
        object.__setattr__(self, "sources", mats)

    @property
    def C(self) -> int:
        return len(self.sources)

    @property
    def M(self) -> int:
        return self.sources[0].shape[0]

    @property
    def N(self) -> tuple:
        return tuple(x.shape[1] for x in self.sources)

    def concatenated(self) -> "MultiViewData":
        """All sources merged column-wise into a single source."""
        return MultiViewData([np.hstack(self.sources)])

    def __len__(self):
        return self.C

    def __getitem__(self, c):
        return self.sources[c]


@dataclass(frozen=True)
class Hyperparams:
    lam: float
    alpha0: np.ndarray
    a0: float = 1.0
    b0: float = 1.0

    def __post_init__(self):
        alpha0 = np.atleast_1d(np.asarray(self.alpha0, dtype=float))
        object.__setattr__(self, "alpha0", alpha0)
        if alpha0.ndim != 1 or alpha0.size < 1:
            raise InvariantViolationError("K >= 1")
        if not self.lam > 0:
            raise InvariantViolationError("lambda > 0", f"got {self.lam}")
        if np.any(alpha0 < 1):
            raise InvariantViolationError("alpha0_k >= 1", f"got {alpha0}")
        if not (self.a0 > 0 and self.b0 > 0):
            raise InvariantViolationError("a0 > 0 and b0 > 0", f"got a0={self.a0}, b0={self.b0}")

    @property
    def K(self) -> int:
        return self.alpha0.size

    @classmethod
    def default(cls, K, lam=1.0, alpha0=1.1, a0=1.0, b0=1.0):
        return cls(lam=lam, alpha0=np.full(K, float(alpha0)), a0=a0, b0=b0)


@dataclass
class ModelState:
    W: np.ndarray
    Z: np.ndarray
    H: list
    sigma2: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        self.H = [np.asarray(h, dtype=float) for h in self.H]
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))

    @property
    def K(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "ModelState":
        return ModelState(self.W.copy(), self.Z.copy(), [h.copy() for h in self.H], self.sigma2.copy())


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration limits for both engines.

    ``tol_outer`` and ``max_outer_iters`` are the relative-objective tolerance
    and sweep cap for MAP, or the H-stability tolerance and iteration cap for
    VI. ``check_interval``, ``mc_samples``, ``step_size`` and ``init_log_std``
    only matter to VI; the ``ip_*`` fields only to the coefficient QP.
    """

    tol_outer: float = 1e-3
    max_outer_iters: int = 500
    check_interval: int = 100
    mc_samples: int = 1
    step_size: float = 0.1
    init_log_std: float = -2.0
    min_outer_iters: int = 0
    ip_eta: float = 0.95
    ip_max_iters: int = 50
    ip_tol: float = 1e-8
    rng_seed: int = 0
    z_floor: float = Z_FLOOR
    w_regularizer: str = "sqrt"

    def __post_init__(self):
        if not 0 < self.ip_eta < 1:
            raise InvariantViolationError("0 < ip_eta < 1", f"got {self.ip_eta}")
        for name in ("tol_outer", "ip_tol", "z_floor", "step_size"):
            if not getattr(self, name) > 0:
                raise InvariantViolationError(f"{name} > 0")
        for name in ("max_outer_iters", "check_interval", "mc_samples", "ip_max_iters"):
            if int(getattr(self, name)) < 1:
                raise InvariantViolationError(f"{name} >= 1")
        if self.w_regularizer not in ("sqrt", "exact"):
            raise InvariantViolationError("w_regularizer in {'sqrt', 'exact'}", self.w_regularizer)

    @classmethod
    def advi_defaults(cls, **overrides):
        base = dict(tol_outer=1e-2, max_outer_iters=150_000, check_interval=100, mc_samples=1)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass
class FitReport:
    objective_trace: list
    iterations: int
    elapsed_seconds: float
    final_state: ModelState
    converged: bool
    elapsed_trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def validate(data: MultiViewData, hyper: Hyperparams, state: ModelState, z_floor: float = 0.0, check_z=True):
    """Raise if ``state`` is inconsistent with ``data``/``hyper`` or breaks a model invariant."""
    M, K = data.M, hyper.K
    W = state.W
    if W.ndim != 2 or W.shape != (M, K):
        raise DimensionMismatchError(f"W has shape {W.shape}, expected {(M, K)}")
    if not np.all(np.isfinite(W)):
        raise InvariantViolationError("finite W")
    if check_z:
        if state.Z.shape != (M, K):
            raise DimensionMismatchError(f"Z has shape {state.Z.shape}, expected {(M, K)}")
        if not np.all(np.isfinite(state.Z)):
            raise InvariantViolationError("finite Z")
        if np.any(state.Z <= 0) or np.any(state.Z < z_floor):
            raise InvariantViolationError("z_ik >= z_floor > 0", f"min z = {state.Z.min():g}")
    if len(state.H) != data.C:
        raise DimensionMismatchError(f"{len(state.H)} coefficient matrices for {data.C} sources")
    if state.sigma2.shape != (data.C,):
        raise DimensionMismatchError(f"sigma2 has shape {state.sigma2.shape}, expected {(data.C,)}")
    for c, (h, n) in enumerate(zip(state.H, data.N)):
        if h.shape != (K, n):
            raise DimensionMismatchError(f"H has shape {h.shape}, expected {(K, n)}", source=c)
        if not np.all(np.isfinite(h)):
            raise InvariantViolationError("finite H", f"source {c}")
        if np.any(h <= 0):
            raise InvariantViolationError("h_kj > 0", f"source {c}")
        dev = np.abs(h.sum(axis=0) - 1.0).max()
        if dev > COLUMN_SUM_TOL:
            raise InvariantViolationError("columns of H sum to 1", f"source {c}, max deviation {dev:.3g}")
    if not np.all(np.isfinite(state.sigma2)) or np.any(state.sigma2 <= 0):
        raise InvariantViolationError("sigma2_c > 0", f"got {state.sigma2}")


def reconstruct(W, Hc):
    """Noiseless model mean ``W @ Hc`` for one source."""
    W = np.asarray(W, dtype=float)
    Hc = np.asarray(Hc, dtype=float)
    if W.ndim != 2 or Hc.ndim != 2 or W.shape[1] != Hc.shape[0]:
        raise DimensionMismatchError(f"cannot multiply {W.shape} by {Hc.shape}")
    return W @ Hc


def residual_ss(x, W, Hc):
    r = x - W @ Hc
    return float(np.einsum("ij,ij->", r, r))


def log_invgamma(s2, a0, b0):
    """Log density of InvGamma(a0, b0): (s2)^(-a0-1) exp(-b0/s2) b0^a0 / Gamma(a0)."""
    s2 = np.asarray(s2, dtype=float)
    return a0 * np.log(b0) - gammaln(a0) - (a0 + 1.0) * np.log(s2) - b0 / s2


def _check_positive(state):
    for c, h in enumerate(state.H):
        if np.any(h <= 0):
            raise InvariantViolationError("h_kj > 0", f"source {c}: log of non-positive coefficient")
    if np.any(state.sigma2 <= 0):
        raise InvariantViolationError("sigma2_c > 0")


def _finite(value, what):
    value = float(value)
    if not np.isfinite(value):
        raise NumericOverflowError(f"{what} is not finite ({value})")
    return value


def map_objective(state: ModelState, data: MultiViewData, hyper: Hyperparams) -> float:
    """Negative log posterior of the scale-mixture model, up to constants.

    Includes the Gaussian normaliser ``(M N_c / 2) ln sigma2_c``: without it the
    closed-form sigma2 update is not a minimiser and sweeps could go uphill.
    """
    _check_positive(state)
    if np.any(state.Z <= 0):
        raise InvariantViolationError("z_ik > 0")
    M = data.M
    am1 = hyper.alpha0 - 1.0
    f = 0.0
    for c, x in enumerate(data.sources):
        s2 = state.sigma2[c]
        h = state.H[c]
        f += residual_ss(x, state.W, h) / (2.0 * s2)
        f += 0.5 * M * x.shape[1] * np.log(s2)
        f -= float(am1 @ np.log(h).sum(axis=1))
        f -= float(log_invgamma(s2, hyper.a0, hyper.b0))
    Z = state.Z
    f += float(Z.sum() / hyper.lam + 0.5 * np.log(Z).sum() + (state.W ** 2 / (2.0 * Z)).sum())
    return _finite(f, "MAP objective")


def log_dirichlet(h, alpha0):
    """Column-wise log Dirichlet density summed over the columns of ``h`` (K x N)."""
    alpha0 = np.asarray(alpha0, dtype=float)
    n = h.shape[1]
    norm = gammaln(alpha0.sum()) - gammaln(alpha0).sum()
    return n * norm + float((alpha0 - 1.0) @ np.log(h).sum(axis=1))


def bjmd_log_joint(W, H, sigma2, data: MultiViewData, hyper: Hyperparams) -> float:
    """Log of the complete likelihood of the original (Laplace prior) model."""
    W = np.asarray(W, dtype=float)
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    for c, h in enumerate(H):
        if np.any(np.asarray(h) <= 0):
            raise InvariantViolationError("h_kj > 0", f"source {c}")
    if np.any(sigma2 <= 0):
        raise InvariantViolationError("sigma2_c > 0", f"got {sigma2}")
    lam = hyper.lam
    lp = -W.size * np.log(2.0 * lam) - np.abs(W).sum() / lam
    for c, x in enumerate(data.sources):
        h = np.asarray(H[c], dtype=float)
        s2 = sigma2[c]
        lp += log_dirichlet(h, hyper.alpha0)
        lp += -0.5 * x.size * np.log(2.0 * np.pi * s2) - residual_ss(x, W, h) / (2.0 * s2)
        lp += log_invgamma(s2, hyper.a0, hyper.b0)
    return _finite(lp, "log joint")
