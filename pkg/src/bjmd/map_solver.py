"""Block-coordinate MAP inference.

One sweep updates every row of W, then every coefficient column of every
source, then the auxiliary scales Z, then the noise variances, and records the
objective. Sweeps stop once the relative objective change drops to
``tol_outer``.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import (
    SIGMA2_FLOOR,
    FitReport,
    Hyperparams,
    ModelState,
    MultiViewData,
    NumericOverflowError,
    SolverConfig,
    SolverFailure,
    Z_FLOOR,
    map_objective,
    residual_ss,
    validate,
)
from .simplex_qp import ColumnProblem, column_objective, solve_columns

logger = logging.getLogger(__name__)

SIGMA2_INIT_FLOOR = 1e-6


@dataclass
class MapFit:
    state: ModelState
    report: FitReport


def update_z(W, lam, z_floor):
    """Stationary point of ``z/lam + ln(z)/2 + w^2/(2z)`` in ``z > 0``, clamped at ``z_floor``."""
    W = np.asarray(W, dtype=float)
    z = (np.sqrt(lam * lam + 8.0 * W * W * lam) - lam) / 4.0
    return np.maximum(z, z_floor)


def _w_penalty(z, mode):
    # the derivation prints diag(sqrt(z))^-1; the exact minimiser of w^2/(2z) uses diag(z)^-1
    return 1.0 / np.sqrt(z) if mode == "sqrt" else 1.0 / z


def _w_normal_equations(data, state):
    """Shared pieces of the W-row systems: ``sum_c H_c H_c'/s2_c`` and ``sum_c X_c H_c'/s2_c``."""
    K = state.W.shape[1]
    G = np.zeros((K, K))
    R = np.zeros((data.M, K))
    for c, x in enumerate(data.sources):
        h = state.H[c]
        s2 = state.sigma2[c]
        G += h @ h.T / s2
        R += x @ h.T / s2
    return G, R


def _solve_spd(A, rhs, row):
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        warnings.warn(f"W row {row}: system not positive definite, using pseudo-inverse", RuntimeWarning)
        sol = np.linalg.pinv(A) @ rhs
        if not np.all(np.isfinite(sol)):
            raise SolverFailure(f"W row {row}: linear solve failed")
        return sol


def update_w_row(i, data: MultiViewData, state: ModelState, hyper: Hyperparams, w_regularizer="sqrt"):
    """Ridge-like closed form for row ``i`` of W with everything else fixed."""
    G, R = _w_normal_equations(data, state)
    A = G + np.diag(_w_penalty(state.Z[i], w_regularizer))
    return _solve_spd(A, R[i], i)


def update_w(data: MultiViewData, state: ModelState, hyper: Hyperparams, w_regularizer="sqrt"):
    """All rows of W at once; rows are independent given H, Z and sigma2."""
    G, R = _w_normal_equations(data, state)
    P = _w_penalty(state.Z, w_regularizer)
    A = G[None, :, :] + P[:, :, None] * np.eye(G.shape[0])[None]
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.vstack([_solve_spd(A[i], R[i], i) for i in range(data.M)])
    y = np.linalg.solve(L, R[:, :, None])
    return np.linalg.solve(np.swapaxes(L, 1, 2), y)[:, :, 0]


def update_sigma2(c, data: MultiViewData, state: ModelState, hyper: Hyperparams):
    """Conjugate closed form ``(2 b0 + SSE_c) / (2 a0 + M N_c + 2)``."""
    x = data.sources[c]
    sse = residual_ss(x, state.W, state.H[c])
    s2 = (2.0 * hyper.b0 + sse) / (2.0 * hyper.a0 + x.size + 2.0)
    return max(s2, SIGMA2_FLOOR)


def update_h(c, data: MultiViewData, state: ModelState, hyper: Hyperparams, cfg: SolverConfig):
    """Interior-point update of every column of ``H_c``; columns that would get worse are kept."""
    W = state.W
    x = data.sources[c]
    s2 = state.sigma2[c]
    old = state.H[c]
    p = ColumnProblem(W.T @ W, (W.T @ x).T, s2 * (hyper.alpha0 - 1.0), s2)
    sol = solve_columns(p, old.T, cfg)
    new = sol.H.T
    f_old = column_objective(W, x.T, s2, hyper.alpha0, old.T)
    f_new = column_objective(W, x.T, s2, hyper.alpha0, new.T)
    worse = ~(f_new <= f_old)
    if worse.any():
        new[:, worse] = old[:, worse]
    return new, sol


def init_random(data: MultiViewData, hyper: Hyperparams, seed, z_floor=None) -> ModelState:
    """W ~ N(0, 1), H columns ~ Dirichlet(alpha0), sigma2 from per-source sample variance."""
    z_floor = Z_FLOOR if z_floor is None else z_floor
    rng = np.random.default_rng(seed)
    K = hyper.K
    W = rng.standard_normal((data.M, K))
    H = []
    for n in data.N:
        h = rng.dirichlet(hyper.alpha0, size=n).T
        h = np.maximum(h, 1e-12)
        H.append(h / h.sum(axis=0))
    sigma2 = np.array([max(float(np.var(x)), SIGMA2_INIT_FLOOR) for x in data.sources])
    return ModelState(W, update_z(W, hyper.lam, z_floor), H, sigma2)


def sweep(data: MultiViewData, state: ModelState, hyper: Hyperparams, cfg: SolverConfig) -> ModelState:
    """One full pass: W rows, H columns, Z, sigma2 (in that order). Returns a new state."""
    st = state.copy()
    st.W = update_w(data, st, hyper, cfg.w_regularizer)
    for c in range(data.C):
        st.H[c], _ = update_h(c, data, st, hyper, cfg)
    st.Z = update_z(st.W, hyper.lam, cfg.z_floor)
    for c in range(data.C):
        st.sigma2[c] = update_sigma2(c, data, st, hyper)
    return st


def fit_map(data: MultiViewData, hyper: Hyperparams, config: SolverConfig | None = None, init: ModelState | None = None) -> MapFit:
    cfg = config or SolverConfig()
    if init is None:
        state = init_random(data, hyper, cfg.rng_seed, cfg.z_floor)
    else:
        validate(data, hyper, init)
        state = init.copy()

    t0 = time.perf_counter()
    f_prev = map_objective(state, data, hyper)
    trace = [f_prev]
    times = [0.0]
    converged = False
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        state = sweep(data, state, hyper, cfg)
        try:
            f = map_objective(state, data, hyper)
        except NumericOverflowError as exc:
            raise NumericOverflowError(f"sweep {it}: {exc}") from exc
        trace.append(f)
        times.append(time.perf_counter() - t0)
        logger.debug("sweep %d: objective %.6f", it, f)
        if abs(f - f_prev) <= cfg.tol_outer * abs(f_prev):
            converged = True
            break
        f_prev = f
    elapsed = time.perf_counter() - t0
    report = FitReport(trace, it, elapsed, state, converged, elapsed_trace=times)
    return MapFit(state, report)

