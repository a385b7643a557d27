"""Primal-dual interior-point Newton solver for simplex-constrained coefficient columns.

Each column subproblem is::

    minimize   0.5 h'Qh - b'h - sum_k alpha_k ln h_k
    subject to 1'h = 1,  h > 0

with ``Q = W'W``, ``b = W'x`` and ``alpha_k = sigma2 (alpha0_k - 1)``, which is
``sigma2`` times ``||Wh - x||^2 / (2 sigma2) - sum_k (alpha0_k - 1) ln h_k`` up
to a constant. Newton steps are taken on the perturbed KKT system::

    F(h, mu, s) = [Qh - mu 1 - b - s;  1'h - 1;  diag(h) s - alpha] = 0

The Jacobian's top-left block is ``Q = W'W`` (the derivative of the gradient
row). An ``X'X`` block would not even have the right shape, so it is not
used.

The solver works on a batch of columns at once: ``Q`` and ``alpha`` are shared,
``b`` and the iterates carry a leading batch axis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import InvariantViolationError, SolverConfig, SolverFailure

logger = logging.getLogger(__name__)

H_FLOOR = 1e-12
S_FLOOR = 1e-3
ARMIJO = 1e-4
# the objective-change exit only fires once the KKT residual is this small (absolute)
KKT_GUARD = 1e-7


class SingularJacobianError(SolverFailure):
    pass


@dataclass
class ColumnProblem:
    Q: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        K = self.Q.shape[0]
        if K < 1 or self.Q.shape != (K, K) or self.b.shape[-1] != K or self.alpha.shape != (K,):
            raise InvariantViolationError("conformable Q, b, alpha")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10, rtol=0):
            raise InvariantViolationError("Q symmetric")
        if np.any(self.alpha < 0):
            raise InvariantViolationError("alpha_k >= 0")

    @classmethod
    def from_column(cls, W, x, sigma2, alpha0):
        W = np.asarray(W, dtype=float)
        alpha = sigma2 * (np.asarray(alpha0, dtype=float) - 1.0)
        return cls(W.T @ W, W.T @ np.asarray(x, dtype=float), alpha, sigma2)

    @property
    def K(self):
        return self.Q.shape[0]


@dataclass
class IpIterate:
    h: np.ndarray
    mu: float | np.ndarray
    s: np.ndarray

    def copy(self):
        return IpIterate(np.array(self.h, dtype=float), np.array(self.mu, dtype=float), np.array(self.s, dtype=float))


def init_interior(K, alpha) -> IpIterate:
    """Uniform start; duals sized so that complementarity is roughly centred."""
    if K < 1:
        raise InvariantViolationError("K >= 1")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (K,))
    return IpIterate(np.full(K, 1.0 / K), 0.0, np.maximum(alpha * K, S_FLOOR))


def kkt_residual(p: ColumnProblem, it: IpIterate) -> np.ndarray:
    h, s = np.asarray(it.h, dtype=float), np.asarray(it.s, dtype=float)
    mu = np.asarray(it.mu, dtype=float)
    grad = h @ p.Q - mu[..., None] - p.b - s
    prim = h.sum(axis=-1, keepdims=True) - 1.0
    comp = h * s - p.alpha
    return np.concatenate([grad, prim, comp], axis=-1)


def kkt_jacobian(p: ColumnProblem, it: IpIterate) -> np.ndarray:
    h, s = np.asarray(it.h, dtype=float), np.asarray(it.s, dtype=float)
    K = p.K
    batch = h.shape[:-1]
    J = np.zeros(batch + (2 * K + 1, 2 * K + 1))
    J[..., :K, :K] = p.Q
    J[..., :K, K] = -1.0
    J[..., :K, K + 1:] = -np.eye(K)
    J[..., K, :K] = 1.0
    idx = np.arange(K)
    J[..., K + 1 + idx, idx] = s
    J[..., K + 1 + idx, K + 1 + idx] = h
    return J


def newton_direction(p: ColumnProblem, it: IpIterate) -> np.ndarray:
    """Solve ``J d = -F`` for the stacked direction ``(dh, dmu, ds)``.

    On a singular Jacobian the Q block is regularised by 1e-10 I and the solve
    retried once.
    """
    J = kkt_jacobian(p, it)
    rhs = -kkt_residual(p, it)
    try:
        return np.linalg.solve(J, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        K = p.K
        J[..., np.arange(K), np.arange(K)] += 1e-10
        try:
            return np.linalg.solve(J, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError("KKT Jacobian is singular") from exc


def barrier_objective(p: ColumnProblem, h) -> np.ndarray:
    """``0.5 h'Qh - b'h - sum alpha ln h``; +inf outside the positive orthant when alpha > 0."""
    h = np.asarray(h, dtype=float)
    quad = 0.5 * np.einsum("...i,ij,...j->...", h, p.Q, h) - np.einsum("...i,...i->...", p.b, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p.alpha > 0, p.alpha * np.log(h), 0.0)
    return quad - logs.sum(axis=-1)


def column_objective(W, x, sigma2, alpha0, h):
    """Per-column negative log posterior: ``||Wh - x||^2 / (2 sigma2) - sum (alpha0_k - 1) ln h_k``."""
    W = np.asarray(W, dtype=float)
    h = np.asarray(h, dtype=float)
    r = h @ W.T - np.asarray(x, dtype=float)
    am1 = np.asarray(alpha0, dtype=float) - 1.0
    with np.errstate(divide="ignore"):
        logs = np.where(am1 > 0, am1 * np.log(h), 0.0)
    return 0.5 * np.sum(r * r, axis=-1) / sigma2 - logs.sum(axis=-1)


def _max_step(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return ratio.min(axis=-1)


def _warm_iterate(p: ColumnProblem, H0):
    h = np.maximum(np.asarray(H0, dtype=float), 1e-8)
    h = h / h.sum(axis=-1, keepdims=True)
    s = np.maximum(p.alpha / h, S_FLOOR)
    mu = (h @ p.Q - p.b - s).mean(axis=-1)
    return IpIterate(h, mu, s)


@dataclass
class ColumnSolution:
    H: np.ndarray
    mu: np.ndarray
    s: np.ndarray
    converged: np.ndarray
    iterations: int


def solve_columns(p: ColumnProblem, H0=None, cfg: SolverConfig | None = None):
    """Solve a batch of column problems sharing ``Q`` and ``alpha``.

    ``p.b`` has shape (N, K). ``H0`` (N, K) warm-starts the iterates; otherwise
    every column starts from :func:`init_interior`.

    Returns a :class:`ColumnSolution`; its ``H`` has shape (N, K).
    """
    cfg = cfg or SolverConfig()
    K = p.K
    B = np.atleast_2d(p.b)
    N = B.shape[0]
    if K == 1:
        # the only feasible point; duals chosen to zero the KKT residual
        s1 = np.full((N, 1), p.alpha[0])
        return ColumnSolution(np.ones((N, 1)), p.Q[0, 0] - B[:, 0] - p.alpha[0], s1, np.ones(N, dtype=bool), 0)
    prob = ColumnProblem(p.Q, B, p.alpha, p.scale)
    if H0 is None:
        start = init_interior(K, p.alpha)
        it = IpIterate(np.tile(start.h, (N, 1)), np.zeros(N), np.tile(start.s, (N, 1)))
    else:
        it = _warm_iterate(prob, np.atleast_2d(H0))

    bscale = 1.0 + np.abs(B).max(axis=-1) + np.abs(p.alpha).max()
    phi = barrier_objective(prob, it.h)
    active = np.ones(N, dtype=bool)
    converged = np.zeros(N, dtype=bool)
    n_iter = 0
    for n_iter in range(1, cfg.ip_max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            n_iter -= 1
            break
        sub = ColumnProblem(prob.Q, B[idx], prob.alpha, prob.scale)
        cur = IpIterate(it.h[idx], it.mu[idx], it.s[idx])
        d = newton_direction(sub, cur)
        dh, dmu, ds = d[:, :K], d[:, K], d[:, K + 1:]

        rho_max = np.minimum(_max_step(cur.h, dh), _max_step(cur.s, ds))
        rho = np.minimum(1.0, cfg.ip_eta * rho_max)

        # descent safeguard on the barrier objective
        grad = cur.h @ prob.Q - B[idx] - np.where(prob.alpha > 0, prob.alpha / cur.h, 0.0)
        slope = np.einsum("ij,ij->i", grad, dh)
        phi0 = phi[idx]
        tol_phi = 1e-12 * (1.0 + np.abs(phi0))
        for _ in range(40):
            h_try = cur.h + rho[:, None] * dh
            phi_try = barrier_objective(sub, h_try)
            bad = ~(phi_try <= phi0 + ARMIJO * rho * np.minimum(slope, 0.0) + tol_phi)
            if not bad.any():
                break
            rho = np.where(bad, 0.5 * rho, rho)
        else:
            rho = np.where(bad, 0.0, rho)
            phi_try = np.where(bad, phi0, phi_try)

        h_new = np.maximum(cur.h + rho[:, None] * dh, H_FLOOR)
        s_new = np.maximum(cur.s + rho[:, None] * ds, 1e-300)
        it.h[idx] = h_new
        it.mu[idx] = cur.mu + rho * dmu
        it.s[idx] = s_new
        phi_new = barrier_objective(sub, h_new)
        dphi = np.abs(phi0 - phi_new)
        phi[idx] = phi_new

        res = np.linalg.norm(kkt_residual(sub, IpIterate(h_new, it.mu[idx], s_new)), axis=1)
        small_change = dphi <= cfg.ip_tol * (1.0 + np.abs(phi_new))
        done = (res <= cfg.ip_tol * bscale[idx]) | (small_change & (res <= KKT_GUARD))
        done |= rho == 0.0
        converged[idx[done & (rho > 0)]] = True
        converged[idx[res <= cfg.ip_tol * bscale[idx]]] = True
        active[idx[done]] = False

    H = it.h / it.h.sum(axis=1, keepdims=True)
    if not converged.all():
        logger.debug("interior point: %d of %d columns not converged", (~converged).sum(), N)
    return ColumnSolution(H, it.mu, it.s, converged, n_iter)


def solve_column(W, x_col, sigma2, alpha0, init=None, cfg: SolverConfig | None = None, return_info=False):
    """Optimal coefficient column for one observation ``x_col`` given basis ``W``."""
    if not sigma2 > 0:
        raise InvariantViolationError("sigma2 > 0")
    alpha0 = np.asarray(alpha0, dtype=float)
    if np.any(alpha0 < 1):
        raise InvariantViolationError("alpha0_k >= 1")
    p = ColumnProblem.from_column(W, x_col, sigma2, alpha0)
    H0 = None if init is None else np.asarray(init, dtype=float)[None, :]
    sol = solve_columns(p, H0, cfg)
    if return_info:
        return sol.H[0], bool(sol.converged[0]), sol.iterations
    return sol.H[0]
