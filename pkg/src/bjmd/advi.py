"""Mean-field Gaussian stochastic variational inference for the original model.

Latents are mapped to an unconstrained vector ``xi``:

* W entries: identity,
* each coefficient column: stick-breaking from K-1 reals onto the open simplex,
  ``z_k = logistic(y_k)``, ``h_k = z_k * prod_{i<k} (1 - z_i)``, last entry the remainder,
* each noise variance: ``sigma2 = exp(u)``.

The variational family is a diagonal Gaussian over ``xi``; the ELBO gradient is
estimated with the reparameterisation ``xi = m + exp(omega) * eps`` and the
closed-form gradient of the log joint (plus log-Jacobian) in ``xi``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .core import (
    BJMDError,
    FitReport,
    Hyperparams,
    ModelState,
    MultiViewData,
    SolverConfig,
    Z_FLOOR,
)
from .map_solver import update_z

logger = logging.getLogger(__name__)

LOG_STD_BOUND = 20.0
LN_2PI = np.log(2.0 * np.pi)


class EstimatorError(BJMDError, FloatingPointError):
    pass


class DivergenceError(BJMDError, FloatingPointError):
    pass


# -- stick-breaking -----------------------------------------------------------

def _log_sigmoid(y):
    return -np.logaddexp(0.0, -y)


def stick_breaking(y):
    """Map (..., K-1) reals to (..., K) simplex points. Returns ``(h, log_h, log_det_jac)``."""
    y = np.asarray(y, dtype=float)
    log_z = _log_sigmoid(y)
    log_1mz = _log_sigmoid(-y)
    # log of the stick left before piece k, k = 0..K-1
    log_rem = np.concatenate([np.zeros(y.shape[:-1] + (1,)), np.cumsum(log_1mz, axis=-1)], axis=-1)
    log_h = log_rem.copy()
    log_h[..., :-1] += log_z
    log_det = (log_z + log_1mz + log_rem[..., :-1]).sum(axis=-1)
    return np.exp(log_h), log_h, log_det


def inverse_stick_breaking(h):
    """Inverse of :func:`stick_breaking` for strictly positive simplex points (..., K)."""
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise ValueError("stick-breaking inverse needs strictly positive simplex points")
    K = h.shape[-1]
    # remaining stick: 1, 1-h0, 1-h0-h1, ...; computed from the tail for accuracy
    tail = np.cumsum(h[..., ::-1], axis=-1)[..., ::-1]
    # logit(z) = log h_k - log(rem_k - h_k) = log h_k - log(tail_{k+1})
    return np.log(h[..., :K - 1]) - np.log(tail[..., 1:])


def stick_breaking_backward(y, h, g_lik, alpha0):
    """Gradient wrt ``y`` of ``g_lik . h + sum (alpha0-1) ln h + log|J|``.

    ``g_lik`` (..., K) is the gradient of the smooth part of the log density wrt
    ``h``; the Dirichlet log terms and the log-Jacobian are differentiated in
    closed form so that no ``1/h`` appears.
    """
    K = h.shape[-1]
    z = expit(y)
    gh = g_lik * h
    # sum over pieces strictly after k (k = 0..K-2)
    after = np.cumsum(gh[..., ::-1], axis=-1)[..., ::-1][..., 1:]
    am1 = np.asarray(alpha0, dtype=float) - 1.0
    a_after = np.cumsum(am1[::-1])[::-1][1:]
    k = np.arange(K - 1)
    return (h[..., :K - 1] * (1.0 - z) * g_lik[..., :K - 1] - z * after
            + am1[:K - 1] * (1.0 - z) - z * a_after
            + 1.0 - (K - k) * z)


# -- coordinate layout --------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    M: int
    K: int
    N: tuple

    @property
    def C(self):
        return len(self.N)

    @property
    def n_w(self):
        return self.M * self.K

    @property
    def h_offsets(self):
        offs = [self.n_w]
        for n in self.N:
            offs.append(offs[-1] + n * (self.K - 1))
        return offs

    @property
    def size(self):
        return self.h_offsets[-1] + self.C

    def split(self, xi):
        """Views ``(W, Y list, u)``; leading batch dimensions of ``xi`` are kept."""
        lead = xi.shape[:-1]
        W = xi[..., : self.n_w].reshape(lead + (self.M, self.K))
        offs = self.h_offsets
        Y = [xi[..., offs[c]: offs[c + 1]].reshape(lead + (n, self.K - 1)) for c, n in enumerate(self.N)]
        u = xi[..., offs[-1]:]
        return W, Y, u


def to_unconstrained(state: ModelState) -> np.ndarray:
    """Flatten ``(W, H, sigma2)`` to unconstrained coordinates; Z is not a VI latent."""
    parts = [np.asarray(state.W, dtype=float).ravel()]
    for h in state.H:
        h = np.asarray(h, dtype=float)
        if np.any(h <= 0):
            raise ValueError("coefficient on the simplex boundary has no unconstrained image")
        parts.append(inverse_stick_breaking(h.T).ravel())
    sigma2 = np.asarray(state.sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    parts.append(np.log(sigma2))
    return np.concatenate(parts)


def to_constrained(xi, layout: Layout):
    """Inverse of :func:`to_unconstrained`: returns ``(W, H list, sigma2)``."""
    W, Y, u = layout.split(np.asarray(xi, dtype=float))
    H = [stick_breaking(y)[0].T for y in Y]
    return W.copy(), H, np.exp(u)


def log_det_jacobian(xi, layout: Layout) -> float:
    _, Y, u = layout.split(np.asarray(xi, dtype=float))
    return float(sum(stick_breaking(y)[2].sum() for y in Y) + u.sum())


# -- target density -----------------------------------------------------------

class Target:
    """Log joint of the model in unconstrained coordinates, with its gradient."""

    def __init__(self, data: MultiViewData, hyper: Hyperparams):
        self.data = data
        self.hyper = hyper
        self.layout = Layout(data.M, hyper.K, data.N)
        a = hyper.alpha0
        self._dir_norm = gammaln(a.sum()) - gammaln(a).sum()
        self._ig_norm = hyper.a0 * np.log(hyper.b0) - gammaln(hyper.a0)

    def logp(self, xi, grad=True):
        """Log joint plus log-Jacobian at ``xi`` (shape ``(D,)`` or a batch ``(S, D)``)."""
        xi = np.asarray(xi, dtype=float)
        lay, hyp = self.layout, self.hyper
        W, Y, u = lay.split(xi)
        lam = hyp.lam
        lp = -lay.n_w * np.log(2.0 * lam) - np.abs(W).sum(axis=(-2, -1)) / lam
        gW = -np.sign(W) / lam if grad else None
        gY, gu = [], np.zeros(u.shape)
        am1 = hyp.alpha0 - 1.0
        for c, x in enumerate(self.data.sources):
            h, log_h, log_det = stick_breaking(Y[c])  # (..., N_c, K)
            uc = u[..., c]
            s2 = np.exp(uc)
            R = x - W @ np.swapaxes(h, -1, -2)
            sse = (R * R).sum(axis=(-2, -1))
            n_obs = x.size
            lp = lp + Y[c].shape[-2] * self._dir_norm + (log_h @ am1).sum(axis=-1)
            lp = lp - 0.5 * n_obs * (LN_2PI + uc) - sse / (2.0 * s2)
            lp = lp + self._ig_norm - (hyp.a0 + 1.0) * uc - hyp.b0 / s2
            lp = lp + log_det.sum(axis=-1) + uc
            if grad:
                inv = (1.0 / s2)[..., None, None]
                gW = gW + (R @ h) * inv
                g_lik = (np.swapaxes(R, -1, -2) @ W) * inv
                gY.append(stick_breaking_backward(Y[c], h, g_lik, hyp.alpha0))
                gu[..., c] = -0.5 * n_obs + sse / (2.0 * s2) - (hyp.a0 + 1.0) + hyp.b0 / s2 + 1.0
        if xi.ndim == 1:
            lp = float(lp)
        if not grad:
            return lp
        lead = xi.shape[:-1]
        g = np.concatenate([gW.reshape(lead + (-1,))] + [gy.reshape(lead + (-1,)) for gy in gY] + [gu], axis=-1)
        return lp, g


# -- variational parameters ---------------------------------------------------

@dataclass
class VariationalParams:
    mean: np.ndarray
    log_std: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.log_std = np.clip(self.log_std, -LOG_STD_BOUND, LOG_STD_BOUND)

    def point_estimate(self) -> ModelState:
        W, H, sigma2 = to_constrained(self.mean, self.layout)
        return ModelState(W, update_z(W, 1.0, Z_FLOOR), H, sigma2)

    def entropy(self):
        return float(self.log_std.sum() + 0.5 * self.mean.size * (1.0 + LN_2PI))


@dataclass
class GradientEstimate:
    grad_mean: np.ndarray
    grad_log_std: np.ndarray
    elbo: float
    dropped: int


def elbo_gradient_estimate(params: VariationalParams, target, S, rng, batch=4096) -> GradientEstimate:
    """Reparameterised Monte Carlo estimate of the ELBO and its gradient.

    ``target.logp`` must accept a batch of coordinate vectors. Non-finite
    sample contributions are dropped; if every sample is dropped the estimate
    is unusable and :class:`EstimatorError` is raised.
    """
    if S < 1:
        raise ValueError("need at least one sample")
    std = np.exp(params.log_std)
    gm = np.zeros_like(params.mean)
    ge = np.zeros_like(params.mean)
    total = 0.0
    kept = 0
    for start in range(0, S, batch):
        eps = rng.standard_normal((min(batch, S - start), params.mean.size))
        xi = params.mean + std * eps
        with np.errstate(all="ignore"):
            lp, g = target.logp(xi)
        ok = np.isfinite(lp) & np.all(np.isfinite(g), axis=1)
        gm += g[ok].sum(axis=0)
        ge += (g[ok] * eps[ok]).sum(axis=0)
        total += float(lp[ok].sum())
        kept += int(ok.sum())
    if kept == 0:
        raise EstimatorError("every Monte Carlo sample was non-finite")
    gm /= kept
    gs = ge / kept * std + 1.0
    return GradientEstimate(gm, gs, total / kept + params.entropy(), S - kept)


class AdaptiveStep:
    """Per-coordinate adaptive step: ``eta * t^(-1/2) / (1 + sqrt(s_t))`` with
    ``s_t`` an exponential moving average (weight 0.1) of squared gradients."""

    def __init__(self, eta=0.1, tau=1.0, decay=0.1):
        self.eta, self.tau, self.decay = eta, tau, decay
        self.s = None
        self.t = 0

    def __call__(self, g):
        self.t += 1
        g2 = g * g
        self.s = g2 if self.s is None else self.decay * g2 + (1.0 - self.decay) * self.s
        return self.eta * self.t ** (-0.5 + 1e-16) / (self.tau + np.sqrt(self.s)) * g


@dataclass
class ViFit:
    params: VariationalParams
    extracted: ModelState
    report: FitReport


def relative_h_change(H_new, H_old):
    """Largest squared relative Frobenius change over sources, in percent."""
    return 100.0 * max(float(np.sum((a - b) ** 2) / np.sum(b ** 2)) for a, b in zip(H_new, H_old))


def init_params(data: MultiViewData, hyper: Hyperparams, rng, init_log_std=-2.0) -> VariationalParams:
    K = hyper.K
    W = rng.standard_normal((data.M, K))
    H = [np.maximum(rng.dirichlet(hyper.alpha0, size=n).T, 1e-8) for n in data.N]
    H = [h / h.sum(axis=0) for h in H]
    sigma2 = np.array([max(float(np.var(x)), 1e-6) for x in data.sources])
    mean = to_unconstrained(ModelState(W, np.ones_like(W), H, sigma2))
    return VariationalParams(mean, np.full(mean.size, float(init_log_std)), Layout(data.M, K, data.N))


def fit_advi(data: MultiViewData, hyper: Hyperparams, config: SolverConfig | None = None, seed=None) -> ViFit:
    """Stochastic gradient ascent on the ELBO until the coefficient matrices settle.

    Every ``check_interval`` iterations the variational means are mapped to H
    and the largest squared relative change since the previous check, in
    percent, is compared with ``tol_outer``.
    """
    cfg = config or SolverConfig.advi_defaults()
    seed = cfg.rng_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    target = Target(data, hyper)
    params = init_params(data, hyper, rng, cfg.init_log_std)
    step_m = AdaptiveStep(cfg.step_size)
    step_s = AdaptiveStep(cfg.step_size)

    t0 = time.perf_counter()
    elbo_trace, change_trace, check_iters, times = [], [], [], []
    H_prev = params.point_estimate().H
    nan_checks = 0
    dropped = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        try:
            est = elbo_gradient_estimate(params, target, cfg.mc_samples, rng)
        except EstimatorError:
            elbo_trace.append(float("nan"))
            dropped += cfg.mc_samples
        else:
            dropped += est.dropped
            elbo_trace.append(est.elbo)
            params.mean = params.mean + step_m(est.grad_mean)
            params.log_std = np.clip(params.log_std + step_s(est.grad_log_std), -LOG_STD_BOUND, LOG_STD_BOUND)
        times.append(time.perf_counter() - t0)

        if it % cfg.check_interval == 0:
            nan_checks = nan_checks + 1 if not np.isfinite(elbo_trace[-1]) else 0
            if nan_checks >= 10:
                raise DivergenceError(f"ELBO estimate non-finite at 10 consecutive checks (iteration {it})")
            H_now = params.point_estimate().H
            change = relative_h_change(H_now, H_prev)
            change_trace.append(change)
            check_iters.append(it)
            H_prev = H_now
            logger.debug("iter %d: elbo %.3f, H change %.3g", it, elbo_trace[-1], change)
            # a stalled run (no finite samples) leaves H unchanged; that is not convergence
            if change < cfg.tol_outer and it >= cfg.min_outer_iters and nan_checks == 0:
                converged = True
                break

    extracted = params.point_estimate()
    extracted.Z = update_z(extracted.W, hyper.lam, cfg.z_floor)
    report = FitReport(
        elbo_trace, it, time.perf_counter() - t0, extracted, converged, elapsed_trace=times,
        extra={"h_change": change_trace, "check_iterations": check_iters, "dropped_samples": dropped},
    )
    return ViFit(params, extracted, report)
