"""Synthetic multi-source benchmark with block-structured basis and Bernoulli memberships."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import InvariantViolationError, MultiViewData


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters.

    ``L`` is the number of nonzeros in each of the first K-1 basis columns and
    ``coh`` the overlap between consecutive columns, so ``M = L + (K-2)(L-coh)``.
    """

    a: float = 2.0
    C: int = 3
    K: int = 5
    L: int = 30
    coh: int = 5
    N: tuple = (120, 120, 120)
    p: float = 0.3
    sigmas: tuple = (1.0, 2.5, 4.0)
    seed: int = 0

    def __post_init__(self):
        N = self.N
        if np.isscalar(N):
            N = (int(N),) * self.C
        object.__setattr__(self, "N", tuple(int(n) for n in N))
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if self.K < 2:
            raise InvariantViolationError("K >= 2", f"got {self.K}")
        if not 0 < self.coh < self.L:
            raise InvariantViolationError("0 < coh < L", f"got coh={self.coh}, L={self.L}")
        if not 0 < self.p < 1:
            raise InvariantViolationError("0 < p < 1", f"got {self.p}")
        if len(self.N) != self.C or len(self.sigmas) != self.C:
            raise InvariantViolationError("one N and one sigma per source")
        if any(n < 1 for n in self.N) or any(s < 0 for s in self.sigmas):
            raise InvariantViolationError("N_c >= 1 and sigma_c >= 0")
        if self.M < 1:
            raise InvariantViolationError("M >= 1")

    @property
    def M(self) -> int:
        return self.L + (self.K - 2) * (self.L - self.coh)

    def replace(self, **changes) -> "SynthSpec":
        d = asdict(self)
        d.update(changes)
        return SynthSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["N"] = list(self.N)
        d["sigmas"] = list(self.sigmas)
        return d

    @classmethod
    def small_scale(cls, sigma3=4.0, seed=0):
        return cls(a=2.0, C=3, K=5, L=30, coh=5, N=(120,) * 3, p=0.3, sigmas=(1.0, 2.5, sigma3), seed=seed)

    @classmethod
    def large_scale(cls, sigma3=4.0, seed=0):
        return cls(a=1.5, C=3, K=10, L=120, coh=10, N=(1000,) * 3, p=0.1, sigmas=(1.0, 2.5, sigma3), seed=seed)


@dataclass
class SynthDataset:
    data: MultiViewData
    W_true: np.ndarray
    H_true: list
    labels: list
    sigmas_true: np.ndarray
    spec: SynthSpec | None = field(default=None, repr=False)


def gen_basis(spec: SynthSpec) -> np.ndarray:
    W = np.zeros((spec.M, spec.K))
    step = spec.L - spec.coh
    for k in range(spec.K - 1):
        W[k * step: k * step + spec.L, k] = spec.a
    return W


def gen_coefficients(spec: SynthSpec, c, rng=None):
    """Return ``(H_true_c, labels_c)``; labels are the support before normalisation."""
    if rng is None:
        rng = np.random.default_rng([spec.seed, c])
    K, n = spec.K, spec.N[c]
    S = np.zeros((K, n))
    S[:K - 1] = rng.random((K - 1, n)) < spec.p
    S[K - 1, S.sum(axis=0) == 0] = 1.0
    return S / S.sum(axis=0), S.astype(np.int8)


def gen_dataset(spec: SynthSpec) -> SynthDataset:
    W = gen_basis(spec)
    H, labels, X = [], [], []
    for c in range(spec.C):
        rng = np.random.default_rng([spec.seed, c])
        h, lab = gen_coefficients(spec, c, rng)
        noise = rng.standard_normal((spec.M, spec.N[c])) * spec.sigmas[c]
        H.append(h)
        labels.append(lab)
        X.append(W @ h + noise)
    return SynthDataset(MultiViewData(X), W, H, labels, np.array(spec.sigmas), spec)
