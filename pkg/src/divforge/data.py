"""Seeded Gaussian samplers with closed-form KL divergence and mutual information.

All quantities are in nats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

# stream ids keep independent consumers of one seed from overlapping
STREAM_DATA_P = 1
STREAM_DATA_Q = 2
STREAM_INIT = 3
STREAM_BATCHES = 4
STREAM_FEATURES = 5
STREAM_EVAL = 6


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and an optional stream path."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {n}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        if np.any(np.diag(chol) <= 1e-12):
            raise ValueError("covariance is numerically singular")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "cholesky", chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def standard(cls, dim: int, mean=None) -> GaussianSpec:
        mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
        return cls(mu, np.eye(dim))

    def log_det(self) -> float:
        return 2.0 * float(np.log(np.diag(self.cholesky)).sum())


@dataclass(frozen=True)
class CorrelatedPairSpec:
    """(x, y) with x, y ~ N(0, I_d) and corr(x_i, y_i) = rho, independent across i."""

    dim: int
    rho: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not abs(self.rho) < 1.0:
            raise ValueError("|rho| must be < 1")

    def sample(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = rng.standard_normal((count, self.dim))
        eps = rng.standard_normal((count, self.dim))
        y = self.rho * x + math.sqrt(1.0 - self.rho**2) * eps
        return x, y


def sample_gaussian(spec: GaussianSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    z = rng.standard_normal((count, spec.dim))
    return spec.mean + z @ spec.cholesky.T


def _solve_lower(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    return solve_triangular(chol, b, lower=True)


def log_density(spec: GaussianSpec, x) -> np.ndarray | float:
    """Multivariate normal log-density; accepts one point or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    z = _solve_lower(spec.cholesky, (X - spec.mean).T)
    maha = np.sum(z * z, axis=0)
    out = -0.5 * (spec.dim * math.log(2.0 * math.pi) + spec.log_det() + maha)
    return float(out[0]) if single else out


def analytic_kl(p: GaussianSpec, q: GaussianSpec) -> float:
    """KL(p || q) between two multivariate normals."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    a = _solve_lower(q.cholesky, p.cholesky)
    trace_term = float(np.sum(a * a))
    b = _solve_lower(q.cholesky, q.mean - p.mean)
    maha = float(b @ b)
    return 0.5 * (trace_term + maha - p.dim + q.log_det() - p.log_det())


def analytic_mi(spec: CorrelatedPairSpec) -> float:
    return -0.5 * spec.dim * math.log1p(-spec.rho**2)


def rho_for_mi(dim: int, target_mi: float) -> float:
    if target_mi < 0:
        raise ValueError("target MI must be non-negative")
    return math.sqrt(-math.expm1(-2.0 * target_mi / dim))


def gaussian_pair_for_kl(target_kl: float, dim: int = 2) -> tuple[GaussianSpec, GaussianSpec]:
    """Identity-covariance pair whose means differ by sqrt(2 * target_kl) along the first axis."""
    if target_kl < 0:
        raise ValueError("target KL must be non-negative")
    if dim < 1:
        raise ValueError("dim must be positive")
    offset = np.zeros(dim)
    offset[0] = math.sqrt(2.0 * target_kl)
    return GaussianSpec.standard(dim, offset), GaussianSpec.standard(dim)
