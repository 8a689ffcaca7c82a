"""Discriminator built as f(x) = integral of g(w) phi(x)^T w over Gaussian w.

The integral is replaced by D random features w_k ~ N(0, 2*gamma*I):

    f(x) = sqrt(2/D) / D * sum_k g(w_k) * phi(x)^T w_k

and the squared RKHS norm of f is bounded by mean_k g(w_k)^2, which is the
quantity penalized during training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import STREAM_FEATURES, make_rng
from .nn import MLP

W_POLICIES = ("resample", "fixed")


@dataclass
class ForwardResult:
    f_values: Tensor  # batch x 1
    g_norm: Tensor  # scalar, mean_k g(w_k)^2


class RKHSDiscriminator:
    kind = "rkhs"

    def __init__(self, phi: MLP, g: MLP, gamma: float = 1.0, D: int = 500,
                 w_policy: str = "resample", w_seed: int = 0):
        if phi.out_features != g.in_features:
            raise ValueError(f"feature width mismatch: phi gives {phi.out_features}, g takes {g.in_features}")
        if g.out_features != 1:
            raise ValueError("g must map to a scalar")
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        if D < 1:
            raise ValueError("D must be >= 1")
        if w_policy not in W_POLICIES:
            raise ValueError(f"w_policy must be one of {W_POLICIES}")
        self.phi = phi
        self.g = g
        self.gamma = float(gamma)
        self.D = int(D)
        self.w_policy = w_policy
        self.w_seed = w_seed
        self.rng = make_rng(w_seed, STREAM_FEATURES)
        self.fixed_w = sample_w(self, self.rng) if w_policy == "fixed" else None

    @property
    def feature_dim(self) -> int:
        return self.phi.out_features

    def parameters(self) -> list[Tensor]:
        return self.phi.parameters() + self.g.parameters()

    def next_w(self) -> np.ndarray:
        return self.fixed_w if self.w_policy == "fixed" else sample_w(self, self.rng)

    def scores(self, x, train: bool = True) -> tuple[Tensor, Tensor]:
        res = forward(self, x, self.next_w(), train)
        return res.f_values, res.g_norm

    def evaluate(self, x, n_draws: int = 10, rng: np.random.Generator | None = None) -> np.ndarray:
        """f(x) averaged over ``n_draws`` feature draws (one draw when w is fixed)."""
        with ad.no_grad():
            feats = self.phi(ad.as_tensor(x), train=False).data
            if self.w_policy == "fixed":
                draws = [self.fixed_w]
            else:
                src = self.rng if rng is None else rng
                draws = [sample_w(self, src) for _ in range(n_draws)]
            readout = np.zeros(self.feature_dim)
            for w in draws:
                gw = self.g(Tensor(w), train=False).data[:, 0]
                readout += w.T @ gw
            readout /= len(draws)
        return _feature_scale(self.D) * (feats @ readout)


def _feature_scale(D: int) -> float:
    return math.sqrt(2.0 / D) / D


def sample_w(disc: RKHSDiscriminator, rng: np.random.Generator) -> np.ndarray:
    """D x d matrix with i.i.d. N(0, 2*gamma) entries."""
    return math.sqrt(2.0 * disc.gamma) * rng.standard_normal((disc.D, disc.feature_dim))


def forward(disc: RKHSDiscriminator, x, w: np.ndarray, train: bool = True) -> ForwardResult:
    x = ad.as_tensor(x)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != disc.feature_dim:
        raise ad.ShapeError(f"w must be D x {disc.feature_dim}, got {w.shape}")
    D = w.shape[0]
    feats = disc.phi(x, train)
    gw = disc.g(Tensor(w), train)  # D x 1
    # sum_k g_k phi^T w_k == phi^T (W^T g): contract over k first
    readout = ad.matmul(Tensor(w.T), gw)
    f = ad.scale(ad.matmul(feats, readout), _feature_scale(D))
    return ForwardResult(f, ad.mean(ad.square(gw)))


def rkhs_norm_bound(result: ForwardResult) -> float:
    return float(result.g_norm.item())


def kernel(disc: RKHSDiscriminator, x, t) -> float:
    with ad.no_grad():
        pts = np.vstack([np.atleast_2d(x), np.atleast_2d(t)])
        feats = disc.phi(Tensor(pts), train=False).data
    return disc.gamma * float(feats[0] @ feats[1])


def gram_matrix(disc: RKHSDiscriminator, points) -> np.ndarray:
    with ad.no_grad():
        feats = disc.phi(Tensor(np.atleast_2d(points)), train=False).data
    return disc.gamma * (feats @ feats.T)


def kernel_complexity(disc: RKHSDiscriminator, points) -> float:
    """Largest kernel value over all pairs of ``points``, diagonal included."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0 or pts.size == 0:
        raise ValueError("kernel complexity needs at least one point")
    return float(gram_matrix(disc, pts).max())
