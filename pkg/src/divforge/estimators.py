"""Logistic (GAN-type) objective and the KL / MI estimators built on it.

A discriminator trained to maximise

    mean log sigmoid(f(x_p)) + mean log sigmoid(-f(x_q))

converges to f = log p/q, so averaging f over samples of p estimates KL(p||q).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GaussianSpec, log_density
from .nn import MLP
from .rkhs import RKHSDiscriminator


class NonFiniteObjectiveError(FloatingPointError):
    pass


class PlainDiscriminator:
    """An MLP mapping inputs straight to a scalar score, without complexity control."""

    kind = "plain-mlp"

    def __init__(self, net: MLP):
        if net.out_features != 1:
            raise ValueError("plain discriminator must output a scalar")
        self.net = net

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def scores(self, x, train: bool = True) -> tuple[Tensor, None]:
        return self.net(x, train), None

    def evaluate(self, x, n_draws: int = 1, rng=None) -> np.ndarray:
        with ad.no_grad():
            return self.net(ad.as_tensor(x), train=False).data[:, 0]


Discriminator = PlainDiscriminator | RKHSDiscriminator


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def for_kind(self, kind: str) -> ObjectiveConfig:
        # no RKHS norm to penalise on a plain network
        return self if kind == "rkhs" else ObjectiveConfig(0.0)


@dataclass(frozen=True)
class KLEstimate:
    value: float
    n_eval_samples: int
    n_w_draws: int = 0

    def __float__(self):
        return self.value


def _check_finite(*tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteObjectiveError("discriminator produced non-finite values")


def gan_logistic_objective(f_p: Tensor, f_q: Tensor) -> Tensor:
    f_p, f_q = ad.as_tensor(f_p), ad.as_tensor(f_q)
    if f_p.size == 0 or f_q.size == 0:
        raise ValueError("both batches must be non-empty")
    _check_finite(f_p, f_q)
    # log(1 - sigmoid(f)) == log sigmoid(-f)
    return ad.mean(ad.log_sigmoid(f_p)) + ad.mean(ad.log_sigmoid(ad.scale(f_q, -1.0)))


def regularized_objective(f_p: Tensor, f_q: Tensor, g_norm, config: ObjectiveConfig) -> Tensor:
    base = gan_logistic_objective(f_p, f_q)
    if g_norm is None or config.lam == 0.0:
        return base
    g_norm = ad.as_tensor(g_norm)
    if g_norm.item() < 0:
        raise ValueError("g_norm must be non-negative")
    return base - ad.scale(g_norm, config.lam)


def kl_from_discriminator(f_values, n_w_draws: int = 0) -> KLEstimate:
    f = np.asarray(f_values.data if isinstance(f_values, Tensor) else f_values, dtype=np.float64).reshape(-1)
    if f.size < 1:
        raise ValueError("need at least one sample from p")
    return KLEstimate(float(f.mean()), int(f.size), n_w_draws)


def estimate_kl(disc: Discriminator, x_p: np.ndarray, n_w_draws: int = 10,
                rng: np.random.Generator | None = None) -> KLEstimate:
    """KL_m over a whole sample pool of p."""
    f = disc.evaluate(x_p, n_w_draws, rng)
    return kl_from_discriminator(f, n_w_draws if disc.kind == "rkhs" else 0)


def optimal_f_target(p: GaussianSpec, q: GaussianSpec, x):
    """log p(x) - log q(x), the maximiser of the population logistic objective."""
    return np.subtract(log_density(p, x), log_density(q, x))


def mi_pairing(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint rows (x_i, y_i) and all n^2 - n product-of-marginals rows (x_i, y_j), i != j."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("x and y batches differ in length")
    if n < 2:
        raise ValueError("need at least 2 pairs to form marginal samples")
    joint = np.hstack([x, y])
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    marginal = np.hstack([x[ii], y[jj]])
    return joint, marginal


def mi_estimate(disc: Discriminator, x: np.ndarray, y: np.ndarray, n_w_draws: int = 10,
                rng: np.random.Generator | None = None) -> KLEstimate:
    """Mean discriminator output over joint pairs (KL of joint vs product of marginals)."""
    joint, _ = mi_pairing(x, y)
    return estimate_kl(disc, joint, n_w_draws, rng)
