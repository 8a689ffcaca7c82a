"""Dense layers, spectral normalization to a target Lipschitz constant, MLPs, Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import STREAM_INIT, make_rng

ACTIVATIONS = {"relu": ad.relu, "leaky-relu": ad.leaky_relu, "leaky_relu": ad.leaky_relu}


class DegenerateWeightError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, iteration: int):
        super().__init__(f"non-finite gradient for {name!r} at optimizer step {iteration}")
        self.name = name
        self.iteration = iteration


@dataclass
class SpectralNormState:
    k: float
    u: np.ndarray
    v: np.ndarray
    power_iters_train: int = 1
    power_iters_eval: int = 30

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("Lipschitz target must be positive")


@dataclass
class LinearLayer:
    weight: Tensor  # out x in
    bias: Tensor  # 1 x out
    spectral: SpectralNormState | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def effective_weight(self, train: bool = True) -> Tensor:
        if self.spectral is None:
            return self.weight
        sn = self.spectral
        iters = sn.power_iters_train if train else sn.power_iters_eval
        return spectral_normalize(self, iters, update=train)

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ad.ShapeError(f"layer expects width {self.in_features}, got input shape {x.shape}")
        w = self.effective_weight(train)
        ones = Tensor(np.ones((x.shape[0], 1)))
        return ad.matmul(x, ad.transpose(w)) + ad.matmul(ones, self.bias)


def _unit(x: np.ndarray) -> tuple[np.ndarray, float]:
    n = math.sqrt(float(x @ x))
    return (x / n if n > 0 else x), n


def power_iteration(w: np.ndarray, u: np.ndarray, v: np.ndarray, iters: int):
    """Returns (u, v, sigma_hat) after ``iters`` alternating updates."""
    for _ in range(iters):
        u, nu = _unit(w @ v)
        v, nv = _unit(w.T @ u)
        if nu == 0.0 or nv == 0.0:
            raise DegenerateWeightError("power iteration collapsed: weight annihilates the iterate")
    sigma = float(u @ w @ v)
    return u, v, sigma


def spectral_normalize(layer: LinearLayer, iters: int, update: bool = True) -> Tensor:
    """Effective weight W * k / sigma_hat with sigma_hat = u^T W v from power iteration.

    u and v are constants for the gradient; sigma_hat still depends on W.
    With ``update`` the refined u, v are stored back for warm starts.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sn = layer.spectral
    if sn is None:
        raise ValueError("layer has no spectral normalization state")
    w = layer.weight
    if not np.any(w.data):
        raise DegenerateWeightError("cannot spectrally normalize an all-zero weight")
    u, v, sigma = power_iteration(w.data, sn.u, sn.v, iters)
    if not sigma > 0:
        raise DegenerateWeightError(f"estimated spectral norm is {sigma}")
    if update:
        sn.u, sn.v = u, v
    sigma_t = ad.matmul(ad.matmul(Tensor(u[None, :]), w), Tensor(v[:, None]))
    return ad.div(ad.scale(w, sn.k), sigma_t)


@dataclass
class MLPConfig:
    layer_widths: Sequence[int]
    activation: str = "relu"
    # one target for every layer, one per layer, or None for no normalization
    lipschitz: float | Sequence[float | None] | None = None
    init_seed: int = 0
    power_iters_train: int = 1
    power_iters_eval: int = 30

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths (one layer)")
        if any(int(w) < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def targets(self) -> list[float | None]:
        n = len(self.layer_widths) - 1
        if self.lipschitz is None or isinstance(self.lipschitz, (int, float)):
            return [self.lipschitz] * n
        ks = list(self.lipschitz)
        if len(ks) != n:
            raise ValueError(f"expected {n} Lipschitz targets, got {len(ks)}")
        return ks


@dataclass
class MLP:
    layers: list[LinearLayer]
    activation: str = "relu"
    name: str = "mlp"

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x, train: bool = True) -> Tensor:
        return mlp_forward(self, x, train)

    def lipschitz_bound(self) -> float:
        """Product of per-layer targets (inf when any layer is unconstrained)."""
        out = 1.0
        for layer in self.layers:
            if layer.spectral is None:
                return float("inf")
            out *= layer.spectral.k
        return out


def mlp_forward(net: MLP, x, train: bool = True) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != net.in_features:
        raise ad.ShapeError(f"network expects batch x {net.in_features} input, got {x.shape}")
    act = ACTIVATIONS[net.activation]
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        h = layer(h, train)
        if i < last:
            h = act(h)
    return h


def init_mlp(config: MLPConfig, name: str = "mlp", rng: np.random.Generator | None = None) -> MLP:
    """He-normal weights, zero biases; deterministic per ``config.init_seed``."""
    rng = make_rng(config.init_seed, STREAM_INIT) if rng is None else rng
    widths = [int(w) for w in config.layer_widths]
    layers = []
    for i, (fan_in, fan_out, k) in enumerate(zip(widths[:-1], widths[1:], config.targets())):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        spectral = None
        if k is not None:
            u = _unit(rng.standard_normal(fan_out))[0]
            v = _unit(rng.standard_normal(fan_in))[0]
            spectral = SpectralNormState(
                float(k), u, v, config.power_iters_train, config.power_iters_eval
            )
        layers.append(
            LinearLayer(
                Tensor(w, requires_grad=True, name=f"{name}.{i}.weight"),
                Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.{i}.bias"),
                spectral,
            )
        )
    return MLP(layers, config.activation, name)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first: dict[int, np.ndarray] = field(default_factory=dict)
    second: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    """One bias-corrected Adam update, in place.  Missing gradients count as zero."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.name or f"param[{i}]", state.step_count + 1)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first.get(i)
        v = state.second.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first[i] = m
        state.second[i] = v
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Convenience wrapper that reads ``.grad`` off a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params])
