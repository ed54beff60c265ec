"""Learned input-dependent noise (meta-dropout) and the ablation noise families.

The multiplicative generator perturbs each hidden pre-activation ``f`` as
``f * z`` with ``z = softplus(mu(h_prev) + eps)``, ``eps ~ N(0, I)``, where
``mu`` is an affine map of the previous layer's output with its own
parameters ``phi``.  The mean path ``z_bar = softplus(mu(h_prev))`` is used
wherever noise must be deterministic (test examples).

Random numbers come from a :class:`RandomSource` so that tests can replay
them exactly (common random numbers) or force them to constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .nn import LayerSpec, Network, NoisePlan, affine

MODES = (
    "none",
    "mult_softplus",
    "additive",
    "fixed_gaussian",
    "independent_gaussian",
    "weight_gaussian",
    "deterministic",
    "learned_variance",
)
# Modes whose noise multiplies pre-activations through a softplus.
MULTIPLICATIVE = ("mult_softplus", "fixed_gaussian", "independent_gaussian", "deterministic",
                  "learned_variance")
STOCHASTIC = ("mult_softplus", "additive", "fixed_gaussian", "independent_gaussian",
              "weight_gaussian", "learned_variance")
PREFIX = "noise/"


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


# ----------------------------------------------------------- random sources


def episode_stream(seed: int, index: int, tag: int = 0) -> np.random.Generator:
    """Counter-based generator for one episode, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), int(tag)])))


class RandomSource:
    """Random draws, optionally one independent stream per episode.

    With a list of generators, the leading axis of every requested shape
    indexes episodes and each slice comes from that episode's own stream.
    """

    def __init__(self, streams):
        self.streams = streams

    def _draw(self, fn, shape) -> np.ndarray:
        shape = tuple(shape)
        if isinstance(self.streams, np.random.Generator):
            return fn(self.streams, shape)
        if not shape or shape[0] != len(self.streams):
            raise ValueError(f"shape {shape} does not lead with {len(self.streams)} episodes")
        return np.stack([fn(r, shape[1:]) for r in self.streams])

    def normal(self, shape) -> np.ndarray:
        return self._draw(lambda r, s: r.standard_normal(s), shape)

    def uniform(self, shape) -> np.ndarray:
        return self._draw(lambda r, s: r.random(s), shape)

    def beta(self, a: float, b: float, shape) -> np.ndarray:
        return self._draw(lambda r, s: r.beta(a, b, s), shape)


class ConstantSource:
    """Deterministic stand-in: every draw is a constant (e.g. ``eps = 0``)."""

    def __init__(self, normal: float = 0.0, uniform: float = 0.0, beta: float = 0.5):
        self._normal, self._uniform, self._beta = normal, uniform, beta

    def normal(self, shape):
        return np.full(tuple(shape), self._normal)

    def uniform(self, shape):
        return np.full(tuple(shape), self._uniform)

    def beta(self, a, b, shape):
        return np.full(tuple(shape), self._beta)


class RecordingSource:
    """Pass draws through from ``inner`` and remember them for replay."""

    def __init__(self, inner):
        self.inner = inner
        self.draws: list = []

    def _keep(self, arr):
        self.draws.append(arr.copy())
        return arr

    def normal(self, shape):
        return self._keep(self.inner.normal(shape))

    def uniform(self, shape):
        return self._keep(self.inner.uniform(shape))

    def beta(self, a, b, shape):
        return self._keep(self.inner.beta(a, b, shape))


class ReplaySource:
    """Replays a recorded sequence of draws, in order, for common random numbers."""

    def __init__(self, draws: Sequence[np.ndarray]):
        self.draws = list(draws)
        self.pos = 0

    def _next(self, shape):
        if self.pos >= len(self.draws):
            raise RuntimeError("replay source exhausted")
        arr = self.draws[self.pos]
        self.pos += 1
        if arr.shape != tuple(shape):
            raise ValueError(f"replayed draw has shape {arr.shape}, requested {tuple(shape)}")
        return arr

    def normal(self, shape):
        return self._next(shape)

    def uniform(self, shape):
        return self._next(shape)

    def beta(self, a, b, shape):
        return self._next(shape)

    def rewind(self) -> "ReplaySource":
        self.pos = 0
        return self


# --------------------------------------------------------------- generator


@dataclass(frozen=True)
class NoiseConfig:
    mode: str = "mult_softplus"
    lam: float = 0.1  # additive-noise scale
    weight_sigma_init: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}; expected one of {MODES}")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if self.weight_sigma_init <= 0:
            raise ValueError("weight_sigma_init must be > 0")


@dataclass(frozen=True)
class NoiseGenerator:
    config: NoiseConfig
    net: Network

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def stochastic(self) -> bool:
        return self.mode in STOCHASTIC

    def init_phi(self, seed: int = 0) -> ParamSet:
        """Noise parameters; mean maps start at zero so initial ``z_bar = ln 2``."""
        phi = {}
        mode = self.mode
        for l, spec in enumerate(self.net.hidden):
            if mode in ("mult_softplus", "deterministic", "learned_variance"):
                phi[f"{PREFIX}mu{l}/w"] = ad.tensor(np.zeros(spec.weight_shape))
                phi[f"{PREFIX}mu{l}/b"] = ad.tensor(np.zeros((1, spec.fan_out)))
            if mode in ("learned_variance", "additive"):
                phi[f"{PREFIX}sigma{l}/w"] = ad.tensor(np.zeros(spec.weight_shape))
                phi[f"{PREFIX}sigma{l}/b"] = ad.tensor(np.full((1, spec.fan_out), _inv_softplus(1.0)))
            if mode == "independent_gaussian":
                phi[f"{PREFIX}mu{l}/c"] = ad.tensor(np.zeros((1, spec.fan_out)))
        if mode == "weight_gaussian":
            rho = _inv_softplus(self.config.weight_sigma_init)
            for l, spec in enumerate(self.net.hidden):
                phi[f"{PREFIX}wsig{l}"] = ad.tensor(np.full(spec.weight_shape, rho))
            shape = (self.net.classifier_in, self.net.num_classes)
            phi[f"{PREFIX}wsig{self.net.num_hidden}"] = ad.tensor(np.full(shape, rho))
        return phi

    def spec(self, layer: int) -> LayerSpec:
        return self.net.hidden[layer]


def _check(z: Tensor, f: Tensor | None):
    if f is not None and np.broadcast_shapes(z.shape, f.shape) != f.shape:
        raise ValueError(f"noise shape {z.shape} does not match pre-activation {f.shape}")


def noise_mean(gen: NoiseGenerator, phi: ParamSet, layer: int, h_prev: Tensor) -> Tensor:
    """``mu^(l)(h_prev)``: an affine map of the same kind as the main layer."""
    return affine(gen.spec(layer), h_prev, phi[f"{PREFIX}mu{layer}/w"], phi[f"{PREFIX}mu{layer}/b"])


def noise_scale(gen: NoiseGenerator, phi: ParamSet, layer: int, h_prev: Tensor) -> Tensor:
    """Non-negative per-unit scale ``sigma^(l)(h_prev)`` via a softplus head."""
    pre = affine(gen.spec(layer), h_prev, phi[f"{PREFIX}sigma{layer}/w"], phi[f"{PREFIX}sigma{layer}/b"])
    return ad.softplus(pre)


def sample_multiplicative(gen, phi, layer, h_prev, source) -> Tensor:
    """Reparameterised ``z = softplus(mu(h_prev) + eps)``."""
    if gen.mode != "mult_softplus":
        raise ValueError(f"sample_multiplicative needs mode mult_softplus, got {gen.mode}")
    mu = noise_mean(gen, phi, layer, h_prev)
    return ad.softplus(ad.add(mu, ad.constant(source.normal(mu.shape))))


def deterministic_z(gen, phi, layer, h_prev, f_shape=None) -> Tensor:
    """Mean-path noise ``softplus(mu(h_prev))``; consumes no random numbers.

    For parameter-free or input-independent modes ``f_shape`` supplies the
    shape of the pre-activation being scaled.
    """
    mode = gen.mode
    if mode in ("mult_softplus", "deterministic", "learned_variance"):
        return ad.softplus(noise_mean(gen, phi, layer, h_prev))
    if mode == "independent_gaussian":
        return ad.softplus(phi[f"{PREFIX}mu{layer}/c"])
    if mode == "fixed_gaussian":
        if f_shape is None:
            raise ValueError("fixed_gaussian deterministic_z needs f_shape")
        return ad.constant(np.full(f_shape, np.log(2.0)))
    raise ValueError(f"mode {mode} has no multiplicative mean path")


def sample_additive(gen, phi, layer, h_prev, source) -> Tensor:
    """Additive noise ``z = lam * sigma(h_prev) * eps``."""
    if gen.mode != "additive":
        raise ValueError(f"sample_additive needs mode additive, got {gen.mode}")
    sigma = noise_scale(gen, phi, layer, h_prev)
    return ad.mul(gen.config.lam, ad.mul(sigma, ad.constant(source.normal(sigma.shape))))


def sample_weight(gen, phi, layer, w: Tensor, source, prefix: tuple = ()) -> Tensor:
    """Weight-space Gaussian: ``w + softplus(rho) * eps`` with ``w`` as the mean."""
    sigma = ad.softplus(phi[f"{PREFIX}wsig{layer}"])
    eps = source.normal(tuple(prefix) + sigma.shape)
    return ad.add(w, ad.mul(sigma, ad.constant(eps)))


def sample_ablation(gen, phi, layer, h_prev, source, f_shape=None, w: Tensor | None = None,
                    prefix: tuple = ()) -> Tensor:
    """Noise for the ablation families.

    Returns ``z`` (to multiply the pre-activation) for every mode except
    ``weight_gaussian``, which returns a sampled weight tensor from ``w``.
    """
    mode = gen.mode
    if mode == "fixed_gaussian":
        if f_shape is None:
            raise ValueError("fixed_gaussian needs f_shape")
        return ad.softplus(ad.constant(source.normal(f_shape)))
    if mode == "independent_gaussian":
        c = phi[f"{PREFIX}mu{layer}/c"]
        shape = f_shape if f_shape is not None else c.shape
        return ad.softplus(ad.add(c, ad.constant(source.normal(shape))))
    if mode == "deterministic":
        return deterministic_z(gen, phi, layer, h_prev)
    if mode == "learned_variance":
        mu = noise_mean(gen, phi, layer, h_prev)
        sigma = noise_scale(gen, phi, layer, h_prev)
        return ad.softplus(ad.add(mu, ad.mul(sigma, ad.constant(source.normal(mu.shape)))))
    if mode == "weight_gaussian":
        if w is None:
            raise ValueError("weight_gaussian needs the weight tensor")
        return sample_weight(gen, phi, layer, w, source, prefix)
    raise ValueError(f"mode {mode} is not an ablation family")


# -------------------------------------------------------------------- plans


class StochasticPlan(NoisePlan):
    """Sampled noise, as used on training instances inside the inner loop.

    ``prefix`` gives the leading (episode, sample) axes of the activations;
    weight-space noise draws one weight sample per prefix entry.
    """

    def __init__(self, gen: NoiseGenerator, phi: ParamSet, source, prefix: tuple = ()):
        self.gen, self.phi, self.source, self.prefix = gen, phi, source, tuple(prefix)

    def weight(self, layer, w):
        if self.gen.mode != "weight_gaussian":
            return w
        return sample_weight(self.gen, self.phi, layer, w, self.source, self.prefix)

    def preactivation(self, layer, h_prev, f):
        mode = self.gen.mode
        if mode in ("none", "weight_gaussian"):
            return f
        if mode == "additive":
            z = sample_additive(self.gen, self.phi, layer, h_prev, self.source)
            _check(z, f)
            return ad.add(f, z)
        if mode == "mult_softplus":
            z = sample_multiplicative(self.gen, self.phi, layer, h_prev, self.source)
        else:
            z = sample_ablation(self.gen, self.phi, layer, h_prev, self.source, f_shape=f.shape)
        _check(z, f)
        return ad.mul(f, z)


class DeterministicPlan(NoisePlan):
    """Mean-path noise (``a = mu``) for test examples and evaluation."""

    def __init__(self, gen: NoiseGenerator, phi: ParamSet):
        self.gen, self.phi = gen, phi

    def preactivation(self, layer, h_prev, f):
        if self.gen.mode in ("none", "additive", "weight_gaussian"):
            return f
        z = deterministic_z(self.gen, self.phi, layer, h_prev, f_shape=f.shape)
        _check(z, f)
        return ad.mul(f, z)
