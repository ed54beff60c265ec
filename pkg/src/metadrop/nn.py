"""Base classifier networks and their noise-aware forward pass.

Activations are laid out with instances on the second-to-last axis for dense
layers, ``(..., N, features)``, and channels-last for conv layers,
``(..., N, H, W, C)``.  Any extra leading axes (episode, Monte-Carlo sample)
are carried through untouched, provided the parameters broadcast against
them; :func:`metadrop.metalearn.expand_params` produces such per-episode
parameter copies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

CHECKPOINT_MAGIC = "metadrop-checkpoint 1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv"
    fan_in: int
    fan_out: int
    kernel: int = 3
    uses_standardize: bool = False

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("fan_in and fan_out must be >= 1")

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.fan_in, self.fan_out)
        return (self.kernel, self.kernel, self.fan_in, self.fan_out)

    @property
    def weight_fan_in(self) -> int:
        if self.kind == "dense":
            return self.fan_in
        return self.kernel * self.kernel * self.fan_in


@dataclass(frozen=True)
class Network:
    """Hidden layers followed by a linear classifier ``logits = h W + b``."""

    hidden: tuple
    num_classes: int
    input_shape: tuple
    classifier_in: int

    def __post_init__(self):
        prev = self.input_shape[-1]
        for spec in self.hidden:
            if spec.fan_in != prev:
                raise ValueError(f"layer expects {spec.fan_in} inputs, previous layer gives {prev}")
            prev = spec.fan_out
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def kind(self) -> str:
        return self.hidden[0].kind if self.hidden else "dense"

    @property
    def num_hidden(self) -> int:
        return len(self.hidden)


def dense_network(input_dim: int = 2, hidden: Sequence[int] = (64, 64, 64), num_classes: int = 5,
                  standardize: bool = False) -> Network:
    sizes = [input_dim, *hidden]
    layers = tuple(LayerSpec("dense", a, b, uses_standardize=standardize) for a, b in zip(sizes, sizes[1:]))
    return Network(layers, num_classes, (input_dim,), sizes[-1])


def conv4_network(image_size: int = 28, in_channels: int = 1, channels: int = 64,
                  num_classes: int = 20, depth: int = 4) -> Network:
    """The standard few-shot conv backbone: conv3x3 -> standardize -> ReLU -> maxpool, ``depth`` times."""
    layers = []
    c, side = in_channels, image_size
    for _ in range(depth):
        layers.append(LayerSpec("conv", c, channels, kernel=3, uses_standardize=True))
        c, side = channels, side // 2
    if side < 1:
        raise ValueError(f"image_size {image_size} too small for {depth} pooling layers")
    return Network(tuple(layers), num_classes, (image_size, image_size, in_channels), side * side * channels)


def init_params(net: Network, seed: int) -> ParamSet:
    """He-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for l, spec in enumerate(net.hidden):
        bound = np.sqrt(6.0 / spec.weight_fan_in)
        params[f"layer{l}/w"] = ad.tensor(rng.uniform(-bound, bound, spec.weight_shape))
        params[f"layer{l}/b"] = ad.tensor(np.zeros((1, spec.fan_out)))
    bound = np.sqrt(6.0 / net.classifier_in)
    params["out/w"] = ad.tensor(rng.uniform(-bound, bound, (net.classifier_in, net.num_classes)))
    params["out/b"] = ad.tensor(np.zeros((1, net.num_classes)))
    return params


class NoisePlan:
    """Hooks through which perturbations enter :func:`forward`.

    Layer indices: ``weight(l, .)`` and ``preactivation(l, .)`` refer to hidden
    layer ``l`` (the classifier is ``l = num_hidden`` for ``weight``);
    ``features(0, .)`` sees the input and ``features(l + 1, .)`` the output
    of hidden layer ``l``.  The base class is the identity.  Regularising
    plans may also rewrite training targets (``labels``) and accumulate a
    loss ``penalty`` while the forward pass runs.
    """

    penalty: Tensor | None = None

    def labels(self, target: np.ndarray) -> np.ndarray:
        return target

    def weight(self, layer: int, w: Tensor) -> Tensor:
        return w

    def preactivation(self, layer: int, h_prev: Tensor, f: Tensor) -> Tensor:
        return f

    def features(self, layer: int, h: Tensor) -> Tensor:
        return h


class ChainPlan(NoisePlan):
    """Apply several plans in order at every hook."""

    def __init__(self, plans: Sequence[NoisePlan]):
        self.plans = list(plans)

    @property
    def penalty(self):
        terms = [p.penalty for p in self.plans if p.penalty is not None]
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    def labels(self, target):
        for p in self.plans:
            target = p.labels(target)
        return target

    def weight(self, layer, w):
        for p in self.plans:
            w = p.weight(layer, w)
        return w

    def preactivation(self, layer, h_prev, f):
        for p in self.plans:
            f = p.preactivation(layer, h_prev, f)
        return f

    def features(self, layer, h):
        for p in self.plans:
            h = p.features(layer, h)
        return h


class StaticPlan(NoisePlan):
    """Multiply pre-activations by fixed, precomputed ``z`` values."""

    def __init__(self, zs: Sequence):
        self.zs = [z if isinstance(z, Tensor) else ad.constant(z) for z in zs]

    def preactivation(self, layer, h_prev, f):
        if layer >= len(self.zs):
            return f
        z = self.zs[layer]
        if np.broadcast_shapes(z.shape, f.shape) != f.shape:
            raise ValueError(f"noise shape {z.shape} does not match pre-activation {f.shape}")
        return ad.mul(f, z)


def standardize_axes(spec: LayerSpec) -> tuple:
    return (-4, -3, -2) if spec.kind == "conv" else (-2,)


def affine(spec: LayerSpec, h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if spec.kind == "dense":
        return ad.add(ad.matmul(h, w), b)
    return ad.conv2d(h, w, b)


def forward(net: Network, theta: Mapping[str, Tensor], x, plan: NoisePlan | None = None,
            return_features: bool = False):
    """Logits of ``net`` on ``x``; optionally also the last hidden features."""
    plan = plan or NoisePlan()
    h = x if isinstance(x, Tensor) else ad.constant(x)
    if h.shape[-len(net.input_shape):] != net.input_shape:
        raise ValueError(f"input shape {h.shape} incompatible with network input {net.input_shape}")
    h = plan.features(0, h)
    for l, spec in enumerate(net.hidden):
        w = plan.weight(l, theta[f"layer{l}/w"])
        f = affine(spec, h, w, theta[f"layer{l}/b"])
        if spec.uses_standardize:
            f = ad.batch_standardize(f, standardize_axes(spec))
        f = plan.preactivation(l, h, f)
        h = ad.relu(f)
        if spec.kind == "conv":
            h = ad.maxpool2d(h)
        h = plan.features(l + 1, h)
    if net.kind == "conv":
        h = ad.reshape(h, h.shape[:-3] + (-1,))
    w = plan.weight(net.num_hidden, theta["out/w"])
    logits = ad.add(ad.matmul(h, w), theta["out/b"])
    if return_features:
        return logits, h
    return logits


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays as text; values use shortest round-trip repr."""
    lines = [CHECKPOINT_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name].data if isinstance(arrays[name], Tensor) else arrays[name],
                         dtype=np.float64)
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        shape = ",".join(str(n) for n in arr.shape) or "-"
        lines.append(f"tensor {name} {shape}")
        lines.append(" ".join(repr(v) for v in arr.ravel().tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a metadrop checkpoint")
    if not lines[1].startswith("meta "):
        raise ValueError(f"{path}: missing meta line")
    meta = json.loads(lines[1][5:])
    arrays = {}
    body = lines[2:]
    for header, values in zip(body[::2], body[1::2]):
        tag, name, shape_s = header.split(" ")
        if tag != "tensor":
            raise ValueError(f"{path}: malformed header {header!r}")
        shape = () if shape_s == "-" else tuple(int(n) for n in shape_s.split(","))
        flat = np.array([float(v) for v in values.split()], dtype=np.float64)
        arrays[name] = flat.reshape(shape)
    return arrays, meta
