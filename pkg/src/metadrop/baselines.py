"""Competing perturbation regularisers for the inner loop of MAML.

* input / manifold mixup with ``lam ~ Beta(gamma, gamma)``,
* Information Dropout (ReLU version): log-normal multiplicative noise with a
  ``-log alpha`` penalty,
* a variational information bottleneck on the last hidden features,
* adversarial training of the inner steps with PGD-perturbed inputs.

Extra parameters (the info-dropout ``alpha`` maps and the VIB scale head)
live in ``theta`` under the ``reg/`` prefix, so they are adapted by the
inner steps and meta-learned by the outer step like any other weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .eval import NORMS, AttackConfig, pgd_attack
from .nn import LayerSpec, Network, NoisePlan, affine

FAMILIES = ("none", "mixup", "info_dropout", "vib", "adv_train")
PREFIX = "reg/"
ALPHA_FLOOR = 1e-6


@dataclass(frozen=True)
class RegularizerConfig:
    family: str = "none"
    gamma: float = 2.0
    beta_ib: float = 1e-4
    alpha_max: float = 0.7
    vib_sigma_init: float = 0.1
    eps_train: float = 0.0
    pgd_steps_train: int = 10
    norm: str = "linf"
    clip: tuple | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown regulariser family {self.family!r}; expected one of {FAMILIES}")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.beta_ib < 0:
            raise ValueError("beta_ib must be >= 0")
        if not 0 < self.alpha_max <= 1:
            raise ValueError("alpha_max must lie in (0, 1]")
        if self.pgd_steps_train < 1:
            raise ValueError("pgd_steps_train must be >= 1")
        if self.eps_train < 0:
            raise ValueError("eps_train must be >= 0")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")


def init_extra_params(cfg: RegularizerConfig, net: Network) -> ParamSet:
    """Regulariser parameters that join ``theta``."""
    extra = {}
    if cfg.family == "info_dropout":
        for l, spec in enumerate(net.hidden):
            extra[f"{PREFIX}alpha{l}/w"] = ad.tensor(np.zeros(spec.weight_shape))
            extra[f"{PREFIX}alpha{l}/b"] = ad.tensor(np.zeros((1, spec.fan_out)))
    elif cfg.family == "vib":
        d = net.classifier_in
        extra[f"{PREFIX}vib/w"] = ad.tensor(np.zeros((d, d)))
        extra[f"{PREFIX}vib/b"] = ad.tensor(np.full((1, d), np.log(np.expm1(cfg.vib_sigma_init))))
    return extra


# ------------------------------------------------------------------- mixup


def mixup_apply(x, y_onehot, gamma: float, source, lam=None, perm=None):
    """Interpolate a batch with a random permutation of itself.

    ``x`` is ``(N, ...)`` and ``y_onehot`` ``(N, C)``.  Returns
    ``(x_mixed, y_mixed, lam)``.  A batch of one is returned unchanged with
    a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y_onehot, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        warnings.warn("mixup needs at least two instances; batch returned unchanged", RuntimeWarning)
        return x, y, 1.0
    if lam is None:
        lam = float(source.beta(gamma, gamma, ())) if hasattr(source, "beta") else float(source.beta(gamma, gamma))
    if perm is None:
        perm = np.argsort(source.uniform((n,)), kind="stable")
    xm = lam * x + (1.0 - lam) * x[perm]
    ym = lam * y + (1.0 - lam) * y[perm]
    return xm, ym, lam


class MixupPlan(NoisePlan):
    """Manifold mixup: each (episode, sample) group mixes at one random layer.

    The layer index is drawn uniformly from ``{0 (input), 1, ..., L}``; the
    mixing is written as a matrix ``P = lam I + (1 - lam) Perm`` applied
    along the instance axis, so labels are mixed by the same ``P``.
    """

    def __init__(self, cfg: RegularizerConfig, num_hidden: int, source, prefix: tuple, n: int):
        self.n = n
        self.warnings: list = []
        if n < 2:
            self.warnings.append("mixup needs at least two instances; batch left unchanged")
            warnings.warn(self.warnings[-1], RuntimeWarning)
            self.layer = None
            return
        prefix = tuple(prefix)
        self.lam = source.beta(cfg.gamma, cfg.gamma, prefix)
        self.layer = np.minimum((source.uniform(prefix) * (num_hidden + 1)).astype(int), num_hidden)
        perm = np.argsort(source.uniform(prefix + (n,)), axis=-1, kind="stable")
        self.perm_matrix = np.zeros(prefix + (n, n))
        np.put_along_axis(self.perm_matrix, perm[..., None], 1.0, axis=-1)
        self.eye = np.broadcast_to(np.eye(n), prefix + (n, n))

    def _matrix(self, lam) -> np.ndarray:
        lam = np.asarray(lam)[..., None, None]
        return lam * self.eye + (1.0 - lam) * self.perm_matrix

    def labels(self, target):
        if self.layer is None:
            return target
        return self._matrix(self.lam) @ target

    def features(self, layer, h):
        if self.layer is None or not np.any(self.layer == layer):
            return h
        lam = np.where(self.layer == layer, self.lam, 1.0)
        mix = ad.constant(self._matrix(lam))
        k = len(self.lam.shape)
        inst_shape = h.shape[k + 1:]
        if len(inst_shape) == 1:
            return ad.matmul(mix, h)
        flat = ad.reshape(h, h.shape[: k + 1] + (-1,))
        return ad.reshape(ad.matmul(mix, flat), h.shape)


# -------------------------------------------------------- info dropout


def info_dropout_alpha(spec: LayerSpec, theta: ParamSet, layer: int, h_prev: Tensor, alpha_max: float) -> Tensor:
    pre = affine(spec, h_prev, theta[f"{PREFIX}alpha{layer}/w"], theta[f"{PREFIX}alpha{layer}/b"])
    return ad.add(ALPHA_FLOOR, ad.mul(alpha_max - ALPHA_FLOOR, ad.sigmoid(pre)))


def info_dropout_layer(f: Tensor, alpha: Tensor, beta_ib: float, source):
    """Log-normal noise ``f * exp(alpha * eps)`` and its weighted ``-sum log alpha`` penalty."""
    eps = ad.constant(source.normal(f.shape))
    z = ad.exp(ad.mul(alpha, eps))
    kl = ad.neg(ad.sum(ad.log(alpha)))
    return ad.mul(f, z), ad.mul(beta_ib, kl)


class InfoDropoutPlan(NoisePlan):
    def __init__(self, cfg: RegularizerConfig, net: Network, theta: ParamSet, source, deterministic=False):
        self.cfg, self.net, self.theta, self.source = cfg, net, theta, source
        self.deterministic = deterministic
        self.penalty = None

    def preactivation(self, layer, h_prev, f):
        if self.deterministic:
            return f
        alpha = info_dropout_alpha(self.net.hidden[layer], self.theta, layer, h_prev, self.cfg.alpha_max)
        out, pen = info_dropout_layer(f, alpha, self.cfg.beta_ib, self.source)
        self.penalty = pen if self.penalty is None else ad.add(self.penalty, pen)
        return out


# ------------------------------------------------------------------- VIB


def gaussian_kl(mu: Tensor, sigma: Tensor) -> Tensor:
    """``KL[N(mu, sigma^2) || N(0, I)]`` summed over all entries."""
    terms = ad.sub(ad.add(ad.mul(mu, mu), ad.mul(sigma, sigma)), ad.add(1.0, ad.mul(2.0, ad.log(sigma))))
    return ad.mul(0.5, ad.sum(terms))


def vib_layer(h_final: Tensor, theta: ParamSet, beta_ib: float, source):
    """Stochastic bottleneck ``z = h + sigma(h) * eps`` with mean ``h``.

    Returns ``(z, beta_ib * KL)`` against a standard normal prior.
    """
    sigma = ad.softplus(ad.add(ad.matmul(h_final, theta[f"{PREFIX}vib/w"]), theta[f"{PREFIX}vib/b"]))
    eps = ad.constant(source.normal(sigma.shape))
    z = ad.add(h_final, ad.mul(sigma, eps))
    return z, ad.mul(beta_ib, gaussian_kl(h_final, sigma))


class VibPlan(NoisePlan):
    def __init__(self, cfg: RegularizerConfig, net: Network, theta: ParamSet, source, deterministic=False):
        self.cfg, self.net, self.theta, self.source = cfg, net, theta, source
        self.deterministic = deterministic
        self.penalty = None

    def features(self, layer, h):
        if self.deterministic or layer != self.net.num_hidden:
            return h
        if self.net.kind == "conv":
            flat = ad.reshape(h, h.shape[:-3] + (-1,))
            z, self.penalty = vib_layer(flat, self.theta, self.cfg.beta_ib, self.source)
            return ad.reshape(z, h.shape)
        z, self.penalty = vib_layer(h, self.theta, self.cfg.beta_ib, self.source)
        return z


def regularizer_plan(cfg: RegularizerConfig | None, net: Network, theta: ParamSet, source,
                     prefix: tuple, n: int, deterministic: bool = False) -> NoisePlan | None:
    """Plan for the regulariser's training-time (or deterministic) perturbation."""
    if cfg is None or cfg.family in ("none", "adv_train"):
        return None
    if cfg.family == "mixup":
        return None if deterministic else MixupPlan(cfg, net.num_hidden, source, prefix, n)
    if cfg.family == "info_dropout":
        return InfoDropoutPlan(cfg, net, theta, source, deterministic)
    return VibPlan(cfg, net, theta, source, deterministic)


# ---------------------------------------------------------- adversarial


def adversarial_inputs(loss_and_grad, x: np.ndarray, y: np.ndarray, cfg: RegularizerConfig, source,
                       feature_ndim: int):
    """PGD-perturb training inputs (``pgd_steps_train`` steps, radius ``eps_train``)."""
    attack = AttackConfig(norm=cfg.norm, eps=cfg.eps_train, steps=cfg.pgd_steps_train, clip=cfg.clip)
    return pgd_attack(loss_and_grad, x, y, attack, source, feature_ndim=feature_ndim)


def adversarial_inner(learner, params, x_tr, y_tr, cfg, eps: float, norm: str = "linf", steps: int = 10,
                      source=None, create_graph: bool = False):
    """Inner adaptation where every step first PGD-perturbs the training inputs."""
    from dataclasses import replace

    from .metalearn import inner_adapt

    base = learner.regularizer or RegularizerConfig()
    reg = replace(base, family="adv_train", eps_train=eps, norm=norm, pgd_steps_train=steps)
    return inner_adapt(replace(learner, regularizer=reg), params, x_tr, y_tr, cfg, source,
                       create_graph=create_graph)
