"""Inner adaptation and meta-updates for MAML / Meta-SGD, with or without learned noise.

Several episodes are processed at once: parameters are broadcast to a
leading episode axis (:func:`expand_params`) and the per-episode losses are
summed, so each episode's slice of the gradient is exactly its own
gradient.  Monte-Carlo samples of the noise ride on a second axis, giving
activations shaped ``(episodes, samples, instances, ...)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamSet, Tensor
from .baselines import RegularizerConfig, adversarial_inputs, init_extra_params, regularizer_plan
from .nn import ChainPlan, Network, NoisePlan, forward, init_params
from .noise import DeterministicPlan, NoiseGenerator, RandomSource, StochasticPlan, episode_stream

logger = logging.getLogger(__name__)

TRAIN_STREAM, TEST_STREAM, ATTACK_STREAM = 1, 2, 3


class NumericalAbort(RuntimeError):
    """Too many consecutive episodes produced non-finite values."""


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 5
    inner_lr: float = 0.1
    outer_lr: float = 1e-3
    meta_batch: int = 4
    samples_train: int = 1
    samples_test: int = 30
    clip_low: float = -3.0
    clip_high: float = 3.0
    iterations: int = 2000
    seed: int = 0
    meta_sgd: bool = False
    lr_floor: float = 1e-6
    max_consecutive_failures: int = 3

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_lr <= 0:
            raise ValueError("inner_lr must be > 0")
        if self.outer_lr <= 0:
            raise ValueError("outer_lr must be > 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.samples_train < 1 or self.samples_test < 1:
            raise ValueError("Monte-Carlo sample counts must be >= 1")
        if not self.clip_low < self.clip_high:
            raise ValueError("clip_low must be < clip_high")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class MetaParams:
    theta: ParamSet
    phi: ParamSet
    lrs: ParamSet = field(default_factory=dict)

    GROUPS = ("theta", "phi", "lrs")

    def group(self, name: str) -> ParamSet:
        return getattr(self, name)

    def arrays(self) -> dict:
        return {f"{g}:{k}": t.data for g in self.GROUPS for k, t in self.group(g).items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "MetaParams":
        groups = {g: {} for g in cls.GROUPS}
        for key, arr in arrays.items():
            g, name = key.split(":", 1)
            if g in groups:
                groups[g][name] = ad.tensor(arr)
        return cls(**groups)


@dataclass(frozen=True)
class Learner:
    """What is being meta-learned: the network, its noise generator and an optional regulariser."""

    net: Network
    noise: NoiseGenerator
    regularizer: RegularizerConfig | None = None

    @property
    def stochastic(self) -> bool:
        reg = self.regularizer.family if self.regularizer else "none"
        return self.noise.stochastic or reg in ("mixup", "info_dropout", "vib")

    def init(self, seed: int, cfg: MetaConfig) -> MetaParams:
        theta = init_params(self.net, seed)
        if self.regularizer is not None:
            theta.update(init_extra_params(self.regularizer, self.net))
        phi = self.noise.init_phi(seed)
        lrs = {}
        if cfg.meta_sgd:
            lrs = {k: ad.tensor(np.full(v.shape, cfg.inner_lr)) for k, v in theta.items()}
        return MetaParams(theta, phi, lrs)


@dataclass
class RunRecord:
    episode: int
    seed: int
    accuracy: float
    loss: float
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class EpisodeBatch:
    x_tr: np.ndarray  # (E, N, ...)
    y_tr: np.ndarray  # (E, N)
    x_te: np.ndarray  # (E, M, ...)
    y_te: np.ndarray  # (E, M)
    indices: tuple = ()

    @classmethod
    def from_episodes(cls, episodes: Sequence) -> "EpisodeBatch":
        return cls(
            np.stack([e.x_tr for e in episodes]),
            np.stack([e.y_tr for e in episodes]),
            np.stack([e.x_te for e in episodes]),
            np.stack([e.y_te for e in episodes]),
            tuple(e.index for e in episodes),
        )

    def __len__(self) -> int:
        return self.x_tr.shape[0]

    def subset(self, i: int) -> "EpisodeBatch":
        sl = slice(i, i + 1)
        return EpisodeBatch(self.x_tr[sl], self.y_tr[sl], self.x_te[sl], self.y_te[sl], self.indices[sl])


# ------------------------------------------------------------------ adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def adam_update(params: ParamSet, grads: dict, state: AdamState, lr: float) -> ParamSet:
    """One bias-corrected Adam step (descending ``grads``); returns fresh leaf tensors."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        step = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
        out[k] = ad.tensor(p.data - step)
    return out


def clip_gradients(grads: dict, low: float, high: float) -> dict:
    return {k: np.clip(g, low, high) for k, g in grads.items()}


# ----------------------------------------------------------- inner loop


def expand_params(theta: ParamSet, episodes: int) -> ParamSet:
    """Per-episode copies with shape ``(E, 1, *shape)`` that stay on the graph."""
    return {k: ad.broadcast_to(p, (episodes, 1) + p.shape) for k, p in theta.items()}


def _onehot(y: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes)[np.asarray(y, dtype=np.int64)]


def _plan(plans) -> NoisePlan:
    plans = [p for p in plans if p is not None]
    if not plans:
        return NoisePlan()
    return plans[0] if len(plans) == 1 else ChainPlan(plans)


def training_plan(learner: Learner, theta, phi, source, prefix: tuple, n: int) -> NoisePlan:
    noise = None if learner.noise.mode == "none" else StochasticPlan(learner.noise, phi, source, prefix)
    reg = regularizer_plan(learner.regularizer, learner.net, theta, source, prefix, n)
    return _plan([noise, reg])


def evaluation_plan(learner: Learner, theta, phi) -> NoisePlan:
    noise = None if learner.noise.mode == "none" else DeterministicPlan(learner.noise, phi)
    reg = regularizer_plan(learner.regularizer, learner.net, theta, None, (), 0, deterministic=True)
    return _plan([noise, reg])


def inner_loss(learner: Learner, theta: ParamSet, phi: ParamSet, x: np.ndarray, y: np.ndarray, source,
               samples: int = 1):
    """MC estimate of the training loss, summed over episodes.

    ``x`` is ``(E, N, ...)``; each instance is replicated ``samples`` times
    with independent noise.  Returns ``(total, per_episode)`` where
    ``per_episode`` holds each episode's mean over instances and samples.
    """
    E, N = y.shape
    S = int(samples)
    xs = np.broadcast_to(x[:, None], (E, S) + x.shape[1:])
    targets = np.broadcast_to(_onehot(y, learner.net.num_classes)[:, None], (E, S, N, learner.net.num_classes))
    plan = training_plan(learner, theta, phi, source, (E, S), N)
    logits = forward(learner.net, theta, xs, plan)
    targets = plan.labels(targets)
    ce = ad.softmax_cross_entropy(logits, np.asarray(targets, dtype=np.float64), reduction="none")
    total = ad.mul(ad.sum(ce), 1.0 / (S * N))
    if plan.penalty is not None:
        total = ad.add(total, ad.mul(plan.penalty, 1.0 / (S * N)))
    return total, ce.data.mean(axis=(1, 2))


def _clean_loss_grad(learner, theta, phi):
    # Input-gradient oracle on the evaluation path, parameters held constant.
    consts = {k: v.detach() for k, v in theta.items()}
    phi_c = {k: v.detach() for k, v in phi.items()}

    def fn(xa, ya):
        xt = ad.tensor(xa[:, None])
        plan = evaluation_plan(learner, consts, phi_c)
        logits = forward(learner.net, consts, xt, plan)
        loss = ad.softmax_cross_entropy(logits, ya[:, None], reduction="sum")
        g = ad.grad(loss, xt)
        return loss.item(), g.data[:, 0]

    return fn


def inner_adapt(learner: Learner, params: MetaParams, x_tr: np.ndarray, y_tr: np.ndarray, cfg: MetaConfig,
                source, create_graph: bool = False, samples: int | None = None, steps: int | None = None,
                lr: float | None = None) -> ParamSet:
    """K gradient steps on the MC training loss from ``params.theta``.

    ``x_tr`` / ``y_tr`` carry a leading episode axis.  The result has one
    ``(E, 1, *shape)`` parameter copy per episode; with ``create_graph`` it
    remains differentiable w.r.t. ``theta``, ``phi`` (and learned rates).
    ``phi`` is only read, never updated.  ``steps`` and ``lr`` override the
    config (e.g. zero steps to score the raw initialisation).
    """
    E = x_tr.shape[0]
    S = (samples or cfg.samples_train) if learner.stochastic else 1
    K = cfg.inner_steps if steps is None else steps
    if create_graph:
        theta = expand_params(params.theta, E)
        phi = params.phi
        lrs = params.lrs
    else:
        theta = {k: ad.tensor(np.broadcast_to(p.data, (E, 1) + p.shape).copy()) for k, p in params.theta.items()}
        phi = {k: v.detach() for k, v in params.phi.items()}
        lrs = {k: v.detach() for k, v in params.lrs.items()}
    reg = learner.regularizer
    feature_ndim = len(learner.net.input_shape)
    for _ in range(K):
        x_k = x_tr
        if reg is not None and reg.family == "adv_train" and reg.eps_train > 0:
            x_k = adversarial_inputs(_clean_loss_grad(learner, theta, phi), x_tr, y_tr, reg, source, feature_ndim)
        loss, _ = inner_loss(learner, theta, phi, x_k, y_tr, source, S)
        grads = ad.grad(loss, theta, create_graph=create_graph)
        new = {}
        for k in theta:
            rate = lrs[k] if cfg.meta_sgd else (cfg.inner_lr if lr is None else lr)
            new[k] = ad.sub(theta[k], ad.mul(rate, grads[k]))
        theta = new if create_graph else {k: ad.tensor(v.data) for k, v in new.items()}
    return theta


def evaluate(learner: Learner, theta: ParamSet, phi: ParamSet, x_te: np.ndarray, y_te: np.ndarray):
    """Test loss per episode (a tensor of shape ``(E,)``) and accuracy (numpy), deterministic noise."""
    xs = x_te[:, None]
    plan = evaluation_plan(learner, theta, phi)
    logits = forward(learner.net, theta, xs, plan)
    ce = ad.softmax_cross_entropy(logits, y_te[:, None], reduction="none")
    loss = ad.mean(ce, axis=(1, 2))
    acc = (logits.data.argmax(axis=-1) == y_te[:, None]).mean(axis=(1, 2))
    return loss, acc


# ----------------------------------------------------------- outer loop


def meta_objective(learner: Learner, params: MetaParams, batch: EpisodeBatch, cfg: MetaConfig, source):
    star = inner_adapt(learner, params, batch.x_tr, batch.y_tr, cfg, source, create_graph=True)
    loss_e, acc_e = evaluate(learner, star, params.phi, batch.x_te, batch.y_te)
    return ad.mean(loss_e), loss_e.data, acc_e


def meta_gradients(learner: Learner, params: MetaParams, batch: EpisodeBatch, cfg: MetaConfig, source):
    """Second-order gradients of the mean test loss for every parameter group."""
    obj, loss_e, acc_e = meta_objective(learner, params, batch, cfg, source)
    keys = [(g, k) for g in MetaParams.GROUPS for k in params.group(g)]
    flat = ad.grad(obj, [params.group(g)[k] for g, k in keys])
    grads = {g: {} for g in MetaParams.GROUPS}
    for (g, k), v in zip(keys, flat):
        grads[g][k] = v.data
    return grads, loss_e, acc_e


def meta_step(learner: Learner, params: MetaParams, batch: EpisodeBatch, cfg: MetaConfig,
              adam: dict, source, grads=None):
    """Clip the meta-gradients elementwise and apply Adam to every group."""
    if grads is None:
        grads, loss_e, acc_e = meta_gradients(learner, params, batch, cfg, source)
    else:
        loss_e = acc_e = None
    new = {}
    for g in MetaParams.GROUPS:
        group = params.group(g)
        if not group:
            new[g] = {}
            continue
        clipped = clip_gradients(grads[g], cfg.clip_low, cfg.clip_high)
        new[g] = adam_update(group, clipped, adam[g], cfg.outer_lr)
    if cfg.meta_sgd:
        new["lrs"] = {k: ad.tensor(np.maximum(v.data, cfg.lr_floor)) for k, v in new["lrs"].items()}
    return MetaParams(**new), loss_e, acc_e


def batch_sources(seed: int, indices: Sequence[int], tag: int) -> RandomSource:
    return RandomSource([episode_stream(seed, i, tag) for i in indices])


class MetaTrainer:
    """Stateful meta-training loop with the episode failure policy.

    A batch that raises :class:`NonFiniteError` is re-run one episode at a
    time; failing episodes are dropped from the average and logged.  Three
    (``max_consecutive_failures``) failing episodes in a row abort the run.
    """

    def __init__(self, learner: Learner, params: MetaParams, cfg: MetaConfig):
        self.learner, self.params, self.cfg = learner, params, cfg
        self.adam = {g: AdamState.zeros_like(params.group(g)) for g in MetaParams.GROUPS}
        self.iteration = 0
        self.consecutive_failures = 0
        self.failures: list = []

    def step(self, batch: EpisodeBatch) -> dict:
        cfg = self.cfg
        source = batch_sources(cfg.seed, batch.indices, TRAIN_STREAM)
        try:
            grads, loss_e, acc_e = meta_gradients(self.learner, self.params, batch, cfg, source)
            self.consecutive_failures = 0
            dropped = 0
        except NonFiniteError:
            grads, loss_e, acc_e, dropped = self._per_episode(batch)
        if grads is not None:
            self.params, _, _ = meta_step(self.learner, self.params, batch, cfg, self.adam, None, grads=grads)
        self.iteration += 1
        return {"loss": float(np.mean(loss_e)) if len(loss_e) else float("nan"),
                "accuracy": float(np.mean(acc_e)) if len(acc_e) else float("nan"),
                "dropped": dropped}

    def _per_episode(self, batch: EpisodeBatch):
        ok, losses, accs = [], [], []
        for i in range(len(batch)):
            sub = batch.subset(i)
            source = batch_sources(self.cfg.seed, sub.indices, TRAIN_STREAM)
            try:
                g, l, a = meta_gradients(self.learner, self.params, sub, self.cfg, source)
            except NonFiniteError as exc:
                self.consecutive_failures += 1
                self.failures.append({"iteration": self.iteration, "episode": sub.indices[0], "error": str(exc)})
                logger.warning("dropping episode %d at iteration %d: %s", sub.indices[0], self.iteration, exc)
                if self.consecutive_failures >= self.cfg.max_consecutive_failures:
                    raise NumericalAbort(f"{self.consecutive_failures} consecutive non-finite episodes") from exc
                continue
            self.consecutive_failures = 0
            ok.append(g)
            losses.extend(l)
            accs.extend(a)
        dropped = len(batch) - len(ok)
        if not ok:
            return None, np.array([]), np.array([]), dropped
        grads = {grp: {k: np.mean([g[grp][k] for g in ok], axis=0) for k in ok[0][grp]} for grp in MetaParams.GROUPS}
        return grads, np.array(losses), np.array(accs), dropped


# ------------------------------------------------------------- meta-test


def adapt_and_evaluate(learner: Learner, params: MetaParams, batch: EpisodeBatch, cfg: MetaConfig, seed: int,
                       steps: int | None = None, samples: int | None = None):
    """Adapt every episode with ``S_test`` samples; returns ``(theta_star, loss, accuracy)``."""
    source = batch_sources(seed, batch.indices, TEST_STREAM)
    star = inner_adapt(learner, params, batch.x_tr, batch.y_tr, cfg, source, create_graph=False,
                       samples=samples or cfg.samples_test, steps=steps)
    star = {k: v.detach() for k, v in star.items()}
    phi = {k: v.detach() for k, v in params.phi.items()}
    loss_e, acc_e = evaluate(learner, star, phi, batch.x_te, batch.y_te)
    return star, loss_e.data, acc_e


def meta_test(learner: Learner, params: MetaParams, episodes: Sequence, cfg: MetaConfig, seed: int | None = None,
              chunk_size: int = 50, steps: int | None = None, samples: int | None = None, threads: int = 1,
              config_hash: str = "") -> list[RunRecord]:
    """Adapt to each episode and score its test split on the deterministic noise path."""
    seed = cfg.seed if seed is None else seed
    chunks = [episodes[i : i + chunk_size] for i in range(0, len(episodes), chunk_size)]

    def run(chunk):
        batch = EpisodeBatch.from_episodes(chunk)
        _, loss_e, acc_e = adapt_and_evaluate(learner, params, batch, cfg, seed, steps, samples)
        return [RunRecord(ep.index, ep.seed, float(a), float(l), config_hash)
                for ep, a, l in zip(chunk, acc_e, loss_e)]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return [r for chunk in results for r in chunk]


def meta_train(learner: Learner, params: MetaParams, sample_batch: Callable[[int], Sequence], cfg: MetaConfig,
               on_iteration: Callable | None = None) -> MetaTrainer:
    """Run ``cfg.iterations`` meta-steps; ``sample_batch(t)`` yields the episodes of iteration ``t``."""
    trainer = MetaTrainer(learner, params, cfg)
    for t in range(cfg.iterations):
        info = trainer.step(EpisodeBatch.from_episodes(sample_batch(t)))
        if on_iteration is not None:
            on_iteration(trainer, info)
    return trainer
