"""Experiment drivers behind the command line: train, eval, attack and boundary export.

Every artifact carries the config hash and seed.  Nothing time- or
host-dependent is written, so equal (hash, seed) pairs give equal bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import SECTIONS, ConfigError, RunConfig
from .eval import NORMS, AttackConfig, accuracy_ci, boundary_project, pgd_attack, write_boundary_csv
from .metalearn import (
    EpisodeBatch,
    Learner,
    MetaParams,
    MetaTrainer,
    adapt_and_evaluate,
    evaluation_plan,
    meta_test,
)
from .nn import conv4_network, dense_network, forward, load_checkpoint, save_checkpoint
from .noise import NoiseGenerator, RandomSource
from .tasks import TaskDistribution, ingest_image_dir, synthetic2d

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["iteration", "meta_train_loss", "val_accuracy", "val_ci"]


# ------------------------------------------------------------- building


def build_network(cfg: RunConfig, input_shape: tuple):
    m, d = cfg.model, cfg.dataset
    if m.backbone == "dense":
        if len(input_shape) != 1:
            raise ConfigError("model.backbone", "dense backbone needs vector inputs; use conv4 for images")
        return dense_network(input_shape[0], m.hidden, d.way, m.standardize)
    if len(input_shape) != 3:
        raise ConfigError("model.backbone", "conv4 backbone needs image inputs")
    return conv4_network(input_shape[0], input_shape[2], m.channels, d.way, m.depth)


def build_distribution(cfg: RunConfig) -> TaskDistribution:
    d = cfg.dataset
    if d.kind == "synthetic2d":
        return synthetic2d(cfg.seed)
    try:
        return ingest_image_dir(d.path, d.image_size, d.rotations, d.channels, cfg.seed, d.ratios,
                                d.split_file or None, min_images=d.shot + d.m_per_class)
    except (OSError, ValueError) as exc:
        raise ConfigError("dataset.path", str(exc)) from exc


def build_learner(cfg: RunConfig, input_shape: tuple) -> Learner:
    net = build_network(cfg, input_shape)
    reg = cfg.regularizer if cfg.regularizer.family != "none" else None
    return Learner(net, NoiseGenerator(cfg.noise, net), reg)


def config_from_dict(d: dict) -> RunConfig:
    def tuples(v):
        return tuple(v) if isinstance(v, list) else v

    sections = {name: cls(**{k: tuples(v) for k, v in d[name].items()}) for name, cls in SECTIONS.items()}
    return RunConfig(**sections, seed=d["seed"], output_dir=d["output_dir"], preset=d.get("preset", ""))


# ---------------------------------------------------------- checkpoints


def checkpoint_arrays(trainer: MetaTrainer) -> dict:
    arrays = trainer.params.arrays()
    for g, state in trainer.adam.items():
        for k in state.m:
            arrays[f"adam:{g}:m:{k}"] = state.m[k]
            arrays[f"adam:{g}:v:{k}"] = state.v[k]
    return arrays


def write_checkpoint(path: Path, trainer: MetaTrainer, cfg: RunConfig) -> None:
    meta = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "iteration": trainer.iteration,
        "adam_steps": {g: s.t for g, s in trainer.adam.items()},
        # Random streams are counter-based in (seed, episode index, tag), so the
        # iteration count is the whole RNG state.
        "rng": {"kind": "philox-counter", "next_episode": trainer.iteration * cfg.meta.meta_batch},
        "config": cfg.to_dict(),
    }
    save_checkpoint(path, checkpoint_arrays(trainer), meta)


def load_run(path, cfg: RunConfig | None = None):
    """``(cfg, params, meta, arrays)`` from a checkpoint; ``cfg`` overrides the stored config."""
    arrays, meta = load_checkpoint(path)
    if cfg is None:
        cfg = config_from_dict(meta["config"])
    params = MetaParams.from_arrays(arrays)
    return cfg, params, meta, arrays


def restore_trainer(path, cfg: RunConfig, learner: Learner) -> MetaTrainer:
    _, params, meta, arrays = load_run(path, cfg)
    trainer = MetaTrainer(learner, params, cfg.meta)
    for g, state in trainer.adam.items():
        for k in state.m:
            state.m[k] = arrays[f"adam:{g}:m:{k}"]
            state.v[k] = arrays[f"adam:{g}:v:{k}"]
        state.t = meta["adam_steps"][g]
    trainer.iteration = meta["iteration"]
    return trainer


# --------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns: list, rows: list, preamble: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in preamble.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def preamble(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


# ---------------------------------------------------------------- train


@dataclass
class TrainResult:
    trainer: MetaTrainer
    curve: list
    checkpoints: list


def train(cfg: RunConfig, out: Path, threads: int = 1, log: Callable = logger.info) -> TrainResult:
    """Meta-train, validating every ``val_every`` iterations; writes curve, checkpoints, manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dist = build_distribution(cfg)
    learner = build_learner(cfg, dist.input_shape)
    d, m = cfg.dataset, cfg.meta
    trainer = MetaTrainer(learner, learner.init(cfg.seed, m), m)
    val = dist.episodes("val", cfg.train.val_episodes, d.way, d.shot, d.m_per_class) if m.iterations else []

    checkpoints = []

    def checkpoint():
        p = out / f"checkpoint_{trainer.iteration:06d}.ckpt"
        write_checkpoint(p, trainer, cfg)
        checkpoints.append(p.name)

    checkpoint()
    curve, window = [], []
    for t in range(m.iterations):
        eps = dist.episodes("train", m.meta_batch, d.way, d.shot, d.m_per_class, start=t * m.meta_batch)
        info = trainer.step(EpisodeBatch.from_episodes(eps))
        window.append(info["loss"])
        it = trainer.iteration
        if it % cfg.train.val_every == 0 or it == m.iterations:
            recs = meta_test(learner, trainer.params, val, m, cfg.seed, cfg.eval.chunk_size, threads=threads)
            acc, hw = accuracy_ci(recs)
            row = {"iteration": it, "meta_train_loss": float(np.nanmean(window)), "val_accuracy": acc, "val_ci": hw}
            curve.append(row)
            window = []
            log(f"iter {it}: loss {row['meta_train_loss']:.4f} val {acc:.4f} +- {hw:.4f}")
        if it % cfg.train.checkpoint_every == 0 or it == m.iterations:
            checkpoint()

    write_csv(out / "train_curve.csv", CURVE_COLUMNS, curve, preamble(cfg))
    if trainer.failures:
        write_json(out / "failures.json", {**preamble(cfg), "failures": trainer.failures})
    write_json(out / "manifest.json", {**preamble(cfg), "checkpoints": checkpoints,
                                       "final_checkpoint": checkpoints[-1], "iterations": trainer.iteration,
                                       "config": cfg.to_dict()})
    return TrainResult(trainer, curve, checkpoints)


# ----------------------------------------------------------------- eval


def evaluate(cfg: RunConfig, params: MetaParams, out: Path | None = None, episodes: int | None = None,
             threads: int = 1) -> dict:
    """Meta-test on ``episodes`` test-split episodes; returns (and optionally writes) the metrics."""
    n = episodes or cfg.eval.episodes
    dist = build_distribution(cfg)
    learner = build_learner(cfg, dist.input_shape)
    d = cfg.dataset
    eps = dist.episodes("test", n, d.way, d.shot, d.m_per_class)
    recs = meta_test(learner, params, eps, cfg.meta, cfg.seed, cfg.eval.chunk_size, threads=threads,
                     config_hash=cfg.hash())
    mean, hw = accuracy_ci(recs)
    acc = np.array([r.accuracy for r in recs])
    metrics = {**preamble(cfg), "episodes": n, "mean_accuracy": mean, "halfwidth": hw,
               "sd": float(acc.std(ddof=1)), "mean_loss": float(np.mean([r.loss for r in recs]))}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "eval_metrics.json", metrics)
        rows = [dataclasses.asdict(r) for r in recs]
        write_csv(out / "eval_episodes.csv", ["episode", "seed", "accuracy", "loss"], rows, preamble(cfg))
    metrics["records"] = recs
    return metrics


# --------------------------------------------------------------- attack


def attack_clip(cfg: RunConfig):
    if cfg.attack.clip:
        return tuple(cfg.attack.clip)
    return (0.0, 1.0) if cfg.dataset.kind == "image_dir" else None


def _attack_source(seed: int, indices, norm: str, eps: float) -> RandomSource:
    # Keyed by (norm, eps) so a draw never depends on which other grid points were requested.
    key = int(np.float64(eps).view(np.uint64))
    gens = [np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i, 3, NORMS.index(norm), key])))
            for i in indices]
    return RandomSource(gens)


def input_gradient_fn(learner: Learner, theta, phi):
    """``(x, y) -> (loss, dloss/dx)`` for a batch of episodes on the deterministic path."""

    def fn(x, y):
        xt = ad.tensor(x[:, None])
        logits = forward(learner.net, theta, xt, evaluation_plan(learner, theta, phi))
        loss = ad.softmax_cross_entropy(logits, y[:, None], reduction="sum")
        return loss.item(), ad.grad(loss, xt).data[:, 0]

    return fn


def attack(cfg: RunConfig, params: MetaParams, norm: str | None = None, eps_grid=None, episodes: int | None = None,
           out: Path | None = None) -> list[dict]:
    """Adversarial accuracy of the adapted models on test inputs for every ``eps`` in the grid."""
    norm = norm or cfg.attack.norm
    grid = tuple(cfg.attack.eps_grid if eps_grid is None else eps_grid)
    n = episodes or cfg.attack.episodes
    dist = build_distribution(cfg)
    learner = build_learner(cfg, dist.input_shape)
    d = cfg.dataset
    eps_list = dist.episodes("test", n, d.way, d.shot, d.m_per_class)
    feature_ndim = len(learner.net.input_shape)
    phi = {k: v.detach() for k, v in params.phi.items()}
    acc = {e: [] for e in grid}
    size = cfg.eval.chunk_size
    for start in range(0, n, size):
        batch = EpisodeBatch.from_episodes(eps_list[start : start + size])
        star, _, _ = adapt_and_evaluate(learner, params, batch, cfg.meta, cfg.seed)
        fn = input_gradient_fn(learner, star, phi)
        for e in grid:
            acfg = AttackConfig(norm, e, cfg.attack.steps, cfg.attack.step_size or None, cfg.attack.random_start,
                                attack_clip(cfg))
            x_adv = pgd_attack(fn, batch.x_te, batch.y_te, acfg, _attack_source(cfg.seed, batch.indices, norm, e),
                               feature_ndim=feature_ndim)
            with ad.no_grad():
                logits = forward(learner.net, star, x_adv[:, None], evaluation_plan(learner, star, phi))
            acc[e].extend((logits.data.argmax(-1)[:, 0] == batch.y_te).mean(axis=1).tolist())
    rows = []
    for e in grid:
        mean, hw = accuracy_ci(acc[e])
        rows.append({"norm": norm, "eps": float(e), "episodes": n, "accuracy": mean, "halfwidth": hw})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"attack_{norm}.csv", ["norm", "eps", "episodes", "accuracy", "halfwidth"], rows,
                  preamble(cfg))
    return rows


# ------------------------------------------------------------- boundary


def boundary(cfg: RunConfig, params: MetaParams, episode: int, class_pair: tuple, out: Path | None = None):
    """Project one adapted episode's test features onto a class pair's decision normal."""
    c1, c2 = class_pair
    d = cfg.dataset
    if not (0 <= c1 < d.way and 0 <= c2 < d.way) or c1 == c2:
        raise ConfigError("class_pair", f"need two distinct classes in [0, {d.way})")
    dist = build_distribution(cfg)
    learner = build_learner(cfg, dist.input_shape)
    ep = dist.sample("test", episode, d.way, d.shot, d.m_per_class)
    batch = EpisodeBatch.from_episodes([ep])
    star, _, _ = adapt_and_evaluate(learner, params, batch, cfg.meta, cfg.seed)
    phi = {k: v.detach() for k, v in params.phi.items()}
    with ad.no_grad():
        _, h = forward(learner.net, star, batch.x_te[:, None], evaluation_plan(learner, star, phi),
                       return_features=True)
    H = h.data[0, 0]
    keep = np.isin(ep.y_te, class_pair)
    W = star["out/w"].data[0, 0]
    b = star["out/b"].data[0, 0, 0]
    proj = boundary_project(H[keep], W, b, c1, c2)
    rows = [{"episode": episode, "class_pair": f"{c1}-{c2}", "c_x": repr(float(x)), "c_y": repr(float(y)),
             "c_x_db": repr(proj.cx_db), "true_label": int(t), "predicted_label": int(p)}
            for x, y, t, p in zip(proj.cx, proj.cy, ep.y_te[keep], proj.predicted)]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_boundary_csv(out / f"boundary_ep{episode}_{c1}-{c2}.csv", rows,
                           {**preamble(cfg), "c_x_db": repr(proj.cx_db)})
    return proj, rows
