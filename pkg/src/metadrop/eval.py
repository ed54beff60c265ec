"""Evaluation utilities: confidence intervals, PGD attacks, boundary projections."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

NORMS = ("l1", "l2", "linf")


# ----------------------------------------------------------------- metrics


def accuracy_ci(records) -> tuple[float, float]:
    """Mean accuracy and 95% half-width ``1.96 * sd / sqrt(n)`` (sample sd).

    ``records`` may hold ``RunRecord``-like objects with an ``accuracy``
    attribute or plain numbers.
    """
    acc = np.array([getattr(r, "accuracy", r) for r in records], dtype=np.float64)
    if acc.size < 2:
        raise ValueError("accuracy_ci needs at least two records")
    sd = acc.std(ddof=1)
    return float(acc.mean()), float(1.96 * sd / np.sqrt(acc.size))


# ----------------------------------------------------------------- attacks


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    eps: float = 0.1
    steps: int = 200
    step_size: Optional[float] = None  # default 2.5 * eps / steps
    random_start: bool = True
    clip: Optional[tuple] = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps


def _rows(a: np.ndarray, feature_ndim: int) -> np.ndarray:
    return a.reshape(a.shape[: a.ndim - feature_ndim] + (-1,))


def perturbation_norm(delta: np.ndarray, norm: str, feature_ndim: int = 1) -> np.ndarray:
    flat = _rows(delta, feature_ndim)
    if norm == "linf":
        return np.abs(flat).max(axis=-1)
    if norm == "l2":
        return np.sqrt((flat * flat).sum(axis=-1))
    return np.abs(flat).sum(axis=-1)


def _project_l1(flat: np.ndarray, eps: float) -> np.ndarray:
    # Euclidean projection of each row onto the l1 ball via the sorted-simplex method.
    a = np.abs(flat)
    inside = a.sum(axis=-1) <= eps
    if inside.all():
        return flat
    u = -np.sort(-a, axis=-1)
    css = np.cumsum(u, axis=-1)
    k = np.arange(1, a.shape[-1] + 1)
    cond = u - (css - eps) / k > 0
    rho = cond.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = (np.take_along_axis(css, rho[..., None], -1)[..., 0] - eps) / (rho + 1)
    proj = np.sign(flat) * np.maximum(a - theta[..., None], 0.0)
    return np.where(inside[..., None], flat, proj)


def project(delta: np.ndarray, norm: str, eps: float, feature_ndim: int = 1) -> np.ndarray:
    """Project perturbations onto the ``norm`` ball of radius ``eps`` (per instance)."""
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = _rows(delta, feature_ndim)
    if norm == "l2":
        n = np.sqrt((flat * flat).sum(axis=-1, keepdims=True))
        scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
        return (flat * scale).reshape(delta.shape)
    return _project_l1(flat, eps).reshape(delta.shape)


def steepest_direction(g: np.ndarray, norm: str, feature_ndim: int = 1) -> np.ndarray:
    """Unit-norm steepest-ascent direction; zero where the gradient is zero.

    For l1 all mass goes on the largest-magnitude coordinate (lowest index on ties).
    """
    if norm == "linf":
        return np.sign(g)
    flat = _rows(g, feature_ndim)
    if norm == "l2":
        n = np.sqrt((flat * flat).sum(axis=-1, keepdims=True))
        return (flat / np.where(n > 0, n, 1.0)).reshape(g.shape)
    idx = np.abs(flat).argmax(axis=-1)
    d = np.zeros_like(flat)
    picked = np.take_along_axis(flat, idx[..., None], -1)
    np.put_along_axis(d, idx[..., None], np.sign(picked), -1)
    return d.reshape(g.shape)


def random_start(shape: tuple, norm: str, eps: float, source, feature_ndim: int = 1) -> np.ndarray:
    """Uniform sample from the ``norm`` ball of radius ``eps``."""
    lead = shape[: len(shape) - feature_ndim]
    d = int(np.prod(shape[len(shape) - feature_ndim:]))
    if norm == "linf":
        return eps * (2.0 * source.uniform(shape) - 1.0)
    radius = eps * source.uniform(lead + (1,)) ** (1.0 / d)
    if norm == "l2":
        v = source.normal(lead + (d,))
        n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        v = v / np.where(n > 0, n, 1.0)
    else:
        e = -np.log1p(-source.uniform(lead + (d,)))
        signs = np.where(source.uniform(lead + (d,)) < 0.5, -1.0, 1.0)
        total = e.sum(axis=-1, keepdims=True)
        v = signs * e / np.where(total > 0, total, 1.0)
    return (radius * v).reshape(shape)


class _GeneratorSource:
    def __init__(self, rng):
        self.rng = rng

    def uniform(self, shape):
        return self.rng.random(shape)

    def normal(self, shape):
        return self.rng.standard_normal(shape)


def pgd_attack(model_eval_fn: Callable, x, y, cfg: AttackConfig, rng=None, feature_ndim: int = 1):
    """Projected gradient ascent on the loss within an ``eps``-ball around ``x``.

    ``model_eval_fn(x, y)`` returns ``(loss, grad_x)``.  The trailing
    ``feature_ndim`` axes of ``x`` form one instance; norms, directions and
    projections are per instance.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return x0.copy()
    if rng is None:
        source = _GeneratorSource(np.random.default_rng(0))
    elif isinstance(rng, np.random.Generator):
        source = _GeneratorSource(rng)
    else:
        source = rng

    def clamp(a):
        return a if cfg.clip is None else np.clip(a, cfg.clip[0], cfg.clip[1])

    delta = np.zeros_like(x0)
    if cfg.random_start:
        delta = random_start(x0.shape, cfg.norm, cfg.eps, source, feature_ndim)
    x_adv = clamp(x0 + project(delta, cfg.norm, cfg.eps, feature_ndim))
    for _ in range(cfg.steps):
        _, g = model_eval_fn(x_adv, y)
        step = cfg.eta * steepest_direction(np.asarray(g), cfg.norm, feature_ndim)
        delta = project(x_adv + step - x0, cfg.norm, cfg.eps, feature_ndim)
        x_adv = clamp(x0 + delta)
    return x_adv


# -------------------------------------------------------- boundary export


@dataclass
class BoundaryProjection:
    cx: np.ndarray
    cy: np.ndarray
    cx_db: float
    c1: int
    c2: int
    predicted: np.ndarray = field(default=None)


def pca_reducer(residual: np.ndarray) -> np.ndarray:
    """First principal-component score of each row (deterministic sign)."""
    r = residual - residual.mean(axis=0, keepdims=True)
    if r.shape[0] < 2 or not np.any(r):
        return np.zeros(r.shape[0])
    _, _, vt = np.linalg.svd(r, full_matrices=False)
    v = vt[0]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return r @ v


def boundary_project(H, W, b, c1: int, c2: int, y_reducer: Callable | None = None) -> BoundaryProjection:
    """Project last-layer features onto the normal of the two-class boundary.

    ``W`` has one column per class and ``b`` one entry per class.  The
    x-coordinate of each point is its signed position along the normalised
    ``w_c1 - w_c2``; the boundary itself sits at ``cx_db``.
    """
    H = np.asarray(H, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    dw = W[:, c1] - W[:, c2]
    norm = np.linalg.norm(dw)
    if norm < 1e-12:
        raise ValueError(f"degenerate class pair ({c1}, {c2}): identical classifier columns")
    u = dw / norm
    cx = H @ u
    cx_db = float(-(b[c1] - b[c2]) / norm)
    residual = H - np.outer(cx, u)
    cy = (y_reducer or pca_reducer)(residual)
    s1 = H @ W[:, c1] + b[c1]
    s2 = H @ W[:, c2] + b[c2]
    predicted = np.where(s1 >= s2, c1, c2)
    return BoundaryProjection(cx, np.asarray(cy, dtype=np.float64), cx_db, c1, c2, predicted)


def write_boundary_csv(path, rows: Sequence[dict], preamble: dict) -> None:
    """One row per instance; ``preamble`` (config hash, seed) goes in a leading comment."""
    cols = ["episode", "class_pair", "c_x", "c_y", "c_x_db", "true_label", "predicted_label"]
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in preamble.items()) + "\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in cols})
