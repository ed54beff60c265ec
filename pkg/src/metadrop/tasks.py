"""Episodic few-shot tasks: a synthetic 2-D distribution and PNG image directories."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .noise import episode_stream

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# Stream tags per split, so val and test episodes never share random numbers.
SPLIT_TAGS = {"train": 11, "val": 12, "test": 13}


@dataclass
class Episode:
    x_tr: np.ndarray
    y_tr: np.ndarray
    x_te: np.ndarray
    y_te: np.ndarray
    way: int
    shot: int
    index: int = 0
    seed: int = 0
    classes: tuple = ()  # pool entries behind labels 0..way-1 (image episodes)

    @property
    def n_train(self) -> int:
        return len(self.y_tr)

    @property
    def n_test(self) -> int:
        return len(self.y_te)


@dataclass
class TaskDistribution:
    """A source of episodes.

    ``synthetic2d`` draws a fresh rotated ring of Gaussian classes per
    episode; splits differ only by random stream.  ``image_dir`` holds
    decoded images per base class and, per split, a list of
    ``(base_class, quarter_turns)`` entries.
    """

    kind: str
    seed: int = 0
    radius: tuple = (1.0, 2.0)
    jitter: tuple = (0.1, 0.25)
    images: list = field(default_factory=list)  # uint8 (n, H, W, C) per base class
    class_names: list = field(default_factory=list)
    pools: dict = field(default_factory=dict)
    image_size: int = 0
    channels: int = 1

    def __post_init__(self):
        if self.kind not in ("synthetic2d", "image_dir"):
            raise ValueError(f"unknown task distribution kind {self.kind!r}")
        if self.kind == "image_dir":
            seen = set()
            for split, pool in self.pools.items():
                bases = {b for b, _ in pool}
                if bases & seen:
                    raise ValueError(f"class pools overlap at split {split!r}")
                seen |= bases

    @property
    def input_shape(self) -> tuple:
        if self.kind == "synthetic2d":
            return (2,)
        return (self.image_size, self.image_size, self.channels)

    def num_classes(self, split: str) -> int | None:
        return None if self.kind == "synthetic2d" else len(self.pools.get(split, ()))

    def rng(self, split: str, index: int) -> np.random.Generator:
        if split not in SPLIT_TAGS:
            raise ValueError(f"unknown split {split!r}")
        return episode_stream(self.seed, index, SPLIT_TAGS[split])

    def sample(self, split: str, index: int, way: int, shot: int, m_per_class: int = 15) -> Episode:
        """Episode ``index`` of ``split``; a pure function of (seed, split, index)."""
        rng = self.rng(split, index)
        if self.kind == "synthetic2d":
            ep = sample_synthetic_episode(self, way, shot, m_per_class, rng)
        else:
            ep = sample_image_episode(self, way, shot, m_per_class, split, rng)
        ep.index = index
        ep.seed = self.seed
        return ep

    def episodes(self, split: str, count: int, way: int, shot: int, m_per_class: int = 15, start: int = 0):
        return [self.sample(split, i, way, shot, m_per_class) for i in range(start, start + count)]


def synthetic2d(seed: int = 0, radius=(1.0, 2.0), jitter=(0.1, 0.25)) -> TaskDistribution:
    return TaskDistribution("synthetic2d", seed, tuple(radius), tuple(jitter))


def ring_prototypes(phi0: float, r: float, way: int) -> np.ndarray:
    angles = phi0 + 2.0 * np.pi * np.arange(way) / way
    return r * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _split_order(way: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(way), per_class)


def sample_synthetic_episode(dist: TaskDistribution, way: int, shot: int, m_per_class: int,
                             rng: np.random.Generator) -> Episode:
    """Classes sit on a randomly rotated circle with isotropic Gaussian jitter."""
    if way < 2:
        raise ValueError("way must be >= 2")
    if shot < 1 or m_per_class < 1:
        raise ValueError("shot and m_per_class must be >= 1")
    phi0 = rng.uniform(0.0, 2.0 * np.pi)
    r = rng.uniform(*dist.radius)
    s = rng.uniform(*dist.jitter)
    protos = ring_prototypes(phi0, r, way)
    y_tr = _split_order(way, shot)
    y_te = _split_order(way, m_per_class)
    x_tr = protos[y_tr] + s * rng.standard_normal((len(y_tr), 2))
    x_te = protos[y_te] + s * rng.standard_normal((len(y_te), 2))
    return Episode(x_tr, y_tr, x_te, y_te, way, shot)


# ------------------------------------------------------------------ images


def _load_png(path: Path, image_size: int, channels: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        if img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.Resampling.LANCZOS)
        arr = np.asarray(img, dtype=np.uint8)
    return arr[..., None] if channels == 1 else arr


def read_split_file(path) -> dict:
    """Lines of ``<split> <class_name>``; blank lines and ``#`` comments ignored."""
    pools = {s: [] for s in SPLITS}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2 or parts[0] not in pools:
            raise ValueError(f"{path}:{lineno}: expected '<train|val|test> <class_name>'")
        pools[parts[0]].append(parts[1])
    return pools


def ingest_image_dir(root, image_size: int = 28, rotations: bool = True, channels: int = 1, seed: int = 0,
                     ratios=(0.7, 0.1, 0.2), split_file=None, min_images: int = 1) -> TaskDistribution:
    """Decode ``root/<class>/<image>.png`` into a task distribution.

    Class and file order are lexicographic.  Base classes are split first
    (via ``split_file`` or a seeded shuffle with ``ratios``) and only then
    expanded into four rotated classes each, so a rotated copy always stays
    in its parent's split.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} contains no class directories")
    names, images = [], []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise ValueError(f"class directory {cdir} is empty")
        arrs = []
        for f in files:
            try:
                arrs.append(_load_png(f, image_size, channels))
            except Exception as exc:  # Pillow raises a variety of decode errors
                warnings.warn(f"skipping unreadable image {f}: {exc}", RuntimeWarning)
        if len(arrs) < min_images:
            raise ValueError(f"class {cdir.name} has {len(arrs)} usable images, needs {min_images}")
        names.append(cdir.name)
        images.append(np.stack(arrs))

    if split_file is not None:
        by_name = read_split_file(split_file)
        index = {n: i for i, n in enumerate(names)}
        missing = [n for pool in by_name.values() for n in pool if n not in index]
        if missing:
            raise ValueError(f"split file names unknown classes: {missing[:5]}")
        base_pools = {s: [index[n] for n in by_name[s]] for s in SPLITS}
    else:
        base_pools = split_classes(len(names), ratios, seed)

    turns = (0, 1, 2, 3) if rotations else (0,)
    pools = {s: [(b, k) for b in base for k in turns] for s, base in base_pools.items()}
    return TaskDistribution("image_dir", seed, images=images, class_names=names, pools=pools,
                            image_size=image_size, channels=channels)


def split_classes(n: int, ratios, seed: int) -> dict:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    ratios = ratios / ratios.sum()
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    cuts = [0, n_train, n_train + n_val, n]
    return {s: sorted(order[a:b].tolist()) for s, a, b in zip(SPLITS, cuts, cuts[1:])}


def rotate(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate ``(..., H, W, C)`` images counter-clockwise by 90 degrees per turn."""
    return np.rot90(img, quarter_turns % 4, axes=(-3, -2))


def sample_image_episode(dist: TaskDistribution, way: int, shot: int, m_per_class: int, split: str,
                         rng: np.random.Generator) -> Episode:
    pool = dist.pools.get(split, [])
    if len(pool) < way:
        raise ValueError(f"split {split!r} has {len(pool)} classes, need {way}")
    need = shot + m_per_class
    picks = rng.choice(len(pool), size=way, replace=False)
    x_tr, x_te = [], []
    for c in picks:
        base, k = pool[c]
        imgs = dist.images[base]
        if len(imgs) < need:
            raise ValueError(f"class {dist.class_names[base]} has {len(imgs)} images, need {need}")
        idx = rng.choice(len(imgs), size=need, replace=False)
        chosen = rotate(imgs[idx], k).astype(np.float64) / 255.0
        x_tr.append(chosen[:shot])
        x_te.append(chosen[shot:])
    return Episode(np.concatenate(x_tr), _split_order(way, shot), np.concatenate(x_te),
                   _split_order(way, m_per_class), way, shot, classes=tuple(int(c) for c in picks))
