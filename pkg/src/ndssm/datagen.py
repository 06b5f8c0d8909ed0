"""Synthetic scenes defined on the unit square, renderable at any resolution.

A scene is a background level plus a list of primitives painted in order.
Primitive edges are smooth (a ``tanh`` ramp of width ``edge_width``), so the
scene is a fixed continuous function and renders at different resolutions
are samplings of the same signal.  Array axis 0 is ``y`` and axis 1 is ``x``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError
from .resolution import resample_image

SHAPES = ("ellipse", "rectangle", "ring")
RING_INNER = 0.55
EDGE_WIDTH = 0.01

# (shape, count) per class label
CLASS_RULES = (("ellipse", 1), ("ellipse", 2), ("ring", 1), ("ring", 2),
               ("rectangle", 1), ("rectangle", 2))


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple
    axes: tuple
    rotation: float = 0.0
    intensity: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DomainError(f"unknown primitive {self.shape!r}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "axes", tuple(float(v) for v in self.axes))


@dataclass(frozen=True)
class SceneSpec:
    label: int
    primitives: tuple = ()
    background: float = 0.0
    seed: int = 0
    edge_width: float = EDGE_WIDTH

    def __post_init__(self):
        prims = tuple(p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives)
        object.__setattr__(self, "primitives", prims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return d

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        d = dict(d)
        d["primitives"] = tuple(Primitive(**{**p, "center": tuple(p["center"]), "axes": tuple(p["axes"])})
                                for p in d.get("primitives", ()))
        return cls(**d)


def _signed_distance(p: Primitive, x, y):
    cx, cy = p.center
    ax, ay = p.axes
    ct, st = np.cos(p.rotation), np.sin(p.rotation)
    dx, dy = x - cx, y - cy
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    if p.shape == "rectangle":
        return np.minimum(ax - np.abs(u), ay - np.abs(v))
    outer = (1.0 - np.hypot(u / ax, v / ay)) * min(ax, ay)
    if p.shape == "ellipse":
        return outer
    ix, iy = ax * RING_INNER, ay * RING_INNER
    inner = (1.0 - np.hypot(u / ix, v / iy)) * min(ix, iy)
    return np.minimum(outer, -inner)


def scene_intensity(scene: SceneSpec, x, y) -> np.ndarray:
    """Analytic intensity of ``scene`` at points ``(x, y)`` of the unit square."""
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    out = np.full(x.shape, float(scene.background))
    for p in scene.primitives:
        cover = 0.5 * (1.0 + np.tanh(_signed_distance(p, x, y) / scene.edge_width))
        out = out + cover * (p.intensity - out)
    return out


def render(scene: SceneSpec, resolution, antialias_samples: int = 4) -> np.ndarray:
    """Render to a ``(1, rows, cols)`` feature map.

    Every pixel is the mean of the scene over an ``s x s`` grid of stratified
    sub-samples (cell midpoints) of its area.
    """
    rows, cols = (int(v) for v in np.broadcast_to(resolution, (2,)))
    s = int(antialias_samples)
    if rows < 2 or cols < 2:
        raise DomainError(f"resolution must be >= 2 per axis, got {(rows, cols)}")
    if s < 1:
        raise DomainError(f"antialias_samples must be >= 1, got {s}")
    ys = (np.arange(rows * s) + 0.5) / (rows * s)
    xs = (np.arange(cols * s) + 0.5) / (cols * s)
    img = scene_intensity(scene, xs[None, :], ys[:, None])
    return img.reshape(rows, s, cols, s).mean(axis=(1, 3))[None]


@dataclass(frozen=True)
class DatasetManifest:
    n_train: int = 2000
    n_val: int = 500
    n_classes: int = 4
    seed: int = 0
    antialias_samples: int = 4
    render_cache: tuple = ()

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(CLASS_RULES):
            raise DomainError(f"n_classes must be in [2, {len(CLASS_RULES)}]")
        if self.n_train < 0 or self.n_val < 0:
            raise DomainError("split sizes must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render_cache"] = [list(r) for r in self.render_cache]
        return d

    @classmethod
    def from_dict(cls, d) -> "DatasetManifest":
        d = dict(d)
        d["render_cache"] = tuple(tuple(r) for r in d.get("render_cache", ()))
        return cls(**d)


_SPLIT_CODE = {"train": 0, "val": 1}


def _make_scene(label: int, rng: np.random.Generator, seed: int) -> SceneSpec:
    shape, count = CLASS_RULES[label]
    if shape == "ring":
        lo, hi = (0.24, 0.36) if count == 1 else (0.18, 0.26)
    else:
        lo, hi = (0.10, 0.28) if count == 1 else (0.08, 0.20)
    prims = []
    for _ in range(count):
        axes = tuple(rng.uniform(lo, hi, size=2))
        r = max(axes)
        for _attempt in range(100):
            center = tuple(rng.uniform(r, 1.0 - r, size=2))
            if all(np.hypot(center[0] - q.center[0], center[1] - q.center[1]) > r + max(q.axes)
                   for q in prims):
                break
        prims.append(Primitive(shape=shape, center=center, axes=axes,
                               rotation=float(rng.uniform(0.0, np.pi)),
                               intensity=float(rng.uniform(0.7, 1.0))))
    return SceneSpec(label=label, primitives=tuple(prims),
                     background=float(rng.uniform(0.0, 0.2)), seed=seed)


def make_scenes(manifest: DatasetManifest, split: str) -> list:
    n = manifest.n_train if split == "train" else manifest.n_val
    scenes = []
    for i in range(n):
        seed = int(np.random.SeedSequence([manifest.seed, _SPLIT_CODE[split], i]).generate_state(1)[0])
        scenes.append(_make_scene(i % manifest.n_classes, np.random.default_rng(seed), seed))
    return scenes


def make_dataset(manifest: DatasetManifest):
    """Class-balanced ``(train_scenes, val_scenes)``; labels cycle through the classes."""
    return make_scenes(manifest, "train"), make_scenes(manifest, "val")


class SyntheticDataset:
    """Scenes plus a per-resolution render cache."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.scenes = dict(zip(("train", "val"), make_dataset(manifest)))
        self._cache = {}
        for res in manifest.render_cache:
            for split in self.scenes:
                self.arrays(split, res)

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    def labels(self, split: str) -> np.ndarray:
        return np.array([s.label for s in self.scenes[split]], dtype=np.int64)

    def arrays(self, split: str, resolution):
        res = tuple(int(v) for v in np.broadcast_to(resolution, (2,)))
        key = (split, res)
        if key not in self._cache:
            imgs = np.stack([render(s, res, self.manifest.antialias_samples) for s in self.scenes[split]]) \
                if self.scenes[split] else np.zeros((0, 1) + res)
            self._cache[key] = imgs
        return self._cache[key], self.labels(split)

    def to_json(self) -> str:
        return json.dumps({"manifest": self.manifest.to_dict(),
                           "train": [s.to_dict() for s in self.scenes["train"]],
                           "val": [s.to_dict() for s in self.scenes["val"]]})


@dataclass
class ArrayDataset:
    """Image arrays loaded from files; other resolutions come from :func:`resample_image`."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    n_classes: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.n_classes:
            self.n_classes = int(max(self.train_y.max(initial=0), self.val_y.max(initial=0))) + 1

    def labels(self, split: str) -> np.ndarray:
        return np.asarray(self.train_y if split == "train" else self.val_y, dtype=np.int64)

    def arrays(self, split: str, resolution):
        x = self.train_x if split == "train" else self.val_x
        res = tuple(int(v) for v in np.broadcast_to(resolution, (x.ndim - 2,)))
        key = (split, res)
        if key not in self._cache:
            self._cache[key] = x if x.shape[2:] == res else resample_image(x, res)
        return self._cache[key], self.labels(split)
