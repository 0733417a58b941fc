"""Procedural datasets, trigger/target library and array-container I/O.

Arrays are stored as ``.npy`` next to a ``.json`` descriptor.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .attacks import TargetImage, TriggerPattern

SHAPE_KINDS = ("circle", "square", "cross")


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _grid(size)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    if kind == "cross":
        w = max(r * 0.35, 0.75)
        return ((np.abs(yy - cy) <= w) & (np.abs(xx - cx) <= r)) | ((np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= r))
    raise ValueError(f"unknown shape kind {kind!r}")


def synth_dataset(n: int, size: int = 16, seed: int = 0, kinds=SHAPE_KINDS):
    """Shapes with jittered position, radius and colour on a dark background.

    Returns ``(images, labels)``; images are float32 ``[n, 3, size, size]``
    in ``[-1, 1]``. Classes are exactly balanced (up to ``n mod k``) and
    shuffled.
    """
    if n <= 0:
        raise ValueError("dataset must contain at least one image")
    kinds = tuple(kinds)
    for k in kinds:
        if k not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {k!r}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(kinds))
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        r = rng.uniform(0.22, 0.34) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        bg = rng.uniform(-1.0, -0.6, size=3)
        fg = rng.uniform(-0.2, 1.0, size=3)
        fg[rng.integers(3)] = 1.0
        mask = _shape_mask(kinds[lab], size, cy, cx, r)
        images[i] = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    return images, labels.astype(np.int64)


def make_trigger(name: str, size: int = 16) -> TriggerPattern:
    """Additive trigger patterns (values in [-2, 2]); zero away from the pattern."""
    p = np.zeros((3, size, size), dtype=np.float32)
    yy, xx = _grid(size)
    s = size / 16.0
    if name == "box":
        lo, hi = size - 6 * s, size - 1 * s
        outer = (yy >= lo) & (yy <= hi) & (xx >= lo) & (xx <= hi)
        inner = (yy >= lo + 1.2 * s) & (yy <= hi - 1.2 * s) & (xx >= lo + 1.2 * s) & (xx <= hi - 1.2 * s)
        p[:, outer & ~inner] = 2.0
    elif name == "stop":
        cy = cx = size - 4.0 * s
        m = (np.abs(yy - cy) + np.abs(xx - cx) <= 4.2 * s) & (np.abs(yy - cy) <= 3.2 * s) & (np.abs(xx - cx) <= 3.2 * s)
        p[0, m], p[1, m], p[2, m] = 2.0, -1.5, -1.5
    elif name == "warning":
        m = (yy >= 9 * s) & (yy <= 15 * s) & (np.abs(xx - 4 * s) <= (yy - 9 * s) * 0.55)
        p[0, m], p[1, m], p[2, m] = 2.0, 2.0, -1.5
    elif name == "stripe":
        m = (yy >= 1 * s) & (yy <= 3 * s)
        p[:, m] = 1.5
    elif name == "checker":
        m = (yy <= 6 * s) & (xx <= 6 * s)
        p[:, m] = np.where(((yy[m] // (2 * s)) + (xx[m] // (2 * s))) % 2 == 0, 1.8, -1.8)
    elif name == "strong":
        rng = np.random.default_rng(1234)
        p[:] = rng.choice([-3.0, 3.0], size=p.shape)
    else:
        raise ValueError(f"unknown trigger {name!r}")
    return TriggerPattern(p, name)


TRIGGERS = ("box", "stop", "warning", "stripe", "checker", "strong")
TARGETS = ("diamond", "bars", "ring")


def make_target(name: str, size: int = 16) -> TargetImage:
    yy, xx = _grid(size)
    c = size / 2.0
    img = np.empty((3, size, size), dtype=np.float32)
    if name == "diamond":
        m = np.abs(yy - c) + np.abs(xx - c) <= 0.4 * size
        img[0] = np.where(m, 1.0, -0.9)
        img[1] = np.where(m, 0.9, -0.9)
        img[2] = np.where(m, 0.2, 0.8)
    elif name == "bars":
        m = (xx // max(size // 8, 1)) % 2 == 0
        img[0] = np.where(m, 0.9, -0.6)
        img[1] = np.where(m, -0.8, 0.7)
        img[2] = -0.8
    elif name == "ring":
        r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
        m = (r >= 0.22 * size) & (r <= 0.38 * size)
        img[0] = np.where(m, -0.7, 0.9)
        img[1] = np.where(m, 1.0, 0.9)
        img[2] = np.where(m, 0.3, -0.9)
    else:
        raise ValueError(f"unknown target {name!r}")
    return TargetImage(img, name)


def save_array(path, array: np.ndarray, **meta) -> Path:
    """Write ``path.npy`` plus ``path.json`` describing shape, dtype and ``meta``."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array)
    np.save(path.with_suffix(".npy"), array)
    desc = {"file": path.with_suffix(".npy").name, "shape": list(array.shape), "dtype": str(array.dtype), **meta}
    path.with_suffix(".json").write_text(json.dumps(desc, indent=2, sort_keys=True))
    return path.with_suffix(".npy")


def load_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path).with_suffix("")
    desc = json.loads(path.with_suffix(".json").read_text())
    arr = np.load(path.parent / desc["file"])
    if list(arr.shape) != desc["shape"] or str(arr.dtype) != desc["dtype"]:
        raise ValueError(f"{path}: array does not match its descriptor")
    return arr, desc


def write_dataset(directory, images: np.ndarray, labels: np.ndarray, **meta) -> Path:
    directory = Path(directory)
    save_array(directory / "images", images, kind="images", **meta)
    save_array(directory / "labels", labels, kind="labels", **meta)
    return directory


def read_dataset(directory) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    images, _ = load_array(directory / "images")
    labels, _ = load_array(directory / "labels")
    if images.shape[0] == 0:
        raise ValueError(f"{directory}: empty dataset")
    return images, labels
