"""Toy ten-class image set, image I/O and manifest ingestion.

The procedural set is fully determined by ``(GENERATOR_VERSION, seed, index)``,
so the same split is reproduced on any machine without shipping pixels.
Images are ``3 x 64 x 64`` float arrays in [0, 1], quantized to 8 bits so they
survive a lossless PNG round trip.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

GENERATOR_VERSION = 1
IMAGE_SIZE = 64
CLASS_NAMES = (
    "disc", "square", "triangle", "ring", "cross",
    "hstripes", "vstripes", "checker", "diagonal", "dots",
)
NUM_CLASSES = len(CLASS_NAMES)

SPLIT_SEEDS = {"train": 1000, "val": 2000, "test": 3000}


def _colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    while True:
        fg, bg = rng.uniform(0.05, 0.95, size=(2, 3))
        if np.abs(fg - bg).mean() > 0.3:
            return fg, bg


def _mask(label: int, rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.35 * n, 0.65 * n, size=2)
    size = rng.uniform(0.18 * n, 0.3 * n)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    ry = dy * np.cos(theta) - dx * np.sin(theta)
    rx = dy * np.sin(theta) + dx * np.cos(theta)
    period = rng.uniform(6, 12)
    if label == 0:
        return np.hypot(dy, dx) < size
    if label == 1:
        return (np.abs(ry) < size * 0.85) & (np.abs(rx) < size * 0.85)
    if label == 2:
        return (ry > -size * 0.6) & (np.abs(rx) < (ry + size * 0.6) * 0.6) & (ry < size)
    if label == 3:
        d = np.hypot(dy, dx)
        return (d < size) & (d > size * 0.55)
    if label == 4:
        arm = size * 0.3
        return ((np.abs(ry) < arm) & (np.abs(rx) < size)) | ((np.abs(rx) < arm) & (np.abs(ry) < size))
    if label == 5:
        return np.sin(2 * np.pi * yy / period + rng.uniform(0, 6.3)) > 0
    if label == 6:
        return np.sin(2 * np.pi * xx / period + rng.uniform(0, 6.3)) > 0
    if label == 7:
        cell = period / 1.5
        return ((np.floor(yy / cell) + np.floor(xx / cell)) % 2) == 0
    if label == 8:
        sign = 1 if rng.random() < 0.5 else -1
        return np.sin(2 * np.pi * (yy + sign * xx) / (period * 1.4)) > 0
    if label == 9:
        cell = period * 1.2
        fy = (yy % cell) - cell / 2
        fx = (xx % cell) - cell / 2
        return np.hypot(fy, fx) < cell * 0.28
    raise ValueError(f"unknown class {label}")


def render(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """One ``3 x size x size`` image of class ``label``."""
    fg, bg = _colors(rng)
    mask = _mask(label, rng, size).astype(np.float64)
    ramp = np.linspace(-1, 1, size)
    shade = rng.uniform(-0.12, 0.12) * ramp[None, :] + rng.uniform(-0.12, 0.12) * ramp[:, None]
    img = mask[None] * fg[:, None, None] + (1 - mask[None]) * bg[:, None, None]
    img = img + shade[None] + rng.normal(0, 0.03, size=img.shape)
    return to_uint8_float(img)


def to_uint8_float(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.float32) / 255.0


def make_split(split: str, count: int, size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic balanced split: ``(images N x 3 x size x size, labels N)``."""
    seed = SPLIT_SEEDS[split]
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.arange(count) % NUM_CLASSES
    for i in range(count):
        rng = np.random.default_rng([GENERATOR_VERSION, seed, i])
        images[i] = render(int(labels[i]), rng, size)
    return images, labels.astype(np.int64)


# -- file I/O -------------------------------------------------------------

def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit image file as a ``3 x H x W`` float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write a ``3 x H x W`` array in [0, 1] as a lossless 8-bit PNG."""
    arr = np.round(np.clip(np.asarray(img), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_manifest(path: str | os.PathLike) -> list[tuple[Path, int]]:
    """Parse a ``path,label`` manifest; relative paths resolve against its directory."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rel, label = line.rsplit(",", 1)
            entries.append((path.parent / rel.strip(), int(label)))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'path,label', got {line!r}") from None
    return entries


def load_manifest_dataset(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    entries = read_manifest(path)
    images = np.stack([load_image(p) for p, _ in entries]) if entries else np.zeros((0, 3, 0, 0), np.float32)
    labels = np.array([label for _, label in entries], dtype=np.int64)
    return images, labels


def write_split(directory: str | os.PathLike, split: str, count: int) -> Path:
    """Materialize a procedural split as PNGs plus ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images, labels = make_split(split, count)
    lines = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"{split}_{i:05d}.png"
        save_image(directory / name, img)
        lines.append(f"{name},{label}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(source: str | os.PathLike, split: str = "train", count: int | None = None):
    """Load ``builtin`` (procedural) data or a manifest file/directory."""
    if str(source) == "builtin":
        return make_split(split, count if count is not None else DEFAULT_COUNTS[split])
    p = Path(source)
    if p.is_dir():
        p = p / "manifest.txt"
    images, labels = load_manifest_dataset(p)
    if count is not None:
        images, labels = images[:count], labels[:count]
    return images, labels


DEFAULT_COUNTS = {"train": 16000, "val": 200, "test": 200}
