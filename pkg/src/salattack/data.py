"""Synthetic blob dataset: the toy models' training and evaluation material.

Each sample is a 3xHxW RGB image in [0, 1] holding 1-3 bright Gaussian blobs
on a textured noise background, paired with a ground-truth saliency map (the
blob mixture, normalized to sum to 1). Blob centers land on integer pixels so
a single-blob map's argmax is exactly its center. Generation is fully driven
by one ``numpy`` generator per dataset, so equal seeds give equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensorops as T
from .tensorops import Array

DEFAULT_DIMS = (48, 64)  # (height, width)


def _box_blur(noise: Array, radius: int = 2) -> Array:
    k = 2 * radius + 1
    padded = np.pad(noise, radius, mode="edge")
    csum = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    h, w = noise.shape
    return (csum[k:k + h, k:k + w] - csum[:h, k:k + w]
            - csum[k:k + h, :w] + csum[:h, :w]) / (k * k)


def _gaussian(h: int, w: int, center: tuple[int, int], sigma: float) -> Array:
    rows = np.arange(h)[:, None] - center[0]
    cols = np.arange(w)[None, :] - center[1]
    return np.exp(-(rows * rows + cols * cols) / (2.0 * sigma * sigma))


def _blob_sample(rng: np.random.Generator, dims: tuple[int, int],
                 centers=None) -> tuple[Array, Array]:
    h, w = dims
    # Contrast scales: blobs clear a ~40% luminance step over the background,
    # while staying within reach of budget-bounded perturbations.
    base = rng.uniform(0.20, 0.26)
    texture = _box_blur(rng.uniform(0.0, 1.0, size=(h, w)))
    texture = (texture - texture.mean()) * 0.015
    tint = rng.uniform(0.97, 1.03, size=3)
    image = np.clip(base + texture, 0.08, 0.40)[None, :, :] * tint[:, None, None]

    if centers is None:
        k = int(rng.integers(1, 4))
        margin = 8
        centers = [(int(rng.integers(margin, h - margin)),
                    int(rng.integers(margin, w - margin))) for _ in range(k)]
    sal = np.zeros((h, w))
    for center in centers:
        sigma = float(rng.uniform(2.5, 4.5))
        peak = float(rng.uniform(0.035, 0.055))
        blob = _gaussian(h, w, center, sigma)
        color = rng.uniform(0.9, 1.0, size=3)
        image = image + peak * color[:, None, None] * blob[None, :, :]
        sal = sal + blob
    image = np.clip(image, 0.0, 1.0)
    sal = sal / sal.sum()
    return image, sal


def generate_synthetic_dataset(count: int, dims: tuple[int, int] = DEFAULT_DIMS,
                               seed: int = 0) -> list[tuple[Array, Array]]:
    """``count`` (image, saliency-map) pairs, deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return [_blob_sample(rng, dims) for _ in range(count)]


def single_blob_image(dims: tuple[int, int], center: tuple[int, int],
                      seed: int) -> tuple[Array, Array]:
    """One image with exactly one blob at a chosen center; handy for building
    controlled original/guide pairs."""
    rng = np.random.default_rng(seed)
    return _blob_sample(rng, dims, centers=[center])


def attack_pairs(count: int, dims: tuple[int, int] = DEFAULT_DIMS,
                 seed: int = 0) -> list[tuple[Array, Array]]:
    """(original, guide) image pairs: original salient on the left half, guide
    on the right, with per-pair texture variation."""
    h, w = dims
    pairs = []
    rng = np.random.default_rng(seed)
    for _ in range(count):
        row = int(rng.integers(12, h - 12))
        col_left = int(rng.integers(10, w // 2 - 6))
        col_right = int(rng.integers(w // 2 + 6, w - 10))
        s1, s2 = map(int, rng.integers(0, 2 ** 31, size=2))
        original, _ = single_blob_image(dims, (row, col_left), s1)
        guide, _ = single_blob_image(dims, (row, col_right), s2)
        pairs.append((original, guide))
    return pairs


def save_dataset(directory, dataset) -> None:
    """Write samples as SFT1 tensors plus 8-bit PPM/PGM previews."""
    from . import pnm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (image, sal) in enumerate(dataset):
        img_name, map_name = f"img_{i:03d}.sft1", f"map_{i:03d}.sft1"
        T.write_sft1(directory / img_name, image)
        T.write_sft1(directory / map_name, sal)
        pnm.write_ppm(directory / f"img_{i:03d}.ppm", image)
        pnm.write_pgm(directory / f"map_{i:03d}.pgm", sal / sal.max())
        names.append({"image": img_name, "map": map_name})
    (directory / "dataset.json").write_text(json.dumps({"samples": names}, indent=2) + "\n")


def load_dataset(directory) -> list[tuple[Array, Array]]:
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    return [(T.read_sft1(directory / s["image"]), T.read_sft1(directory / s["map"]))
            for s in manifest["samples"]]
