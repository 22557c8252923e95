"""Evaluation metrics for saliency maps and perturbations.

Saliency agreement: cc, sim, and the fixation-based AUC family (shuffled and
uniform-negative variants) plus an evaluation-side nss. Perceptibility: a
windowed ssim and the plain 2-norm. Fixation-based metrics consume a
:class:`FixationSet`; at desk scale fixations are sampled from ground-truth
maps by :func:`pseudo_fixations` rather than recorded from observers.

These are value-only measures, implemented independently of the attack losses
so the two sides can cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorops import Array, ShapeMismatchError


@dataclass(frozen=True)
class FixationSet:
    """Discrete (row, col) gaze positions within an image of known size."""

    positions: tuple[tuple[int, int], ...]
    height: int
    width: int

    def __post_init__(self):
        if not self.positions:
            raise ValueError("a fixation set cannot be empty")
        for r, c in self.positions:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ValueError(f"fixation ({r}, {c}) outside {self.height}x{self.width}")

    def flat(self) -> np.ndarray:
        return np.array([r * self.width + c for r, c in self.positions])


def _check_same_shape(a: Array, b: Array) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def cc(map_a: Array, map_b: Array) -> float:
    """Pearson correlation of the flattened maps; 0 if either is constant."""
    _check_same_shape(map_a, map_b)
    a = map_a.ravel().astype(np.float64)
    b = map_b.ravel().astype(np.float64)
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt((ac * ac).sum())
    nb = np.sqrt((bc * bc).sum())
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float((ac * bc).sum() / (na * nb))


def sim(map_a: Array, map_b: Array) -> float:
    """Histogram intersection of the sum-normalized maps, in [0, 1]."""
    _check_same_shape(map_a, map_b)
    sa = map_a.sum()
    sb = map_b.sum()
    if sa <= 0 or sb <= 0:
        raise ValueError("sim needs maps with positive total mass")
    return float(np.minimum(map_a / sa, map_b / sb).sum())


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    n = len(values)
    bounds = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1], True])
    starts, ends = bounds[:-1], bounds[1:]
    mid = (starts + ends + 1) / 2.0  # 1-based average rank of each tie run
    ranks = np.empty(n)
    ranks[order] = np.repeat(mid, ends - starts)
    return ranks


def auc_saliency(sal_map: Array, positives: FixationSet, negatives: FixationSet) -> float:
    """Exact rank-based ROC area of map values at positives vs negatives,
    with half credit for ties."""
    pos = positives.flat()
    neg = negatives.flat()
    if set(pos.tolist()) & set(neg.tolist()):
        raise ValueError("positive and negative fixation sets must be disjoint")
    flat = sal_map.ravel()
    values = np.concatenate([flat[pos], flat[neg]])
    ranks = _midranks(values)
    npos, nneg = len(pos), len(neg)
    return float((ranks[:npos].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def auc_borji(sal_map: Array, positives: FixationSet, seed: int,
              n_negatives: int = 100, draws: int = 10) -> float:
    """AUC with uniformly random negatives, averaged over seeded draws."""
    h, w = sal_map.shape
    rng = np.random.default_rng(seed)
    pos_flat = set(positives.flat().tolist())
    candidates = np.array([i for i in range(h * w) if i not in pos_flat])
    if len(candidates) < n_negatives:
        raise ValueError("map too small for the requested negative count")
    total = 0.0
    for _ in range(draws):
        chosen = rng.choice(candidates, size=n_negatives, replace=False)
        negatives = FixationSet(tuple((int(i) // w, int(i) % w) for i in chosen), h, w)
        total += auc_saliency(sal_map, positives, negatives)
    return total / draws


def shuffled_auc(sal_map: Array, positives: FixationSet, other_fixations, seed: int,
                 draws: int = 10) -> float:
    """sAUC: negatives drawn from fixations of *other* images in the batch."""
    h, w = sal_map.shape
    pos_flat = set(positives.flat().tolist())
    pool = []
    for fs in other_fixations:
        pool.extend(p for p in fs.positions if p[0] * w + p[1] not in pos_flat)
    pool = sorted(set(pool))
    if not pool:
        raise ValueError("shuffled AUC needs a non-empty negative pool")
    rng = np.random.default_rng(seed)
    k = min(len(positives.positions), len(pool))
    total = 0.0
    for _ in range(draws):
        chosen = rng.choice(len(pool), size=k, replace=False)
        negatives = FixationSet(tuple(pool[i] for i in chosen), h, w)
        total += auc_saliency(sal_map, positives, negatives)
    return total / draws


def nss(sal_map: Array, fixations: FixationSet) -> float:
    """Mean of the standardized map at fixation positions; 0 for a flat map."""
    flat = sal_map.ravel().astype(np.float64)
    sd = flat.std()
    if sd < 1e-12:
        return 0.0
    z = (flat - flat.mean()) / sd
    return float(z[fixations.flat()].mean())


# SSIM constants for unit dynamic range.
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 8
_SSIM_STRIDE = 4


def _window_starts(dim: int) -> list[int]:
    if dim < _SSIM_WINDOW:
        raise ValueError(f"ssim needs maps of at least {_SSIM_WINDOW} pixels per side")
    starts = list(range(0, dim - _SSIM_WINDOW + 1, _SSIM_STRIDE))
    if starts[-1] != dim - _SSIM_WINDOW:
        starts.append(dim - _SSIM_WINDOW)
    return starts


def _ssim_channel(a: Array, b: Array) -> float:
    rows = _window_starts(a.shape[0])
    cols = _window_starts(a.shape[1])
    total = 0.0
    for r in rows:
        for c in cols:
            wa = a[r:r + _SSIM_WINDOW, c:c + _SSIM_WINDOW]
            wb = b[r:r + _SSIM_WINDOW, c:c + _SSIM_WINDOW]
            mu_a, mu_b = wa.mean(), wb.mean()
            var_a = (wa * wa).mean() - mu_a * mu_a
            var_b = (wb * wb).mean() - mu_b * mu_b
            cov = (wa * wb).mean() - mu_a * mu_b
            total += (((2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2))
                      / ((mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)))
    return total / (len(rows) * len(cols))


def ssim(image_a: Array, image_b: Array) -> float:
    """Mean local SSIM over 8x8 windows with stride 4, averaged over channels.

    Expects values in [0, 1] (the constants assume unit dynamic range).
    Accepts HxW maps or CxHxW images.
    """
    _check_same_shape(image_a, image_b)
    if image_a.ndim == 2:
        return float(_ssim_channel(image_a, image_b))
    return float(np.mean([_ssim_channel(image_a[c], image_b[c])
                          for c in range(image_a.shape[0])]))


def l2_perceptibility(delta: Array) -> float:
    """Euclidean norm of the flattened perturbation."""
    return float(np.linalg.norm(np.asarray(delta).ravel()))


def pseudo_fixations(sal_map: Array, count: int, seed: int) -> FixationSet:
    """Sample fixation positions without replacement, proportional to map mass."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if sal_map.min() < 0:
        raise ValueError("pseudo-fixations need a non-negative map")
    total = sal_map.sum()
    if total <= 0:
        raise ValueError("pseudo-fixations need a map with positive total mass")
    p = (sal_map / total).ravel()
    nonzero = int((p > 0).sum())
    if count > nonzero:
        raise ValueError(f"cannot draw {count} distinct positions from {nonzero} "
                         "cells with mass")
    rng = np.random.default_rng(seed)
    h, w = sal_map.shape
    chosen = rng.choice(h * w, size=count, replace=False, p=p)
    return FixationSet(tuple((int(i) // w, int(i) % w) for i in chosen), h, w)
