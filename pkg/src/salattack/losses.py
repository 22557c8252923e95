"""Attack losses over stacks of feature maps, with analytic gradients.

Every loss takes two stacks of shape (n, h, w) — the adversarial side and a
frozen reference side — and returns ``(value, grad)`` where ``grad`` is the
derivative of the value w.r.t. the adversarial stack. The same functions serve
the feature-space attack (n selected channels of a hidden layer) and the
image-space attack (the 1-channel final saliency map).

Values follow each metric's native convention (KL is a divergence, CC a
correlation, NSS a normalized scanpath score, L1 a distance);
:func:`attack_objective` adapts them into a single minimization convention
where 0 means "identical" for every kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorops import Array, ShapeMismatchError

EPS = 1e-8

LOSS_NAMES = ("kl", "cc", "nss", "l1", "mix")


@dataclass(frozen=True)
class LossKind:
    """A loss selector; ``mix`` carries (kl, cc, nss, l1) weights."""

    name: str
    mix_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}")
        if self.name == "mix":
            if any(w < 0 for w in self.mix_weights) or sum(self.mix_weights) <= 0:
                raise ValueError("mix weights must be non-negative with a positive sum")


KL = LossKind("kl")
CC = LossKind("cc")
NSS = LossKind("nss")
L1 = LossKind("l1")
MIX = LossKind("mix")


def _check_stacks(adv: Array, ref: Array) -> None:
    if adv.ndim != 3 or ref.ndim != 3 or adv.shape != ref.shape:
        raise ShapeMismatchError(
            f"loss stacks must share an (n, h, w) shape, got {tuple(adv.shape)} "
            f"vs {tuple(ref.shape)}")


def _as_distribution(chan: Array) -> Array:
    """Turn one map into a distribution: lift negative maps to zero minimum,
    then sum-normalize. Non-negative maps keep their ratios."""
    lo = chan.min()
    shifted = chan - lo if lo < 0 else chan
    return shifted / (shifted.sum() + EPS)


def kl_channelwise(adv: Array, ref: Array) -> tuple[float, Array]:
    """Mean per-channel KL divergence between map distributions.

    Each channel is normalized by :func:`_as_distribution`. The divergence is
    taken between the epsilon-lifted distributions, sum_j (p_j + eps) *
    log((p_j + eps) / (q_j + eps)): both sides carry the same total mass, so
    the value is exactly non-negative (Gibbs), exactly zero at p = q, and the
    gradient stays finite on zero cells.
    """
    _check_stacks(adv, ref)
    n = adv.shape[0]
    total = 0.0
    grad = np.empty_like(adv)
    for c in range(n):
        a = adv[c]
        lo = a.min()
        shifted = a - lo if lo < 0 else a
        s = shifted.sum() + EPS
        p = shifted / s
        q = _as_distribution(ref[c])
        log_ratio = np.log((p + EPS) / (q + EPS))
        total += float(((p + EPS) * log_ratio).sum())
        # d/dp of the lifted divergence, then through the sum normalization.
        gp = log_ratio + 1.0
        gs = (gp - (gp * p).sum()) / s
        if lo < 0:
            flat = np.argmin(a)
            gs = gs.copy()
            gs.flat[flat] -= gs.sum()
        grad[c] = gs
    return total / n, grad / n


def cc_loss(adv: Array, ref: Array) -> tuple[float, Array]:
    """Mean per-channel Pearson correlation (value in [-1, 1]).

    A constant channel on either side contributes 0 with zero gradient: it
    carries no spatial signal to correlate against.
    """
    _check_stacks(adv, ref)
    n = adv.shape[0]
    total = 0.0
    grad = np.zeros_like(adv)
    for c in range(n):
        a = adv[c].ravel()
        b = ref[c].ravel()
        ac = a - a.mean()
        bc = b - b.mean()
        na = np.sqrt((ac * ac).sum())
        nb = np.sqrt((bc * bc).sum())
        if na < 1e-12 or nb < 1e-12:
            continue
        r = float((ac * bc).sum() / (na * nb))
        total += r
        g = bc / (na * nb) - r * ac / (na * na)
        grad[c] = g.reshape(adv[c].shape)
    return total / n, grad / n


def _fixation_mask(chan: Array) -> Array:
    """Pseudo-fixations for a reference map: its top decile of values."""
    thresh = np.quantile(chan, 0.9)
    return chan >= thresh


def nss_loss(adv: Array, ref: Array) -> tuple[float, Array]:
    """Mean per-channel normalized scanpath saliency.

    The adversarial channel is standardized to zero mean / unit variance and
    averaged over the reference channel's pseudo-fixation positions (top 10%
    of its values). Zero-variance adversarial channels contribute 0.
    """
    _check_stacks(adv, ref)
    n = adv.shape[0]
    total = 0.0
    grad = np.zeros_like(adv)
    for c in range(n):
        a = adv[c].ravel()
        m = a.size
        mask = _fixation_mask(ref[c]).ravel()
        k = int(mask.sum())
        mu = a.mean()
        ac = a - mu
        sd = np.sqrt((ac * ac).mean())
        if sd < 1e-12:
            continue
        z = ac / (sd + EPS)
        total += float(z[mask].mean())
        # d/da of mean_M[(a - mu)/(sd + eps)] with sd = sqrt(mean(ac^2)).
        sum_ac_m = ac[mask].sum()
        g = (mask.astype(float) - k / m) / (sd + EPS)
        g -= sum_ac_m * ac / (m * sd * (sd + EPS) ** 2)
        grad[c] = (g / k).reshape(adv[c].shape)
    return total / n, grad / n


def l1_loss(adv: Array, ref: Array) -> tuple[float, Array]:
    """Mean absolute difference; subgradient sign(0) = 0."""
    _check_stacks(adv, ref)
    diff = adv - ref
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def self_nss(ref: Array) -> float:
    """NSS of a stack against its own pseudo-fixations (the attainable top)."""
    value, _ = nss_loss(ref, ref)
    return value


def mix_loss(adv: Array, ref: Array,
             weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
             ) -> tuple[float, Array]:
    """Weighted combination of the four losses in "0 means identical" form:
    KL + (1 - CC) + NSS deficit + L1.

    The NSS term enters as nss(ref, ref) - nss(adv, ref) so that the value
    vanishes when the stacks coincide, like the other three components.
    """
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ValueError("mix weights must be non-negative with a positive sum")
    wk, wc, wn, wl = weights
    value = 0.0
    grad = np.zeros_like(adv)
    if wk:
        v, g = kl_channelwise(adv, ref)
        value += wk * v
        grad += wk * g
    if wc:
        v, g = cc_loss(adv, ref)
        value += wc * (1.0 - v)
        grad -= wc * g
    if wn:
        v, g = nss_loss(adv, ref)
        value += wn * (self_nss(ref) - v)
        grad -= wn * g
    if wl:
        v, g = l1_loss(adv, ref)
        value += wl * v
        grad += wl * g
    return value, grad


def attack_objective(kind: LossKind, adv: Array, ref: Array) -> tuple[float, Array]:
    """Uniform minimization objective: 0 when the stacks agree, growing with
    dissimilarity. Targeted attacks descend this; nontargeted attacks ascend it.
    """
    if kind.name == "kl":
        return kl_channelwise(adv, ref)
    if kind.name == "cc":
        v, g = cc_loss(adv, ref)
        return 1.0 - v, -g
    if kind.name == "nss":
        v, g = nss_loss(adv, ref)
        return self_nss(ref) - v, -g
    if kind.name == "l1":
        return l1_loss(adv, ref)
    return mix_loss(adv, ref, kind.mix_weights)
