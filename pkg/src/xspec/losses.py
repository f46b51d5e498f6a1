"""Triplet hinge loss over pair descriptors plus an L1 sparsity penalty on
the attended output maps.

total = max(d(anchor, positive) - d(anchor, negative) + margin, 0)
        + sparsity_weight * mean(L1(f_out) over the triplet's three maps)

Distances are Euclidean over flattened descriptors.  Subgradients are zero
at the hinge boundary and at zero distance; sign(0) = 0 for the L1 term.
Gradients are returned w.r.t. the three f_out maps so the caller can push
them through attention.backward_pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import NegativeActivation, PairActivation
from .errors import DimMismatchError, InvalidConfigError


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    sparsity_weight: float = 1e-3

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidConfigError(f"margin must be >= 0, got {self.margin}")
        if self.sparsity_weight < 0:
            raise InvalidConfigError(f"sparsity_weight must be >= 0, got {self.sparsity_weight}")


def triplet_loss(anchor, positive, negative, margin: float):
    """Hinge loss on descriptor distances.

    Returns (loss, grad_anchor, grad_positive, grad_negative) over the 1-D
    descriptor vectors.
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if a.shape != p.shape or a.shape != n.shape:
        raise DimMismatchError(f"descriptor shapes differ: {a.shape}, {p.shape}, {n.shape}")
    diff_p = a - p
    diff_n = a - n
    d_pos = float(np.linalg.norm(diff_p))
    d_neg = float(np.linalg.norm(diff_n))
    loss = d_pos - d_neg + margin
    ga, gp, gn = np.zeros_like(a), np.zeros_like(p), np.zeros_like(n)
    if loss <= 0.0:
        return 0.0, ga, gp, gn
    if d_pos > 0.0:
        u = diff_p / d_pos
        ga += u
        gp -= u
    if d_neg > 0.0:
        v = diff_n / d_neg
        ga -= v
        gn += v
    return loss, ga, gp, gn


def l1_sparsity(f_out: np.ndarray):
    """Sum of absolute values over all patch/channel entries; grad is sign."""
    f = np.asarray(f_out, dtype=np.float64)
    return float(np.abs(f).sum()), np.sign(f)


def total_loss(pa: PairActivation, neg: NegativeActivation, cfg: LossConfig):
    """Triplet hinge on (f_out_a, f_out_b, f_out_n) descriptors plus weighted
    mean L1 over the three maps.

    Returns (loss, grad_out_a, grad_out_b, grad_out_n) with gradients w.r.t.
    the attended output maps.
    """
    shape = pa.f_out_a.shape
    tl, ga, gp, gn = triplet_loss(
        pa.f_out_a.reshape(-1),
        pa.f_out_b.reshape(-1),
        neg.f_out_n.reshape(-1),
        cfg.margin,
    )
    grad_a = ga.reshape(shape)
    grad_b = gp.reshape(shape)
    grad_n = gn.reshape(shape)
    s_a, sg_a = l1_sparsity(pa.f_out_a)
    s_b, sg_b = l1_sparsity(pa.f_out_b)
    s_n, sg_n = l1_sparsity(neg.f_out_n)
    w = cfg.sparsity_weight / 3.0
    loss = tl + w * (s_a + s_b + s_n)
    return loss, grad_a + w * sg_a, grad_b + w * sg_b, grad_n + w * sg_n
