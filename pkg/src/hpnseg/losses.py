"""Training objective: voxel cross-entropy plus a negative-Pearson pairing term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .ndtensor import Tensor, _apply, add, log_softmax_channels, nll_mean, scale

DEFAULT_PAIR_WEIGHT = 0.5
PAIR_EPS = 1e-8


class NegPearson:
    @staticmethod
    def forward(f1, f2, eps=PAIR_EPS):
        a = f1.reshape(-1) - f1.mean()
        b = f2.reshape(-1) - f2.mean()
        sab = float(a @ b)
        saa = float(a @ a)
        sbb = float(b @ b)
        root = np.sqrt(saa * sbb)
        guarded = root < eps
        denom = eps if guarded else root
        r = sab / denom
        loss = -r
        clamped = loss < -1.0 or loss > 1.0
        loss = min(1.0, max(-1.0, loss))
        return np.asarray(loss, dtype=f1.dtype), (a, b, r, saa, sbb, denom, clamped, guarded, f1.shape)

    @staticmethod
    def backward(saved, g, eps=PAIR_EPS):
        a, b, r, saa, sbb, denom, clamped, guarded, shape = saved
        if clamped:
            z = np.zeros(shape, dtype=a.dtype)
            return z, z.copy()
        if guarded:
            # constant denominator below the floor
            d1, d2 = -g * b / denom, -g * a / denom
        else:
            sq = denom * denom
            d1 = -g * (b / denom - r * sbb * a / sq)
            d2 = -g * (a / denom - r * saa * b / sq)
        # float64 scalar statistics must not promote float32 gradients
        return d1.astype(a.dtype, copy=False).reshape(shape), d2.astype(a.dtype, copy=False).reshape(shape)


def pairing_loss(f1, f2, eps: float = PAIR_EPS) -> Tensor:
    """Negative Pearson correlation between two feature maps, in [-1, 1].

    ``eps`` floors the denominator, so constant inputs give 0 rather than a
    division by zero while non-degenerate inputs keep the exact correlation.
    """
    s1 = f1.shape
    s2 = f2.shape
    if tuple(s1) != tuple(s2):
        raise DimensionError(f"pairing inputs differ in shape: {s1} vs {s2}")
    if int(np.prod(s1)) < 2:
        raise ContractError("pairing loss needs at least two elements")
    return _apply(NegPearson, f1, f2, eps=eps)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean voxel-wise cross-entropy from logits ``(K+1, ...)`` and integer labels."""
    labels = np.asarray(labels)
    shape = logits.shape
    if labels.size != int(np.prod(shape[1:])):
        raise DimensionError(f"{labels.size} labels for {shape[1:]} voxels")
    return nll_mean(log_softmax_channels(logits), labels.astype(np.intp, copy=False))


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    corr: float
    pair_weight: float
    total: float

    def log_line(self, it: int) -> str:
        return f"{it},{self.ce:.8g},{self.corr:.8g},{self.total:.8g}"


def total_loss(ce: float, corr: float, pair_weight: float = DEFAULT_PAIR_WEIGHT) -> LossBreakdown:
    if pair_weight < 0:
        raise ContractError("pair weight must be non-negative")
    ce, corr = float(ce), float(corr)
    return LossBreakdown(ce, corr, float(pair_weight), ce + pair_weight * corr)


def objective(ce: Tensor, corr: Tensor | None, pair_weight: float = DEFAULT_PAIR_WEIGHT) -> Tensor:
    """Differentiable ``ce + pair_weight * corr``."""
    if corr is None or pair_weight == 0:
        return ce
    return add(ce, scale(corr, pair_weight))
