"""Virtual paired-set augmentation: convex mixing of the two phases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Volume
from .errors import ConfigurationError, ContractError, DimensionError

DEFAULT_ALPHA = 0.4


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = DEFAULT_ALPHA
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"mixup alpha must be > 0, got {self.alpha}")


def augment_rng(seed: int, worker: int = 0) -> np.random.Generator:
    """Dedicated stream for mixing coefficients; one per worker."""
    return np.random.default_rng([seed ^ worker, 0x5EED])


def sample_mixup_coeff(cfg: MixupConfig, rng: np.random.Generator) -> float:
    """Draw lambda_mix ~ Beta(alpha, alpha)."""
    return float(rng.beta(cfg.alpha, cfg.alpha))


def virtual_pair(xa, xb, lam_mix: float):
    """Return ``(lam*xa + (1-lam)*xb, lam*xb + (1-lam)*xa)``.

    Accepts numpy arrays or :class:`Volume` objects (headers are kept).
    """
    if not 0.0 <= lam_mix <= 1.0:
        raise ContractError(f"mixing coefficient must lie in [0, 1], got {lam_mix}")
    a = xa.voxels if isinstance(xa, Volume) else np.asarray(xa)
    b = xb.voxels if isinstance(xb, Volume) else np.asarray(xb)
    if a.shape != b.shape:
        raise DimensionError(f"phase extents differ: {a.shape} vs {b.shape}")
    if lam_mix == 1.0:
        ma, mb = a.copy(), b.copy()
    elif lam_mix == 0.0:
        ma, mb = b.copy(), a.copy()
    else:
        ma = lam_mix * a + (1.0 - lam_mix) * b
        mb = lam_mix * b + (1.0 - lam_mix) * a
    if isinstance(xa, Volume):
        ma = Volume(xa.header, ma.astype(a.dtype, copy=False))
        mb = Volume(xb.header, mb.astype(b.dtype, copy=False))
    else:
        ma, mb = ma.astype(a.dtype, copy=False), mb.astype(b.dtype, copy=False)
    return ma, mb
