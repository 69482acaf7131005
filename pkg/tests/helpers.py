"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

from hpnseg.ndtensor import Relu, Tape

H = 1e-3


def relu_pattern(run):
    """Concatenated relu activation masks of a taped ``run()``."""
    with Tape() as tape:
        run()
    masks = [n.saved.ravel() for n in tape.nodes if n.op is Relu]
    return np.concatenate(masks) if masks else np.zeros(0, bool)


def central_fd(f, arrays, h=H, max_entries=None, rng=None, pattern=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arrays`` (perturbed in place).

    Returns one gradient array per input; with ``max_entries`` only a random
    subset of coordinates is probed and the rest are left as NaN.  When
    ``pattern()`` (e.g. relu masks) changes inside ``[x-h, x+h]`` the
    difference straddles a kink and that coordinate is left as NaN too.
    """
    base = pattern() if pattern is not None else None
    out = []
    for a in arrays:
        g = np.full(a.shape, np.nan)
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            crossed = pattern is not None and not np.array_equal(pattern(), base)
            flat[i] = old - h
            fm = f()
            crossed = crossed or (pattern is not None and not np.array_equal(pattern(), base))
            flat[i] = old
            if not crossed:
                g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_error(analytic, numeric):
    """Norm-wise relative error over the probed coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    assert mask.any(), "no valid finite-difference coordinates"
    a, n = a[mask], n[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)
