"""Overlap metrics, ensembling rules, significance testing and tables."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..dataio import DUCT, MASS, TISSUE, LabelMap, label_map
from ..errors import ContractError, DimensionError

STRUCTURES = ("abnormal pancreas", "PDAC mass", "pancreatic duct")
_COLUMN_TITLES = ("Abnormal pancreas", "PDAC mass", "Pancreatic duct")
# later entries win when two ensemble members claim a voxel for different classes
UNION_PRIORITY = (TISSUE, DUCT, MASS)


def _mask(x) -> np.ndarray:
    return np.asarray(x.voxels if isinstance(x, LabelMap) else x).astype(bool)


def dsc(truth, pred) -> float:
    """Dice-Sorensen coefficient of two boolean masks on the same grid.

    Both empty counts as perfect agreement (1.0); exactly one empty gives 0.0.
    """
    y = _mask(truth)
    z = _mask(pred)
    if y.shape != z.shape:
        raise DimensionError(f"mask grids differ: {y.shape} vs {z.shape}")
    ny, nz = int(y.sum()), int(z.sum())
    if ny + nz == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, z).sum()) / (ny + nz)


def abnormal_union(labels) -> np.ndarray:
    lab = np.asarray(labels.voxels if isinstance(labels, LabelMap) else labels)
    return np.isin(lab, (TISSUE, MASS, DUCT))


def structure_masks(labels) -> Dict[str, np.ndarray]:
    lab = np.asarray(labels.voxels if isinstance(labels, LabelMap) else labels)
    return {
        "abnormal pancreas": abnormal_union(lab),
        "PDAC mass": lab == MASS,
        "pancreatic duct": lab == DUCT,
    }


def case_dsc(truth, pred) -> Dict[str, float]:
    t = structure_masks(truth)
    p = structure_masks(pred)
    return {s: dsc(t[s], p[s]) for s in STRUCTURES}


def fuse_average(prob_a: np.ndarray, prob_b: np.ndarray) -> LabelMap:
    """Argmax of the voxel-wise mean of two class-probability maps ``(K+1, W, H, L)``."""
    prob_a = np.asarray(prob_a)
    prob_b = np.asarray(prob_b)
    if prob_a.shape != prob_b.shape:
        raise DimensionError(f"probability maps differ: {prob_a.shape} vs {prob_b.shape}")
    mean = 0.5 * (prob_a + prob_b)
    return label_map(np.argmax(mean, axis=0))


def union_ensemble(pred_original, pred_virtual) -> LabelMap:
    """Class-wise OR of two label maps; conflicts go to mass, then duct, then tissue."""
    a = np.asarray(pred_original.voxels if isinstance(pred_original, LabelMap) else pred_original)
    b = np.asarray(pred_virtual.voxels if isinstance(pred_virtual, LabelMap) else pred_virtual)
    if a.shape != b.shape:
        raise DimensionError(f"label maps differ: {a.shape} vs {b.shape}")
    out = np.zeros(a.shape, dtype=np.uint8)
    for c in UNION_PRIORITY:
        out[(a == c) | (b == c)] = c
    return label_map(out)


def permutation_test(dsc_x: Sequence[float], dsc_y: Sequence[float], n_resamples: int = 100_000, seed: int = 0) -> float:
    """Two-sided paired sign-flip test on per-case differences.

    Exact over all 2**n sign patterns when n <= 20, otherwise Monte Carlo
    with a fixed seed.
    """
    x = np.asarray(dsc_x, dtype=np.float64)
    y = np.asarray(dsc_y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("paired samples must be 1-d and of equal length")
    d = x - y
    n = d.size
    if n == 0 or not np.any(d):
        return 1.0
    observed = abs(d.sum())
    tol = 1e-12 * max(1.0, np.abs(d).sum())
    if n <= 20:
        hits = 0
        total = 0
        chunk_bits = min(n, 14)
        low = np.array(list(itertools.product((1.0, -1.0), repeat=chunk_bits)))
        low_sums = low @ d[:chunk_bits]
        rest = n - chunk_bits
        for signs in itertools.product((1.0, -1.0), repeat=rest):
            s = low_sums + (np.dot(signs, d[chunk_bits:]) if rest else 0.0)
            hits += int(np.count_nonzero(np.abs(s) >= observed - tol))
            total += s.size
        return hits / total
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_resamples:
        m = min(10_000, n_resamples - done)
        flips = rng.choice((-1.0, 1.0), size=(m, n))
        hits += int(np.count_nonzero(np.abs(flips @ d) >= observed - tol))
        done += m
    return hits / n_resamples


@dataclass
class MetricsReport:
    case_ids: List[str] = field(default_factory=list)
    scores: Dict[str, List[float]] = field(default_factory=lambda: {s: [] for s in STRUCTURES})

    def add(self, case_id: str, per_structure: Dict[str, float]) -> None:
        for s in STRUCTURES:
            v = float(per_structure[s])
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"DSC out of range: {v}")
            self.scores[s].append(v)
        self.case_ids.append(case_id)

    def mean(self, structure: str) -> float:
        return float(np.mean(self.scores[structure]))

    def std(self, structure: str) -> float:
        return float(np.std(self.scores[structure]))

    def median(self, structure: str) -> float:
        return float(np.median(self.scores[structure]))

    def sorted_by_case(self) -> "MetricsReport":
        order = sorted(range(len(self.case_ids)), key=lambda i: self.case_ids[i])
        out = MetricsReport([self.case_ids[i] for i in order])
        out.scores = {s: [v[i] for i in order] for s, v in self.scores.items()}
        return out

    def to_json(self) -> str:
        return json.dumps({"case_ids": self.case_ids, "scores": self.scores}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        return cls(list(raw["case_ids"]), {s: [float(v) for v in raw["scores"][s]] for s in STRUCTURES})


def _pct(value: float) -> str:
    return str((Decimal(str(float(value))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_cell(mean: float, std: float) -> str:
    return f"{_pct(mean)} ± {_pct(std)}"


def report_table(reports: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Table of mean ± std DSC in percent, one row per method."""
    if not reports:
        raise ContractError("no reports to tabulate")
    width = max(len("Method"), *(len(name) for name, _ in reports))
    lines = [" | ".join([f"{'Method':<{width}}", *_COLUMN_TITLES])]
    lines.append("-" * len(lines[0]))
    for name, rep in reports:
        cells = [format_cell(rep.mean(s), rep.std(s)) for s in STRUCTURES]
        lines.append(" | ".join([f"{name:<{width}}", *cells]))
    return "\n".join(lines) + "\n"
