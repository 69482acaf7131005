"""K-fold cross-validation over a case list and the method ladder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

from ..dataio import CaseManifest
from ..errors import ConfigurationError
from .evaluation import MetricsReport, case_dsc, fuse_average
from .training import Prepared, TrainConfig, TrainedModel, predict_case, prepare, train

log = logging.getLogger(__name__)

# evaluated methods and the training modes each one needs
METHODS = {
    "single-a": ("single-a",),
    "single-b": ("single-b",),
    "fusion": ("single-a", "single-b"),
    "hyper": ("hyper",),
    "hyper-aug": ("hyper-aug",),
    "hpn": ("hpn",),
}


@dataclass(frozen=True)
class FoldSplit:
    n_folds: int
    assignment: Dict[str, int]

    def test_ids(self, fold: int) -> List[str]:
        return [c for c, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        return [c for c, f in self.assignment.items() if f != fold]


def fold_split(case_ids: Sequence[str], n_folds: int = 3) -> FoldSplit:
    """Deterministic split: case ``i`` of the manifest order goes to fold ``i % n_folds``."""
    if len(case_ids) < n_folds:
        raise ConfigurationError(f"need at least {n_folds} cases for {n_folds}-fold cross-validation")
    if len(set(case_ids)) != len(case_ids):
        raise ConfigurationError("case ids must be unique")
    return FoldSplit(n_folds, {c: i % n_folds for i, c in enumerate(case_ids)})


def _load_all(source, dtype) -> List[Prepared]:
    if isinstance(source, CaseManifest):
        return [prepare(source.load(i), dtype) for i in range(len(source))]
    return [c if isinstance(c, Prepared) else prepare(c, dtype) for c in source]


def crossval_ladder(
    source,
    cfg: TrainConfig,
    methods: Sequence[str] = ("single-a", "single-b", "fusion", "hyper", "hpn"),
    n_folds: int = 3,
    stride: int | None = None,
) -> Dict[str, MetricsReport]:
    """Cross-validate several methods, training each needed mode once per fold.

    ``source`` is a :class:`CaseManifest` or a list of cases.  Per-case DSC is
    pooled over test folds in manifest order.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigurationError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    cases = _load_all(source, cfg.np_dtype)
    split = fold_split([c.case_id for c in cases], n_folds)
    by_id = {c.case_id: c for c in cases}
    modes = sorted({m for meth in methods for m in METHODS[meth]}, key=list(METHODS).index)
    per_case: Dict[str, Dict[str, dict]] = {m: {} for m in methods}
    stride = stride or max(1, cfg.patch // 2)
    for fold in range(n_folds):
        train_cases = [by_id[c] for c in split.train_ids(fold)]
        test_cases = [by_id[c] for c in split.test_ids(fold)]
        models: Dict[str, TrainedModel] = {}
        for mode in modes:
            log.info("fold %d: training %s on %d cases", fold, mode, len(train_cases))
            models[mode] = train(replace(cfg, mode=mode), train_cases)
        for case in test_cases:
            outputs = {mode: predict_case(models[mode], case, cfg.patch, stride) for mode in modes}
            for meth in methods:
                if meth == "fusion":
                    pred = fuse_average(outputs["single-a"][0], outputs["single-b"][0])
                else:
                    pred = outputs[meth][1]
                per_case[meth][case.case_id] = case_dsc(case.labels, pred)
    reports = {}
    for meth in methods:
        rep = MetricsReport()
        for c in cases:
            rep.add(c.case_id, per_case[meth][c.case_id])
        reports[meth] = rep
    return reports


def crossval(source, cfg: TrainConfig, n_folds: int = 3) -> MetricsReport:
    return crossval_ladder(source, cfg, (cfg.mode,), n_folds)[cfg.mode]
