"""Training loop, checkpoints and whole-volume inference."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..augment import MixupConfig, augment_rng, sample_mixup_coeff, virtual_pair
from ..dataio import (
    DUCT,
    MASS,
    TISSUE,
    LabelMap,
    PairedCase,
    Volume,
    VolumeHeader,
    label_map,
    normalize_array,
    patch_grid,
    read_volume,
    write_volume,
)
from ..errors import ConfigurationError, ContractError, FormatError
from ..hyperpair import DualNet, build_dual, build_topology, forward_dual
from ..losses import LossBreakdown, cross_entropy_loss, objective, pairing_loss, total_loss
from ..ndtensor import SGD, Tape, Tensor, add, grad_eval, scale, softmax_channels
from ..netblocks import PathConfig, PathNet, build_single_path, forward_single
from .evaluation import union_ensemble

log = logging.getLogger(__name__)

MODES = ("single-a", "single-b", "hyper", "hyper-aug", "hpn")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "hpn"
    patch: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 1000
    batch_size: int = 2
    pair_weight: float = 0.5
    mixup: MixupConfig = MixupConfig()
    seed: int = 0
    backbone: PathConfig = PathConfig()
    fg_fraction: float = 0.67
    dtype: str = "f32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.patch < 1:
            raise ConfigurationError("iterations, batch size and patch must be positive")
        if self.pair_weight < 0 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("invalid optimiser or loss weight settings")
        self.backbone.check_extents((self.patch,) * 3)

    @property
    def dual(self) -> bool:
        return self.mode in ("hyper", "hyper-aug", "hpn")

    @property
    def effective_pair_weight(self) -> float:
        return self.pair_weight if self.mode == "hpn" else 0.0

    @property
    def variants(self) -> Tuple[bool, ...]:
        """One entry per trained network: ``True`` means trained on virtual pairs."""
        if self.mode in ("hyper-aug", "hpn") and self.mixup.enabled:
            return (False, True)
        return (False,)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["mixup"] = MixupConfig(**d["mixup"])
        d["backbone"] = PathConfig(**d["backbone"])
        return cls(**d)


@dataclass
class Prepared:
    """A case after intensity preprocessing, as plain arrays."""

    case_id: str
    xa: np.ndarray
    xb: np.ndarray
    labels: np.ndarray


def prepare(case: PairedCase, dtype=np.float32) -> Prepared:
    return Prepared(
        case.case_id,
        normalize_array(case.arterial.voxels).astype(dtype),
        normalize_array(case.venous.voxels).astype(dtype),
        np.asarray(case.labels.voxels, dtype=np.intp),
    )


@dataclass
class TrainedModel:
    cfg: TrainConfig
    nets: list
    loss_log: List[str] = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        for net in self.nets:
            for name, p in net.params.items():
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()


def build_net(cfg: TrainConfig, seed: int):
    if cfg.dual:
        return build_dual(cfg.backbone, seed, build_topology(cfg.backbone.depth), dtype=cfg.np_dtype)
    return build_single_path(cfg.backbone, seed, dtype=cfg.np_dtype)


def _sample_corner(rng, labels: np.ndarray, patch: int, fg_fraction: float) -> Tuple[int, int, int]:
    dims = labels.shape
    hi = [d - patch for d in dims]
    if rng.random() < fg_fraction:
        present = [c for c in (TISSUE, MASS, DUCT) if (labels == c).any()]
        if present:
            c = present[int(rng.integers(len(present)))]
            vox = np.argwhere(labels == c)
            v = vox[int(rng.integers(len(vox)))]
            jitter = rng.integers(-(patch // 4), patch // 4 + 1, 3)
            return tuple(int(np.clip(v[i] - patch // 2 + jitter[i], 0, hi[i])) for i in range(3))
    return tuple(int(rng.integers(0, h + 1)) for h in hi)


def _crop(arr: np.ndarray, corner, patch: int) -> np.ndarray:
    x, y, z = corner
    return arr[x : x + patch, y : y + patch, z : z + patch]


def _sample_loss(net, cfg: TrainConfig, xa, xb, y, pair_weight: float):
    if cfg.dual:
        logits, taps = forward_dual(net, Tensor(xa[None]), Tensor(xb[None]))
        ce = cross_entropy_loss(logits, y)
        corr = pairing_loss(taps.f1, taps.f2)
        return objective(ce, corr, pair_weight), float(ce), float(corr)
    x = xa if cfg.mode == "single-a" else xb
    logits, _ = forward_single(net, Tensor(x[None]))
    ce = cross_entropy_loss(logits, y)
    return ce, float(ce), 0.0


def train_network(
    cfg: TrainConfig,
    cases: Sequence[Prepared],
    virtual: bool = False,
    seed_offset: int = 0,
    progress: Optional[Callable[[int, LossBreakdown], None]] = None,
):
    """Train one network; returns ``(net, log lines)``."""
    if not cases:
        raise ConfigurationError("empty training set")
    for c in cases:
        if min(c.labels.shape) < cfg.patch:
            raise ConfigurationError(f"patch {cfg.patch} larger than case {c.case_id} {c.labels.shape}")
    seed = cfg.seed + 1000 * seed_offset
    net = build_net(cfg, seed)
    params = net.params
    opt = SGD(params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng([seed, 17])
    mix_rng = augment_rng(seed)
    lam_pair = cfg.effective_pair_weight
    lines = ["iter,ce,corr,total"]
    plist = list(params.values())
    for it in range(1, cfg.iterations + 1):
        terms = []
        ce_sum = corr_sum = 0.0
        with Tape() as tape:
            for _ in range(cfg.batch_size):
                c = cases[int(rng.integers(len(cases)))]
                corner = _sample_corner(rng, c.labels, cfg.patch, cfg.fg_fraction)
                xa = _crop(c.xa, corner, cfg.patch)
                xb = _crop(c.xb, corner, cfg.patch)
                y = _crop(c.labels, corner, cfg.patch)
                if virtual:
                    xa, xb = virtual_pair(xa, xb, sample_mixup_coeff(cfg.mixup, mix_rng))
                loss, ce_v, corr_v = _sample_loss(net, cfg, xa, xb, y, lam_pair)
                terms.append(loss)
                ce_sum += ce_v
                corr_sum += corr_v
            total = terms[0]
            for t in terms[1:]:
                total = add(total, t)
            total = scale(total, 1.0 / len(terms))
        grads = grad_eval(tape, total, plist)
        opt.step(grads)
        bd = total_loss(ce_sum / len(terms), corr_sum / len(terms), lam_pair)
        lines.append(bd.log_line(it))
        if progress is not None:
            progress(it, bd)
    return net, lines


def train(cfg: TrainConfig, cases: Sequence, progress=None) -> TrainedModel:
    """Train every network the mode needs (two for the union-ensemble modes)."""
    prepared = [c if isinstance(c, Prepared) else prepare(c, cfg.np_dtype) for c in cases]
    if not prepared:
        raise ConfigurationError("empty training set")
    nets, log_lines = [], []
    for k, virtual in enumerate(cfg.variants):
        net, lines = train_network(cfg, prepared, virtual=virtual, seed_offset=k, progress=progress)
        nets.append(net)
        tag = "virtual" if virtual else "original"
        log_lines += [f"# network {k} ({tag})"] + lines
    return TrainedModel(cfg, nets, log_lines)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrainedModel, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, net in enumerate(model.nets):
        flat = np.concatenate([p.data.ravel() for p in net.params.values()]).astype(np.float32)
        hdr = VolumeHeader((flat.size, 1, 1), (1.0, 1.0, 1.0), "f32", "none", "checkpoint")
        path = out_dir / f"checkpoint_{k}.mpv"
        write_volume(Volume(hdr, flat.reshape(-1, 1, 1)), path)
        paths.append(path)
    meta = {"config": model.cfg.to_dict(), "networks": len(model.nets)}
    (out_dir / "checkpoint.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (out_dir / "loss_log.csv").write_text("\n".join(model.loss_log) + "\n")
    return paths


def load_checkpoint(ckpt_dir) -> TrainedModel:
    ckpt_dir = Path(ckpt_dir)
    try:
        meta = json.loads((ckpt_dir / "checkpoint.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint metadata: {exc}", 0) from None
    cfg = TrainConfig.from_dict(meta["config"])
    nets = []
    for k in range(int(meta["networks"])):
        vol = read_volume(ckpt_dir / f"checkpoint_{k}.mpv")
        if vol.header.kind != "checkpoint":
            raise FormatError("not a checkpoint file", 0)
        flat = vol.voxels.reshape(-1)
        net = build_net(cfg, 0)
        need = sum(p.data.size for p in net.params.values())
        if need != flat.size:
            raise FormatError(f"checkpoint holds {flat.size} values, network needs {need}", 0)
        pos = 0
        for p in net.params.values():
            n = p.data.size
            p.data[...] = flat[pos : pos + n].reshape(p.data.shape)
            pos += n
        nets.append(net)
    return TrainedModel(cfg, nets)


# ---------------------------------------------------------------------------
# inference


def net_predictor(net, mode: str) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Wrap a network as ``f(xa_patch, xb_patch) -> probabilities (K+1, p, p, p)``."""

    def predict(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
        if isinstance(net, DualNet):
            logits, _ = forward_dual(net, Tensor(xa[None]), Tensor(xb[None]))
        else:
            x = xa if mode == "single-a" else xb
            logits, _ = forward_single(net, Tensor(x[None]))
        return softmax_channels(logits).data

    return predict


def infer_whole(model: Callable, case, patch: int, stride: int) -> Tuple[np.ndarray, LabelMap]:
    """Sliding-window probabilities averaged uniformly over overlaps, and their argmax."""
    prep = case if isinstance(case, Prepared) else prepare(case)
    dims = prep.labels.shape
    if any(patch > d for d in dims):
        raise ContractError(f"patch {patch} larger than volume {dims}")
    acc = None
    count = np.zeros(dims, dtype=np.float64)
    for corner in patch_grid(dims, patch, stride):
        sl = tuple(slice(c, c + patch) for c in corner)
        p = np.asarray(model(prep.xa[sl], prep.xb[sl]), dtype=np.float64)
        if acc is None:
            acc = np.zeros((p.shape[0],) + tuple(dims), dtype=np.float64)
        acc[(slice(None),) + sl] += p
        count[sl] += 1.0
    prob = acc / count
    return prob, label_map(np.argmax(prob, axis=0))


def predict_case(model: TrainedModel, case, patch: Optional[int] = None, stride: Optional[int] = None):
    """Label map for one case; union of members for the ensemble modes.

    Returns ``(probabilities of the first network, label map)``.
    """
    patch = patch or model.cfg.patch
    stride = stride or max(1, patch // 2)
    prep = case if isinstance(case, Prepared) else prepare(case, model.cfg.np_dtype)
    probs, preds = [], []
    for net in model.nets:
        prob, pred = infer_whole(net_predictor(net, model.cfg.mode), prep, patch, stride)
        probs.append(prob)
        preds.append(pred)
    pred = preds[0]
    for other in preds[1:]:
        pred = union_ensemble(pred, other)
    return probs[0], pred
