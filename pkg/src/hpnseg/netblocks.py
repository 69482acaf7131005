"""One U-shaped encoder-decoder path.

Level ``d`` runs at ``1 / 2**(d-1)`` of the input resolution and carries
``base_channels * 2**(d-1)`` feature channels.  Each level is a single
conv + relu block.  Encoder levels 2..D downsample with a stride-2
convolution, the decoder upsamples with a stride-2 transposed convolution and
concatenates the skip features before its conv block.

Blocks are named ``enc{d}``, ``up{d}`` (upsampling *into* level ``d``),
``dec{d}`` and ``head``.  A block's input is the channel concatenation of its
own-path predecessor followed by the slot outputs listed in
``PathNet.sources[block]``; the single-path network lists the encoder skip
there, the dual network adds its cross-path producers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .ndtensor import Tensor, concat_channels, conv3d, conv3d_transposed, relu


class SlotRef(NamedTuple):
    """A feature map location: path label, side (``enc``/``dec``/``up``) and level."""

    path: str
    side: str
    level: int

    def __str__(self) -> str:
        return f"{self.path}:{self.side}:{self.level}"

    @classmethod
    def parse(cls, text: str) -> "SlotRef":
        path, side, level = text.strip().split(":")
        return cls(path, side, int(level))


@dataclass(frozen=True)
class PathConfig:
    depth: int = 3
    base_channels: int = 8
    kernel: int = 3
    n_classes: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.n_classes < 2 or self.in_channels < 1:
            raise ConfigurationError("channel counts must be positive and n_classes >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel extent must be odd, got {self.kernel}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def check_extents(self, spatial) -> None:
        m = 2 ** (self.depth - 1)
        if any(n % m for n in spatial):
            raise DimensionError(f"spatial extents {tuple(spatial)} not divisible by {m} (depth {self.depth})")


def block_order(depth: int) -> List[str]:
    """Blocks of one path in build/execution order."""
    names = [f"enc{d}" for d in range(1, depth + 1)]
    for d in range(depth - 1, 0, -1):
        names += [f"up{d}", f"dec{d}"]
    return names


def block_kind(block: str) -> Tuple[str, int]:
    for kind in ("enc", "dec", "up"):
        if block.startswith(kind):
            return kind, int(block[len(kind):])
    return block, 0


def own_predecessor(block: str, depth: int) -> Optional[Tuple[str, int]]:
    """The same-path slot a block consumes first; ``None`` means the image."""
    kind, d = block_kind(block)
    if kind == "enc":
        return None if d == 1 else ("enc", d - 1)
    if kind == "up":
        return ("enc", depth) if d + 1 == depth else ("dec", d + 1)
    if kind == "dec":
        return ("up", d)
    if kind == "head":
        return ("dec", 1)
    raise ValueError(f"unknown block {block!r}")


def slot_channels(cfg: PathConfig, side: str, level: int) -> int:
    return cfg.channels(level)


@dataclass
class PathNet:
    cfg: PathConfig
    label: str = "A"
    params: Dict[str, Tensor] = field(default_factory=dict)
    sources: Dict[str, List[SlotRef]] = field(default_factory=dict)
    with_head: bool = True

    @property
    def blocks(self) -> List[str]:
        return block_order(self.cfg.depth) + (["head"] if self.with_head else [])

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def param_list(self) -> List[Tensor]:
        return list(self.params.values())


def _glorot(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def build_path(
    cfg: PathConfig,
    rng_seed: int,
    label: str = "A",
    sources: Optional[Dict[str, List[SlotRef]]] = None,
    with_head: bool = True,
    dtype=np.float64,
    prefix: str = "",
) -> PathNet:
    """Build one path whose block inputs include the given extra ``sources``."""
    sources = {b: list(s) for b, s in (sources or {}).items()}
    rng = np.random.default_rng(rng_seed)
    net = PathNet(cfg=cfg, label=label, sources=sources, with_head=with_head)
    k = cfg.kernel
    for block in net.blocks:
        kind, d = block_kind(block)
        pred = own_predecessor(block, cfg.depth)
        if pred is None:
            c_in = cfg.in_channels
        elif pred[0] == "up":
            c_in = cfg.channels(pred[1])
        else:
            c_in = slot_channels(cfg, *pred)
        c_in += sum(slot_channels(cfg, s.side, s.level) for s in sources.get(block, []))
        if kind == "up":
            c_out, ks = cfg.channels(d), 2
            shape = (c_in, c_out, ks, ks, ks)
        elif kind == "head":
            c_out, ks = cfg.n_classes, 1
            shape = (c_out, c_in, 1, 1, 1)
        else:
            c_out, ks = cfg.channels(d), k
            shape = (c_out, c_in, k, k, k)
        w = _glorot(rng, shape, c_in * ks**3, c_out * ks**3, dtype)
        name = f"{prefix}{block}"
        net.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        net.params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    return net


def intra_sources(depth: int, label: str = "A") -> Dict[str, List[SlotRef]]:
    return {f"dec{d}": [SlotRef(label, "enc", d)] for d in range(1, depth)}


def build_single_path(cfg: PathConfig, rng_seed: int, dtype=np.float64) -> PathNet:
    """Plain U-shaped network with encoder-to-decoder skips at levels 1..D-1."""
    return build_path(cfg, rng_seed, sources=intra_sources(cfg.depth), dtype=dtype)


def run_block(net: PathNet, block: str, inputs: List[Tensor], prefix: str = "") -> Tensor:
    x = inputs[0] if len(inputs) == 1 else concat_channels(*inputs)
    w = net.params[f"{prefix}{block}.weight"]
    b = net.params[f"{prefix}{block}.bias"]
    kind, d = block_kind(block)
    if kind == "up":
        return conv3d_transposed(x, w, b, stride=2)
    if kind == "head":
        return conv3d(x, w, b)
    k = net.cfg.kernel
    stride = 2 if kind == "enc" and d > 1 else 1
    return relu(conv3d(x, w, b, stride=stride, padding=k // 2))


def block_inputs(net: PathNet, block: str, values: Dict[SlotRef, Tensor], image: Tensor) -> List[Tensor]:
    pred = own_predecessor(block, net.cfg.depth)
    first = image if pred is None else values[SlotRef(net.label, *pred)]
    return [first] + [values[s] for s in net.sources.get(block, [])]


def forward_single(net: PathNet, x) -> Tuple[Tensor, Dict[Tuple[str, int], Tensor]]:
    """Logits at full resolution plus the slot features ``{(side, level): map}``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[0] != net.cfg.in_channels:
        raise DimensionError(f"expected ({net.cfg.in_channels}, X, Y, Z) input, got {x.shape}")
    net.cfg.check_extents(x.shape[1:])
    values: Dict[SlotRef, Tensor] = {}
    logits = None
    for block in net.blocks:
        out = run_block(net, block, block_inputs(net, block, values, x))
        kind, d = block_kind(block)
        if kind == "head":
            logits = out
        else:
            values[SlotRef(net.label, kind, d)] = out
    if logits is None:
        raise DimensionError("path has no classification head")
    feats = {(s.side, s.level): t for s, t in values.items() if s.side != "up"}
    return logits, feats
