"""Dual-path network: two U-shaped paths joined by hyper-connections.

An edge ``P:s -> Q:s'`` appends the output of slot ``s`` on path ``P`` to the
input of the block that produces ``s'`` on path ``Q``.  When ``s == s'`` (the
mutual same-slot arrows) the map is appended to the input of the *next* block
on ``Q`` instead: the downsampling block for an encoder slot, the upsampling
block for a decoder slot, and the shared head for decoder level 1.  That keeps
the block graph acyclic while both directions still exchange features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .ndtensor import Tensor, concat_channels, conv3d
from .netblocks import (
    PathConfig,
    PathNet,
    SlotRef,
    block_inputs,
    block_kind,
    block_order,
    build_path,
    own_predecessor,
    run_block,
)

PATHS = ("A", "B")


def _other(p: str) -> str:
    return "B" if p == "A" else "A"


@dataclass
class HyperTopology:
    depth: int
    edges: List[Tuple[SlotRef, SlotRef]] = field(default_factory=list)

    @property
    def cross(self) -> List[Tuple[SlotRef, SlotRef]]:
        return [e for e in self.edges if e[0].path != e[1].path]

    @property
    def intra(self) -> List[Tuple[SlotRef, SlotRef]]:
        return [e for e in self.edges if e[0].path == e[1].path]

    def without_cross(self) -> "HyperTopology":
        return HyperTopology(self.depth, list(self.intra))

    def dump(self) -> str:
        return "".join(f"{src} -> {dst}\n" for src, dst in self.edges)

    @classmethod
    def parse(cls, text: str, depth: int) -> "HyperTopology":
        edges = []
        for line in text.splitlines():
            if line.strip():
                src, dst = line.split("->")
                edges.append((SlotRef.parse(src), SlotRef.parse(dst)))
        return cls(depth, edges)


def build_topology(depth: int, cross: bool = True) -> HyperTopology:
    """Hyper-connection edges for every mirrored level ``1..depth-1``.

    Per level: six cross-path arrows (enc<->enc, enc->other dec, dec<->dec)
    and the two ordinary encoder-to-decoder skips.
    """
    if depth < 2:
        raise ConfigurationError(f"depth must be >= 2, got {depth}")
    edges = []
    for d in range(1, depth):
        for p in PATHS:
            q = _other(p)
            edges.append((SlotRef(p, "enc", d), SlotRef(p, "dec", d)))
            if cross:
                edges += [
                    (SlotRef(p, "enc", d), SlotRef(q, "enc", d)),
                    (SlotRef(p, "enc", d), SlotRef(q, "dec", d)),
                    (SlotRef(p, "dec", d), SlotRef(q, "dec", d)),
                ]
    return HyperTopology(depth, edges)


def consumer_block(src: SlotRef, dst: SlotRef, depth: int) -> Tuple[str, str]:
    """``(path, block)`` whose input receives the edge ``src -> dst``."""
    if src.side == dst.side and src.level == dst.level:
        if src.path == dst.path:
            raise ConfigurationError(f"self edge {src} -> {dst}")
        if dst.side == "enc":
            if dst.level >= depth:
                raise ConfigurationError(f"no block follows {dst}")
            return dst.path, f"enc{dst.level + 1}"
        if dst.level == 1:
            return "*", "head"
        return dst.path, f"up{dst.level - 1}"
    return dst.path, f"{dst.side}{dst.level}"


def _source_key(s: SlotRef, own: str):
    return (s.path != own, s.side != "enc", s.level)


def path_sources(topo: HyperTopology) -> Dict[str, Dict[str, List[SlotRef]]]:
    """Per path, the extra producer slots feeding each block (head excluded)."""
    out: Dict[str, Dict[str, List[SlotRef]]] = {p: {} for p in PATHS}
    for src, dst in topo.edges:
        path, block = consumer_block(src, dst, topo.depth)
        if block == "head":
            continue
        out[path].setdefault(block, []).append(src)
    for p in PATHS:
        for block, srcs in out[p].items():
            srcs.sort(key=lambda s: _source_key(s, p))
    return out


def block_graph(topo: HyperTopology) -> Dict[Tuple[str, str], set]:
    """Dependency graph over ``(path, block)`` nodes; values are predecessors."""
    D = topo.depth
    srcs = path_sources(topo)
    graph: Dict[Tuple[str, str], set] = {}

    def producer(p: str, side: str, level: int) -> Tuple[str, str]:
        return (p, f"{side}{level}")

    for block in block_order(D):
        for p in PATHS:
            deps = set()
            pred = own_predecessor(block, D)
            if pred is not None:
                deps.add(producer(p, *pred))
            for s in srcs[p].get(block, []):
                deps.add(producer(s.path, s.side, s.level))
            graph[(p, block)] = deps
    graph[("*", "head")] = {("A", "dec1"), ("B", "dec1")}
    return graph


def execution_order(topo: HyperTopology) -> List[Tuple[str, str]]:
    """Topological order of the block graph; raises ``ConfigurationError`` on a cycle."""
    try:
        return list(TopologicalSorter(block_graph(topo)).static_order())
    except CycleError as exc:
        raise ConfigurationError(f"hyper topology is cyclic: {exc.args[1]}") from exc


@dataclass
class BranchTaps:
    f1: Tensor
    f2: Tensor


@dataclass
class DualNet:
    cfg: PathConfig
    path_a: PathNet
    path_b: PathNet
    head: Dict[str, Tensor]
    topology: HyperTopology
    tap: Tuple[str, int] = ("dec", 1)
    order: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def params(self) -> Dict[str, Tensor]:
        out = dict(self.path_a.params)
        out.update(self.path_b.params)
        out.update(self.head)
        return out

    def param_list(self) -> List[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def build_dual(
    cfg: PathConfig,
    rng_seed: int,
    topology: Optional[HyperTopology] = None,
    tap: Tuple[str, int] = ("dec", 1),
    shared_init: bool = False,
    dtype=np.float64,
) -> DualNet:
    """Two paths (A: arterial, B: venous) plus a 1x1x1 head over both final decoders."""
    topology = topology if topology is not None else build_topology(cfg.depth)
    if topology.depth != cfg.depth:
        raise ConfigurationError("topology depth differs from path depth")
    side, level = tap
    if side not in ("enc", "dec") or not 1 <= level <= (cfg.depth if side == "enc" else cfg.depth - 1):
        raise ConfigurationError(f"invalid tap slot {tap}")
    order = execution_order(topology)
    srcs = path_sources(topology)
    seed_b = rng_seed if shared_init else rng_seed + 1
    path_a = build_path(cfg, rng_seed, "A", srcs["A"], with_head=False, dtype=dtype, prefix="A.")
    path_b = build_path(cfg, seed_b, "B", srcs["B"], with_head=False, dtype=dtype, prefix="B.")
    rng = np.random.default_rng(rng_seed + 2)
    c_in, c_out = 2 * cfg.channels(1), cfg.n_classes
    a = np.sqrt(6.0 / (c_in + c_out))
    head = {
        "head.weight": Tensor(rng.uniform(-a, a, (c_out, c_in, 1, 1, 1)).astype(dtype), True, "head.weight"),
        "head.bias": Tensor(np.zeros(c_out, dtype=dtype), True, "head.bias"),
    }
    return DualNet(cfg, path_a, path_b, head, topology, tuple(tap), order)


def classifier_head(taps: BranchTaps, head: Dict[str, Tensor]) -> Tensor:
    """1x1x1 convolution over ``concat(f1, f2)``."""
    if taps.f1.shape != taps.f2.shape:
        raise DimensionError(f"tap shapes differ: {taps.f1.shape} vs {taps.f2.shape}")
    return conv3d(concat_channels(taps.f1, taps.f2), head["head.weight"], head["head.bias"])


def forward_dual(net: DualNet, xa, xb) -> Tuple[Tensor, BranchTaps]:
    xa = xa if isinstance(xa, Tensor) else Tensor(xa)
    xb = xb if isinstance(xb, Tensor) else Tensor(xb)
    if xa.shape != xb.shape:
        raise DimensionError(f"phase extents differ: {xa.shape} vs {xb.shape}")
    if xa.data.ndim != 4 or xa.shape[0] != net.cfg.in_channels:
        raise DimensionError(f"expected ({net.cfg.in_channels}, X, Y, Z) inputs, got {xa.shape}")
    net.cfg.check_extents(xa.shape[1:])
    paths = {"A": (net.path_a, xa), "B": (net.path_b, xb)}
    values: Dict[SlotRef, Tensor] = {}
    for p, block in net.order:
        if block == "head":
            continue
        path, image = paths[p]
        out = run_block(path, block, block_inputs(path, block, values, image), prefix=f"{p}.")
        kind, d = block_kind(block)
        values[SlotRef(p, kind, d)] = out
    final = BranchTaps(values[SlotRef("A", "dec", 1)], values[SlotRef("B", "dec", 1)])
    logits = classifier_head(final, net.head)
    side, level = net.tap
    taps = BranchTaps(values[SlotRef("A", side, level)], values[SlotRef("B", side, level)])
    return logits, taps
