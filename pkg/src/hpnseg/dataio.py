"""Volumes on disk, preprocessing, synthetic dual-phase phantoms and patch grids.

MPV container layout::

    magic: MPVOL1
    kind: image
    dims: W H L
    spacing: sx sy sz
    dtype: f32
    phase: arterial
    <blank line>
    <raw little-endian payload, x fastest, then y, z slowest>

In memory a volume is a numpy array indexed ``[x, y, z]``.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, FormatError

MAGIC = "MPVOL1"
HEADER_KEYS = ("magic", "kind", "dims", "spacing", "dtype", "phase")
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
KINDS = ("image", "labels", "checkpoint")
PHASES = ("arterial", "venous", "none")

BACKGROUND, TISSUE, MASS, DUCT = 0, 1, 2, 3
HU_RANGE = (-100.0, 240.0)


@dataclass(frozen=True)
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: str = "f32"
    phase: str = "none"
    kind: str = "image"

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ContractError(f"dims must be three positive extents, got {self.dims}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")
        if self.dtype not in DTYPES:
            raise ContractError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.phase not in PHASES:
            raise ContractError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")

    @property
    def n_voxels(self) -> int:
        w, h, l = self.dims
        return int(w) * int(h) * int(l)

    def encode(self) -> bytes:
        lines = [
            f"magic: {MAGIC}",
            f"kind: {self.kind}",
            "dims: " + " ".join(str(int(d)) for d in self.dims),
            "spacing: " + " ".join(repr(float(s)) for s in self.spacing),
            f"dtype: {self.dtype}",
            f"phase: {self.phase}",
        ]
        return ("\n".join(lines) + "\n\n").encode("ascii")


@dataclass
class Volume:
    header: VolumeHeader
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.shape != tuple(self.header.dims):
            raise DimensionError(f"voxel grid {self.voxels.shape} does not match dims {self.header.dims}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.header.dims)


class LabelMap(Volume):
    """Per-voxel labels: 0 background, 1 tissue, 2 mass, 3 duct."""

    def __post_init__(self):
        super().__post_init__()
        if self.voxels.size and int(self.voxels.max()) > DUCT:
            raise ContractError(f"label values must be <= {DUCT}")


def image_volume(arr: np.ndarray, phase: str = "none", spacing=(1.0, 1.0, 1.0)) -> Volume:
    arr = np.asarray(arr, dtype=np.float32)
    return Volume(VolumeHeader(arr.shape, tuple(spacing), "f32", phase, "image"), arr)


def label_map(arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    arr = np.asarray(arr, dtype=np.uint8)
    return LabelMap(VolumeHeader(arr.shape, tuple(spacing), "u8", "none", "labels"), arr)


def write_volume(v: Volume, path) -> None:
    h = v.header
    dt = DTYPES[h.dtype]
    if v.voxels.shape != tuple(h.dims):
        raise ContractError("header dims disagree with payload")
    payload = np.asarray(v.voxels).astype(dt, copy=False).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(h.encode())
        fh.write(payload)


def _parse_header(raw: bytes) -> Tuple[dict, int]:
    end = raw.find(b"\n\n")
    if not raw.startswith(b"magic: "):
        raise FormatError("bad magic", 0)
    if end < 0:
        raise FormatError("header not terminated by a blank line", len(raw))
    fields = {}
    offset = 0
    for line in raw[:end].split(b"\n"):
        try:
            text = line.decode("ascii")
            key, value = text.split(": ", 1)
        except (UnicodeDecodeError, ValueError):
            raise FormatError(f"malformed header line {line[:40]!r}", offset) from None
        if key not in HEADER_KEYS or key in fields:
            raise FormatError(f"unexpected or repeated header key {key!r}", offset)
        fields[key] = (value, offset)
        offset += len(line) + 1
    missing = [k for k in HEADER_KEYS if k not in fields]
    if missing:
        raise FormatError(f"missing header keys {missing}", end)
    if fields["magic"][0] != MAGIC:
        raise FormatError(f"bad magic {fields['magic'][0]!r}", fields["magic"][1])
    return fields, end + 2


def read_volume(path) -> Volume:
    """Read an MPV file; labels come back as :class:`LabelMap`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, start = _parse_header(raw)

    def get(key):
        return fields[key]

    try:
        dims = tuple(int(t) for t in get("dims")[0].split())
        if len(dims) != 3:
            raise ValueError
    except ValueError:
        raise FormatError("dims must be three integers", get("dims")[1]) from None
    try:
        spacing = tuple(float(t) for t in get("spacing")[0].split())
        if len(spacing) != 3:
            raise ValueError
    except ValueError:
        raise FormatError("spacing must be three numbers", get("spacing")[1]) from None
    dtype = get("dtype")[0]
    if dtype not in DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}", get("dtype")[1])
    try:
        header = VolumeHeader(dims, spacing, dtype, get("phase")[0], get("kind")[0])
    except ContractError as exc:
        raise FormatError(str(exc), 0) from None
    dt = DTYPES[dtype]
    expected = header.n_voxels * dt.itemsize
    got = len(raw) - start
    if got != expected:
        raise FormatError(f"payload is {got} bytes, dims and dtype require {expected}", start)
    arr = np.frombuffer(raw, dtype=dt, offset=start).reshape(dims, order="F").copy()
    if header.kind == "labels":
        try:
            return LabelMap(header, arr)
        except ContractError as exc:
            raise FormatError(str(exc), start) from None
    return Volume(header, arr)


def normalize_array(arr: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(arr, dtype=np.float64), *HU_RANGE)
    std = x.std()
    if std < 1e-6:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def truncate_normalize(v: Volume) -> Volume:
    """Clamp to the HU window, then zero mean / unit (population) variance per case."""
    if v.header.dtype != "f32":
        raise ContractError("truncate_normalize expects an f32 image")
    return Volume(v.header, normalize_array(v.voxels).astype(np.float32))


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PairedCase:
    case_id: str
    arterial: Volume
    venous: Volume
    labels: LabelMap

    def __post_init__(self):
        if not (self.arterial.dims == self.venous.dims == self.labels.dims):
            raise DimensionError("arterial, venous and labels must share dims")
        if self.arterial.header.phase != "arterial" or self.venous.header.phase != "venous":
            raise ContractError("phase tags do not match their slots")

    @property
    def dims(self):
        return self.labels.dims


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 12.0          # HU
    field_amplitude: float = 10.0      # HU, smooth per-phase drift
    lesion_fraction: Tuple[float, float] = (0.005, 0.03)
    lesion_count: Tuple[int, int] = (1, 2)
    visible_contrast: float = 0.8      # normalised units, lesion minus tissue
    hidden_contrast: float = 0.0
    conspicuity: str = "split"         # split | both | arterial | venous
    with_mass: bool = True
    with_duct: bool = True
    background_hu: float = -40.0
    tissue_hu: Tuple[float, float] = (120.0, 95.0)   # arterial, venous
    duct_hu: float = 15.0

    def visible_phases(self, seed: int) -> Tuple[bool, bool]:
        if self.conspicuity == "split":
            return (seed % 2 == 0, seed % 2 == 1)
        if self.conspicuity == "both":
            return (True, True)
        if self.conspicuity == "arterial":
            return (True, False)
        if self.conspicuity == "venous":
            return (False, True)
        raise ConfigurationError(f"unknown conspicuity mode {self.conspicuity!r}")


def _smooth_field(rng, dims, amplitude):
    u = [np.linspace(0.0, 1.0, n) for n in dims]
    gx, gy, gz = np.meshgrid(*u, indexing="ij")
    f = np.zeros(dims)
    for _ in range(3):
        kx, ky, kz = rng.uniform(0.3, 1.5, 3)
        ph = rng.uniform(0, 2 * np.pi, 3)
        f += np.cos(2 * np.pi * kx * gx + ph[0]) * np.cos(2 * np.pi * ky * gy + ph[1]) * np.cos(2 * np.pi * kz * gz + ph[2])
    return amplitude * f / 3.0


def _geometry(rng, cfg: PhantomConfig) -> np.ndarray:
    dims = cfg.dims
    n = float(np.prod(dims))
    idx = [np.arange(d) + 0.5 for d in dims]
    gx, gy, gz = np.meshgrid(*idx, indexing="ij")
    W, H, L = dims
    c = np.array([W, H, L]) * (0.5 + rng.uniform(-0.04, 0.04, 3))
    ax = np.array([W * rng.uniform(0.30, 0.36), H * rng.uniform(0.21, 0.25), L * rng.uniform(0.19, 0.23)])
    theta = rng.uniform(-0.35, 0.35)
    bend = rng.uniform(-0.15, 0.15)
    dx, dy, dz = gx - c[0], gy - c[1], gz - c[2]
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    v = v - bend * (u**2) / ax[0]
    rho = (u / ax[0]) ** 2 + (v / ax[1]) ** 2 + (dz / ax[2]) ** 2
    labels = np.zeros(dims, dtype=np.uint8)
    pancreas = rho <= 1.0
    labels[pancreas] = TISSUE

    if cfg.with_duct:
        r_duct = max(1.0, 0.045 * min(dims))
        wob = 0.25 * ax[1] * np.sin(np.pi * u / ax[0] + rng.uniform(0, np.pi))
        tube = ((v - wob) ** 2 + (dz - 0.1 * ax[2]) ** 2 <= r_duct**2) & (np.abs(u) <= 0.8 * ax[0])
        labels[tube & pancreas] = DUCT

    if cfg.with_mass:
        lo, hi = cfg.lesion_fraction
        count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
        target = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.3 * (hi - lo))
        core = np.argwhere(rho <= 0.35)
        if len(core) == 0:
            raise ConfigurationError(f"dims {dims} too small for the phantom geometry")
        centers = core[rng.choice(len(core), size=count, replace=False)] + 0.5
        stretch = rng.uniform(0.8, 1.25, (count, 3))
        scale = 1.0
        for _ in range(40):
            mass = np.zeros(dims, dtype=bool)
            r = scale * (3 * target * n / (4 * np.pi * count)) ** (1 / 3)
            for cc, st in zip(centers, stretch):
                mass |= (((gx - cc[0]) / (r * st[0])) ** 2 + ((gy - cc[1]) / (r * st[1])) ** 2 + ((gz - cc[2]) / (r * st[2])) ** 2) <= 1.0
            frac = mass.sum() / n
            if lo <= frac <= hi:
                break
            scale *= (target / max(frac, 1.0 / n)) ** (1 / 3)
        else:
            raise ConfigurationError(f"dims {dims} too small to place lesions in the requested fraction range")
        labels[mass] = MASS
    if not (labels == TISSUE).any():
        raise ConfigurationError(f"dims {dims} too small for the phantom geometry")
    return labels


def _phase_image(rng, labels, cfg: PhantomConfig, tissue_hu: float, contrast: float) -> np.ndarray:
    img = np.full(labels.shape, cfg.background_hu)
    img[labels == TISSUE] = tissue_hu
    img[labels == DUCT] = cfg.duct_hu
    mass = labels == MASS
    tissue = labels == TISSUE
    img[mass] = tissue_hu
    img = img + _smooth_field(rng, labels.shape, cfg.field_amplitude)
    img = img + rng.normal(0.0, cfg.noise_sigma, labels.shape)
    if mass.any() and tissue.any():
        # shift the mass so the measured normalised gap hits the requested contrast
        offset = 0.0
        base = img[mass].copy()
        for _ in range(6):
            img[mass] = base + offset
            clipped = np.clip(img, *HU_RANGE)
            sd = clipped.std()
            gap = (clipped[mass].mean() - clipped[tissue].mean()) / sd
            offset += (contrast - gap) * sd
        img[mass] = base + offset
    return img.astype(np.float32)


def gen_phantom(seed: int, cfg: PhantomConfig = PhantomConfig(), case_id: Optional[str] = None) -> PairedCase:
    """Deterministic aligned arterial/venous pair with labels."""
    if min(cfg.dims) < 8:
        raise ConfigurationError(f"dims {cfg.dims} too small for the phantom geometry")
    rng = np.random.default_rng(seed)
    labels = _geometry(rng, cfg)
    vis_a, vis_v = cfg.visible_phases(seed)
    art = _phase_image(rng, labels, cfg, cfg.tissue_hu[0], cfg.visible_contrast if vis_a else cfg.hidden_contrast)
    ven = _phase_image(rng, labels, cfg, cfg.tissue_hu[1], cfg.visible_contrast if vis_v else cfg.hidden_contrast)
    return PairedCase(
        case_id or f"case{seed:05d}",
        image_volume(art, "arterial", cfg.spacing),
        image_volume(ven, "venous", cfg.spacing),
        label_map(labels, cfg.spacing),
    )


def lesion_contrast(case: PairedCase) -> Tuple[float, float]:
    """Normalised mean mass-minus-tissue gap in (arterial, venous)."""
    lab = case.labels.voxels
    out = []
    for v in (case.arterial, case.venous):
        x = normalize_array(v.voxels)
        out.append(float(x[lab == MASS].mean() - x[lab == TISSUE].mean()))
    return tuple(out)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    arterial: str
    venous: str
    labels: str


@dataclass
class CaseManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.case_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError("case ids in a manifest must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> List[str]:
        return [e.case_id for e in self.entries]

    def load(self, i: int) -> PairedCase:
        e = self.entries[i]
        art = read_volume(self.root / e.arterial)
        ven = read_volume(self.root / e.venous)
        lab = read_volume(self.root / e.labels)
        if not isinstance(lab, LabelMap):
            raise FormatError(f"{e.labels} is not a label map", 0)
        return PairedCase(e.case_id, art, ven, lab)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(f"{e.case_id}\t{e.arterial}\t{e.venous}\t{e.labels}\n")

    @classmethod
    def read(cls, path) -> "CaseManifest":
        entries = []
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise FormatError(f"manifest line {n} needs 4 tab-separated fields", 0)
                entries.append(ManifestEntry(*parts))
        return cls(entries, Path(path).parent)


def write_case(case: PairedCase, out_dir) -> ManifestEntry:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"{case.case_id}_{s}.mpv" for s in ("arterial", "venous", "labels")]
    for vol, name in zip((case.arterial, case.venous, case.labels), names):
        write_volume(vol, out_dir / name)
    return ManifestEntry(case.case_id, *names)


def write_corpus(out_dir, seeds: Sequence[int], cfg: PhantomConfig = PhantomConfig()) -> CaseManifest:
    out_dir = Path(out_dir)
    entries = [write_case(gen_phantom(s, cfg), out_dir) for s in seeds]
    manifest = CaseManifest(entries, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# patch grid


def _axis_corners(n: int, patch: int, stride: int) -> List[int]:
    corners = list(range(0, n - patch + 1, stride))
    if corners[-1] != n - patch:
        corners.append(n - patch)
    return corners


def patch_grid(dims, patch: int, stride: int) -> List[Tuple[int, int, int]]:
    """Window corners covering ``dims``; the last window per axis is clamped inside."""
    if stride < 1 or stride > patch:
        # a stride beyond the patch would leave uncovered gaps
        raise ContractError(f"stride must lie in 1..{patch}, got {stride}")
    if any(patch > d for d in dims) or patch < 1:
        raise ContractError(f"patch {patch} does not fit inside {tuple(dims)}")
    axes = [_axis_corners(int(d), patch, stride) for d in dims]
    return list(itertools.product(*axes))
