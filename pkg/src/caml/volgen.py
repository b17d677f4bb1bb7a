"""Synthetic volumes, volume/label files, normalisation and random crops.

File formats (little-endian):

* volume: ``b"CAMLVOL1"`` | u32 D, H, W | f32 spacing[3] | f32 payload (D*H*W, C order)
* label:  ``b"CAMLLAB1"`` | u32 D, H, W | u8 payload

Manifest (``manifest.txt``) is plain text: ``key = value`` header lines,
``#`` comments, then a ``[samples]`` section with one whitespace-separated
row per sample: ``id split labeled volume_file label_file``. ``split`` is
``train`` or ``test``; ``labeled`` is 0/1. Paths are relative to the
manifest's directory.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"CAMLVOL1"
LABEL_MAGIC = b"CAMLLAB1"
MANIFEST_NAME = "manifest.txt"
N_CLASSES = 2
NOISE_FRACTION = 0.2  # noise sigma as a fraction of fg/bg contrast
DEFAULT_BIAS = 0.9  # amplitude of the multiplicative bias field


class VolumeFormatError(ValueError):
    """Malformed or truncated volume/label file."""


@dataclass
class VolumeGrid:
    data: np.ndarray  # (D, H, W) float32
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume needs 3 positive dims, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelGrid:
    data: np.ndarray  # (D, H, W) uint8 class ids

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValueError(f"label grid must be 3-d, got {self.data.shape}")

    @property
    def dims(self):
        return self.data.shape


@dataclass
class SampleRecord:
    id: int
    volume: VolumeGrid
    label: LabelGrid | None = None
    labeled: bool = False

    def __post_init__(self):
        if self.labeled != (self.label is not None):
            raise ValueError("a sample is labeled exactly when it carries a label grid")
        if self.label is not None and self.label.dims != self.volume.dims:
            raise ValueError(f"label dims {self.label.dims} != volume dims {self.volume.dims}")


@dataclass
class ManifestEntry:
    id: int
    split: str
    labeled: bool
    volume: str
    label: str


@dataclass
class DatasetManifest:
    seed: int
    n_classes: int
    dims: tuple
    spacing: tuple
    entries: list = field(default_factory=list)
    root: Path | None = None

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    @property
    def labeled_fraction(self):
        train = self.split("train")
        return sum(e.labeled for e in train) / len(train) if train else 0.0


# -- file I/O --------------------------------------------------------------------

def write_volume(path, v: VolumeGrid) -> None:
    header = VOLUME_MAGIC + struct.pack("<3I", *v.dims) + struct.pack("<3f", *v.spacing)
    Path(path).write_bytes(header + v.data.astype("<f4").tobytes())


def read_volume(path) -> VolumeGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 32:
        raise VolumeFormatError(f"{path}: truncated header")
    dims = struct.unpack("<3I", raw[8:20])
    spacing = struct.unpack("<3f", raw[20:32])
    n = dims[0] * dims[1] * dims[2]
    payload = raw[32:]
    if len(payload) != 4 * n:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload) // 4} floats, header needs {n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return VolumeGrid(data, spacing)


def write_label(path, lab: LabelGrid) -> None:
    Path(path).write_bytes(LABEL_MAGIC + struct.pack("<3I", *lab.dims) + lab.data.tobytes())


def read_label(path) -> LabelGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != LABEL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 20:
        raise VolumeFormatError(f"{path}: truncated header")
    dims = struct.unpack("<3I", raw[8:20])
    n = dims[0] * dims[1] * dims[2]
    if len(raw) - 20 != n:
        raise VolumeFormatError(f"{path}: payload holds {len(raw) - 20} bytes, header needs {n}")
    return LabelGrid(np.frombuffer(raw[20:], dtype=np.uint8).reshape(dims).copy())


# -- synthesis -------------------------------------------------------------------

def _rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def ellipsoid_mask(dims, center, axes, rotation):
    """Voxel centres inside the rotated ellipsoid."""
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), -1)
    local = (grid - np.asarray(center)) @ rotation
    return ((local / np.asarray(axes)) ** 2).sum(-1) <= 1.0


def _bias_field(rng, dims):
    """Smooth low-frequency field with values roughly in [-1, 1]."""
    coords = np.meshgrid(*[np.linspace(-1, 1, n) for n in dims], indexing="ij")
    field_ = np.zeros(dims)
    for _ in range(3):
        k = rng.uniform(0.5, 1.5, 3)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(k[0] * coords[0] + k[1] * coords[1] + k[2] * coords[2] + phase)
    return field_ / 3.0


def synthesize_sample(rng, dims, bias_strength=DEFAULT_BIAS):
    """One (volume, label, ellipsoid params) triple.

    The ellipsoid lies fully inside the grid. Intensities: background 0,
    foreground 1 (unit contrast), times a smooth multiplicative bias, plus
    Gaussian noise with sigma NOISE_FRACTION.
    """
    dims = tuple(int(d) for d in dims)
    d = np.asarray(dims, dtype=np.float64)
    axes = rng.uniform(0.15, 0.3, 3) * d
    r = axes.max()
    center = np.array([rng.uniform(r + 0.5, n - r - 1.5) for n in d])
    rot = _rotation(rng)
    mask = ellipsoid_mask(dims, center, axes, rot)
    bias = 1.0 + bias_strength * _bias_field(rng, dims)
    offset = rng.uniform(-0.5, 0.5)
    image = (mask.astype(np.float64) + offset) * bias
    image += rng.normal(0.0, NOISE_FRACTION, dims)
    return image.astype(np.float32), mask.astype(np.uint8), (center, axes, rot)


def generate_dataset(seed, n_samples, dims, labeled_fraction, out_dir,
                     n_test=0, spacing=(1.0, 1.0, 1.0),
                     bias_strength=DEFAULT_BIAS) -> DatasetManifest:
    """Write ``n_samples`` training pairs (+ ``n_test`` held-out pairs) and a manifest.

    The first ``ceil(labeled_fraction * n_samples)`` training samples are
    flagged labeled. Output is a pure function of the arguments.
    """
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"dims must be three extents >= 8, got {dims}")
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    if not 0 < labeled_fraction <= 1:
        raise ValueError("labeled_fraction must lie in (0, 1]")
    n_labeled = math.ceil(round(labeled_fraction * n_samples, 9))
    if n_labeled < 1:
        raise ValueError("labeled_fraction * n_samples must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    children = np.random.SeedSequence(seed).spawn(n_samples + n_test)
    manifest = DatasetManifest(seed=seed, n_classes=N_CLASSES, dims=dims,
                               spacing=tuple(float(s) for s in spacing), root=out)
    for i in range(n_samples + n_test):
        image, mask, _ = synthesize_sample(np.random.default_rng(children[i]), dims, bias_strength)
        vol_name, lab_name = f"vol_{i:04d}.cvol", f"lab_{i:04d}.clab"
        write_volume(out / vol_name, VolumeGrid(image, spacing))
        write_label(out / lab_name, LabelGrid(mask))
        split = "train" if i < n_samples else "test"
        manifest.entries.append(ManifestEntry(i, split, split == "test" or i < n_labeled,
                                              vol_name, lab_name))
    write_manifest(out / MANIFEST_NAME, manifest)
    return manifest


def write_manifest(path, m: DatasetManifest) -> None:
    lines = [
        "# caml dataset manifest v1",
        f"seed = {m.seed}",
        f"n_classes = {m.n_classes}",
        "dims = " + ",".join(str(x) for x in m.dims),
        "spacing = " + ",".join(repr(float(s)) for s in m.spacing),
        "[samples]",
        "# id split labeled volume label",
    ]
    for e in m.entries:
        lines.append(f"{e.id} {e.split} {int(e.labeled)} {e.volume} {e.label}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    header, entries, in_samples = {}, [], False
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[samples]":
            in_samples = True
            continue
        if in_samples:
            sid, split, labeled, vol, lab = line.split()
            entries.append(ManifestEntry(int(sid), split, labeled == "1", vol, lab))
        else:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
    m = DatasetManifest(
        seed=int(header["seed"]),
        n_classes=int(header["n_classes"]),
        dims=tuple(int(x) for x in header["dims"].split(",")),
        spacing=tuple(float(x) for x in header["spacing"].split(",")),
        entries=entries,
        root=path.parent,
    )
    for e in entries:
        for name in (e.volume, e.label):
            if not (m.root / name).exists():
                raise FileNotFoundError(f"manifest references missing file {name}")
    return m


def load_samples(m: DatasetManifest, split="train") -> list:
    """SampleRecords for ``split``; unlabeled records carry no label grid."""
    records = []
    for e in m.split(split):
        vol = read_volume(m.root / e.volume)
        lab = read_label(m.root / e.label) if e.labeled else None
        records.append(SampleRecord(e.id, vol, lab, e.labeled))
    return records


# -- preprocessing ---------------------------------------------------------------

def normalize_volume(v: VolumeGrid) -> VolumeGrid:
    """Zero mean, unit population std; near-constant input maps to zeros."""
    x = v.data.astype(np.float64)
    std = x.std()
    if std < 1e-8:
        return VolumeGrid(np.zeros_like(v.data), v.spacing)
    return VolumeGrid(((x - x.mean()) / std).astype(np.float32), v.spacing)


def crop_offset(dims, crop_dims, rng):
    dims, crop_dims = tuple(dims), tuple(crop_dims)
    if len(crop_dims) != 3 or any(c > d or c < 1 for c, d in zip(crop_dims, dims)):
        raise ValueError(f"crop {crop_dims} does not fit inside volume {dims}")
    return tuple(int(rng.integers(0, d - c + 1)) for d, c in zip(dims, crop_dims))


def random_crop(v: VolumeGrid, lab: LabelGrid | None, crop_dims, rng):
    """Crop volume and label at one offset drawn uniformly from valid positions."""
    z, y, x = crop_offset(v.dims, crop_dims, rng)
    cd, ch, cw = crop_dims
    sl = (slice(z, z + cd), slice(y, y + ch), slice(x, x + cw))
    out_v = VolumeGrid(v.data[sl], v.spacing)
    out_l = LabelGrid(lab.data[sl]) if lab is not None else None
    return out_v, out_l
