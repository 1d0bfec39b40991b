"""Dataset ingestion, normalization, splitting and synthetic generation.

Three on-disk sources are understood:
  - ``idx``: the classic big-endian IDX container (u8 payload); a sibling
    file with ``images`` replaced by ``labels`` in its name supplies class
    ids when present,
  - ``raw-tensor``: the checkpoint container holding one tensor named
    "images" of shape [n, c, s, s] plus an optional "labels" vector,
  - ``synthetic``: no file at all; a spec string such as
    ``"blobs,n=1000,side=32,classes=10,seed=7"`` is expanded in memory.

Synthetic families draw class-conditional textures with per-image random
placement/phase, so that memorizing individual images (not recognizing
classes) is what separates members from non-members downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint

SYNTH_FAMILIES = ("blobs", "stripes", "mixed")
FORMATS = ("idx", "raw-tensor", "synthetic")


class DataError(Exception):
    """Base class for dataset failures."""


class ParseError(DataError):
    """Unreadable file; message carries the failing byte offset."""


class GeometryError(DataError):
    """Images do not share the expected square geometry."""


class SpecError(DataError):
    """Malformed synthetic-spec string."""


class InsufficientDataError(DataError):
    """A split requests more samples than the dataset holds."""


@dataclass
class Dataset:
    """Loaded images plus per-channel statistics.

    `images` is float32 [n, channels, side, side]; raw pixel values live in
    [0, 1] until `normalize` rescales them. Instances are treated as
    immutable after construction and are safe to read concurrently.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray | None
    mean: np.ndarray
    std: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise GeometryError(f"images must be [n, c, s, s], got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise GeometryError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def side(self) -> int:
        return self.images.shape[2]


@dataclass(frozen=True)
class SplitSpec:
    """Sizes of the four pairwise-disjoint index sets plus the draw seed."""

    shadow_train: int
    shadow_test: int
    target_train: int
    target_test: int
    seed: int

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.shadow_train, self.shadow_test, self.target_train, self.target_test)


@dataclass(frozen=True)
class Splits:
    shadow_train: np.ndarray
    shadow_test: np.ndarray
    target_train: np.ndarray
    target_test: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "shadow_train": self.shadow_train,
            "shadow_test": self.shadow_test,
            "target_train": self.target_train,
            "target_test": self.target_test,
        }


def _dataset_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.astype(np.float64).mean(axis=(0, 2, 3))
    std = images.astype(np.float64).std(axis=(0, 2, 3))
    std = np.where(std < 1e-8, 1.0, std)
    return mean.astype(np.float32), std.astype(np.float32)


def _make_dataset(name: str, images: np.ndarray, labels: np.ndarray | None) -> Dataset:
    mean, std = _dataset_stats(images)
    return Dataset(name=name, images=images, labels=labels, mean=mean, std=std)


def normalize(ds: Dataset) -> Dataset:
    """Per-channel standardization using the dataset's own statistics.

    Applying this to an already-normalized dataset recomputes statistics
    that are ~0/~1, so it is idempotent to float precision.
    """
    mean, std = _dataset_stats(ds.images)
    images = ((ds.images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    return replace(ds, images=images, mean=mean, std=std, normalized=True)


def split(ds: Dataset, spec: SplitSpec) -> Splits:
    """Partition a seeded permutation of indices into the four sets."""
    needed = sum(spec.counts)
    if any(c < 0 for c in spec.counts):
        raise InsufficientDataError(f"negative split counts: {spec.counts}")
    if needed > ds.n:
        raise InsufficientDataError(
            f"split needs {needed} samples but dataset {ds.name!r} has {ds.n}"
        )
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    perm = rng.permutation(ds.n)
    out = []
    at = 0
    for count in spec.counts:
        out.append(np.sort(perm[at : at + count]))
        at += count
    return Splits(*out)


# -- IDX ---------------------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 4:
        raise ParseError(f"{path}: truncated IDX header at offset 0")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic not in (_IDX_IMAGES_MAGIC, _IDX_LABELS_MAGIC):
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ParseError(f"{path}: truncated IDX dims at offset {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    n = 1
    for d in dims:
        n *= d
    if len(blob) != header + n:
        raise ParseError(
            f"{path}: payload is {len(blob) - header} bytes at offset {header}, expected {n}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    raw = _read_idx(path)
    if raw.ndim != 3:
        raise ParseError(f"{path}: expected a 3-d image IDX file, got {raw.ndim} dims")
    if raw.shape[1] != raw.shape[2]:
        raise GeometryError(f"{path}: non-square images {raw.shape[1]}x{raw.shape[2]}")
    images = (raw.astype(np.float32) / 255.0)[:, None, :, :]

    labels = None
    label_path = Path(str(path).replace("images", "labels"))
    if label_path != path and label_path.exists():
        lab = _read_idx(label_path)
        if lab.ndim != 1 or len(lab) != len(images):
            raise ParseError(f"{label_path}: labels do not match {len(images)} images")
        labels = lab.astype(np.int64)
    return _make_dataset(name or path.stem, images, labels)


def save_idx(path: str | Path, ds: Dataset) -> None:
    """Write images (and labels if present) as u8 IDX files."""
    if ds.channels != 1:
        raise GeometryError("IDX export supports single-channel images only")
    if ds.normalized:
        raise GeometryError("IDX export expects raw [0, 1] pixels")
    path = Path(path)
    raw = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    blob = struct.pack(">IIII", _IDX_IMAGES_MAGIC, *raw.shape) + raw.tobytes()
    path.write_bytes(blob)
    if ds.labels is not None:
        label_path = Path(str(path).replace("images", "labels"))
        if label_path == path:
            raise DataError("image path must contain 'images' to place the label file")
        lb = struct.pack(">II", _IDX_LABELS_MAGIC, len(ds.labels))
        label_path.write_bytes(lb + ds.labels.astype(np.uint8).tobytes())


# -- raw tensor container ------------------------------------------------------


def load_raw_tensor(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    try:
        tensors = checkpoint.load_tensors(path)
    except checkpoint.CheckpointError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if "images" not in tensors:
        raise ParseError(f"{path}: container lacks an 'images' tensor")
    images = tensors["images"].astype(np.float32)
    if images.ndim != 4:
        raise GeometryError(f"{path}: 'images' must be [n, c, s, s], got {images.shape}")
    labels = None
    if "labels" in tensors:
        labels = np.rint(tensors["labels"]).astype(np.int64)
        if labels.ndim != 1:
            raise ParseError(f"{path}: 'labels' must be a vector")
    return _make_dataset(name or path.stem, images, labels)


def save_raw_tensor(path: str | Path, ds: Dataset) -> None:
    tensors = {"images": ds.images}
    if ds.labels is not None:
        tensors["labels"] = ds.labels.astype(np.float32)
    checkpoint.save_tensors(path, tensors)


# -- synthetic generator -------------------------------------------------------

_SPEC_DEFAULTS = {"n": 256, "side": 32, "classes": 10, "seed": 0, "channels": 1}


def parse_synth_spec(spec: str) -> tuple[str, dict[str, int]]:
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    if not parts:
        raise SpecError("empty synthetic spec")
    family = parts[0]
    if family not in SYNTH_FAMILIES:
        raise SpecError(f"unknown synthetic family {family!r}; choose from {SYNTH_FAMILIES}")
    params = dict(_SPEC_DEFAULTS)
    for item in parts[1:]:
        if "=" not in item:
            raise SpecError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _SPEC_DEFAULTS:
            raise SpecError(f"unknown synthetic-spec key {key!r}")
        try:
            params[key] = int(value)
        except ValueError as exc:
            raise SpecError(f"{key} must be an integer, got {value!r}") from exc
    if params["n"] < 1 or params["side"] < 2 or params["classes"] < 1:
        raise SpecError(f"invalid synthetic parameters {params}")
    if params["channels"] not in (1, 3):
        raise SpecError("channels must be 1 or 3")
    return family, params


_CARRIER_ANGLES = (0.0, 1.1, 2.2)
_CARRIER_FREQS = (5.0, 7.0, 9.0)


def _blob_image(rng: np.random.Generator, side: int, cls: int, channels: int) -> np.ndarray:
    """Gaussian bumps over a per-image signature texture.

    Three fixed-direction gratings with random phases give every patch a
    dense image-specific signature, a coarse random cell field and the
    randomly placed signed bumps carry content that cannot be inferred
    from other patches. Class fixes bump count and width.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    base = np.full((side, side), 0.5, dtype=np.float64)
    for ang, freq in zip(_CARRIER_ANGLES, _CARRIER_FREQS):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.cos(ang) * xx + np.sin(ang) * yy
        base += 0.12 * np.sin(2.0 * np.pi * freq * wave / side + phase)
    grid = max(2, side // 8)
    coarse = rng.normal(0.0, 0.10, size=(grid, grid))
    cell_of = (np.arange(side) * grid) // side
    base += coarse[np.ix_(cell_of, cell_of)]
    n_blobs = 4 + cls % 3
    sigma = side * (0.045 + 0.01 * (cls % 4))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, side, size=2)
        amp = rng.uniform(0.3, 0.5) * rng.choice([-1.0, 1.0])
        base += amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)))
    img = np.repeat(base[None], channels, axis=0)
    if channels > 1:
        # small per-channel tint keeps channels distinct but correlated
        img = img + rng.normal(0.0, 0.05, size=(channels, 1, 1))
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _stripe_image(rng: np.random.Generator, side: int, cls: int, channels: int) -> np.ndarray:
    """A sinusoidal grating; class fixes frequency/orientation, phase is random."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    freq = 1.0 + (cls % 5)
    theta = np.pi * ((cls // 5) % 4) / 4.0
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.cos(2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / side + phase)
    img = np.repeat((0.5 + 0.35 * wave)[None], channels, axis=0)
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(spec: str) -> Dataset:
    """Expand a synthetic-spec string into a Dataset; same spec, same bytes."""
    family, p = parse_synth_spec(spec)
    rng = np.random.Generator(np.random.PCG64(p["seed"]))
    labels = rng.integers(0, p["classes"], size=p["n"])
    images = np.empty((p["n"], p["channels"], p["side"], p["side"]), dtype=np.float32)
    for i, cls in enumerate(labels):
        if family == "blobs":
            img = _blob_image(rng, p["side"], int(cls), p["channels"])
        elif family == "stripes":
            img = _stripe_image(rng, p["side"], int(cls), p["channels"])
        else:  # mixed: class parity picks the texture family
            if cls % 2 == 0:
                img = _blob_image(rng, p["side"], int(cls), p["channels"])
            else:
                img = _stripe_image(rng, p["side"], int(cls), p["channels"])
        images[i] = img.astype(np.float32)
    return _make_dataset(f"{family}-{p['seed']}", images, labels.astype(np.int64))


def load_dataset(source: str | Path, fmt: str, name: str | None = None) -> Dataset:
    """Load from `source` under the declared format.

    For ``synthetic`` the source *is* the spec string; the other formats
    read files from disk.
    """
    if fmt == "synthetic":
        return synth_generate(str(source))
    if fmt == "idx":
        return load_idx(source, name)
    if fmt == "raw-tensor":
        return load_raw_tensor(source, name)
    raise DataError(f"unknown dataset format {fmt!r}; choose from {FORMATS}")
