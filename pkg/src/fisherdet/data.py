"""Dataset ingestion, model and dataset containers, heatmap export.

Datasets travel as IDX pairs. MNIST files use unsigned bytes (scaled by
1/255 on load); datasets written by this package (adversarial batches,
synthetic fixtures) use the IDX float64 type so no precision is lost.

A model file is a JSON manifest next to a raw little-endian float64 blob
``<path>.bin``; the manifest records the architecture, the parameter
offset table, blob length and SHA-256.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    BadMagicError,
    ChecksumError,
    CountMismatchError,
    EmptyDataError,
    FormatError,
    LabelError,
    LayoutMismatchError,
    TruncatedFileError,
    VersionError,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}

DATA_DIR_ENV = "FISHERDET_DATA_DIR"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

MODEL_FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, *shape), float64 in [0, 1]
    labels: np.ndarray  # (N,), int
    note: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.note)

    def reshaped(self, shape) -> "LabeledDataset":
        """Same samples viewed with per-sample ``shape`` (e.g. (1, 28, 28))."""
        return LabeledDataset(self.inputs.reshape((len(self),) + tuple(shape)), self.labels, self.note)


def check_labels(labels, num_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")


# -- IDX -----------------------------------------------------------------------


def read_idx(path) -> tuple[int, np.ndarray]:
    """Return (magic, array) of a raw IDX file."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise BadMagicError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(raw) - head}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)
    return int.from_bytes(raw[:4], "big"), data


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">")
    code = _IDX_CODES.get(dtype)
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.astype(dtype).tobytes())


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label pair; byte images are scaled into [0, 1]."""
    img_magic, images = read_idx(images_path)
    lab_magic, labels = read_idx(labels_path)
    if img_magic & 0xFF < 2:
        raise BadMagicError(f"{images_path}: image file needs at least 2 dimensions")
    if lab_magic != LABEL_MAGIC:
        raise BadMagicError(f"{labels_path}: bad label magic 0x{lab_magic:08x}")
    if images.dtype == np.dtype(">u1"):
        if img_magic != IMAGE_MAGIC and images.ndim == 3:
            raise BadMagicError(f"{images_path}: bad image magic 0x{img_magic:08x}")
        inputs = images.astype(np.float64) / 255.0
    else:
        inputs = images.astype(np.float64)
    if len(inputs) != len(labels):
        raise CountMismatchError(
            f"{len(inputs)} images in {images_path} but {len(labels)} labels in {labels_path}")
    if inputs.size and (inputs.min() < 0 or inputs.max() > 1):
        raise FormatError(f"{images_path}: pixel values outside [0, 1]")
    return LabeledDataset(inputs, labels.astype(np.int64), note=f"idx:{images_path}")


def save_dataset(ds: LabeledDataset, stem) -> tuple[Path, Path]:
    """Write ``<stem>-images.idx`` (float64) and ``<stem>-labels.idx`` (ubyte)."""
    stem = str(stem)
    img, lab = Path(stem + "-images.idx"), Path(stem + "-labels.idx")
    write_idx(img, ds.inputs.astype(np.float64))
    write_idx(lab, ds.labels.astype(np.uint8))
    return img, lab


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "~/data/mnist")).expanduser()


def load_mnist(split: str = "test", data_dir=None) -> LabeledDataset:
    data_dir = Path(data_dir) if data_dir else default_data_dir()
    images, labels = MNIST_FILES[split]
    return load_idx(data_dir / images, data_dir / labels)


def resolve_dataset(source, split: str = "test") -> LabeledDataset:
    """Load from a directory holding MNIST files, a dataset stem, or one of its files."""
    p = Path(source)
    if p.is_dir():
        return load_mnist(split, p)
    s = str(source)
    for suffix in ("-images.idx", "-labels.idx"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
    img, lab = Path(s + "-images.idx"), Path(s + "-labels.idx")
    if not img.exists() or not lab.exists():
        raise FileNotFoundError(f"no dataset at {source}")
    return load_idx(img, lab)


# -- synthetic fixtures ------------------------------------------------------------


def synthetic_blobs(num_classes: int, per_class: int, dim: int, seed: int = 0,
                    spread: float = 0.05) -> LabeledDataset:
    """Gaussian clusters around seeded centres in [0.2, 0.8]^dim, clipped to [0, 1]."""
    if num_classes <= 0 or per_class <= 0 or dim <= 0:
        raise EmptyDataError("num_classes, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    inputs = np.concatenate([c + spread * rng.standard_normal((per_class, dim)) for c in centres])
    labels = np.repeat(np.arange(num_classes), per_class)
    order = rng.permutation(len(labels))
    return LabeledDataset(np.clip(inputs[order], 0.0, 1.0), labels[order],
                          note=f"blobs:C={num_classes},n={per_class},d={dim},seed={seed}")


# -- model container -----------------------------------------------------------------


def _blob_path(path) -> Path:
    return Path(str(path) + ".bin")


def save_model(net: nn.Network, path, extra: dict | None = None) -> str:
    """Write manifest ``path`` and blob ``path.bin``; returns the blob SHA-256."""
    blob = np.asarray(net.params, dtype="<f8").tobytes()
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format": "fisherdet-model",
        "version": MODEL_FORMAT_VERSION,
        "architecture": net.architecture(),
        "num_params": net.num_params,
        "num_classes": net.num_classes,
        "offsets": net.offset_table(),
        "blob": _blob_path(path).name,
        "blob_bytes": len(blob),
        "sha256": digest,
    }
    if extra:
        manifest["extra"] = extra
    _blob_path(path).write_bytes(blob)
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return digest


def load_model(path) -> nn.Network:
    try:
        manifest = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not JSON ({exc})") from None
    if manifest.get("format") != "fisherdet-model":
        raise FormatError(f"{path}: not a model manifest")
    if manifest.get("version") != MODEL_FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported model format version {manifest.get('version')}")
    blob = (Path(path).parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"] or len(blob) != 8 * manifest["num_params"]:
        raise ChecksumError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"{path}: blob checksum mismatch")
    arch = manifest["architecture"]
    layers = [nn.layer_from_dict(d) for d in arch["layers"]]
    net = nn.Network(layers, arch["input_shape"], np.frombuffer(blob, dtype="<f8"))
    if net.offset_table() != manifest["offsets"]:
        raise LayoutMismatchError(f"{path}: parameter offset table does not match the architecture")
    return net


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- heatmaps ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeatmapExportConfig:
    scaling: str = "per_image_scale"  # or "shared_scale"
    value_view: str = "absolute"      # or "signed"
    format: str = "pgm"               # or "csv"

    def __post_init__(self):
        if self.scaling not in ("shared_scale", "per_image_scale"):
            raise ValueError(f"bad scaling {self.scaling!r}")
        if self.value_view not in ("signed", "absolute"):
            raise ValueError(f"bad value_view {self.value_view!r}")
        if self.format not in ("pgm", "csv"):
            raise ValueError(f"bad format {self.format!r}")


def heatmap_view(values, cfg: HeatmapExportConfig) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.abs(values) if cfg.value_view == "absolute" else values


def to_gray(values, lo: float, hi: float) -> np.ndarray:
    """Affine map of [lo, hi] onto 0..255; a degenerate range gives mid-gray 128."""
    values = np.asarray(values, dtype=np.float64)
    if not hi > lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(scaled * 255).astype(np.uint8)


def _as_image(values) -> np.ndarray:
    values = np.asarray(values)
    values = values.reshape(values.shape[-2:]) if values.ndim >= 2 else values.reshape(1, -1)
    return values


def write_pgm(path, gray: np.ndarray) -> None:
    gray = _as_image(gray)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the raster
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise FormatError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(m.group(1)), int(m.group(2))
    data = raw[m.end():m.end() + w * h]
    if len(data) != w * h:
        raise TruncatedFileError(f"{path}: truncated PGM raster")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_heatmap_csv(path, values) -> None:
    values = _as_image(np.asarray(values, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=np.float64)


def export_heatmap(fmap, cfg: HeatmapExportConfig, path, scale_range=None) -> Path:
    """Write a FIS map as PGM (scaled) or CSV (raw, full precision).

    ``scale_range`` is the (lo, hi) pair used under shared scaling, so clean
    and adversarial maps can be put on one scale by the caller.
    """
    values = getattr(fmap, "values", fmap)
    if not np.all(np.isfinite(values)):
        raise FormatError("heatmap contains non-finite values")
    view = heatmap_view(values, cfg)
    path = Path(path)
    if cfg.format == "csv":
        write_heatmap_csv(path, view)
        return path
    if cfg.scaling == "shared_scale":
        if scale_range is None:
            raise ValueError("shared_scale export needs scale_range")
        lo, hi = scale_range
    else:
        lo, hi = float(view.min()), float(view.max())
    write_pgm(path, to_gray(view, lo, hi))
    return path
