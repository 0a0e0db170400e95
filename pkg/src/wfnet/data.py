"""Datasets (IDX files, synthetic generator), mini-batching and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, 1, H, W] in [0, 1]
    labels: np.ndarray  # [N] int
    split: str
    n_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def hw(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.n_classes)

    def of_class(self, c: int) -> "Dataset":
        """The forget set of class ``c``: a label filter, never stored separately."""
        return self.subset(np.flatnonzero(self.labels == c))

    def without_class(self, c: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels != c))

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))

    def partition(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded disjoint split into (fraction, 1 - fraction) parts."""
        perm = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(perm[:cut])), self.subset(np.sort(perm[cut:]))


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path: Path, magic: int, ndim: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError(f"{what} file {path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXFormatError(f"{what} file {path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXFormatError(f"{what} file {path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = math.prod(dims)
    if len(raw) - head < need:
        raise IDXFormatError(f"{what} file {path}: truncated payload, {len(raw) - head} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", n_classes: int = 10) -> Dataset:
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC, 3, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1, "labels")
    if len(imgs) != len(labels):
        raise IDXFormatError(f"count mismatch: {len(imgs)} images vs {len(labels)} labels")
    images = (imgs.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.intp), split, n_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data in IDX layout (magic picked from rank: 1 -> labels, 3 -> images)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}[arr.ndim]
    Path(path).write_bytes(struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes())


# ---------------------------------------------------------------------------
# Synthetic classes


def class_prototype(c: int, n_classes: int, hw: int, bump_offset=(0.0, 0.0)) -> np.ndarray:
    """Noise-free image of class c: a Gaussian bump at a class-specific grid cell plus an oriented bar."""
    g = math.ceil(math.sqrt(n_classes))
    cell = hw / g
    cy = (c // g + 0.5) * cell + bump_offset[0]
    cx = (c % g + 0.5) * cell + bump_offset[1]
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64) + 0.5
    sigma = hw / 10
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    theta = math.pi * c / n_classes
    dy, dx = yy - hw / 2, xx - hw / 2
    along = dx * math.cos(theta) + dy * math.sin(theta)
    across = -dx * math.sin(theta) + dy * math.cos(theta)
    bar = np.exp(-(across**2) / (2 * 0.8**2)) * (np.abs(along) <= 0.35 * hw)
    return 0.8 * bump + 0.6 * bar


def synth_dataset(n_classes: int = 5, per_class=(2000, 600, 200), hw: int = 16, seed: int = 0,
                  noise: float = 0.1) -> dict[str, Dataset]:
    """Deterministic train/val/test splits of the synthetic bump-and-bar task."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if hw < 8:
        raise ValueError("image size must be at least 8")
    out = {}
    for si, (split, n) in enumerate(zip(SPLITS, per_class)):
        rng = np.random.default_rng([seed, si])
        labels = np.repeat(np.arange(n_classes), n)
        imgs = np.empty((len(labels), 1, hw, hw))
        for i, c in enumerate(labels):
            off = rng.uniform(-0.1 * hw, 0.1 * hw, 2)
            amp = rng.uniform(0.7, 1.0)
            img = amp * class_prototype(int(c), n_classes, hw, off) + rng.normal(0.0, noise, (hw, hw))
            imgs[i, 0] = np.clip(img, 0.0, 1.0)
        perm = rng.permutation(len(labels))
        out[split] = Dataset(imgs[perm], labels[perm].astype(np.intp), split, n_classes)
    return out


# ---------------------------------------------------------------------------
# Batching


def batches(ds: Dataset, batch_size: int, seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled full batches; the short tail is dropped."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch size must be even, got {batch_size}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    for i in range(len(ds) // batch_size):
        idx = perm[i * batch_size : (i + 1) * batch_size]
        yield ds.images[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"WFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _model_meta(model) -> tuple[dict, list]:
    from .wf import WFModel

    if isinstance(model, WFModel):
        net, wf_layers = model.net, model.wf_names
    else:
        net, wf_layers = model, []
    meta = {"arch": net.arch, "n_classes": net.n_classes, "hw": net.hw, "wf_layers": wf_layers}
    return meta, list(model.named_parameters())


def save_checkpoint(model, extra: dict | None = None) -> bytes:
    """Serialize to ``magic | u32 manifest length | JSON manifest | float64 LE blob``."""
    meta, named = _model_meta(model)
    tensors, chunks, offset = [], [], 0
    for name, p in named:
        data = np.ascontiguousarray(p.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob = b"".join(chunks)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        **meta,
        "tensors": tensors,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(mbytes)) + mbytes + blob


def read_manifest(buf: bytes) -> tuple[dict, bytes]:
    if len(buf) < 8 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (mlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + mlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(buf[8 : 8 + mlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    blob = buf[8 + mlen :]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"truncated blob: {len(blob)} of {manifest['blob_bytes']} bytes")
    end = 0
    for t in sorted(manifest["tensors"], key=lambda t: t["offset"]):
        if t["offset"] < end:
            raise CheckpointError(f"tensor {t['name']} overlaps its predecessor")
        end = t["offset"] + 8 * math.prod(t["shape"])
        if end > len(blob):
            raise CheckpointError(f"tensor {t['name']} overflows the blob")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("checksum failure")
    return manifest, blob


def load_checkpoint(buf: bytes):
    """Rebuild a base model or WFModel; every tensor is restored bit-exactly."""
    from .models import build_model
    from .wf import wf_wrap

    manifest, blob = read_manifest(buf)
    model = build_model(manifest["arch"], manifest["n_classes"], manifest["hw"])
    if manifest["wf_layers"]:
        model = wf_wrap(model, manifest["n_classes"], manifest["wf_layers"])
    params = dict(model.named_parameters())
    names = [t["name"] for t in manifest["tensors"]]
    if sorted(names) != sorted(params):
        raise CheckpointError(f"tensor directory does not match architecture {manifest['arch']}")
    for t in manifest["tensors"]:
        p = params[t["name"]]
        if list(p.shape) != t["shape"]:
            raise CheckpointError(f"tensor {t['name']}: shape {t['shape']} vs expected {list(p.shape)}")
        n = math.prod(t["shape"])
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"])
    return model


def save_checkpoint_file(model, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_checkpoint(model, extra))


def load_checkpoint_file(path):
    return load_checkpoint(Path(path).read_bytes())
