"""Synthetic labeled shapes and a small on-disk dataset format.

A dataset directory holds ``meta.json`` (dims, classes, seed, checksum) and
``data.bin``: uint8 images in (N, C, H, W) row-major order followed by the
labels as little-endian int64.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "diamond")
FORMAT_VERSION = 1
_LABEL_DTYPE = np.dtype("<i8")


class DatasetError(ValueError):
    pass


class CorruptPayloadError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class ShapeGenConfig:
    num_classes: int = 4
    samples_per_class: int = 500
    image_size: int = 32
    channels: int = 3
    noise_std: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPE_KINDS):
            raise DatasetError(
                f"num_classes={self.num_classes} unsupported; "
                f"at most {len(SHAPE_KINDS)} shape kinds are implemented"
            )
        if self.samples_per_class < 1:
            raise DatasetError("samples_per_class must be >= 1")
        if self.channels not in (1, 3):
            raise DatasetError("channels must be 1 or 3")
        if self.image_size < 8:
            raise DatasetError("image_size must be >= 8")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    num_classes: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.uint8)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeMismatchError(f"images must be 4-D, got shape {images.shape}")
        n, c, h, w = images.shape
        if n < 1:
            raise DatasetError("dataset must hold at least one image")
        if c not in (1, 3):
            raise ShapeMismatchError(f"channel count must be 1 or 3, got {c}")
        if h != w:
            raise ShapeMismatchError(f"images must be square, got {h}x{w}")
        if labels.shape != (n,):
            raise ShapeMismatchError(f"expected {n} labels, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DatasetError("labels out of range [0, num_classes)")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Images as floats in [0, 1] and labels as a long tensor."""
        x = torch.from_numpy(self.images.astype(np.float32) / 255.0).to(dtype)
        y = torch.from_numpy(self.labels.copy())
        return x, y

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        meta = dict(self.meta)
        meta["indices"] = indices.tolist()
        if name is not None:
            meta["name"] = name
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, meta)

    def checksum(self) -> str:
        return hashlib.sha256(_payload(self)).hexdigest()


def to_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float64) / 255.0


def to_uint8(x) -> np.ndarray:
    """Inverse of ``to_float``; exact for values produced by it."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    # rotate coordinates about the shape center
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == "circle":
        return u**2 + v**2 <= r**2
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        # upward triangle: below the two slanted edges, above the base
        return (v <= 0.6 * r) & (v >= -r + 1.7 * np.abs(u))
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = u**2 + v**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    raise DatasetError(f"unknown shape kind {kind!r}")


def _render(rng: np.random.Generator, kind: str, cfg: ShapeGenConfig) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    r = rng.uniform(0.22, 0.36) * s
    cy, cx = rng.uniform(r, s - r, size=2)
    angle = rng.uniform(-np.pi / 6, np.pi / 6)
    mask = _shape_mask(kind, yy, xx, cy, cx, r, angle)

    c = cfg.channels
    bg = rng.uniform(0.0, 1.0, size=c)
    fg = rng.uniform(0.0, 1.0, size=c)
    # keep foreground/background contrast
    while np.abs(fg - bg).mean() < 0.35:
        fg = rng.uniform(0.0, 1.0, size=c)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return to_uint8(img)


def generate_synthetic(config: ShapeGenConfig | None = None, name: str = "shapes") -> Dataset:
    """Balanced synthetic shapes dataset; bit-identical for identical configs."""
    config = config or ShapeGenConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.num_classes * config.samples_per_class
    labels = np.tile(np.arange(config.num_classes, dtype=np.int64), config.samples_per_class)
    labels = labels[rng.permutation(n)]
    images = np.stack([_render(rng, SHAPE_KINDS[k], config) for k in labels])
    meta = {"name": name, "seed": config.seed, "generator": asdict(config)}
    return Dataset(images, labels, config.num_classes, meta)


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    """Seeded disjoint partition of ``ds`` into len(fractions) parts."""
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if any(sz < 1 for sz in sizes):
        raise DatasetError(f"split sizes {sizes} leave an empty part")
    parts, start = [], 0
    for i, sz in enumerate(sizes):
        idx = np.sort(perm[start:start + sz])
        parts.append(ds.subset(idx, name=f"{ds.meta.get('name', 'data')}-part{i}"))
        start += sz
    return tuple(parts)


def _payload(ds: Dataset) -> bytes:
    return ds.images.tobytes(order="C") + ds.labels.astype(_LABEL_DTYPE).tobytes()


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = _payload(ds)
    n, c, h, w = ds.images.shape
    meta = {
        "format_version": FORMAT_VERSION,
        "name": ds.meta.get("name", "data"),
        "n": n,
        "channels": c,
        "height": h,
        "width": w,
        "num_classes": ds.num_classes,
        "seed": ds.meta.get("seed"),
        "checksum": hashlib.sha256(payload).hexdigest(),
        "meta": {k: v for k, v in ds.meta.items() if k not in ("name", "seed")},
    }
    _atomic_write(path / "data.bin", payload)
    _atomic_write(path / "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptPayloadError(f"unreadable header in {path}: {exc}") from exc
    try:
        version = meta["format_version"]
        n, c, h, w = (int(meta[k]) for k in ("n", "channels", "height", "width"))
        num_classes = int(meta["num_classes"])
        checksum = meta["checksum"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPayloadError(f"corrupt header in {path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {version}")

    payload = (path / "data.bin").read_bytes()
    per_example = c * h * w + _LABEL_DTYPE.itemsize
    if len(payload) != n * per_example:
        if len(payload) % per_example == 0:
            raise ShapeMismatchError(
                f"header declares N={n} but payload holds {len(payload) // per_example} examples"
            )
        raise CorruptPayloadError(
            f"payload is {len(payload)} bytes, expected {n * per_example}"
        )
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise CorruptPayloadError("payload checksum mismatch")

    split_at = n * c * h * w
    images = np.frombuffer(payload[:split_at], dtype=np.uint8).reshape(n, c, h, w)
    labels = np.frombuffer(payload[split_at:], dtype=_LABEL_DTYPE).astype(np.int64)
    extra = dict(meta.get("meta") or {})
    extra["name"] = meta["name"]
    extra["seed"] = meta.get("seed")
    return Dataset(images.copy(), labels, num_classes, extra)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
