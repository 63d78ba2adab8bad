"""Datasets: procedural shapes, CIFAR-10 binary ingestion, and the on-disk container."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

SHAPES = ("disk", "triangle", "bar", "square", "ring", "cross")
CIFAR_RECORD = 3073


class DigestError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def header(self) -> dict:
        return {"shape": list(self.images.shape), "classes": int(self.num_classes),
                "split": self.split, "provenance": self.provenance}

    @property
    def digest(self) -> str:
        return _digest(self.header(), self.images, self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, dict(self.provenance))

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.header() == other.header()
                and np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels))


def _digest(header: dict, images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    return h.hexdigest()


# -- procedural shapes ---------------------------------------------------------
def _hsv_to_rgb(h, s, v) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    # u, v: rotated coordinates centred on the shape, in pixels
    if kind == "disk":
        return u * u + v * v <= r * r
    if kind == "triangle":
        # equilateral, circumradius r, apex along -v
        a = np.sqrt(3.0) / 2.0
        return (v <= r / 2.0) & (a * u - 0.5 * v <= r / 2.0) & (-a * u - 0.5 * v <= r / 2.0)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
    if kind == "square":
        return (np.abs(u) <= 0.75 * r) & (np.abs(v) <= 0.75 * r)
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        return ((np.abs(u) <= r) & (np.abs(v) <= 0.25 * r)) | ((np.abs(v) <= r) & (np.abs(u) <= 0.25 * r))
    raise ValueError(kind)


def render_shape(kind: str, size: int, rng: np.random.Generator, supersample: int = 4) -> np.ndarray:
    """One anti-aliased shape on a textured background, [3, size, size] in [0, 1]."""
    ss = size * supersample
    coords = (np.arange(ss) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    # background: tinted base colour plus an oriented grating
    bg_rgb = _hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.6), rng.uniform(0.3, 0.8))
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.0, 3.0) / size
    phase = rng.uniform(0, 2 * np.pi)
    grating = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    amp = rng.uniform(0.05, 0.2)
    bg = bg_rgb[:, None, None] + amp * grating[None]

    r = rng.uniform(0.25, 0.4) * size
    cx, cy = rng.uniform(r * 0.8, size - r * 0.8, size=2)
    ang = rng.uniform(0, 2 * np.pi)
    dx, dy = xx - cx, yy - cy
    u = np.cos(ang) * dx + np.sin(ang) * dy
    v = -np.sin(ang) * dx + np.cos(ang) * dy
    mask = _shape_mask(kind, u, v, r).astype(np.float64)

    fg_rgb = _hsv_to_rgb(rng.uniform(), rng.uniform(0.4, 1.0), rng.uniform(0.5, 1.0))
    if abs(fg_rgb.mean() - bg_rgb.mean()) < 0.2:
        fg_rgb = 1.0 - fg_rgb  # keep the shape visible against its background
    img = mask[None] * fg_rgb[:, None, None] + (1 - mask[None]) * bg
    img = img.reshape(3, size, supersample, size, supersample).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0)


def _render_split(seed: int, split: str, n: int, classes: int, size: int) -> Dataset:
    rng = substream(seed, "data", split)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, y in enumerate(labels):
        images[i] = render_shape(SHAPES[y], size, rng)
    prov = {"generator": "shapes", "seed": int(seed), "classes": classes, "size": size}
    return Dataset(images, labels, classes, split, prov)


def gen_shapes(seed: int, n_train: int = 3000, n_test: int = 600, classes: int = 3, size: int = 16) -> tuple:
    """Class-balanced procedural shapes; a pure function of its arguments."""
    if size not in (8, 16, 32):
        raise ValueError(f"size must be 8, 16 or 32, got {size}")
    if not 2 <= classes <= len(SHAPES):
        raise ValueError(f"classes must lie in [2, {len(SHAPES)}], got {classes}")
    if n_train < classes or n_test < classes:
        raise ValueError(f"need at least {classes} samples per split for a balanced dataset")
    return (_render_split(seed, "train", n_train, classes, size),
            _render_split(seed, "test", n_test, classes, size))


# -- CIFAR-10 binary ----------------------------------------------------------
def read_cifar_binary(path, split: str = "train") -> Dataset:
    """Parse 3073-byte records: one label byte then the R, G and B planes of a 32x32 image."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD} (truncated file?)")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    prov = {"source": Path(path).name, "sha256": hashlib.sha256(raw).hexdigest()}
    return Dataset(images, labels, 10, split, prov)


def read_cifar_files(paths, split: str = "train") -> Dataset:
    parts = [read_cifar_binary(p, split) for p in paths]
    prov = {"sources": [p.provenance for p in parts]}
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                   10, split, prov)


# -- container ----------------------------------------------------------------
_DS_MAGIC = b"GLDS1\n"


def write_container(ds: Dataset, path) -> str:
    """Write and return the content digest. The header records block byte lengths."""
    header = ds.header()
    header["digest"] = ds.digest
    header["pixel_bytes"] = int(ds.images.size * 4)
    header["label_bytes"] = int(ds.labels.size * 4)
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_DS_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    tmp.replace(path)
    return header["digest"]


def read_container(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(_DS_MAGIC):
        raise ValueError(f"{path}: not a dataset container")
    off = len(_DS_MAGIC)
    try:
        (hlen,) = struct.unpack("<Q", raw[off:off + 8])
        header = json.loads(raw[off + 8:off + 8 + hlen])
        shape = [int(v) for v in header["shape"]]
        npix, nlab = header["pixel_bytes"], header["label_bytes"]
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed header ({exc})") from None
    off += 8 + hlen
    if npix != int(np.prod(shape)) * 4 or nlab != shape[0] * 4 or off + npix + nlab != len(raw):
        raise ValueError(f"{path}: block lengths disagree with header")
    images = np.frombuffer(raw[off:off + npix], dtype="<f4").reshape(shape).astype(np.float32)
    labels = np.frombuffer(raw[off + npix:off + npix + nlab], dtype="<i4").astype(np.int64)
    stored = header.pop("digest", None)
    body = {k: header[k] for k in ("shape", "classes", "split", "provenance") if k in header}
    if stored != _digest(body, images, labels):
        raise DigestError(f"{path}: digest mismatch")
    return Dataset(images, labels, int(header["classes"]), header["split"], header["provenance"])
