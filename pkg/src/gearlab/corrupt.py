"""Common-corruption suite kappa(x, s) and robust-accuracy evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import Dataset, read_container, write_container
from .rng import substream

# per-severity parameters, severities 1..5
SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),   # noise std
    "box_blur": (2, 3, 4, 5, 6),                        # box side in pixels
    "pixelate": (0.75, 0.6, 0.5, 0.4, 0.3),             # retained resolution fraction
    "occlusion": (0.2, 0.3, 0.4, 0.5, 0.6),             # occluder side / image side
    "saturation_shift": (0.7, 0.5, 0.3, 0.15, 0.0),     # retained chroma fraction
}
CORRUPTION_KINDS = tuple(SEVERITY_TABLE)
STOCHASTIC = frozenset({"gaussian_noise", "occlusion"})
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int
    level: Optional[float] = None  # overrides the table entry, e.g. level=0 noise

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption {self.kind!r}; known: {', '.join(CORRUPTION_KINDS)}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must lie in 1..5, got {self.severity}")

    @property
    def param(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1] if self.level is None else self.level

    @property
    def name(self) -> str:
        return f"{self.kind}_s{self.severity}" if self.level is None else f"{self.kind}_l{self.level:g}"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "severity": self.severity}
        if self.level is not None:
            d["level"] = self.level
        return d


def default_suite() -> list:
    return [Corruption(k, s) for k in CORRUPTION_KINDS for s in range(1, 6)]


def _pixelate(x: np.ndarray, frac: float) -> np.ndarray:
    h, w = x.shape[-2:]
    rh, rw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    bi = np.arange(h) * rh // h
    bj = np.arange(w) * rw // w
    sums = np.zeros(x.shape[:-2] + (rh, rw))
    np.add.at(sums, (..., bi[:, None], bj[None, :]), x)
    counts = np.zeros((rh, rw))
    np.add.at(counts, (bi[:, None], bj[None, :]), 1.0)
    return (sums / counts)[..., bi[:, None], bj[None, :]]


def corrupt(x: np.ndarray, c: Corruption, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Apply one corruption to an image [C, H, W] in [0, 1]; result is clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    p = c.param
    if c.kind == "gaussian_noise":
        if p == 0:
            return x.copy()
        out = x + rng.normal(0.0, p, size=x.shape)
    elif c.kind == "box_blur":
        size = int(p)
        out = ndimage.uniform_filter(x, size=(1, size, size), mode="nearest") if size > 1 else x.copy()
    elif c.kind == "pixelate":
        out = _pixelate(x, p)
    elif c.kind == "occlusion":
        h, w = x.shape[-2:]
        sh, sw = max(1, int(round(p * h))), max(1, int(round(p * w)))
        top = rng.integers(0, h - sh + 1)
        left = rng.integers(0, w - sw + 1)
        out = x.copy()
        out[:, top:top + sh, left:left + sw] = rng.uniform(0.0, 1.0, size=(x.shape[0], 1, 1))
    else:  # saturation_shift
        gray = np.tensordot(LUMA, x, axes=(0, 0))[None]
        out = gray + p * (x - gray)
    return np.clip(out, 0.0, 1.0)


def corrupt_dataset(ds: Dataset, c: Corruption, seed: int) -> Dataset:
    """Corrupt every test image; sample i draws from the substream (seed, kind, severity, i)."""
    out = np.empty_like(ds.images)
    for i, img in enumerate(ds.images):
        rng = substream(seed, "corrupt", c.kind, c.severity, i) if c.kind in STOCHASTIC else None
        out[i] = corrupt(img, c, rng)
    prov = {"clean": ds.digest, "corruption": c.to_dict(), "seed": int(seed)}
    return Dataset(out, ds.labels, ds.num_classes, f"{ds.split}-{c.name}", prov)


class CorruptedCache:
    """Corrupted test sets generated once per (test set, seed) and stored as containers."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._mem = {}

    def get(self, ds: Dataset, c: Corruption, seed: int) -> Dataset:
        key = (ds.digest, c, int(seed))
        if key in self._mem:
            return self._mem[key]
        path = None
        if self.root is not None:
            path = self.root / f"{ds.digest[:16]}_seed{seed}" / f"{c.name}.gds"
            if path.exists():
                got = read_container(path)
                self._mem[key] = got
                return got
        got = corrupt_dataset(ds, c, seed)
        if path is not None:
            write_container(got, path)
        self._mem[key] = got
        return got


@dataclass
class RobustReport:
    a_cln: float
    a_rob: float
    cells: dict = field(default_factory=dict)  # corruption name -> accuracy (%)

    def to_dict(self) -> dict:
        return {"a_cln": self.a_cln, "a_rob": self.a_rob, "cells": self.cells}


def accuracy(net, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("empty test set")
    return 100.0 * float(np.mean(net.predict(ds.images) == ds.labels))


def robust_accuracy(net, test: Dataset, suite: Sequence[Corruption], seed: int = 0,
                    cache: Optional[CorruptedCache] = None) -> RobustReport:
    """A_rob is the unweighted mean accuracy over all (kind, severity) cells."""
    if not suite:
        raise ValueError("corruption suite is empty")
    if len(test) == 0:
        raise ValueError("empty test set")
    cache = cache or CorruptedCache()
    cells = {c.name: accuracy(net, cache.get(test, c, seed)) for c in suite}
    return RobustReport(a_cln=accuracy(net, test), a_rob=float(np.mean(list(cells.values()))), cells=cells)


def suite_to_json(suite: Sequence[Corruption]) -> str:
    return json.dumps([c.to_dict() for c in suite])
