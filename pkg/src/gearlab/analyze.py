"""Diagnostics: per-layer width statistics over seeds, Fourier spectra of image
deltas, and 1-D filter-normalized loss slices."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corrupt import LUMA
from .data import Dataset
from .nn import Network
from .rng import substream
from .tensor import Tensor, softmax_cross_entropy


# -- topology ------------------------------------------------------------------
@dataclass
class TopologyReport:
    mean: np.ndarray
    std: np.ndarray  # population std (ddof=0) across runs
    n_runs: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "mean_width", "std_width", "n_runs"])
        for l, (m, s) in enumerate(zip(self.mean, self.std), start=1):
            w.writerow([l, repr(float(m)), repr(float(s)), self.n_runs])
        return buf.getvalue()

    def to_svg(self, bar: int = 36, height: int = 220) -> str:
        top = float(np.max(self.mean + self.std)) or 1.0
        pad, gap = 30, 10
        width = pad * 2 + len(self.mean) * (bar + gap)
        scale = (height - 2 * pad) / top
        base = height - pad
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
                 f'<line x1="{pad}" y1="{base}" x2="{width - pad}" y2="{base}" stroke="black"/>']
        for i, (m, s) in enumerate(zip(self.mean, self.std)):
            x = pad + i * (bar + gap) + gap / 2
            h = m * scale
            cx = x + bar / 2
            parts.append(f'<rect x="{x:.1f}" y="{base - h:.1f}" width="{bar}" height="{h:.1f}" fill="#4878a8"/>')
            parts.append(f'<line x1="{cx:.1f}" y1="{base - (m + s) * scale:.1f}" x2="{cx:.1f}" '
                         f'y2="{base - (m - s) * scale:.1f}" stroke="black"/>')
            parts.append(f'<text x="{cx:.1f}" y="{base + 14}" font-size="10" text-anchor="middle">{i + 1}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _widths_of(rec) -> list:
    if isinstance(rec, dict):
        return list(rec["widths"])
    if hasattr(rec, "topology") and isinstance(rec.topology, dict) and "widths" in rec.topology:
        return list(rec.topology["widths"])
    if hasattr(rec, "widths"):
        return list(rec.widths)
    return list(rec)


def topology_report(records: Sequence) -> TopologyReport:
    """Mean and std of w_l per layer index across runs (RunRecords, Topologies or width lists)."""
    if not records:
        raise ValueError("no records given")
    widths = [_widths_of(r) for r in records]
    depths = {len(w) for w in widths}
    if len(depths) != 1:
        raise ValueError(f"records disagree on depth: {sorted(depths)}")
    arr = np.asarray(widths, dtype=np.float64)
    return TopologyReport(arr.mean(axis=0), arr.std(axis=0), len(widths))


# -- Fourier -------------------------------------------------------------------
@dataclass
class SpectrumProfile:
    magnitude: np.ndarray  # mean |DFT| of the luminance delta, DC at the centre
    power: np.ndarray      # mean |DFT|^2 / (H W), DC at the centre; sums to the spatial energy
    radial: np.ndarray     # power summed over integer-radius annuli
    low_freq_fraction: float
    spatial_energy: float  # mean over samples of sum(delta^2)

    @property
    def spectral_energy(self) -> float:
        return float(self.power.sum())

    def parseval_error(self) -> float:
        if self.spatial_energy == 0:
            return abs(self.spectral_energy)
        return abs(self.spectral_energy - self.spatial_energy) / self.spatial_energy

    def radial_csv(self) -> str:
        lines = ["radius,energy"] + [f"{r},{float(e)!r}" for r, e in enumerate(self.radial)]
        return "\n".join(lines) + "\n"

    def save(self, stem) -> None:
        """Writes <stem>.npy (magnitude grid), <stem>.pgm (log-scaled view) and <stem>_radial.csv."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        np.save(stem.with_suffix(".npy"), self.magnitude)
        write_pgm(stem.with_suffix(".pgm"), np.log1p(self.magnitude))
        stem.with_name(stem.name + "_radial.csv").write_text(self.radial_csv())


def write_pgm(path, grid: np.ndarray) -> None:
    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    img = np.zeros(g.shape, dtype=np.uint8) if span == 0 else np.round(255 * (g - g.min()) / span).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode() + img.tobytes())


def _luminance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return np.tensordot(x, LUMA, axes=(1, 0))
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=(0, 0))[None]
    if x.ndim == 3:
        return x  # already [N, H, W] luminance
    if x.ndim == 2:
        return x[None]
    raise ValueError(f"cannot interpret image array of shape {x.shape}")


def radius_grid(n: int) -> np.ndarray:
    """Distance of each DC-centred frequency bin from the origin, in cycles per image."""
    k = np.fft.fftshift(np.fft.fftfreq(n, d=1.0 / n))
    return np.hypot(k[:, None], k[None, :])


def delta_spectrum(clean, modified) -> SpectrumProfile:
    """Spectrum of the luminance difference modified - clean, averaged over samples.

    The low-frequency fraction counts bins with radius <= N/4.
    """
    clean, modified = np.asarray(clean), np.asarray(modified)
    if clean.shape != modified.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs modified {modified.shape}")
    d = _luminance(modified) - _luminance(clean)
    n, h, w = d.shape
    if h != w or h & (h - 1):
        raise ValueError(f"spectra need square power-of-two images, got {h}x{w}")
    f = np.fft.fftshift(np.fft.fft2(d), axes=(-2, -1))
    mag = np.abs(f)
    power = (mag ** 2).mean(axis=0) / (h * w)
    r = radius_grid(h)
    bins = np.rint(r).astype(int)
    radial = np.bincount(bins.ravel(), weights=power.ravel())
    total = power.sum()
    low = float(power[r <= h / 4].sum() / total) if total > 0 else 0.0
    return SpectrumProfile(mag.mean(axis=0), power, radial, low, float((d ** 2).sum(axis=(1, 2)).mean()))


# -- loss slices ---------------------------------------------------------------
@dataclass
class LossSlice:
    alphas: np.ndarray
    losses: np.ndarray

    def to_csv(self) -> str:
        lines = ["alpha,loss"] + [f"{float(a)!r},{float(l)!r}" for a, l in zip(self.alphas, self.losses)]
        return "\n".join(lines) + "\n"


def filter_normalized_direction(net: Network, rng: np.random.Generator) -> list:
    """Gaussian direction with every filter rescaled to the norm of the matching filter.

    Conv filters are output channels; head filters are output-class columns.
    Bias directions are zero.
    """
    out = []
    for name, w in net.named_arrays():
        if name.endswith(".bias"):
            out.append(np.zeros_like(w))
            continue
        d = rng.normal(size=w.shape)
        # conv [F, C, K, K] filters along axis 0; head [D, C] filters along axis 1
        axis = 0 if w.ndim == 4 else 1
        red = tuple(i for i in range(w.ndim) if i != axis)
        wn = np.sqrt((w ** 2).sum(axis=red, keepdims=True))
        dn = np.sqrt((d ** 2).sum(axis=red, keepdims=True))
        out.append(np.where(dn > 0, d * wn / np.where(dn > 0, dn, 1.0), 0.0))
    return out


def dataset_loss(net: Network, data: Dataset, loss_fn: Callable = softmax_cross_entropy,
                 arrays: Optional[Sequence[np.ndarray]] = None, batch_size: int = 256) -> float:
    """Sample-weighted mean of ``loss_fn`` over ``data`` in fixed batches."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    params = [Tensor(a) for a in (net.arrays() if arrays is None else arrays)]
    total = 0.0
    for i in range(0, len(data), batch_size):
        x, y = data.images[i:i + batch_size], data.labels[i:i + batch_size]
        total += loss_fn(net.forward(x, params), y).item() * len(y)
    return total / len(data)


def loss_slice(net: Network, data: Dataset, loss_fn: Callable = softmax_cross_entropy, n_points: int = 21,
               alpha_range: tuple = (-1.0, 1.0), seed: int = 0) -> LossSlice:
    """Loss at theta + alpha * d along one filter-normalized random direction d."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    direction = filter_normalized_direction(net, substream(seed, "loss_slice"))
    base = net.arrays()
    alphas = np.linspace(alpha_range[0], alpha_range[1], n_points)
    losses = []
    for a in alphas:
        arrays = base if a == 0 else [w + a * d for w, d in zip(base, direction)]
        losses.append(dataset_loss(net, data, loss_fn, arrays))
    return LossSlice(alphas, np.asarray(losses))
