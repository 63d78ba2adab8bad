"""Efficient Robust Augmentation: stochastic transform chains mixed with the
clean image, J-view tuples, and the Jensen-Shannon consistency loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .corrupt import CORRUPTION_KINDS, LUMA
from .rng import substream
from .tensor import Tensor, jsd_logits, softmax_cross_entropy

DEFAULT_LAMBDA = 12.0


# -- unit transforms -----------------------------------------------------------
def _affine(img: np.ndarray, mat2: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    # output pixel o maps to input mat2 @ (o - centre) + centre - shift
    h, w = img.shape[-2:]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    mat = np.eye(3)
    mat[1:, 1:] = mat2
    offset = np.zeros(3)
    offset[1:] = centre - mat2 @ centre - np.asarray(shift)
    return ndimage.affine_transform(img, mat, offset=offset, order=1, mode="nearest")


def _rotate(img, deg):
    t = np.deg2rad(deg)
    return _affine(img, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))


def _translate(img, dy, dx):
    return _affine(img, np.eye(2), (dy, dx))


def _shear(img, s, axis):
    m = np.eye(2)
    m[axis, 1 - axis] = s
    return _affine(img, m)


def _posterize(img, bits):
    step = 2 ** (8 - int(bits))
    q = np.floor(np.round(img * 255.0) / step) * step
    return q / 255.0


def _solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def _contrast(img, factor):
    mean = np.tensordot(LUMA, img, axes=(0, 0)).mean()
    return mean + factor * (img - mean)


def _sign(rng):
    return 1.0 if rng.uniform() < 0.5 else -1.0


@dataclass(frozen=True)
class Transform:
    """A deterministic image map ``apply(img, **params)`` plus a parameter sampler.

    ``sample(rng, severity)`` draws parameters whose magnitude scales with
    ``severity`` in (0, 1]; 1 reaches the full stated range.
    """
    name: str
    sample: Callable
    apply: Callable

    def __call__(self, img, params):
        return np.clip(self.apply(img, **params), 0.0, 1.0)


BUILTIN_TRANSFORMS = (
    Transform("rotate", lambda r, s: {"deg": _sign(r) * r.uniform(0, 15.0 * s)}, _rotate),
    Transform("translate", lambda r, s: {"dy": float(r.integers(-3, 4)) * s, "dx": float(r.integers(-3, 4)) * s},
              _translate),
    Transform("shear", lambda r, s: {"s": _sign(r) * r.uniform(0, 0.2 * s), "axis": int(r.integers(2))}, _shear),
    Transform("hflip", lambda r, s: {}, lambda img: img[:, :, ::-1].copy()),
    Transform("posterize", lambda r, s: {"bits": int(r.integers(4, 7))}, _posterize),
    Transform("solarize", lambda r, s: {"threshold": 1.0 - r.uniform(0, 0.5 * s)}, _solarize),
    Transform("brightness", lambda r, s: {"delta": _sign(r) * r.uniform(0, 0.2 * s)}, lambda img, delta: img + delta),
    Transform("contrast", lambda r, s: {"factor": 1.0 + _sign(r) * r.uniform(0, 0.2 * s)}, _contrast),
)

IDENTITY = Transform("identity", lambda r, s: {}, lambda img: img.copy())


class TransformSet:
    """Named transforms; construction fails if any name collides with a corruption kind."""

    def __init__(self, transforms: Sequence[Transform] = BUILTIN_TRANSFORMS, severity: float = 1.0,
                 forbidden: Sequence[str] = CORRUPTION_KINDS):
        names = [t.name for t in transforms]
        clash = sorted(set(names) & set(forbidden))
        if clash:
            raise ValueError(f"transforms overlap the corruption suite: {clash}")
        if len(set(names)) != len(names):
            raise ValueError("duplicate transform names")
        if not 0 < severity <= 1:
            raise ValueError("severity must lie in (0, 1]")
        self.transforms = tuple(transforms)
        self.severity = severity

    def __len__(self):
        return len(self.transforms)

    @property
    def names(self) -> list:
        return [t.name for t in self.transforms]

    def to_dict(self) -> dict:
        return {"transforms": self.names, "severity": self.severity}


@dataclass(frozen=True)
class ChainParams:
    """(W, D, J): chains mixed per view, maximum chain depth, views per sample.

    J counts the clean view. J = 0 is the cross-entropy-only variant: the
    sample is replaced by one augmented view and no clean view is kept.
    """
    width: int = 1
    depth: int = 3
    views: int = 4

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.views < 0:
            raise ValueError(f"need W >= 1, D >= 1, J >= 0; got {(self.width, self.depth, self.views)}")

    @property
    def n_views(self) -> int:
        return max(self.views, 1)

    @property
    def keeps_clean(self) -> bool:
        return self.views >= 1

    def as_tuple(self) -> tuple:
        return (self.width, self.depth, self.views)


@dataclass
class Chain:
    ops: list = field(default_factory=list)  # [(Transform, params)], applied last-to-first

    @property
    def depth(self) -> int:
        return len(self.ops)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        out = img
        for t, params in reversed(self.ops):
            out = t(out, params)
        return out


def sample_chain(rng: np.random.Generator, tset: TransformSet, max_depth: int) -> Chain:
    """Depth uniform on {1..D}; each op uniform over the set, with replacement."""
    if len(tset) == 0:
        raise ValueError("transform set is empty")
    if max_depth < 1:
        raise ValueError("max depth must be >= 1")
    d = int(rng.integers(1, max_depth + 1))
    ops = []
    for _ in range(d):
        t = tset.transforms[int(rng.integers(len(tset)))]
        ops.append((t, t.sample(rng, tset.severity)))
    return Chain(ops)


@dataclass
class AugmentedTuple:
    views: np.ndarray  # [J, C, H, W]; views[0] is the clean sample when J >= 1
    label: int
    mix: list = field(default_factory=list)  # the clean-mixing weight drawn for each augmented view


def augment_view(x: np.ndarray, rng: np.random.Generator, params: ChainParams, tset: TransformSet,
                 p: Optional[float] = None) -> tuple:
    """p * x + (1 - p) * (Dirichlet-weighted sum of W chains), p ~ Beta(1, 1)."""
    if params.width == 1:
        mixed = sample_chain(rng, tset, params.depth)(x)
    else:
        weights = rng.dirichlet(np.ones(params.width))
        mixed = np.zeros_like(x)
        for wgt in weights:
            mixed = mixed + wgt * sample_chain(rng, tset, params.depth)(x)
    if p is None:
        p = float(rng.beta(1.0, 1.0))
    return p * x + (1.0 - p) * mixed, p


def expand(x: np.ndarray, y: int, rng: np.random.Generator, params: ChainParams,
           tset: TransformSet, p: Optional[float] = None) -> AugmentedTuple:
    """Clean view first, then J-1 independently drawn augmented views.

    ``p`` forces the clean-mixing weight (testing hook).
    """
    x64 = np.asarray(x, dtype=np.float64)
    views, mixes = ([x64], []) if params.keeps_clean else ([], [])
    for _ in range(params.n_views - len(views)):
        v, pv = augment_view(x64, rng, params, tset, p)
        views.append(v)
        mixes.append(pv)
    return AugmentedTuple(np.stack(views), int(y), mixes)


def expand_batch(images: np.ndarray, labels: np.ndarray, indices: Sequence[int], seed: int, epoch: int,
                 params: ChainParams, tset: TransformSet) -> np.ndarray:
    """[J, N, C, H, W] views; sample i uses the substream (seed, "era", epoch, index_i)."""
    out = np.empty((params.n_views,) + images.shape, dtype=np.float64)
    for n, (img, y, idx) in enumerate(zip(images, labels, indices)):
        out[:, n] = expand(img, y, substream(seed, "era", epoch, int(idx)), params, tset).views
    return out


# -- losses --------------------------------------------------------------------
def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def jsd(*dists) -> float:
    """H(mean_j p_j) - mean_j H(p_j), natural log, for probability vectors p_1..p_J."""
    ps = np.asarray(dists[0] if len(dists) == 1 and np.ndim(dists[0]) == 2 else dists, dtype=np.float64)
    if ps.ndim != 2:
        raise ValueError("expected J probability vectors of equal length")
    if np.any(ps < 0) or np.any(np.abs(ps.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("each distribution must be nonnegative and sum to 1")
    return float(entropy(ps.mean(axis=0)) - entropy(ps).mean())


def aug_loss(logits: Tensor, labels, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Cross-entropy on the clean view (index 0) plus lam * JSD over all views.

    ``logits`` is [J, N, C] or [J*N, C] with views stacked view-major.
    """
    labels = np.asarray(labels)
    if logits.ndim == 2:
        logits = logits.reshape(-1, len(labels), logits.shape[-1])
    ce = softmax_cross_entropy(logits[0], labels)
    if lam == 0 or logits.shape[0] < 2:
        return ce
    return ce + jsd_logits(logits) * lam
