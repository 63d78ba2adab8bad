"""Growable VGG-style plain CNN: conv-act blocks, 2x2 pooling, one dense head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, Tensor, activation, conv2d, dense, pool2x2

REFERENCE_WIDTHS = (128, 128, 256, 256, 512, 512)


class TopologyError(ValueError):
    pass


@dataclass
class Topology:
    widths: list
    kernel: int = 3
    pool_after: Optional[list] = None  # 1-indexed layers followed by a 2x2 pool
    num_classes: int = 3
    input_shape: tuple = (3, 16, 16)
    activation: str = "relu"
    pool_kind: str = "max"
    input_shift: float = 0.5  # subtracted from pixels before the first conv (no normalization layers)

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.pool_after is None:
            self.pool_after = [l for l in range(2, len(self.widths) + 1, 2)]
        self.pool_after = sorted(int(l) for l in self.pool_after)

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.depth < 2:
            raise TopologyError(f"need at least 2 conv layers, got {self.depth}")
        if any(w < 1 for w in self.widths):
            raise TopologyError(f"widths must be >= 1, got {self.widths}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise TopologyError(f"kernel must be odd, got {self.kernel}")
        if self.num_classes < 2:
            raise TopologyError("need at least 2 classes")
        if any(l < 1 or l > self.depth for l in self.pool_after):
            raise TopologyError(f"pool_after entries must lie in [1, {self.depth}]")
        if self.activation not in ("relu", "swish"):
            raise TopologyError(f"unknown activation {self.activation!r}")
        h, w = self.input_shape[1:]
        for _ in self.pool_after:
            if h % 2 or w % 2:
                raise TopologyError(f"spatial extent {h}x{w} cannot be pooled further")
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise TopologyError("spatial extent collapses below 1 before the head")

    @property
    def final_spatial(self) -> tuple:
        h, w = self.input_shape[1:]
        shrink = 2 ** len(self.pool_after)
        return h // shrink, w // shrink

    @property
    def head_inputs(self) -> int:
        h, w = self.final_spatial
        return self.widths[-1] * h * w

    def complexity(self) -> int:
        return int(sum(self.widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(**d)

    def with_widths(self, widths) -> "Topology":
        d = self.to_dict()
        d["widths"] = list(widths)
        return Topology.from_dict(d)


def reference_topology(like: Topology) -> Topology:
    """The desk-scale 'full model' used as the Size(%) denominator."""
    return Topology(widths=list(REFERENCE_WIDTHS), kernel=like.kernel, pool_after=[2, 4, 6],
                    num_classes=like.num_classes, input_shape=like.input_shape,
                    activation=like.activation, pool_kind=like.pool_kind, input_shift=like.input_shift)


def param_count(topo: Topology) -> int:
    k2 = topo.kernel ** 2
    c_in = topo.input_shape[0]
    total = 0
    for w in topo.widths:
        total += w * c_in * k2 + w
        c_in = w
    return total + topo.head_inputs * topo.num_classes + topo.num_classes


def flop_estimate(topo: Topology) -> int:
    """Per-sample forward FLOPs: 2 x multiply-accumulates of conv and dense layers."""
    k2 = topo.kernel ** 2
    c_in = topo.input_shape[0]
    h, w = topo.input_shape[1:]
    macs = 0
    for l, width in enumerate(topo.widths, start=1):
        macs += c_in * width * k2 * h * w
        c_in = width
        if l in topo.pool_after:
            h, w = h // 2, w // 2
    macs += topo.head_inputs * topo.num_classes
    return 2 * macs


@dataclass
class NeuronInit:
    """One channel added by :func:`widen`.

    ``incoming`` is [C_in, K, K]; ``outgoing`` is the slice the next layer
    reads from the new channel: [F_next, K, K] for a conv successor, or
    [S, num_classes] (S = final spatial positions) when the head follows.
    """
    incoming: np.ndarray
    bias: float
    outgoing: np.ndarray


@dataclass
class ComplexityReport:
    width_sum: int
    params: int
    size_fraction: float  # parameter count relative to the reference model
    width_fraction: float


class Network:
    def __init__(self, topology: Topology, conv_w: list, conv_b: list,
                 head_w: np.ndarray, head_b: np.ndarray, seed: Optional[int] = None):
        self.topology = topology
        self.conv_w = conv_w
        self.conv_b = conv_b
        self.head_w = head_w
        self.head_b = head_b
        self.seed = seed
        self.check()

    def check(self) -> None:
        topo = self.topology
        c_in = topo.input_shape[0]
        k = topo.kernel
        for l, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            if w.shape != (topo.widths[l - 1], c_in, k, k) or b.shape != (topo.widths[l - 1],):
                raise TopologyError(f"layer {l}: parameter shapes {w.shape}/{b.shape} disagree with topology")
            c_in = w.shape[0]
        if self.head_w.shape != (topo.head_inputs, topo.num_classes):
            raise TopologyError(f"head shape {self.head_w.shape} != {(topo.head_inputs, topo.num_classes)}")

    # -- parameters ----------------------------------------------------------
    def named_arrays(self) -> list:
        out = []
        for l, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            out += [(f"conv{l}.weight", w), (f"conv{l}.bias", b)]
        return out + [("head.weight", self.head_w), ("head.bias", self.head_b)]

    def arrays(self) -> list:
        return [a for _, a in self.named_arrays()]

    def set_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        L = self.topology.depth
        self.conv_w = arrays[0:2 * L:2]
        self.conv_b = arrays[1:2 * L:2]
        self.head_w, self.head_b = arrays[2 * L], arrays[2 * L + 1]
        self.check()

    def clone(self) -> "Network":
        return Network(Topology.from_dict(self.topology.to_dict()),
                       [w.copy() for w in self.conv_w], [b.copy() for b in self.conv_b],
                       self.head_w.copy(), self.head_b.copy(), self.seed)

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    # -- forward ---------------------------------------------------------------
    def forward(self, x, params: Optional[Sequence[Tensor]] = None) -> Tensor:
        """Logits for a batch. ``params`` (as from :meth:`tensors`) makes the
        pass differentiable with respect to the parameters."""
        if params is None:
            params = [Tensor(a) for a in self.arrays()]
        L = self.topology.depth
        return run_layers(x, params[0:2 * L:2], params[1:2 * L:2],
                          params[2 * L], params[2 * L + 1], self.topology)

    def tensors(self) -> list:
        return [Tensor(a, requires_grad=True) for a in self.arrays()]

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        params = [Tensor(a) for a in self.arrays()]
        return np.concatenate([self.forward(x[i:i + batch_size], params).data
                               for i in range(0, len(x), batch_size)], axis=0)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)


def run_layers(x, conv_w, conv_b, head_w, head_b, topo: Topology) -> Tensor:
    h = x if isinstance(x, Tensor) else Tensor(x)
    if topo.input_shift:
        h = h - topo.input_shift
    for l, (w, b) in enumerate(zip(conv_w, conv_b), start=1):
        h = activation(conv2d(h, w, b, stride=1, pad=(topo.kernel - 1) // 2), topo.activation)
        if l in topo.pool_after:
            h = pool2x2(h, topo.pool_kind)
    h = h.reshape(h.shape[0], -1)
    return dense(h, head_w, head_b)


def build(topology: Topology, seed: int) -> Network:
    """He-initialized network; zero biases. Deterministic in ``seed``."""
    topology.validate()
    rng = np.random.default_rng(seed)
    k = topology.kernel
    c_in = topology.input_shape[0]
    conv_w, conv_b = [], []
    for width in topology.widths:
        conv_w.append(rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), size=(width, c_in, k, k)))
        conv_b.append(np.zeros(width, dtype=DTYPE))
        c_in = width
    d = topology.head_inputs
    head_w = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, topology.num_classes))
    head_b = np.zeros(topology.num_classes, dtype=DTYPE)
    return Network(topology, conv_w, conv_b, head_w, head_b, seed)


def complexity(net: Network) -> int:
    return net.topology.complexity()


def complexity_report(net: Network) -> ComplexityReport:
    ref = reference_topology(net.topology)
    params = net.num_params()
    return ComplexityReport(width_sum=complexity(net), params=params,
                            size_fraction=params / param_count(ref),
                            width_fraction=complexity(net) / sum(ref.widths))


def widen(net: Network, layer: int, additions: Sequence[NeuronInit]) -> Network:
    """Append output channels to conv ``layer`` (1-indexed).

    Existing parameters are copied untouched; the successor (next conv or the
    head) gains the new channels' outgoing slices at the end of its input axis.
    """
    topo = net.topology
    L, k = topo.depth, topo.kernel
    if not 1 <= layer <= L:
        raise TopologyError(f"layer {layer} outside [1, {L}]")
    if not additions:
        return net.clone()
    i = layer - 1
    c_in = net.conv_w[i].shape[1]
    s = topo.final_spatial[0] * topo.final_spatial[1]
    if layer < L:
        out_shape = (net.conv_w[i + 1].shape[0], k, k)
    else:
        out_shape = (s, topo.num_classes)
    for n, a in enumerate(additions):
        if np.shape(a.incoming) != (c_in, k, k):
            raise TopologyError(f"addition {n}: incoming shape {np.shape(a.incoming)} != {(c_in, k, k)}")
        if np.shape(a.outgoing) != out_shape:
            raise TopologyError(f"addition {n}: outgoing shape {np.shape(a.outgoing)} != {out_shape}")

    grown = net.clone()
    grown.conv_w[i] = np.concatenate([net.conv_w[i], np.stack([a.incoming for a in additions])], axis=0)
    grown.conv_b[i] = np.concatenate([net.conv_b[i], np.array([a.bias for a in additions], dtype=DTYPE)])
    if layer < L:
        extra = np.stack([a.outgoing for a in additions], axis=1)  # [F_next, n, K, K]
        grown.conv_w[i + 1] = np.concatenate([net.conv_w[i + 1], extra], axis=1)
    else:
        extra = np.concatenate([a.outgoing for a in additions], axis=0)  # channel-major rows
        grown.head_w = np.concatenate([net.head_w, extra], axis=0)
    widths = list(topo.widths)
    widths[i] += len(additions)
    grown.topology = topo.with_widths(widths)
    grown.check()
    return grown


# -- checkpoints ---------------------------------------------------------------
_CKPT_MAGIC = b"GLNN1\n"


def save_checkpoint(net: Network, path, counters: Optional[dict] = None) -> None:
    named = net.named_arrays()
    header = {
        "topology": net.topology.to_dict(),
        "seed": net.seed,
        "counters": counters or {},
        "blocks": [{"name": n, "shape": list(a.shape), "nbytes": a.size * 8} for n, a in named],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, a in named:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Returns (network, counters)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    header = json.loads(raw[off:off + hlen])
    off += hlen
    arrays = []
    for blk in header["blocks"]:
        n = blk["nbytes"]
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated block {blk['name']}")
        arrays.append(np.frombuffer(raw[off:off + n], dtype="<f8").astype(DTYPE).reshape(blk["shape"]))
        off += n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    topo = Topology.from_dict(header["topology"])
    L = topo.depth
    net = Network(topo, arrays[0:2 * L:2], arrays[1:2 * L:2], arrays[2 * L], arrays[2 * L + 1], header["seed"])
    return net, header["counters"]
