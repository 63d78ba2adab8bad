"""Dense float64 tensors with a reverse-mode gradient tape.

Only the operations a small plain-convolutional classifier needs are here:
elementwise arithmetic, matmul, reshaping, concatenation, indexing,
convolution, 2x2 pooling, activations and the fused classification losses.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes disagree; ``axis`` names the offending dimension."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op, self.axis, self.expected, self.got = op, axis, expected, got
        super().__init__(f"{op}: axis {axis!r} expected {expected}, got {got}")


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out._op = op
        out._consumed = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def bw(g):
                return (_unbroadcast(g / b.data, a.shape),
                        _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

            return Tensor._make(a.data / b.data, (a, b), bw, "div")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros(a.shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.array(a.data[idx], dtype=DTYPE), (a,), bw, "index")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- tape --------------------------------------------------------------------
class Tape:
    """Operations reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across separate graphs; a graph can only be
    traversed once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every trainable leaf")
    if loss._consumed:
        raise GraphError("graph already traversed; rebuild the forward pass before calling backward again")
    tape = Tape.trace(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node._consumed:
            raise GraphError("part of this graph was already traversed by another backward call")
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None
        node._parents = ()


# -- structural ops ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", "ndim", 2, (a.ndim, b.ndim))
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", "inner", a.shape[1], b.shape[0])

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(_lift, tensors)], axis)


# -- network ops -------------------------------------------------------------
def _im2col(x_nhwc: np.ndarray, k: int, pad: int, stride: int) -> tuple:
    """[N, H, W, C] -> ([N*Ho*Wo, K*K*C] patch matrix, Ho, Wo); column order (i, j, c)."""
    n, h, w, c = x_nhwc.shape
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=DTYPE)
        xp[:, pad:pad + h, pad:pad + w, :] = x_nhwc
    else:
        xp = x_nhwc
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k * k, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


# patch matrices above this many bytes are recomputed in backward instead of kept
_KEEP_COLS_BYTES = 64 * 2 ** 20


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """2-D cross-correlation, NCHW input and FCKK weight."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4:
        raise ShapeError("conv2d", "input.ndim", 4, x.ndim)
    if weight.ndim != 4:
        raise ShapeError("conv2d", "weight.ndim", 4, weight.ndim)
    n, c, h, w = x.shape
    f, wc, k, k2 = weight.shape
    if wc != c:
        raise ShapeError("conv2d", "C", c, wc)
    if k != k2:
        raise ShapeError("conv2d", "K", k, k2)
    if k % 2 == 0:
        raise ShapeError("conv2d", "K", "odd", k)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (f,):
            raise ShapeError("conv2d", "F", (f,), bias.shape)
    if pad is None:
        pad = (k - 1) // 2
    if (h + 2 * pad - k) // stride + 1 < 1 or (w + 2 * pad - k) // stride + 1 < 1:
        raise ShapeError("conv2d", "H/W", f">= {k - 2 * pad}", (h, w))

    x_nhwc = x.data.transpose(0, 2, 3, 1)
    cols, ho, wo = _im2col(x_nhwc, k, pad, stride)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    if not weight.requires_grad or cols.nbytes > _KEEP_COLS_BYTES:
        cols = None

    def bw(g):
        g_nhwc = g.transpose(0, 2, 3, 1)
        gm = g_nhwc.reshape(n * ho * wo, f)
        gx = gw = gb = None
        if weight.requires_grad:
            pc = cols if cols is not None else _im2col(x_nhwc, k, pad, stride)[0]
            gw = np.ascontiguousarray((gm.T @ pc).reshape(f, k, k, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            if stride == 1:
                # full correlation of the output gradient with the flipped kernel
                gcols, _, _ = _im2col(g_nhwc, k, k - 1 - pad, 1)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * f)
                gx = np.ascontiguousarray((gcols @ wflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                gcols = (gm @ wmat).reshape(n, ho, wo, k, k, c)
                gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
                gx = np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "conv2d")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 2:
        raise ShapeError("dense", "input.ndim", 2, x.ndim)
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError("dense", "D", x.shape[1], weight.shape[0] if weight.ndim == 2 else weight.shape)
    out = matmul(x, weight)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("dense", "C", (weight.shape[1],), bias.shape)
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return Tensor._make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "swish")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {"relu": relu, "swish": swish}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def pool2x2(x: Tensor, kind: str = "max") -> Tensor:
    """Non-overlapping 2x2 pooling. Max ties route the gradient to the first
    element in row-major window order."""
    if x.ndim != 4:
        raise ShapeError("pool2x2", "input.ndim", 4, x.ndim)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("pool2x2", "H/W", "even", (h, w))
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    if kind == "avg":
        out = win.mean(axis=-1)

        def bw(g):
            gw = np.repeat(g[..., None] * 0.25, 4, axis=-1)
            return (_unwindow(gw, n, c, h, w),)
    elif kind == "max":
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gw = np.zeros(win.shape, dtype=DTYPE)
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            return (_unwindow(gw, n, c, h, w),)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return Tensor._make(np.ascontiguousarray(out), (x,), bw, f"{kind}pool")


def _unwindow(gw: np.ndarray, n, c, h, w) -> np.ndarray:
    return gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", "N", (n,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}); got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy", "logits.ndim", 2, logits.ndim)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=DTYPE), (logits,), bw, "xent")


def jsd_logits(logits: Tensor) -> Tensor:
    """Batch-mean Jensen-Shannon divergence across views.

    ``logits`` has shape [J, N, C]; view j of sample i gives p_j = softmax.
    Value is H(mean_j p_j) - mean_j H(p_j) in nats.
    """
    if logits.ndim != 3:
        raise ShapeError("jsd_logits", "logits.ndim", 3, logits.ndim)
    j, n, _ = logits.shape
    logp = log_softmax_np(logits.data, axis=-1)
    p = np.exp(logp)
    # log of the mixture, computed in log space so it stays finite
    mx = logp.max(axis=0)
    logm = mx + np.log(np.exp(logp - mx).sum(axis=0)) - np.log(j)
    m = np.exp(logm)
    h_mix = -(m * logm).sum(axis=-1)
    h_each = -(p * logp).sum(axis=-1)
    value = (h_mix - h_each.mean(axis=0)).mean()

    def bw(g):
        gp = (logp - logm[None]) * (g / (j * n))
        return (p * (gp - (gp * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(np.asarray(value, dtype=DTYPE), (logits,), bw, "jsd")


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
