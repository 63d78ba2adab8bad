"""Budgeted width growth: split and new-neuron candidates, a frozen-base growth
epoch that trains candidate perturbations, greedy selection under the
complexity budget, and the one-shot / m-shot drivers."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .nn import NeuronInit, Network, Topology, complexity, flop_estimate, run_layers, widen
from .tensor import DTYPE, Tensor, backward, concat, stack


class GrowthBudgetWarning(UserWarning):
    pass


@dataclass
class GrowthConfig:
    gamma: float = 0.9
    epsilon: float = 0.01
    new_per_layer: int = 70
    growth_epochs: int = 1
    lr: float = 9e-5
    momentum: float = 0.9
    alpha: float = 0.1
    rms_eps: float = 1e-8
    batch_size: int = 128

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.epsilon <= 0.1:
            raise ValueError("epsilon must lie in (0, 0.1]")
        if self.new_per_layer < 0 or self.growth_epochs < 0:
            raise ValueError("new_per_layer and growth_epochs must be >= 0")


@dataclass
class GrowthCandidate:
    """A split of ``channel`` or a new neuron at conv ``layer`` (1-indexed).

    For splits ``delta`` is the incoming perturbation [C_in, K, K]: the parent
    becomes w - delta, the copy w + delta, and both keep half the outgoing
    weights. For new neurons ``incoming`` is fixed and ``delta`` is the
    outgoing slice. Either way delta = 0 commits without changing the function.
    """
    kind: str
    layer: int
    cid: int
    delta: np.ndarray
    channel: int = -1
    incoming: Optional[np.ndarray] = None
    score: float = 0.0

    @property
    def rank_key(self) -> tuple:
        return (-self.score, self.layer, self.cid)


def budget(c1: int, gamma: float) -> int:
    # rounding guard so 1.9 * 270 lands on 513, not 512
    return int(math.floor(round((1.0 + gamma) * c1, 9)))


def _outgoing_shape(topo: Topology, layer: int, next_width: Optional[int] = None) -> tuple:
    if layer < topo.depth:
        return (next_width if next_width is not None else topo.widths[layer], topo.kernel, topo.kernel)
    h, w = topo.final_spatial
    return (h * w, topo.num_classes)


def propose(net: Network, cfg: GrowthConfig, rng: np.random.Generator) -> list:
    """One split per existing channel plus ``cfg.new_per_layer`` new neurons per layer.

    Deltas start uniform in (-eps, eps); new neurons get He-scaled incoming weights.
    """
    topo = net.topology
    k = topo.kernel
    eps = cfg.epsilon
    cands, cid = [], 0
    for l in range(1, topo.depth + 1):
        c_in = net.conv_w[l - 1].shape[1]
        for c in range(topo.widths[l - 1]):
            cands.append(GrowthCandidate("split", l, cid, rng.uniform(-eps, eps, size=(c_in, k, k)), channel=c))
            cid += 1
        out_shape = _outgoing_shape(topo, l)
        std = np.sqrt(2.0 / (c_in * k * k))
        for _ in range(cfg.new_per_layer):
            cands.append(GrowthCandidate("new", l, cid, rng.uniform(-eps, eps, size=out_shape),
                                         incoming=rng.normal(0.0, std, size=(c_in, k, k))))
            cid += 1
    return cands


def _by_layer(cands: Sequence[GrowthCandidate], depth: int) -> list:
    per = [([], []) for _ in range(depth)]
    for i, c in enumerate(cands):
        per[c.layer - 1][0 if c.kind == "split" else 1].append(i)
    for splits, news in per:
        splits.sort(key=lambda i: cands[i].channel)
        news.sort(key=lambda i: cands[i].cid)
    return per


def expanded_topology(net: Network, cands: Sequence[GrowthCandidate]) -> Topology:
    widths = list(net.topology.widths)
    for c in cands:
        widths[c.layer - 1] += 1
    return net.topology.with_widths(widths)


def assemble(net: Network, cands: Sequence[GrowthCandidate], deltas: Sequence[Tensor]) -> list:
    """Parameters of ``net`` with every candidate committed, as tape tensors that
    depend on ``deltas`` (aligned with ``cands``). Channel order per layer:
    existing, split copies (by parent), new neurons (by id)."""
    topo = net.topology
    L, k = topo.depth, topo.kernel
    per = _by_layer(cands, L)
    conv_w, conv_b = [], []
    prev_split, prev_new = [], []
    for i in range(L):
        w = net.conv_w[i]
        f, c = w.shape[:2]
        # input side: halve split parents, append split copies and new-neuron outgoing slices
        if prev_split or prev_new:
            scale = np.ones(c)
            scale[prev_split] = 0.5
            w_const = np.concatenate([w * scale[None, :, None, None], 0.5 * w[:, prev_split]], axis=1)
            w_in = concat([Tensor(w_const)] + ([stack(prev_new, axis=1)] if prev_new else []), axis=1)
        else:
            w_in = Tensor(w)
        c_full = w_in.shape[1]
        splits, news = per[i]
        parents = [cands[j].channel for j in splits]
        rows = []
        if parents:
            pad = np.zeros((c_full - c, k, k))
            dpad = stack([concat([deltas[j], Tensor(pad)], axis=0) if c_full > c else deltas[j] for j in splits])
            onehot = np.zeros((f, len(parents)))
            onehot[parents, np.arange(len(parents))] = 1.0
            shift = (Tensor(onehot) @ dpad.reshape(len(parents), -1)).reshape(f, c_full, k, k)
            rows += [w_in - shift, w_in[parents] + dpad]
        else:
            rows.append(w_in)
        if news:
            inc = np.zeros((len(news), c_full, k, k))
            inc[:, :c] = np.stack([cands[j].incoming for j in news])
            rows.append(Tensor(inc))
        conv_w.append(concat(rows, axis=0) if len(rows) > 1 else rows[0])
        b = net.conv_b[i]
        conv_b.append(Tensor(np.concatenate([b, b[parents], np.zeros(len(news))])))
        prev_split, prev_new = parents, [deltas[j] for j in news]

    # head rows are channel-major: [channel, spatial position] -> classes
    s = topo.final_spatial[0] * topo.final_spatial[1]
    hw = net.head_w.reshape(topo.widths[-1], s, topo.num_classes)
    if prev_split or prev_new:
        scale = np.ones(hw.shape[0])
        scale[prev_split] = 0.5
        h_const = np.concatenate([hw * scale[:, None, None], 0.5 * hw[prev_split]], axis=0)
        head = concat([Tensor(h_const)] + ([stack(prev_new)] if prev_new else []), axis=0)
        head = head.reshape(-1, topo.num_classes)
    else:
        head = Tensor(net.head_w)
    return conv_w, conv_b, head, Tensor(net.head_b)


def commit(net: Network, cands: Sequence[GrowthCandidate]) -> Network:
    """Apply the chosen candidates with their current deltas, layer by layer via widen."""
    topo = net.topology
    L = topo.depth
    per = _by_layer(cands, L)
    grown = net.clone()
    s = topo.final_spatial[0] * topo.final_spatial[1]
    for i in range(L):
        splits, news = per[i]
        if not splits and not news:
            continue
        w = grown.conv_w[i]
        c_full = w.shape[1]
        additions = []
        for j in splits:
            cand = cands[j]
            p = cand.channel
            dpad = np.zeros((c_full,) + w.shape[2:])
            dpad[:cand.delta.shape[0]] = cand.delta
            orig = w[p].copy()
            w[p] = orig - dpad
            if i + 1 < L:
                grown.conv_w[i + 1][:, p] *= 0.5
                out = grown.conv_w[i + 1][:, p].copy()
            else:
                grown.head_w[p * s:(p + 1) * s] *= 0.5
                out = grown.head_w[p * s:(p + 1) * s].copy()
            additions.append(NeuronInit(orig + dpad, float(grown.conv_b[i][p]), out))
        for j in news:
            cand = cands[j]
            inc = np.zeros((c_full,) + w.shape[2:])
            inc[:cand.incoming.shape[0]] = cand.incoming
            additions.append(NeuronInit(inc, 0.0, cand.delta.copy()))
        grown = widen(grown, i + 1, additions)
    return grown


def _rmsprop(params: list, grads: list, state: list, cfg: GrowthConfig) -> None:
    for p, g, st in zip(params, grads, state):
        st["sq"] = cfg.alpha * st["sq"] + (1.0 - cfg.alpha) * g * g
        st["buf"] = cfg.momentum * st["buf"] + g / (np.sqrt(st["sq"]) + cfg.rms_eps)
        p -= cfg.lr * st["buf"]


@dataclass
class GrowthEpochStats:
    steps: int = 0
    samples: int = 0
    flops: int = 0


def growth_epoch(net: Network, cands: Sequence[GrowthCandidate], batches: Callable[[int], Iterable],
                 loss_fn: Callable, cfg: GrowthConfig) -> GrowthEpochStats:
    """Train candidate deltas with RMSprop while the base network stays frozen, then score.

    ``batches(e)`` yields (inputs, labels) for growth epoch ``e``; ``loss_fn``
    maps (logits, labels) to a scalar tensor. Each candidate's score is the
    mean per-batch gradient norm times the norm of its learned delta.
    """
    stats = GrowthEpochStats()
    if not cands:
        return stats
    state = [{"sq": np.zeros_like(c.delta), "buf": np.zeros_like(c.delta)} for c in cands]
    gsum = np.zeros(len(cands))
    nb = 0
    flops = flop_estimate(expanded_topology(net, cands))
    for e in range(cfg.growth_epochs):
        seen = False
        for x, y in batches(e):
            seen = True
            deltas = [Tensor(c.delta, requires_grad=True) for c in cands]
            conv_w, conv_b, head_w, head_b = assemble(net, cands, deltas)
            loss = loss_fn(run_layers(x, conv_w, conv_b, head_w, head_b, net.topology), y)
            backward(loss)
            grads = [d.grad if d.grad is not None else np.zeros_like(d.data) for d in deltas]
            gsum += [np.sqrt((g * g).sum()) for g in grads]
            nb += 1
            _rmsprop([c.delta for c in cands], grads, state, cfg)
            stats.steps += 1
            stats.samples += len(x)
            stats.flops += 3 * flops * len(x)
        if not seen:
            raise ValueError("growth epoch received an empty data stream")
    for c, g in zip(cands, gsum / max(nb, 1)):
        c.score = float(g * np.sqrt((c.delta * c.delta).sum()))
        if not np.isfinite(c.score):
            raise FloatingPointError(f"candidate {c.cid} has a non-finite score")
    return stats


def select_commit(net: Network, scored: Sequence[GrowthCandidate], gamma: float,
                  target: Optional[int] = None) -> tuple:
    """Greedily commit the best candidates until the width sum reaches
    floor((1 + gamma) * C(net)), or ``target`` when given.

    Ranking is global across layers; ties go to lower (layer, cid).
    Returns (grown network, committed candidates in rank order).
    """
    c1 = complexity(net)
    limit = budget(c1, gamma) if target is None else int(target)
    room = limit - c1
    if room < 1:
        warnings.warn(f"growth budget {limit} leaves no room above C={c1}; network unchanged",
                      GrowthBudgetWarning, stacklevel=2)
        return net, []
    for c in scored:
        if not np.isfinite(c.score):
            raise ValueError(f"candidate {c.cid} has a non-finite score")
    chosen = sorted(scored, key=lambda c: c.rank_key)[:room]
    return commit(net, chosen), chosen


def trace_records(net: Network, chosen: Sequence[GrowthCandidate], step: int) -> list:
    """JSON-lines growth trace: one record per committed candidate, in rank order."""
    widths = list(net.topology.widths)
    out = []
    for c in chosen:
        widths[c.layer - 1] += 1
        out.append({"step": step, "layer": c.layer, "kind": c.kind, "score": c.score, "widths": list(widths)})
    return out


@dataclass
class GrowthLog:
    trace: list = field(default_factory=list)
    widths: list = field(default_factory=list)  # topology after each growth step


def grow_once(net: Network, cfg: GrowthConfig, rng: np.random.Generator, batches, loss_fn,
              step: int, log: GrowthLog, target: Optional[int] = None,
              on_growth_stats: Optional[Callable] = None) -> Network:
    limit = budget(complexity(net), cfg.gamma) if target is None else int(target)
    if limit - complexity(net) < 1:
        warnings.warn(f"growth budget {limit} leaves no room above C={complexity(net)}; network unchanged",
                      GrowthBudgetWarning, stacklevel=2)
        log.widths.append(list(net.topology.widths))
        return net
    cands = propose(net, cfg, rng)
    stats = growth_epoch(net, cands, batches, loss_fn, cfg)
    if on_growth_stats is not None:
        on_growth_stats(stats)
    grown, chosen = select_commit(net, cands, cfg.gamma, target=limit)
    log.trace += trace_records(net, chosen, step)
    log.widths.append(list(grown.topology.widths))
    return grown


def osg(f0: Network, train: Callable, batches, loss_fn, e1: int, e2: int, cfg: GrowthConfig,
        rng: np.random.Generator, log: Optional[GrowthLog] = None, **kw) -> Network:
    """Train ``e1`` epochs, one growth step, train ``e2`` epochs.

    ``train(net, epochs, stage)`` is the caller's training loop.
    """
    log = log if log is not None else GrowthLog()
    f1 = train(f0, e1, "train1")
    fg = grow_once(f1, cfg, rng, batches, loss_fn, 1, log, **kw)
    return train(fg, e2, "train2")


def split_epochs(total: int, stages: int) -> list:
    base, extra = divmod(total, stages)
    return [base + (1 if i < extra else 0) for i in range(stages)]


def m_shot(f0: Network, train: Callable, batches, loss_fn, m: int, epochs_total: int, cfg: GrowthConfig,
           rng: np.random.Generator, log: Optional[GrowthLog] = None, **kw) -> Network:
    """m growth steps with per-step ratio (1 + gamma)^(1/m) - 1 and the epoch
    budget split evenly over the m + 1 training stages. The last step tops up
    to OSG's final size floor((1 + gamma) * C(f_1))."""
    if m < 1:
        raise ValueError("m must be >= 1")
    log = log if log is not None else GrowthLog()
    stages = split_epochs(epochs_total, m + 1)
    step_gamma = (1.0 + cfg.gamma) ** (1.0 / m) - 1.0
    net = train(f0, stages[0], "train1")
    final = budget(complexity(net), cfg.gamma)
    for step in range(1, m + 1):
        target = final if step == m else min(budget(complexity(net), step_gamma), final)
        net = grow_once(net, cfg, rng, batches, loss_fn, step, log, target=target, **kw)
        net = train(net, stages[step], f"train{step + 1}")
    return net
