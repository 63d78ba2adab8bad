"""SGD training loops, the GEARnn-1 / GEARnn-2 pipelines, fixed-size baselines,
and step / sample-pass / FLOP accounting."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corrupt import Corruption, CorruptedCache, accuracy, default_suite, robust_accuracy
from .data import Dataset
from .era import ChainParams, TransformSet, aug_loss, expand_batch
from .grow import GrowthConfig, GrowthLog, m_shot, osg
from .nn import Network, Topology, build, complexity_report, flop_estimate, save_checkpoint
from .rng import substream
from .tensor import Tensor, backward, softmax_cross_entropy

__all__ = ["TrainConfig", "Counters", "RunRecord", "Run", "lr_at", "sgd_step", "train_clean", "train_robust",
           "gearnn1", "gearnn2", "baseline_small", "mshot", "flop_estimate"]

METRIC_FIELDS = ("stage", "epoch", "loss", "lr", "a_cln", "a_rob", "steps", "passes", "flops", "width_sum")


@dataclass
class TrainConfig:
    epochs: int = 40  # single-stage methods (the Small baselines)
    e1: int = 10
    eg: int = 1
    e2: int = 10
    er: int = 10
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 12.0
    phase2_lr: Optional[float] = None  # lr for the ERA stage after clean growth; None uses base_lr
    seed: int = 0
    rob_eval_every: int = 0  # 0 evaluates A_rob only at the end of each stage

    def __post_init__(self):
        for name in ("epochs", "e1", "eg", "e2", "er"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.base_lr <= 0 or (self.phase2_lr is not None and self.phase2_lr <= 0):
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(epoch: int, total: int, base_lr: float, decay: float = 0.1) -> float:
    """Step schedule: x decay at half and at three quarters of ``total`` epochs."""
    if 2 * epoch < total:
        return base_lr
    if 4 * epoch < 3 * total:
        return base_lr * decay
    return base_lr * decay * decay


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: list, lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """In place: v <- momentum * v + g + weight_decay * w; w <- w - lr * v."""
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {w.shape} but gradient {g.shape}")
        v = velocity[i]
        if v is None or v.shape != w.shape:
            v = np.zeros_like(w)
        v = momentum * v + g + weight_decay * w
        velocity[i] = v
        w -= lr * v


@dataclass
class Counters:
    steps: int = 0
    passes: int = 0  # forward sample-passes (J views count J times)
    flops: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    rows: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    topology: dict = field(default_factory=dict)
    growth_trace: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0  # informational only; kept out of metrics.csv

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row.get(k)) for k in METRIC_FIELDS})
        return buf.getvalue()

    def save(self, out_dir, net: Optional[Network] = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "config.json": json.dumps(self.config, indent=2, sort_keys=True),
            "topology.json": json.dumps(self.topology, indent=2, sort_keys=True),
            "summary.json": json.dumps({"final": self.final, "counters": self.counters}, indent=2, sort_keys=True),
            "growth_trace.jsonl": "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.growth_trace),
            "timing.json": json.dumps({"wall_clock_s": self.wall_clock_s, "normative": False}),
            "metrics.csv": self.metrics_csv(),
        }
        for name, text in files.items():
            _atomic_write(out / name, text)
        if net is not None:
            save_checkpoint(net, out / "final.ckpt", self.counters)
            files["final.ckpt"] = None
        manifest = {"files": sorted(files), "method": self.config.get("method")}
        _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, out_dir) -> "RunRecord":
        out = Path(out_dir)
        summary = json.loads((out / "summary.json").read_text())
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        trace_path = out / "growth_trace.jsonl"
        trace = [json.loads(l) for l in trace_path.read_text().splitlines()] if trace_path.exists() else []
        return cls(config=json.loads((out / "config.json").read_text()), rows=rows,
                   counters=summary["counters"], topology=json.loads((out / "topology.json").read_text()),
                   growth_trace=trace, final=summary["final"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


class Run:
    """State shared by the stages of one experiment: data, counters, metric rows."""

    def __init__(self, train: Dataset, test: Dataset, cfg: TrainConfig, era: ChainParams = ChainParams(),
                 tset: Optional[TransformSet] = None, suite: Optional[Sequence[Corruption]] = None,
                 growth: Optional[GrowthConfig] = None, cache: Optional[CorruptedCache] = None):
        if len(train) == 0:
            raise ValueError("training set is empty")
        self.train, self.test, self.cfg = train, test, cfg
        self.era = era
        self.tset = tset or TransformSet()
        self.suite = list(default_suite() if suite is None else suite)
        self.growth = replace(growth or GrowthConfig(), growth_epochs=cfg.eg)
        self.cache = cache or CorruptedCache()
        self.counters = Counters()
        self.rows: list = []
        self.epoch = 0
        self.log = GrowthLog()
        self.losses: list = []
        self.phase1: Optional[Network] = None  # copy of the last network Run.grow returned

    # -- batches -----------------------------------------------------------------
    def _order(self, key) -> np.ndarray:
        return substream(self.cfg.seed, "shuffle", key).permutation(len(self.train))

    def clean_batches(self, key):
        order = self._order(key)
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            yield self.train.images[idx], self.train.labels[idx]

    def robust_batches(self, key, era: Optional[ChainParams] = None):
        era = era or self.era
        order = self._order(key)
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            views = expand_batch(self.train.images[idx], self.train.labels[idx], idx, self.cfg.seed, key,
                                 era, self.tset)
            yield views.reshape((-1,) + views.shape[2:]), self.train.labels[idx]

    def loss_fn(self, mode: str):
        if mode == "clean":
            return softmax_cross_entropy
        lam = self.cfg.lam
        return lambda logits, y: aug_loss(logits, y, lam)

    # -- stages ------------------------------------------------------------------
    def train_epochs(self, net: Network, epochs: int, mode: str, stage: str, sched_start: int = 0,
                     sched_total: Optional[int] = None, era: Optional[ChainParams] = None,
                     base_lr: Optional[float] = None) -> Network:
        """SGD for ``epochs`` epochs; lr follows the schedule position sched_start + e of sched_total."""
        cfg = self.cfg
        sched_total = epochs if sched_total is None else sched_total
        era = era or self.era
        loss_fn = self.loss_fn(mode)
        velocity = [None] * len(net.arrays())
        fwd_flops = flop_estimate(net.topology)
        for e in range(epochs):
            lr = lr_at(sched_start + e, sched_total, base_lr or cfg.base_lr)
            key = self.epoch
            batches = self.clean_batches(key) if mode == "clean" else self.robust_batches(key, era)
            total, count = 0.0, 0
            for x, y in batches:
                params = net.tensors()
                loss = loss_fn(net.forward(x, params), y)
                backward(loss)
                sgd_step(net.arrays(), [p.grad for p in params], velocity, lr, cfg.momentum, cfg.weight_decay)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite training loss in stage {stage}, epoch {e}")
                total += loss.item() * len(y)
                count += len(y)
                self.losses.append(loss.item())
                self.counters.steps += 1
                self.counters.passes += len(x)
                self.counters.flops += 3 * fwd_flops * len(x)
            self.epoch += 1
            last = e == epochs - 1
            every = cfg.rob_eval_every
            rob = robust_accuracy(net, self.test, self.suite, cfg.seed, self.cache).a_rob \
                if (last or (every and (e + 1) % every == 0)) and len(self.test) and self.suite else None
            self.rows.append({
                "stage": stage, "epoch": self.epoch, "loss": total / count, "lr": lr,
                "a_cln": accuracy(net, self.test) if len(self.test) else None, "a_rob": rob,
                "steps": self.counters.steps, "passes": self.counters.passes, "flops": self.counters.flops,
                "width_sum": net.topology.complexity(),
            })
        return net

    def _growth_hooks(self, mode: str, era: Optional[ChainParams] = None) -> tuple:
        step_box = {"n": 0}

        def batches(e):
            key = f"growth{step_box['n']}.{e}"
            return self.clean_batches(key) if mode == "clean" else self.robust_batches(key, era)

        def on_stats(stats):
            step_box["n"] += 1
            self.counters.steps += stats.steps
            self.counters.passes += stats.samples
            self.counters.flops += stats.flops

        return batches, on_stats

    def grow(self, f0: Network, mode: str, e1: int, e2: int, m: int = 1, stage_prefix: str = "") -> Network:
        """Phase-1: train, grow (m steps), train, on clean or ERA data with one lr schedule."""
        total = e1 + e2
        pos = {"e": 0}

        def train(net, epochs, stage):
            net = self.train_epochs(net, epochs, mode, stage_prefix + stage, pos["e"], total)
            pos["e"] += epochs
            return net

        batches, on_stats = self._growth_hooks(mode)
        rng = substream(self.cfg.seed, "growth")
        if m == 1:
            net = osg(f0, train, batches, self.loss_fn(mode), e1, e2, self.growth, rng, self.log,
                      on_growth_stats=on_stats)
        else:
            net = m_shot(f0, train, batches, self.loss_fn(mode), m, total, self.growth, rng, self.log,
                         on_growth_stats=on_stats)
        self.phase1 = net.clone()
        return net

    # -- records -------------------------------------------------------------------
    def record(self, net: Network, config: dict, started: float) -> RunRecord:
        rep = robust_accuracy(net, self.test, self.suite, self.cfg.seed, self.cache) \
            if len(self.test) and self.suite else None
        cx = complexity_report(net)
        final = {
            "a_cln": rep.a_cln if rep else None, "a_rob": rep.a_rob if rep else None,
            "cells": rep.cells if rep else {}, "width_sum": cx.width_sum, "params": cx.params,
            "size_pct": 100.0 * cx.size_fraction, "width_pct": 100.0 * cx.width_fraction,
            "widths": list(net.topology.widths),
        }
        return RunRecord(config=config, rows=list(self.rows), counters=self.counters.to_dict(),
                         topology=net.topology.to_dict(), growth_trace=list(self.log.trace), final=final,
                         wall_clock_s=time.perf_counter() - started)


def init_seed(seed: int) -> int:
    return int(substream(seed, "init").integers(2 ** 31))


# -- public stage API ----------------------------------------------------------------
def train_clean(net: Network, data: Dataset, cfg: TrainConfig, epochs: int, run: Optional[Run] = None) -> Network:
    run = run or Run(data, data.subset(slice(0, 0)), cfg)
    return run.train_epochs(net, epochs, "clean", "clean")


def train_robust(net: Network, data: Dataset, cfg: TrainConfig, epochs: int, era: ChainParams = ChainParams(),
                 run: Optional[Run] = None) -> Network:
    run = run or Run(data, data.subset(slice(0, 0)), cfg, era)
    return run.train_epochs(net, epochs, "robust", "robust", era=era)


def gearnn1(f0: Network, run: Run, config: Optional[dict] = None) -> tuple:
    """One phase: OSG entirely on ERA data with the augmented loss."""
    started = time.perf_counter()
    cfg = run.cfg
    net = run.grow(f0.clone(), "robust", cfg.e1, cfg.e2)
    return net, run.record(net, config or {"method": "gearnn1"}, started)


def gearnn2(f0: Network, run: Run, config: Optional[dict] = None) -> tuple:
    """Phase 1: OSG on clean data with cross-entropy. Phase 2: E_r epochs of ERA training."""
    started = time.perf_counter()
    cfg = run.cfg
    net = run.grow(f0.clone(), "clean", cfg.e1, cfg.e2)
    net = run.train_epochs(net, cfg.er, "robust", "phase2", base_lr=cfg.phase2_lr)
    return net, run.record(net, config or {"method": "gearnn2"}, started)


def mshot(f0: Network, run: Run, m: int, one_phase: bool = False, config: Optional[dict] = None) -> tuple:
    """m-shot growth in place of OSG, in the two-phase (default) or one-phase pipeline."""
    started = time.perf_counter()
    cfg = run.cfg
    if one_phase:
        net = run.grow(f0.clone(), "robust", cfg.e1, cfg.e2, m=m)
    else:
        net = run.grow(f0.clone(), "clean", cfg.e1, cfg.e2, m=m)
        net = run.train_epochs(net, cfg.er, "robust", "phase2", base_lr=cfg.phase2_lr)
    return net, run.record(net, config or {"method": "mshot", "m": m}, started)


def baseline_small(kind: str, topology: Topology, run: Run, config: Optional[dict] = None) -> tuple:
    """Fixed-topology training from random init: ``clean`` (CE) or ``augmented`` (ERA + L_aug)."""
    if kind not in ("clean", "augmented"):
        raise ValueError(f"baseline kind must be 'clean' or 'augmented', got {kind!r}")
    started = time.perf_counter()
    net = build(topology, init_seed(run.cfg.seed))
    mode = "clean" if kind == "clean" else "robust"
    net = run.train_epochs(net, run.cfg.epochs, mode, f"small_{kind}")
    return net, run.record(net, config or {"method": f"small_{kind}"}, started)
