"""Acceptance suite: one recorded pass/fail line per criterion.

Criteria 6-8 share a session fixture that trains every desk-scale arm once per
seed; expect roughly half an hour on one core.
"""
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from conftest import gradcheck
from gearlab.analyze import delta_spectrum
from gearlab.corrupt import Corruption, CorruptedCache, corrupt_dataset
from gearlab.data import gen_shapes, read_cifar_binary
from gearlab.era import ChainParams, IDENTITY, TransformSet, aug_loss, expand, jsd, sample_chain
from gearlab.experiment import load_data, make_run, resolve_topology, run_experiment
from gearlab.grow import GrowthBudgetWarning, GrowthConfig, budget, commit, propose, select_commit
from gearlab.nn import Topology, build, complexity, run_layers
from gearlab.presets import desk_spec
from gearlab.tensor import (Tensor, concat, conv2d, dense, jsd_logits, matmul, pool2x2, relu, sigmoid,
                            softmax_cross_entropy, stack, swish)
from gearlab.train import baseline_small, gearnn2, init_seed, mshot

SEEDS = (0, 1, 2)


# -- 1. gradients -------------------------------------------------------------------
def _op_cases(r):
    lab = lambda n, c: r.integers(0, c, n)
    proj = lambda *s: r.normal(size=s)
    return {
        "add": ([r.normal(size=(3, 4)), r.normal(size=4)], lambda a, b: ((a + b) * P["add"]).sum(), (3, 4)),
        "mul": ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: ((a * b) * P["mul"]).sum(), (3, 4)),
        "div": ([r.normal(size=(3, 4)), r.uniform(1, 2, size=(3, 4))], lambda a, b: ((a / b) * P["div"]).sum(),
                (3, 4)),
        "exp_log": ([r.uniform(0.5, 2, size=(3, 4))], lambda a: (a.log() * P["exp_log"] + a.exp()).sum(), (3, 4)),
        "mean_reshape_transpose": ([r.normal(size=(2, 6))],
                                   lambda a: (a.transpose(1, 0).reshape(3, 4) * P["mean_reshape_transpose"]).mean(),
                                   (3, 4)),
        "getitem": ([r.normal(size=(4, 5))], lambda a: (a[1:3, ::2] * P["getitem"]).sum(), (2, 3)),
        "matmul": ([r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda a, b: (matmul(a, b) * P["matmul"]).sum(),
                   (3, 2)),
        "concat_stack": ([r.normal(size=(2, 3)), r.normal(size=(2, 3))],
                         lambda a, b: (stack([concat([a, b], 1), concat([b, a], 1)], 0) * P["concat_stack"]).sum(),
                         (2, 2, 6)),
        "conv2d": ([r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
                   lambda x, w, b: (conv2d(x, w, b) * P["conv2d"]).sum(), (2, 3, 5, 5)),
        "conv2d_stride2": ([r.normal(size=(1, 2, 6, 6)), r.normal(size=(2, 2, 3, 3))],
                           lambda x, w: (conv2d(x, w, None, stride=2) * P["conv2d_stride2"]).sum(), (1, 2, 3, 3)),
        "dense": ([r.normal(size=(3, 5)), r.normal(size=(5, 2)), r.normal(size=2)],
                  lambda x, w, b: (dense(x, w, b) * P["dense"]).sum(), (3, 2)),
        "relu": ([r.normal(size=(3, 4))], lambda a: (relu(a) * P["relu"]).sum(), (3, 4)),
        "sigmoid": ([r.normal(size=(3, 4))], lambda a: (sigmoid(a) * P["sigmoid"]).sum(), (3, 4)),
        "swish": ([r.normal(size=(3, 4)) * 2], lambda a: (swish(a) * P["swish"]).sum(), (3, 4)),
        "maxpool": ([r.normal(size=(1, 2, 4, 4))], lambda a: (pool2x2(a, "max") * P["maxpool"]).sum(), (1, 2, 2, 2)),
        "avgpool": ([r.normal(size=(1, 2, 4, 4))], lambda a: (pool2x2(a, "avg") * P["avgpool"]).sum(), (1, 2, 2, 2)),
        "cross_entropy": ([r.normal(size=(4, 3)) * 2], lambda z: softmax_cross_entropy(z, L["ce"]), None),
        "jsd": ([r.normal(size=(3, 2, 4)) * 2], lambda z: jsd_logits(z), None),
        "aug_loss": ([r.normal(size=(3, 2, 4))], lambda z: aug_loss(z, L["aug"], 12.0), None),
    }, {"ce": lab(4, 3), "aug": lab(2, 4)}


P: dict = {}
L: dict = {}


def test_criterion_01_gradients(criterion):
    start = time.perf_counter()
    worst = {}
    for i in range(20):
        r = np.random.default_rng(1000 + i)
        cases, labels = _op_cases(r)
        L.update(labels)
        for name, (arrays, fn, pshape) in cases.items():
            if pshape is not None:
                P[name] = r.normal(size=pshape)
            worst[name] = max(worst.get(name, 0.0), gradcheck(fn, arrays))
        # composed CNN loss on a small random network
        net = build(Topology([3, 4], input_shape=(3, 4, 4), activation="swish" if i % 2 else "relu"), i)
        x, y = r.uniform(size=(2, 3, 4, 4)), r.integers(0, 3, 2)
        topo = net.topology
        loss = lambda *p: softmax_cross_entropy(run_layers(Tensor(x), p[0:4:2], p[1:4:2], p[4], p[5], topo), y)
        worst["cnn_loss"] = max(worst.get("cnn_loss", 0.0), gradcheck(loss, [a.copy() for a in net.arrays()]))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    criterion(1, not bad and elapsed < 120,
              f"{len(worst)} ops x 20 instances, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
              + (f", failing {bad}" if bad else ""))


# -- 2. function preservation ---------------------------------------------------------
def test_criterion_02_function_preserving(criterion):
    start = time.perf_counter()
    worst, kinds, tested = 0.0, set(), 0
    r = np.random.default_rng(2)
    while tested < 100:
        widths = list(r.integers(2, 6, size=int(r.integers(2, 5))))
        net = build(Topology(widths, input_shape=(3, 8, 8)), int(r.integers(1 << 30)))
        x = r.uniform(size=(3, 3, 8, 8))
        ref = net.forward(x).data
        cands = propose(net, GrowthConfig(new_per_layer=2), r)
        for idx in r.choice(len(cands), size=min(10, 100 - tested, len(cands)), replace=False):
            c = cands[idx]
            c.delta = np.zeros_like(c.delta)
            kinds.add(c.kind)
            worst = max(worst, float(np.abs(commit(net, [c]).forward(x).data - ref).max()))
            tested += 1
    elapsed = time.perf_counter() - start
    criterion(2, worst <= 1e-9 and kinds == {"split", "new"} and elapsed < 60,
              f"{tested} candidates ({sorted(kinds)}), max |d logits| {worst:.1e}, {elapsed:.1f}s")


# -- 3. budget --------------------------------------------------------------------------
def test_criterion_03_budget(criterion):
    failures = []
    for gamma in (0.0, 0.25, 0.6, 0.9, 1.5, 2.0):
        for seed in range(5):
            r = np.random.default_rng(seed)
            net = build(Topology([6, 5, 7], input_shape=(3, 8, 8)), seed)
            cands = propose(net, GrowthConfig(new_per_layer=8), r)
            for c in cands:
                c.score = float(r.uniform())
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", GrowthBudgetWarning)
                grown, _ = select_commit(net, cands, gamma)
            limit = budget(complexity(net), gamma)
            enough = len(cands) >= limit - complexity(net)
            if complexity(grown) > limit or (enough and complexity(grown) < limit - 1):
                failures.append((gamma, seed, complexity(grown), limit))
    criterion(3, not failures, f"30 (gamma, seed) cases, violations {failures}")


# -- 4. JSD -----------------------------------------------------------------------------
def test_criterion_04_jsd(criterion):
    r = np.random.default_rng(4)
    worst, bound_viol = 0.0, 0
    for _ in range(1000):
        j, c = int(r.integers(1, 7)), int(r.integers(2, 11))
        ps = r.dirichlet(np.full(c, r.uniform(0.05, 3.0)), size=j)
        m = ps.mean(axis=0)
        direct = 0.0
        for p in ps:
            for i in range(c):
                if p[i] > 0:
                    direct += p[i] * np.log(p[i] / m[i]) / j
        got = jsd(ps)
        worst = max(worst, abs(got - direct))
        bound_viol += not (0.0 <= got + 1e-15 and got <= np.log(c))
    criterion(4, worst <= 1e-10 and bound_viol == 0,
              f"1000 cases, max |diff| {worst:.1e}, bound violations {bound_viol}")


# -- 5. ERA distributions ------------------------------------------------------------
def test_criterion_05_era_distribution(criterion):
    r = np.random.default_rng(5)
    tset = TransformSet([IDENTITY])
    x = r.uniform(size=(3, 8, 8))
    mixes = [expand(x, 0, r, ChainParams(1, 3, 2), tset).mix[0] for _ in range(10_000)]
    depths = np.array([sample_chain(r, tset, 3).depth for _ in range(10_000)])
    counts = np.bincount(depths, minlength=4)[1:]
    sigma = np.sqrt(10_000 * (1 / 3) * (2 / 3))
    dev = np.abs(counts - 10_000 / 3) / sigma
    mean = float(np.mean(mixes))
    criterion(5, 0.49 <= mean <= 0.51 and dev.max() <= 3,
              f"mix mean {mean:.4f}, depth counts {counts.tolist()} (max {dev.max():.2f} sigma)")


# -- 6-8. desk-scale runs ------------------------------------------------------------
def _median(values):
    return float(np.median(values))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Per seed: GEARnn-2, both Small baselines, m=4 growth and two ERA cells from Phase 1."""
    out = {}
    for seed in SEEDS:
        spec = desk_spec("gearnn2", seed, str(tmp_path_factory.mktemp(f"desk{seed}")))
        train, test = load_data(spec.dataset, seed)
        cache = CorruptedCache()
        f0 = build(resolve_topology(spec, train), init_seed(seed))
        t0 = time.process_time()
        run = make_run(spec, train, test, cache)
        g2_net, g2 = gearnn2(f0, run)
        topo = g2_net.topology
        _, small_in = baseline_small("clean", topo, make_run(spec, train, test, cache))
        _, small_aug = baseline_small("augmented", topo, make_run(spec, train, test, cache))
        table2_cpu = time.process_time() - t0
        _, m4 = mshot(f0, make_run(spec, train, test, cache), 4)
        cells = {}
        for cell in ((1, 1, 0), (1, 3, 4)):
            crun = make_run(replace(spec, era=ChainParams(*cell)), train, test, cache)
            net = crun.train_epochs(run.phase1.clone(), spec.train.er, "robust", "phase2",
                                    base_lr=spec.train.phase2_lr)
            cells[cell] = crun.record(net, {"era": cell}, 0.0)
        out[seed] = {"g2": g2, "small_in": small_in, "small_aug": small_aug, "m4": m4, "cells": cells,
                     "cpu": table2_cpu}
        print(f"seed {seed}: g2 {g2.final['a_cln']:.1f}/{g2.final['a_rob']:.1f} "
              f"small_in {small_in.final['a_cln']:.1f}/{small_in.final['a_rob']:.1f} "
              f"small_aug {small_aug.final['a_cln']:.1f}/{small_aug.final['a_rob']:.1f} "
              f"m4 {m4.final['a_rob']:.1f} cells {[round(c.final['a_rob'], 1) for c in cells.values()]} "
              f"cpu {table2_cpu:.0f}s")
    return out


def test_criterion_06_table2(desk, criterion):
    med = lambda arm, key: _median([desk[s][arm].final[key] for s in SEEDS])
    passes = lambda arm: _median([desk[s][arm].counters["passes"] for s in SEEDS])
    a = med("small_in", "a_rob") <= med("small_in", "a_cln") - 10
    b = med("g2", "a_rob") >= med("small_in", "a_rob") + 5
    c = passes("g2") <= 0.6 * passes("small_aug")
    d = abs(med("g2", "a_rob") - med("small_aug", "a_rob")) <= 4
    cpu = sum(desk[s]["cpu"] for s in SEEDS)
    t = cpu <= 20 * 60
    criterion(6, a and b and c and d and t,
              f"(a) {a}: Small(D_in) A_cln {med('small_in', 'a_cln'):.1f} A_rob {med('small_in', 'a_rob'):.1f}; "
              f"(b) {b}: GEARnn-2 A_rob {med('g2', 'a_rob'):.1f}; "
              f"(c) {c}: passes ratio {passes('g2') / passes('small_aug'):.2f}; "
              f"(d) {d}: Small(D_aug) A_rob {med('small_aug', 'a_rob'):.1f}; "
              f"runtime {t}: {cpu / 60:.1f} min CPU")


def test_criterion_07_growth_steps(desk, criterion):
    rob1 = _median([desk[s]["g2"].final["a_rob"] for s in SEEDS])
    rob4 = _median([desk[s]["m4"].final["a_rob"] for s in SEEDS])
    steps_ok = all(desk[s]["g2"].counters["steps"] <= desk[s]["m4"].counters["steps"] for s in SEEDS)
    sizes = [(sum(desk[s]["g2"].final["widths"]), sum(desk[s]["m4"].final["widths"])) for s in SEEDS]
    iso = all(abs(a - b) <= 4 for a, b in sizes)
    criterion(7, rob1 >= rob4 - 1 and steps_ok and iso,
              f"A_rob m=1 {rob1:.1f} vs m=4 {rob4:.1f}; steps m=1 <= m=4 on every seed: {steps_ok}; "
              f"width sums {sizes}")


def test_criterion_08_era_ablation(desk, criterion):
    rob = {cell: _median([desk[s]["cells"][cell].final["a_rob"] for s in SEEDS]) for cell in ((1, 1, 0), (1, 3, 4))}
    fewest = all(desk[s]["cells"][(1, 1, 0)].counters["passes"] < desk[s]["cells"][(1, 3, 4)].counters["passes"]
                 for s in SEEDS)
    gain = rob[(1, 3, 4)] - rob[(1, 1, 0)]
    criterion(8, gain >= 2 and fewest,
              f"A_rob (1,3,4) {rob[(1, 3, 4)]:.1f} vs (1,1,0) {rob[(1, 1, 0)]:.1f} (gain {gain:+.1f}); "
              f"(1,1,0) fewest passes: {fewest}")


# -- 9. Fourier -----------------------------------------------------------------------
def test_criterion_09_fourier(criterion):
    r = np.random.default_rng(9)
    _, test = gen_shapes(9, 3, 600)
    noise = corrupt_dataset(test, Corruption("gaussian_noise", 3), 9)
    blur = corrupt_dataset(test, Corruption("box_blur", 3), 9)
    white = r.normal(0, 0.1, size=(600, 3, 16, 16))
    pn = delta_spectrum(test.images, noise.images)
    pb = delta_spectrum(test.images, blur.images)
    pw = delta_spectrum(np.zeros_like(white), white)
    parseval = max(p.parseval_error() for p in (pn, pb, pw))
    ok = parseval <= 1e-6 and abs(pw.low_freq_fraction - 0.196) <= 0.02 and pb.low_freq_fraction > pn.low_freq_fraction
    criterion(9, ok, f"Parseval rel err {parseval:.1e}; white-noise low fraction {pw.low_freq_fraction:.3f}; "
                     f"blur {pb.low_freq_fraction:.3f} > noise {pn.low_freq_fraction:.3f}")


# -- 10. determinism ------------------------------------------------------------------
def test_criterion_10_determinism(tmp_path, criterion):
    from gearlab.experiment import DataSource
    results = {}
    for method, extra in (("gearnn2", {}), ("gearnn1", {}), ("mshot", {"m": 2}),
                          ("small_aug", {"topology": Topology([3, 4])})):
        blobs = []
        for rep in range(2):
            spec = desk_spec(method, 11, str(tmp_path / f"{method}{rep}"),
                             dataset=DataSource(n_train=60, n_test=30, size=8),
                             suite=[Corruption("gaussian_noise", 3), Corruption("occlusion", 2)], **extra)
            spec = replace(spec, train=replace(spec.train, epochs=2, e1=2, e2=2, er=1, batch_size=20))
            if method != "small_aug":
                spec = replace(spec, topology=Topology([3, 3]))
            run_experiment(spec)
            blobs.append((tmp_path / f"{method}{rep}" / "metrics.csv").read_bytes())
        results[method] = blobs[0] == blobs[1]
    criterion(10, all(results.values()), f"bitwise-identical metrics.csv per method: {results}")


# -- 11. CIFAR ingestion -------------------------------------------------------------
def test_criterion_11_cifar(tmp_path, criterion):
    records = []
    expect = []
    r = np.random.default_rng(11)
    for label in (0, 7):
        pix = r.integers(0, 256, size=3072, dtype=np.uint8)
        records.append(bytes([label]) + pix.tobytes())
        expect.append(pix.reshape(3, 32, 32).astype(np.float32) / np.float32(255))
    (tmp_path / "ok.bin").write_bytes(b"".join(records))
    (tmp_path / "cut.bin").write_bytes(b"".join(records)[:-1])
    ds = read_cifar_binary(tmp_path / "ok.bin")
    parsed = list(ds.labels) == [0, 7] and np.array_equal(ds.images, np.stack(expect))
    try:
        read_cifar_binary(tmp_path / "cut.bin")
        rejected = False
    except ValueError:
        rejected = True
    criterion(11, parsed and rejected, f"fixture parsed exactly: {parsed}; truncated file rejected: {rejected}")
