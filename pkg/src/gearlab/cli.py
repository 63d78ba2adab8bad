"""Command-line entry point: gen-data, run, compare, ablate-era, growth-steps, analyze."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analyze import delta_spectrum, loss_slice, topology_report
from .corrupt import corrupt_dataset, default_suite
from .data import gen_shapes, read_container, write_container
from .era import ChainParams
from .experiment import (SpecError, load_data, load_run, load_spec, make_run, resolve_topology, run_experiment,
                         spec_from_run)
from .nn import build, save_checkpoint
from .train import init_seed

COMPARE_FIELDS = ("method", "seed", "size_pct", "width_sum", "params", "a_cln", "a_rob", "steps", "passes", "flops")


def threads() -> int:
    """Worker cap from GEARLAB_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("GEARLAB_THREADS", "1")))
    except ValueError:
        raise SpecError("GEARLAB_THREADS must be an integer")


def _write_manifest(out: Path, files, extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"files": sorted(files), "threads": threads()}
    doc.update(extra or {})
    _atomic(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True))


def _atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})
    return buf.getvalue()


def _row(method, seed, rec) -> dict:
    f, c = rec.final, rec.counters
    return {"method": method, "seed": seed, "size_pct": f["size_pct"], "width_sum": f["width_sum"],
            "params": f["params"], "a_cln": f["a_cln"], "a_rob": f["a_rob"], "steps": c["steps"],
            "passes": c["passes"], "flops": c["flops"]}


# -- commands ------------------------------------------------------------------
def cmd_gen_data(a) -> int:
    if a.classes < 2:
        raise SpecError(f"--classes must be >= 2 (got {a.classes}); a one-class task is degenerate")
    train, test = gen_shapes(a.seed, a.n_train, a.n_test, a.classes, a.size)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    digests = {"train": write_container(train, out / "train.gds"), "test": write_container(test, out / "test.gds")}
    _write_manifest(out, ["train.gds", "test.gds"], {"digests": digests})
    for split, d in digests.items():
        print(f"{split} {d}")
    return 0


def cmd_run(a) -> int:
    spec = load_spec(a.spec)
    _, rec = run_experiment(spec)
    f, c = rec.final, rec.counters
    print(json.dumps({"method": spec.method, "out": spec.out, "a_cln": f["a_cln"], "a_rob": f["a_rob"],
                      "steps": c["steps"], "passes": c["passes"], "flops": c["flops"], "widths": f["widths"]}))
    return 0


def cmd_compare(a) -> int:
    specs = [load_spec(p) for p in a.specs]
    digests = set()
    for s in specs:
        train, test = load_data(s.dataset, s.seed)
        digests.add((train.digest, test.digest))
    if len(digests) != 1:
        raise SpecError("specs do not share dataset digests; comparison rows would not be comparable")
    rows = []
    for s in specs:
        _, rec = run_experiment(s)
        rows.append(_row(s.method, s.seed, rec))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic(out, _csv(rows, COMPARE_FIELDS))
    print(out.read_text(), end="")
    return 0


def parse_grid(cells) -> list:
    grid = []
    for cell in cells:
        try:
            w, d, j = (int(v) for v in cell.split(","))
        except ValueError:
            raise SpecError(f"grid cell {cell!r} must look like W,D,J")
        grid.append(ChainParams(w, d, j))
    return grid


def cmd_ablate_era(a) -> int:
    spec = load_spec(a.spec)
    grid = parse_grid(a.grid)
    train, test = load_data(spec.dataset, spec.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    # shared Phase-1: clean OSG once, then one robust-training run per grid cell
    base = make_run(spec, train, test)
    f0 = build(resolve_topology(spec, train), init_seed(spec.seed))
    phase1 = base.grow(f0, "clean", spec.train.e1, spec.train.e2)
    save_checkpoint(phase1, out / "phase1.ckpt", base.counters.to_dict())
    rows = []
    for cell in grid:
        run = make_run(dataclasses.replace(spec, era=cell), train, test, base.cache)
        net = run.train_epochs(phase1.clone(), spec.train.er, "robust", "phase2",
                               base_lr=spec.train.phase2_lr)
        rec = run.record(net, {"era": cell.as_tuple()}, 0.0)
        rows.append({"W": cell.width, "D": cell.depth, "J": cell.views, "a_cln": rec.final["a_cln"],
                     "a_rob": rec.final["a_rob"], "steps": rec.counters["steps"],
                     "passes": rec.counters["passes"], "flops": rec.counters["flops"]})
    _atomic(out / "ablate_era.csv", _csv(rows, ("W", "D", "J", "a_cln", "a_rob", "steps", "passes", "flops")))
    _write_manifest(out, ["phase1.ckpt", "ablate_era.csv"])
    print((out / "ablate_era.csv").read_text(), end="")
    return 0


def cmd_growth_steps(a) -> int:
    spec = load_spec(a.spec)
    out = Path(a.out)
    rows = []
    for m in a.m:
        s = dataclasses.replace(spec, method="mshot", m=m, out=str(out / f"m{m}"))
        _, rec = run_experiment(s)
        rows.append(dict(_row(f"m{m}", s.seed, rec), m=m))
    fields = ("m",) + COMPARE_FIELDS[3:]
    _atomic(out / "growth_steps.csv", _csv(rows, fields))
    _write_manifest(out, ["growth_steps.csv"] + [f"m{m}" for m in a.m])
    print((out / "growth_steps.csv").read_text(), end="")
    return 0


def _analysis_data(a):
    if a.data:
        return read_container(Path(a.data) / "test.gds")
    return gen_shapes(a.seed, n_train=3, n_test=a.n_test, classes=a.classes, size=a.size)[1]


def cmd_analyze(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if a.what == "topology":
        if not a.runs:
            raise SpecError("--what topology needs --runs DIR [DIR ...]")
        recs = [json.loads((Path(r) / "topology.json").read_text()) for r in a.runs]
        rep = topology_report(recs)
        _atomic(out / "topology.csv", rep.to_csv())
        _atomic(out / "topology.svg", rep.to_svg())
        written = ["topology.csv", "topology.svg"]
        print(rep.to_csv(), end="")
    elif a.what == "fourier":
        test = _analysis_data(a)
        suite = [c for c in default_suite() if a.severity is None or c.severity == a.severity]
        rows, mags = [], []
        for c in suite:
            prof = delta_spectrum(test.images, corrupt_dataset(test, c, a.seed).images)
            prof.save(out / c.name)
            mags.append(prof)
            written += [f"{c.name}.npy", f"{c.name}.pgm", f"{c.name}_radial.csv"]
            rows.append({"corruption": c.name, "low_freq_fraction": prof.low_freq_fraction,
                         "energy": prof.spatial_energy})
        mean_mag = np.mean([p.magnitude for p in mags], axis=0)
        np.save(out / "all_corruptions.npy", mean_mag)
        mean_low = float(np.mean([p.low_freq_fraction for p in mags]))
        rows.append({"corruption": "all_corruptions", "low_freq_fraction": mean_low,
                     "energy": float(np.mean([p.spatial_energy for p in mags]))})
        _atomic(out / "fourier.csv", _csv(rows, ("corruption", "low_freq_fraction", "energy")))
        written += ["all_corruptions.npy", "fourier.csv"]
        print((out / "fourier.csv").read_text(), end="")
    else:
        if not a.runs or len(a.runs) != 1:
            raise SpecError("--what loss-slice needs exactly one --runs DIR")
        net, rec = load_run(a.runs[0])
        if a.data:
            data = read_container(Path(a.data) / "train.gds")
        else:
            spec = spec_from_run(a.runs[0]) if a.spec is None else load_spec(a.spec)
            data = load_data(spec.dataset, spec.seed)[0]
        curve = loss_slice(net, data, n_points=a.n_points, seed=a.seed)
        _atomic(out / "loss_slice.csv", curve.to_csv())
        written = ["loss_slice.csv"]
        print(curve.to_csv(), end="")
    _write_manifest(out, written, {"what": a.what})
    return 0


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gearlab", description="Grow compact, corruption-robust CNNs at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the procedural shapes dataset as container files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=3000)
    g.add_argument("--n-test", type=int, default=600)
    g.add_argument("--size", type=int, default=16, choices=(8, 16, 32))
    g.add_argument("--classes", type=int, default=3)
    g.set_defaults(fn=cmd_gen_data)

    r = sub.add_parser("run", help="execute one JSON experiment spec")
    r.add_argument("--spec", required=True)
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="run several specs on one dataset and tabulate them")
    c.add_argument("--specs", nargs="+", required=True)
    c.add_argument("--out", required=True, help="report CSV path")
    c.set_defaults(fn=cmd_compare)

    e = sub.add_parser("ablate-era", help="sweep (W,D,J) from one shared Phase-1 network")
    e.add_argument("--spec", required=True)
    e.add_argument("--grid", nargs="+", default=["1,1,0", "1,3,4", "3,3,3"], help="cells as W,D,J")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_ablate_era)

    m = sub.add_parser("growth-steps", help="m-shot growth at iso-final-size for each m")
    m.add_argument("--spec", required=True)
    m.add_argument("--m", type=int, nargs="+", default=[1, 2, 3, 4])
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_growth_steps)

    a = sub.add_parser("analyze", help="topology report, Fourier spectra or loss slice")
    a.add_argument("--what", required=True, choices=("topology", "fourier", "loss-slice"))
    a.add_argument("--runs", nargs="+", help="run directories (topology, loss-slice)")
    a.add_argument("--data", help="directory holding train.gds/test.gds (default: regenerate shapes)")
    a.add_argument("--spec", help="spec whose dataset the loss slice uses")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--n-test", type=int, default=600)
    a.add_argument("--classes", type=int, default=3)
    a.add_argument("--size", type=int, default=16)
    a.add_argument("--severity", type=int, default=None, help="restrict fourier to one severity")
    a.add_argument("--n-points", type=int, default=21)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # structured failure for scripts
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
