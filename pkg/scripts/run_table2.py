"""Four-arm desk comparison (GEARnn-1, GEARnn-2, Small(D_in), Small(D_aug)) over seeds.

    python scripts/run_table2.py --seeds 0 1 2 --out runs/table2
"""
import argparse
import csv
import statistics
from dataclasses import replace
from pathlib import Path

from gearlab.nn import Topology
from gearlab.presets import desk_spec
from gearlab.experiment import run_experiment

FIELDS = ("method", "seed", "size_pct", "width_sum", "a_cln", "a_rob", "steps", "passes", "flops", "seconds")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/table2")
    ap.add_argument("--skip-gearnn1", action="store_true", help="omit the one-phase arm (the slowest)")
    a = ap.parse_args()
    out = Path(a.out)
    rows = []
    for seed in a.seeds:
        base = out / f"seed{seed}"
        _, g2 = run_experiment(desk_spec("gearnn2", seed, str(base / "gearnn2")))
        topo = Topology.from_dict(g2.topology)
        recs = {"gearnn2": g2}
        if not a.skip_gearnn1:
            recs["gearnn1"] = run_experiment(desk_spec("gearnn1", seed, str(base / "gearnn1")))[1]
        for method in ("small_clean", "small_aug"):
            spec = replace(desk_spec(method, seed, str(base / method)), topology=topo)
            recs[method] = run_experiment(spec)[1]
        for method, rec in recs.items():
            f, c = rec.final, rec.counters
            row = {"method": method, "seed": seed, "size_pct": f["size_pct"], "width_sum": f["width_sum"],
                   "a_cln": f["a_cln"], "a_rob": f["a_rob"], "steps": c["steps"], "passes": c["passes"],
                   "flops": c["flops"], "seconds": rec.wall_clock_s}
            rows.append(row)
            print(", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table2.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        w.writerows(rows)
    print("\nmedians over seeds")
    for method in dict.fromkeys(r["method"] for r in rows):
        sel = [r for r in rows if r["method"] == method]
        med = {k: statistics.median(r[k] for r in sel) for k in ("a_cln", "a_rob", "passes")}
        print(f"{method:12s} A_cln {med['a_cln']:.1f}  A_rob {med['a_rob']:.1f}  passes {med['passes']:.0f}")


if __name__ == "__main__":
    main()
