import csv
import io
import json
import subprocess
import sys

import pytest

from gearlab.cli import build_parser, main
from gearlab.experiment import SpecError, parse_spec


def spec_doc(out, method="gearnn2", seed=0, **extra):
    doc = {
        "method": method, "out": str(out), "seed": seed,
        "dataset": {"n_train": 48, "n_test": 24, "size": 8, "seed": 5},
        "topology": {"widths": [3, 3]},
        "train": {"epochs": 1, "e1": 1, "eg": 1, "e2": 1, "er": 1, "batch_size": 16, "base_lr": 0.05},
        "growth": {"new_per_layer": 1},
        "suite": [{"kind": "gaussian_noise", "severity": 2}, {"kind": "box_blur", "severity": 2}],
    }
    doc.update(extra)
    return doc


def write_spec(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_parse_spec_rejects_unknown_keys(tmp_path):
    parse_spec(spec_doc(tmp_path))
    for bad in [dict(spec_doc(tmp_path), colour=1),
                dict(spec_doc(tmp_path), train={"epochz": 3}),
                dict(spec_doc(tmp_path), method="bigger"),
                dict(spec_doc(tmp_path), era={"width": 0, "depth": 3, "views": 4}),
                dict(spec_doc(tmp_path), method="small_aug", topology=None)]:
        with pytest.raises(SpecError):
            parse_spec(bad)


def test_gen_data_defaults_and_validation(tmp_path, capsys):
    assert main(["gen-data", "--seed", "1", "--out", str(tmp_path / "a"), "--size", "8"]) == 0
    first = capsys.readouterr().out
    from gearlab.data import read_container
    tr, te = read_container(tmp_path / "a" / "train.gds"), read_container(tmp_path / "a" / "test.gds")
    assert len(tr) + len(te) == 3600
    assert main(["gen-data", "--seed", "1", "--out", str(tmp_path / "b"), "--size", "8"]) == 0
    assert capsys.readouterr().out == first
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["files"] == ["test.gds", "train.gds"]
    assert main(["gen-data", "--classes", "1", "--out", str(tmp_path / "c")]) == 1
    assert "classes" in capsys.readouterr().err
    assert not (tmp_path / "c" / "train.gds").exists()


def test_run_is_deterministic(tmp_path, capsys):
    for name in ("r1", "r2"):
        assert main(["run", "--spec", write_spec(tmp_path / f"{name}.json", spec_doc(tmp_path / name))]) == 0
    out = json.loads(capsys.readouterr().out.splitlines()[0])
    assert {"a_cln", "a_rob", "steps", "flops"} <= set(out)
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()
    for f in ("topology.json", "growth_trace.jsonl", "final.ckpt", "manifest.json", "config.json"):
        assert (tmp_path / "r1" / f).exists()


def test_run_failure_is_structured(tmp_path, capsys):
    assert main(["run", "--spec", write_spec(tmp_path / "s.json", dict(spec_doc(tmp_path), bogus=1))]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "SpecError" and "bogus" in err["message"]
    assert not (tmp_path / "metrics.csv").exists()


def test_compare_four_arms_and_digest_check(tmp_path, capsys):
    g2 = tmp_path / "g2"
    specs = [write_spec(tmp_path / "g2.json", spec_doc(g2)),
             write_spec(tmp_path / "g1.json", spec_doc(tmp_path / "g1", "gearnn1")),
             write_spec(tmp_path / "sc.json", spec_doc(tmp_path / "sc", "small_clean", topology_from=str(g2))),
             write_spec(tmp_path / "sa.json", spec_doc(tmp_path / "sa", "small_aug", topology_from=str(g2)))]
    assert main(["compare", "--specs", *specs, "--out", str(tmp_path / "report.csv")]) == 0
    table = rows((tmp_path / "report.csv").read_text())
    assert [r["method"] for r in table] == ["gearnn2", "gearnn1", "small_clean", "small_aug"]
    assert table[0]["params"] == table[2]["params"] == table[3]["params"]
    capsys.readouterr()
    other = dict(spec_doc(tmp_path / "x"), dataset={"n_train": 48, "n_test": 24, "size": 8, "seed": 6})
    bad = [specs[0], write_spec(tmp_path / "x.json", other)]
    assert main(["compare", "--specs", *bad, "--out", str(tmp_path / "bad.csv")]) == 1
    assert "digest" in capsys.readouterr().err
    assert not (tmp_path / "bad.csv").exists()


def test_ablate_era_rows(tmp_path):
    spec = write_spec(tmp_path / "s.json", spec_doc(tmp_path / "run"))
    assert main(["ablate-era", "--spec", spec, "--out", str(tmp_path / "abl")]) == 0
    table = rows((tmp_path / "abl" / "ablate_era.csv").read_text())
    assert [(r["W"], r["D"], r["J"]) for r in table] == [("1", "1", "0"), ("1", "3", "4"), ("3", "3", "3")]
    passes = [int(r["passes"]) for r in table]
    assert passes[0] == min(passes)
    assert (tmp_path / "abl" / "manifest.json").exists()


def test_growth_steps_rows(tmp_path):
    spec = write_spec(tmp_path / "s.json", spec_doc(tmp_path / "run", train={
        "e1": 2, "eg": 1, "e2": 2, "er": 1, "batch_size": 16, "base_lr": 0.05}))
    assert main(["growth-steps", "--spec", spec, "--out", str(tmp_path / "gs")]) == 0
    table = rows((tmp_path / "gs" / "growth_steps.csv").read_text())
    assert [int(r["m"]) for r in table] == [1, 2, 3, 4]
    widths = [int(r["width_sum"]) for r in table]
    assert max(widths) - min(widths) <= 4
    assert int(table[0]["steps"]) <= int(table[3]["steps"])


def test_analyze_commands(tmp_path):
    runs = []
    for seed in range(4):
        out = tmp_path / f"r{seed}"
        assert main(["run", "--spec", write_spec(tmp_path / f"s{seed}.json", spec_doc(out, seed=seed))]) == 0
        runs.append(str(out))
    assert main(["analyze", "--what", "topology", "--runs", *runs, "--out", str(tmp_path / "topo")]) == 0
    assert len(rows((tmp_path / "topo" / "topology.csv").read_text())) == 2
    assert (tmp_path / "topo" / "topology.svg").exists()

    assert main(["analyze", "--what", "fourier", "--n-test", "12", "--size", "8",
                 "--out", str(tmp_path / "f")]) == 0
    table = rows((tmp_path / "f" / "fourier.csv").read_text())
    assert len(table) == 26 and table[-1]["corruption"] == "all_corruptions"
    assert (tmp_path / "f" / "box_blur_s3.pgm").exists()

    assert main(["analyze", "--what", "loss-slice", "--runs", runs[0], "--n-points", "5",
                 "--out", str(tmp_path / "ls")]) == 0
    assert len(rows((tmp_path / "ls" / "loss_slice.csv").read_text())) == 5
    assert json.loads((tmp_path / "ls" / "manifest.json").read_text())["what"] == "loss-slice"


def test_help_lists_flags():
    sub = build_parser()._subparsers._group_actions[0].choices
    for name, flags in {"gen-data": ["--seed", "--out", "--n-train", "--n-test", "--size", "--classes"],
                        "compare": ["--specs", "--out"], "ablate-era": ["--grid"], "growth-steps": ["--m"],
                        "analyze": ["--what", "--runs", "--n-points"]}.items():
        text = sub[name].format_help()
        assert all(f in text for f in flags), name
    with pytest.raises(SystemExit):
        main(["gen-data", "--out", "x", "--bogus"])


def test_module_entry_and_threads(tmp_path):
    env = {"GEARLAB_THREADS": "2", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "gearlab", "gen-data", "--n-train", "6", "--n-test", "3",
                           "--size", "8", "--out", str(tmp_path / "d")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["threads"] == 2
    proc = subprocess.run([sys.executable, "-m", "gearlab", "--help"], capture_output=True, text=True)
    assert "gen-data" in proc.stdout and "analyze" in proc.stdout


def test_shipped_specs_validate():
    from pathlib import Path
    from gearlab.experiment import load_spec
    specs = sorted((Path(__file__).parent.parent / "scripts" / "specs").glob("*.json"))
    assert len(specs) == 4
    assert {load_spec(p).method for p in specs} == {"gearnn1", "gearnn2", "small_clean", "small_aug"}
