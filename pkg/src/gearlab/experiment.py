"""JSON experiment specs: validation, dataset resolution, and end-to-end execution."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .corrupt import Corruption, CorruptedCache, default_suite
from .data import Dataset, gen_shapes, read_cifar_files, read_container
from .era import ChainParams, TransformSet
from .grow import GrowthConfig
from .nn import Topology, build, load_checkpoint
from .train import Run, RunRecord, TrainConfig, baseline_small, gearnn1, gearnn2, init_seed, mshot

METHODS = ("gearnn1", "gearnn2", "small_clean", "small_aug", "mshot")


class SpecError(ValueError):
    pass


@dataclass
class DataSource:
    source: str = "shapes"  # shapes | container | cifar
    n_train: int = 3000
    n_test: int = 600
    size: int = 16
    classes: int = 3
    seed: Optional[int] = None  # dataset seed; defaults to the experiment seed
    train: Optional[object] = None  # container path, or list of CIFAR batch files
    test: Optional[object] = None

    def __post_init__(self):
        if self.source not in ("shapes", "container", "cifar"):
            raise SpecError(f"unknown dataset source {self.source!r}")
        if self.source != "shapes" and (self.train is None or self.test is None):
            raise SpecError(f"dataset source {self.source!r} needs both 'train' and 'test'")


@dataclass
class ExperimentSpec:
    method: str
    out: str
    seed: int = 0
    dataset: DataSource = field(default_factory=DataSource)
    topology: Optional[Topology] = None
    topology_from: Optional[str] = None  # run directory whose final topology the baseline mirrors
    train: TrainConfig = field(default_factory=TrainConfig)
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    era: ChainParams = field(default_factory=ChainParams)
    transform_severity: float = 1.0
    suite: Optional[list] = None  # list of Corruption; None is the 5x5 default
    m: int = 1
    one_phase: bool = False
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.method.startswith("small") and self.topology is None and self.topology_from is None:
            raise SpecError(f"method {self.method} needs 'topology' or 'topology_from'")
        if self.m < 1:
            raise SpecError("m must be >= 1")
        if self.train.seed != self.seed:
            self.train = dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["suite"] = None if self.suite is None else [c.to_dict() for c in self.suite]
        if self.topology is not None:
            d["topology"] = self.topology.to_dict()
        return d


_NESTED = {"dataset": DataSource, "train": TrainConfig, "growth": GrowthConfig, "era": ChainParams,
           "topology": Topology}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise SpecError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise SpecError(f"{where}: unknown keys {unknown}")
    kwargs = dict(d)
    if cls is ExperimentSpec:
        for key, sub in _NESTED.items():
            if kwargs.get(key) is not None:
                kwargs[key] = _build(sub, kwargs[key], f"{where}.{key}")
        if kwargs.get("suite") is not None:
            kwargs["suite"] = [_build(Corruption, c, f"{where}.suite[{i}]") for i, c in enumerate(kwargs["suite"])]
    try:
        return cls(**kwargs)
    except SpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{where}: {exc}") from exc


def parse_spec(doc: dict) -> ExperimentSpec:
    """Validate a spec document; unknown keys anywhere are rejected before any compute."""
    spec = _build(ExperimentSpec, doc, "spec")
    if spec.topology is not None:
        try:
            spec.topology.validate()
        except ValueError as exc:
            raise SpecError(f"spec.topology: {exc}") from exc
    return spec


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from exc
    return parse_spec(doc)


def spec_from_run(out_dir) -> ExperimentSpec:
    """The spec a saved run was produced from (config.json minus resolved extras)."""
    doc = json.loads((Path(out_dir) / "config.json").read_text())
    for key in ("dataset_digests", "topology_resolved"):
        doc.pop(key, None)
    return parse_spec(doc)


_DATA_CACHE: dict = {}


def load_data(src: DataSource, seed: int) -> tuple:
    if src.source == "shapes":
        key = (src.seed if src.seed is not None else seed, src.n_train, src.n_test, src.classes, src.size)
        if key not in _DATA_CACHE:
            _DATA_CACHE.clear()
            _DATA_CACHE[key] = gen_shapes(*key)
        return _DATA_CACHE[key]
    if src.source == "container":
        return read_container(src.train), read_container(src.test)
    as_list = lambda v: [v] if isinstance(v, str) else list(v)
    return read_cifar_files(as_list(src.train), "train"), read_cifar_files(as_list(src.test), "test")


def default_topology(train: Dataset) -> Topology:
    return Topology(widths=[45] * 6, num_classes=train.num_classes, input_shape=train.image_shape)


def resolve_topology(spec: ExperimentSpec, train: Dataset) -> Topology:
    if spec.topology_from is not None:
        return Topology.from_dict(json.loads((Path(spec.topology_from) / "topology.json").read_text()))
    topo = spec.topology or default_topology(train)
    if topo.num_classes != train.num_classes or tuple(topo.input_shape) != tuple(train.image_shape):
        topo = dataclasses.replace(topo, num_classes=train.num_classes, input_shape=tuple(train.image_shape))
    return topo


def make_run(spec: ExperimentSpec, train: Dataset, test: Dataset, cache: Optional[CorruptedCache] = None) -> Run:
    cache = cache or CorruptedCache(spec.cache_dir)
    return Run(train, test, spec.train, spec.era, TransformSet(severity=spec.transform_severity),
               spec.suite if spec.suite is not None else default_suite(), spec.growth, cache)


def run_experiment(spec: ExperimentSpec, save: bool = True, cache: Optional[CorruptedCache] = None) -> tuple:
    """Execute one spec; returns (network, RunRecord) and writes the run directory."""
    train, test = load_data(spec.dataset, spec.seed)
    topo = resolve_topology(spec, train)
    run = make_run(spec, train, test, cache)
    config = spec.to_dict()
    config["dataset_digests"] = {"train": train.digest, "test": test.digest}
    config["topology_resolved"] = topo.to_dict()
    if spec.method.startswith("small"):
        kind = "clean" if spec.method == "small_clean" else "augmented"
        net, rec = baseline_small(kind, topo, run, config)
    else:
        f0 = build(topo, init_seed(spec.seed))
        if spec.method == "gearnn1":
            net, rec = gearnn1(f0, run, config)
        elif spec.method == "gearnn2":
            net, rec = gearnn2(f0, run, config)
        else:
            net, rec = mshot(f0, run, spec.m, spec.one_phase, config)
    if save:
        rec.save(spec.out, net)
    return net, rec


def load_run(out_dir) -> tuple:
    """(network, RunRecord) from a saved run directory."""
    net, _ = load_checkpoint(Path(out_dir) / "final.ckpt")
    return net, RunRecord.load(out_dir)
