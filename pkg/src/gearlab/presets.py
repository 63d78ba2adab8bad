"""Desk-scale experiment presets shared by the acceptance suite and scripts/."""
from __future__ import annotations

from dataclasses import replace

from .era import ChainParams
from .experiment import DataSource, ExperimentSpec
from .grow import GrowthConfig
from .nn import Topology
from .train import TrainConfig

# starting backbone for growth; small enough that four arms fit a single-core budget
DESK_BACKBONE = (8, 8, 8, 8)
# base lr 0.1 collapses width-8 nets on some seeds during the first training stage
DESK_TRAIN = TrainConfig(epochs=40, e1=10, eg=1, e2=10, er=10, base_lr=0.05, phase2_lr=0.01)


def desk_spec(method: str, seed: int, out: str, **overrides) -> ExperimentSpec:
    """Spec on the default shapes task (3000/600, 16x16, 3 classes) with the 5x5 suite."""
    spec = ExperimentSpec(method=method, out=out, seed=seed, dataset=DataSource(),
                          topology=Topology(list(DESK_BACKBONE)), train=replace(DESK_TRAIN, seed=seed),
                          growth=GrowthConfig(), era=ChainParams())
    return replace(spec, **overrides)
