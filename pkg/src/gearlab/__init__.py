"""gearlab: desk-scale growth-plus-robust-augmentation experiments on a numpy autodiff engine."""
from .nn import Network, Topology, build, complexity, flop_estimate, param_count
from .data import Dataset, gen_shapes
from .corrupt import Corruption, default_suite, robust_accuracy
from .era import ChainParams, TransformSet, aug_loss, expand
from .grow import GrowthConfig, osg, m_shot
from .train import Run, TrainConfig, gearnn1, gearnn2, baseline_small, mshot

__version__ = "0.1.0"
