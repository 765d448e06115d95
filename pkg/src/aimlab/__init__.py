"""Intra-network modulation for balanced multimodal learning, at desk scale."""
from . import autodiff, cli, dap, data, modulator, net, pdm, trainer
from .trainer import ExperimentConfig, evaluate, run_suite, train

__all__ = ["autodiff", "cli", "dap", "data", "modulator", "net", "pdm", "trainer",
           "ExperimentConfig", "evaluate", "run_suite", "train"]
__version__ = "0.1.0"
