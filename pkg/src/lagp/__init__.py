"""Calibrated uncertainty for pre-trained MLPs via linearization kernels.

The package trains (or accepts) a fully connected network at its MAP
point and equips it with Gaussian-process predictive uncertainty: an
exact posterior over the linearized network, a sparse variational
approximation whose mean stays pinned to the network output, a low-rank
anchor baseline, and diagonal/last-layer baselines, plus calibration
metrics and an experiment CLI.
"""

from .kernel import KernelContext
from .lla import GaussianPredictive, LikelihoodModel
from .nn import MlpArchitecture, MlpNetwork, TrainConfig

__all__ = [
    "GaussianPredictive",
    "KernelContext",
    "LikelihoodModel",
    "MlpArchitecture",
    "MlpNetwork",
    "TrainConfig",
]

__version__ = "0.1.0"
