"""Hybrid physics/data power-loss estimation for power-electronic thermal twins.

A nominal power-loss model drives a linear thermal reduced-order model; a small
network learns an additive correction of the losses from temperature
measurements only, trained by differentiating through the thermal model.
"""

from .estimator import HybridLossCorrector
from .loss import LossWeights, physics_loss
from .ploss import LossParams, eval_losses
from .rom import (DiscreteRom, NormalizationTransform, NumericalError, ThermalParams,
                  discretize_zoh, normalize, simulate, synthesize_rc_network)
from .train import DivergenceError, TrainConfig

__all__ = [
    "HybridLossCorrector", "LossWeights", "physics_loss", "LossParams", "eval_losses",
    "DiscreteRom", "NormalizationTransform", "NumericalError", "ThermalParams",
    "discretize_zoh", "normalize", "simulate", "synthesize_rc_network",
    "DivergenceError", "TrainConfig",
]
__version__ = "0.1.0"
