"""Bounded-rational decision-making and mutual-information regularized networks."""
from .core import (
    SolverReport, blahut_arimoto, free_energy_solution, free_energy_value,
    mutual_information, rate_distortion_value,
)
from .network import (
    GRDI, LRDI, UMAX, MeanBank, NetworkParams, OptimizerConfig, RegularizerConfig,
    forward, init_weights, train_epoch,
)

__version__ = "0.1.0"
