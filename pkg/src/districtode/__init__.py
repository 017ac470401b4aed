"""Continuous-time forecasting of district indicator panels with a latent neural ODE."""

from .data import IndicatorPanel, TimeScale, load_panel, synthetic_panel, write_panel
from .model import ModelConfig, PovertyModel, batch_loss, loss_and_grad, trajectory
from .odeint import SolverConfig, solve_at
from .train import TrainConfig, fit

__version__ = "0.1.0"
