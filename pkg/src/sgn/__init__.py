"""Symplectic generative networks: Hamiltonian latent flows with leapfrog integration."""
from .core import (
    Constant,
    FreeParticle,
    HarmonicOscillator,
    Pendulum,
    PhaseState,
    Quadratic,
    Rng,
    analytic_grad,
    analytic_value,
    lu_det,
)
from .data import Dataset, gen_gaussian_mixture, gen_two_moons, read_csv, write_csv
from .estimator import SGNEstimator, SymplecticFlow
from .integrator import DivergenceError, FlowConfig, StepTrace, flow, inverse_flow, leapfrog_step
from .model import SgnModel, elbo, exact_log_likelihood, generate, iw_log_likelihood
from .net import MlpParams, SeparableHamiltonianNet, init_mlp, lipschitz_bound, spectral_normalize
from .train import TrainConfig, Trainer, TrainLog, train
from .verify import VerifyReport, run_all

__version__ = "0.1.0"

__all__ = [
    "Constant",
    "FreeParticle",
    "HarmonicOscillator",
    "Pendulum",
    "PhaseState",
    "Quadratic",
    "Rng",
    "analytic_grad",
    "analytic_value",
    "lu_det",
    "Dataset",
    "gen_gaussian_mixture",
    "gen_two_moons",
    "read_csv",
    "write_csv",
    "SGNEstimator",
    "SymplecticFlow",
    "DivergenceError",
    "FlowConfig",
    "StepTrace",
    "flow",
    "inverse_flow",
    "leapfrog_step",
    "SgnModel",
    "elbo",
    "exact_log_likelihood",
    "generate",
    "iw_log_likelihood",
    "MlpParams",
    "SeparableHamiltonianNet",
    "init_mlp",
    "lipschitz_bound",
    "spectral_normalize",
    "TrainConfig",
    "Trainer",
    "TrainLog",
    "train",
    "VerifyReport",
    "run_all",
]
