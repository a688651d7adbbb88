"""Personalized federated diffusion models.

Clients keep a small denoiser for the first ``t0`` diffusion steps and share
only ``t0``-diffused copies of their data; a server trains the shared model
for the remaining steps.  The forward diffusion itself is the privacy
mechanism, and :mod:`pfdm.privacy` accounts for it.
"""

from .denoiser import GaussianMixtureSpec, MLPDenoiser, OracleDenoiser, TrainingConfig
from .diffusion import NoiseSchedule, SampleBatch, make_linear_schedule, sample_ddpm, train_ddpm
from .estimators import PFDM, DiffusionModel, ForwardDiffuser
from .federation import NoisyDatasetMessage, ProtocolError, pfdm_sample, run_federation
from .privacy import PrivacyQuery, PrivacyReport, account

__version__ = "0.1.0"

__all__ = [
    "PFDM",
    "DiffusionModel",
    "ForwardDiffuser",
    "GaussianMixtureSpec",
    "MLPDenoiser",
    "NoiseSchedule",
    "NoisyDatasetMessage",
    "OracleDenoiser",
    "PrivacyQuery",
    "PrivacyReport",
    "ProtocolError",
    "SampleBatch",
    "TrainingConfig",
    "account",
    "make_linear_schedule",
    "pfdm_sample",
    "run_federation",
    "sample_ddpm",
    "train_ddpm",
]
