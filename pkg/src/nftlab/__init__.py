"""Negative-aware finetuning of flow-matching models, checked against Gaussian-mixture oracles."""

from .mixture import GaussianMixture, PolicyTriplet, split_by_componentwise_reward
from .nft import EtaSchedule, RlConfig, nft_loss, rl_loop
from .nn import MLP, Adam
from .samplers import SamplerSpec, sample
from .schedule import RF, RectifiedFlow

__version__ = "0.1.0"

__all__ = [
    "GaussianMixture",
    "PolicyTriplet",
    "split_by_componentwise_reward",
    "EtaSchedule",
    "RlConfig",
    "nft_loss",
    "rl_loop",
    "MLP",
    "Adam",
    "SamplerSpec",
    "sample",
    "RF",
    "RectifiedFlow",
]
