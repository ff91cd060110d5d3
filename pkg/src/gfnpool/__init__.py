"""gfnpool: train local GFlowNet samplers on partitioned rewards, exchange
one policy snapshot per client, and train a global sampler of the
(optionally weighted) product of the local targets."""

from . import aggregate, envs, evaluation, losses, nn, policy, train
from .config import RunConfig, apply_overrides, load_config

__all__ = [
    "aggregate",
    "envs",
    "evaluation",
    "losses",
    "nn",
    "policy",
    "train",
    "RunConfig",
    "load_config",
    "apply_overrides",
]

__version__ = "0.1.0"
