"""Group Variance Policy Optimization on enumerable toy tasks.

Exact oracles, weight schemes (SFT, GRPO, DPO, GVPO), a training loop and a
verification harness.  See ``gvpolab.cli`` for the command-line interface.
"""

from .kernels import BACKEND
from .oracle import optimal_policy
from .policy import PolicyParams, flat_policy, init_uniform
from .taskenv import TaskSpec, default_instance, make_bandit, make_sequence_task
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "PolicyParams", "TaskSpec", "TrainConfig", "default_instance", "flat_policy", "init_uniform",
    "make_bandit", "make_sequence_task", "optimal_policy", "train", "__version__",
]
