"""Shared-cache transformer serving at desk scale.

A frozen base stack is the only thing that ever writes KV; task
behavior lives in low-rank adapters that read that cache but cannot
touch it. On top sit a block-level cache pool shared across models and
a discrete-event serving simulator that measures what the sharing buys.
"""

from .errors import (CapacityError, ConfigError, ContractViolationError,
                     IcarusError, ModeError, ShapeError, StateError)
from .metrics import Ledger
from .model import (CONVENTIONAL_TARGETS, DECODER_TARGETS, AdapterSet,
                    BaseWeights, KvCacheTensor, ModelConfig, init_base)
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AdapterSet", "BaseWeights", "CapacityError", "ConfigError",
    "ContractViolationError", "CONVENTIONAL_TARGETS", "DECODER_TARGETS",
    "GradTape", "IcarusError", "KvCacheTensor", "Ledger", "ModeError",
    "ModelConfig", "ShapeError", "StateError", "Tensor", "init_base",
    "__version__",
]
