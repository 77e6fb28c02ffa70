"""Split federated LoRA fine-tuning at desk scale.

Submodules: ``autodiff`` (tensors and reverse-mode gradients), ``model`` (toy
transformer with LoRA), ``protocol`` (client/server split training),
``scheduler``, ``cost``, ``aggregation``, ``data`` and the ``cli``.
"""

from .errors import (AggregationError, ConfigError, ContractError, DimensionError, PairingError,
                     ProtocolError, RegistrationError, SizeError, SplitLoraError,
                     SplitMismatchError, ValidationError)
from .scheduler import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "AggregationError", "ConfigError", "ContractError", "DimensionError",
    "PairingError", "ProtocolError", "RegistrationError", "SizeError", "SplitLoraError",
    "SplitMismatchError", "ValidationError",
]
