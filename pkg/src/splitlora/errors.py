"""Exception hierarchy shared by all splitlora modules."""


class SplitLoraError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SplitLoraError, ValueError):
    """An argument or configuration value is out of its allowed range."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(SplitLoraError, RuntimeError):
    """A precondition on call order or argument structure was violated."""


class ProtocolError(ContractError):
    """A protocol actor was driven through an illegal phase transition."""


class SplitMismatchError(ValidationError):
    """An activation does not match the cut index it claims to come from."""


class RegistrationError(SplitLoraError, KeyError):
    """The server has no adapters registered for a client id."""


class PairingError(ValidationError):
    """Client-side and server-side adapter fragments overlap or leave a gap."""


class AggregationError(ValidationError):
    """Adapter sets handed to FedAvg are not structurally identical."""


class SizeError(ValidationError):
    """Problem instance is too large for exhaustive enumeration."""


class ConfigError(ValidationError):
    """Experiment configuration failed validation."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
