"""Error taxonomy shared across the package.

Every raise site picks the narrowest class that fits; callers that need
to distinguish bad input from broken invariants can catch accordingly.
"""


class IcarusError(Exception):
    """Base class for all package errors."""


class ShapeError(IcarusError):
    """Operand shapes or dtypes are incompatible. Messages name both sides."""


class ConfigError(IcarusError):
    """A configuration value is invalid or inconsistent."""


class ModeError(IcarusError):
    """A mode selector is outside its allowed set."""


class StateError(IcarusError):
    """Operation is illegal in the object's current lifecycle state."""


class CapacityError(IcarusError):
    """A hard capacity (context window, memory budget) cannot be satisfied."""


class ContractViolationError(IcarusError):
    """An internal invariant was about to be broken.

    These are hard failures on purpose: a gradient routed to a frozen
    tensor or a KV write sourced from the decoder branch must never be
    absorbed silently.
    """
