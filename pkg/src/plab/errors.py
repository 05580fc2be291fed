"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class CapabilityError(RuntimeError):
    """Raised when a request exceeds what an oracle can handle (e.g. size guards)."""


class InapplicableError(ValueError):
    """Raised when a bound is evaluated outside its applicability condition."""


class FormatError(ValueError):
    """Raised for malformed on-disk data (IDX files, configs, records)."""
