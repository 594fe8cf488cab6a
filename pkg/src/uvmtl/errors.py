"""Exception types shared across the package.

Everything fails loudly: shape arithmetic is checked at op boundaries and
configuration is validated up front, so silent broadcasting or half-broken
runs never make it into a metrics file.
"""


class UvmtlError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(UvmtlError):
    """Operands have incompatible shapes for the requested op."""


class NotScalar(UvmtlError):
    """backward() was called on a tensor that is not a single element."""


class GraphConsumed(UvmtlError):
    """backward() was called twice on the same graph without a rebuild."""


class IndivisibleSpatialExtent(UvmtlError):
    """A spatial extent is not divisible by the requested tile/window size."""


class InvalidK(UvmtlError):
    """Routed region count k is out of range for the region grid."""


class InvalidConfig(UvmtlError):
    """A configuration value is out of its documented range."""


class LengthMismatch(UvmtlError):
    """A per-task sequence has the wrong number of entries."""


class EmptyList(UvmtlError):
    """An aggregate op received no operands."""


class ConfigMismatch(UvmtlError):
    """A file on disk was produced under an incompatible configuration."""


class NonFiniteLoss(UvmtlError):
    """Training produced a NaN/Inf loss; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
