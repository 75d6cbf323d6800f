"""Exception hierarchy shared across the package.

The CLI maps these to process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4. Everything else is a plain bug.
"""


class SgdvitError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(SgdvitError):
    """An operation received incompatible tensor shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(SgdvitError):
    """Invalid configuration value or file."""


class DataError(SgdvitError):
    """Missing or malformed input data (sequences, checkpoints, images)."""


class NumericError(SgdvitError):
    """Numerical failure such as a NaN loss during training."""


class StateError(SgdvitError):
    """API misuse: tape/scope lifecycle violations, uninitialized tracker."""
