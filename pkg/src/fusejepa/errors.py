"""Exception types raised across the package."""

from __future__ import annotations


class FuseJepaError(Exception):
    """Base class for every rejection raised by fusejepa."""


class ShapeError(FuseJepaError, ValueError):
    """Operand shapes do not conform for the requested op."""


class MaskError(FuseJepaError, ValueError):
    """An attention mask is malformed (e.g. a query row with no allowed key)."""


class ConfigError(FuseJepaError, ValueError):
    """A configuration value violates its documented range or is unknown."""


class ViewError(FuseJepaError, ValueError):
    """No valid crop rectangle was found within the retry budget."""


class CheckpointError(FuseJepaError, ValueError):
    """A checkpoint is unreadable, inconsistent, or incompatible with the model."""


class NonFiniteLossError(FuseJepaError, RuntimeError):
    """Training produced a NaN/Inf loss and was aborted."""

    def __init__(self, step: int, value: float, last_good: str | None = None):
        self.step = step
        self.value = value
        self.last_good = last_good
        where = f"; last good checkpoint at {last_good}" if last_good else ""
        super().__init__(f"Non-finite loss {value!r} at step {step}{where}")
