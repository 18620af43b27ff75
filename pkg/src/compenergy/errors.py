"""Exception hierarchy shared by every module."""


class ProfilerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ProfilerError, ValueError):
    """Invalid model, sensor, oracle, plan or experiment configuration."""


class InputError(ProfilerError, ValueError):
    """Bad token ids or sequence length."""


class AddressingError(ProfilerError, KeyError):
    """Unknown component id or input of the wrong shape for a component."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class BudgetError(ProfilerError):
    """A measurement would exceed the simulated wall-clock budget."""


class MetricError(ProfilerError, ValueError):
    """A metric is undefined for the given inputs (zero energy, zero FLOPs)."""


class FitError(ProfilerError, ValueError):
    """Two-term fit is impossible (rank-deficient design)."""


class EmitError(ProfilerError, OSError):
    """Writing report files failed."""
