"""Exception taxonomy shared across the library.

Structural errors signal misuse of an operation (bad indices, mismatched
shapes or grids); they are always programming errors at the call site.
Capacity and integration-quality errors signal runtime conditions that a
driver may want to catch and report.
"""

from __future__ import annotations


class MfhierError(Exception):
    """Base class for all library-specific errors."""


class StructuralError(MfhierError, ValueError):
    """Invalid indices, arities, slot sets, or mismatched time grids."""


class ValidationError(MfhierError, ValueError):
    """A model or study configuration violates its invariants."""


class ConfigError(ValidationError):
    """A configuration file failed to parse or validate.

    The message cites the file and, for semantic errors, the offending key
    path; TOML syntax errors carry the line/column reported by the parser.
    """


class CapacityError(MfhierError, RuntimeError):
    """A requested state space exceeds the configured memory caps."""


class IntegrationQualityError(MfhierError, RuntimeError):
    """An integrator violated a conservation or positivity tolerance.

    Attributes
    ----------
    drift : float
        The measured violation (trace drift or negativity depth).
    """

    def __init__(self, message: str, drift: float = float("nan")):
        super().__init__(message)
        self.drift = drift
