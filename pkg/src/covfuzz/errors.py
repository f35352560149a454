"""Exception taxonomy shared across the package.

CLI exit-code mapping: ArgumentError -> 2, data-integrity errors -> 3,
numeric/training errors -> 4.
"""


class CovfuzzError(Exception):
    """Base class for all package errors."""


class ArgumentError(CovfuzzError):
    """Invalid argument, parameter out of range, or shape mismatch."""


class FormatError(CovfuzzError):
    """Malformed on-disk artifact (bad magic, version, or header)."""


class CorruptModelError(CovfuzzError):
    """Model file is structurally valid but internally inconsistent."""


class IntegrityError(CovfuzzError):
    """Dataset or journal artifacts are incomplete or inconsistent."""


class PairingError(IntegrityError):
    """A clean image has no adversarial counterpart."""


class OrchestrationError(IntegrityError):
    """A pipeline step ran before its required artifacts exist."""


class NumericError(CovfuzzError):
    """Non-finite values encountered during inference or evaluation."""


class TrainingError(CovfuzzError):
    """Training diverged or produced non-finite loss."""
