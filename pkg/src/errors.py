"""
Exception hierarchy for the SuperLoRA project.
Library code raises these; only the command-line entry point maps them to exit codes.
"""

from typing import Optional


class SuperLoraError(Exception):
    """Root of every error raised by this project."""

    exit_code = 1


class InvalidInputError(SuperLoraError, ValueError):
    """Malformed input: wrong shapes, sizes, unknown keys or modes."""

    exit_code = 2


class InfeasibleConfigError(SuperLoraError, ValueError):
    """A well-formed configuration that cannot be realized on the given manifest."""

    exit_code = 3


class NumericalError(SuperLoraError, ArithmeticError):
    """
    Numerical failure: non-convergence, divergence or a failed convergence check.

    Args:
        message (str): Human readable description
        step (int, optional): Training step at which the failure happened
        residual (float, optional): Residual left by an iterative solver
    """

    exit_code = 4

    def __init__(self, message: str, step: Optional[int] = None,
                 residual: Optional[float] = None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class FormatError(InvalidInputError):
    """Bad magic bytes, truncated or otherwise unreadable binary file."""


class VersionError(FormatError):
    """File written by a newer format version than this code understands."""


class ChecksumError(FormatError):
    """CRC32 trailer does not match the file contents."""
