"""Shared exception hierarchy.

The CLI maps ValidationError to exit code 1 and ConvergenceError (or any
other DermfuseError raised mid-run) to exit code 2.
"""


class DermfuseError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DermfuseError):
    """Bad inputs: malformed files, out-of-range parameters, shape mismatches."""


class ConvergenceError(DermfuseError):
    """An iterative solver failed to reach its stopping criterion."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
