"""Exception types shared across the package.

Argument validation raises plain ValueError; the classes here cover the
two failure modes that callers are expected to branch on.
"""

from __future__ import annotations


class EstimationFailure(RuntimeError):
    """Lattice or spot-width estimation could not produce a usable answer.

    Carries the peak list that was available at the point of failure so
    callers can log or dump it for diagnosis.
    """

    def __init__(self, message: str, peaks: list | None = None):
        super().__init__(message)
        self.peaks = list(peaks) if peaks else []


class FileFormatError(ValueError):
    """An input file exists but its contents are not in a supported format."""
