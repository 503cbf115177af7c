"""Lattice, atom, and vacancy detection in noisy 2-D spot images.

The package models an image as a sparse grid of Gaussian spots sitting on
a periodic lattice, estimates the lattice basis and spot width from the
image spectrum, and recovers the occupied sites with a group-sparse
pursuit solver followed by projection-gap thresholding.
"""

__version__ = "0.1.0"

from .errors import EstimationFailure, FileFormatError
from .imaging import AtomMap, DesignVectors, Image, Psf, add_noise, build_design, loss, render
from .lattice import (
    GroupCatalog,
    LatticeBasis,
    LatticeGroup,
    enumerate_groups,
    reduce_offset,
    sparsity_cost,
    stopping_constant,
)
from .solver import (
    DetectionResult,
    SolverConfig,
    gomp_thresholding,
    restricted_least_squares,
)
from .spectral import Peak, Spectrum, detect_peaks_doh, double_fourier, estimate_basis, estimate_tau

__all__ = [
    "AtomMap",
    "DesignVectors",
    "DetectionResult",
    "EstimationFailure",
    "FileFormatError",
    "GroupCatalog",
    "Image",
    "LatticeBasis",
    "LatticeGroup",
    "Peak",
    "Psf",
    "SolverConfig",
    "Spectrum",
    "add_noise",
    "build_design",
    "detect_peaks_doh",
    "double_fourier",
    "enumerate_groups",
    "estimate_basis",
    "estimate_tau",
    "gomp_thresholding",
    "loss",
    "reduce_offset",
    "render",
    "restricted_least_squares",
    "sparsity_cost",
    "stopping_constant",
    "__version__",
]
