"""Forward model for spot images on a pixel grid.

A frame is modeled as a sparse set of point emitters placed on integer
pixel sites, each spread by a separable Gaussian profile of squared
width ``tau2``: an emitter at site (m, n) with amplitude ``alpha``
contributes ``alpha * exp(-(i-m)^2/tau2) * exp(-(j-n)^2/tau2)`` to pixel
(i, j).  Stacking the per-axis profiles as columns of U (M x M) and
V (N x N), a full frame renders as ``U @ A @ V.T`` where A is the M x N
amplitude matrix.

Pixel sites are 1-based, (m, n) in [1, M] x [1, N].  Arrays are stored
0-based row-major; conversion happens only at this module's boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Image:
    """A real-valued 2-D frame.  Pixel values must be finite."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("pixels must be finite")
        object.__setattr__(self, "pixels", arr)

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Psf:
    """Separable Gaussian spread with squared width ``tau2`` (pixels^2)."""

    tau2: float

    def __post_init__(self):
        if not (math.isfinite(self.tau2) and self.tau2 > 0):
            raise ValueError(f"tau2 must be finite and positive, got {self.tau2}")

    @property
    def tau(self) -> float:
        return math.sqrt(self.tau2)


@dataclass(frozen=True)
class AtomMap:
    """Sparse amplitude matrix keyed by 1-based pixel site.

    All stored amplitudes are nonzero and finite; exact zeros are dropped
    at construction so ``nnz`` always equals ``len(entries)``.
    """

    rows: int
    cols: int
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("AtomMap dims must be >= 1")
        clean: dict[tuple[int, int], float] = {}
        for site, alpha in self.entries.items():
            m, n = int(site[0]), int(site[1])
            a = float(alpha)
            if not (1 <= m <= self.rows and 1 <= n <= self.cols):
                raise ValueError(f"site {site} outside [1,{self.rows}]x[1,{self.cols}]")
            if not math.isfinite(a):
                raise ValueError(f"amplitude at {site} is not finite")
            if a == 0.0:
                continue
            clean[(m, n)] = a
        object.__setattr__(self, "entries", clean)

    @classmethod
    def empty(cls, rows: int, cols: int) -> "AtomMap":
        return cls(rows, cols, {})

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "AtomMap":
        dense = np.asarray(dense, dtype=np.float64)
        ms, ns = np.nonzero(dense)
        entries = {(int(m) + 1, int(n) + 1): float(dense[m, n]) for m, n in zip(ms, ns)}
        return cls(dense.shape[0], dense.shape[1], entries)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.rows, self.cols))
        for (m, n), a in self.entries.items():
            dense[m - 1, n - 1] = a
        return dense

    @property
    def nnz(self) -> int:
        return len(self.entries)

    def sites_sorted(self) -> list[tuple[int, int]]:
        """Sites in lexicographic (m, n) order."""
        return sorted(self.entries)

    def items_sorted(self) -> list[tuple[tuple[int, int], float]]:
        return [(s, self.entries[s]) for s in self.sites_sorted()]


@dataclass(frozen=True)
class DesignVectors:
    """Per-axis profile matrices U, V and their cached column norms.

    Column m of U is the axis profile of an emitter at coordinate m+1;
    ``u_norms2[m]`` caches ||u_m||^2 (likewise for V).
    """

    U: np.ndarray
    V: np.ndarray
    tau2: float
    u_norms2: np.ndarray
    v_norms2: np.ndarray

    @property
    def rows(self) -> int:
        return self.U.shape[0]

    @property
    def cols(self) -> int:
        return self.V.shape[0]

    @property
    def tau(self) -> float:
        return math.sqrt(self.tau2)


def build_design(tau2: float, rows: int, cols: int) -> DesignVectors:
    """Build the per-axis Gaussian profile matrices for a rows x cols frame.

    (U)_{i,m} = exp(-(i-m)^2 / tau2) with both indices 1-based, so U and V
    are symmetric with unit diagonal and strictly positive entries.
    """
    if not (math.isfinite(tau2) and tau2 > 0):
        raise ValueError(f"tau2 must be finite and positive, got {tau2}")
    if rows < 1 or cols < 1:
        raise ValueError("design dims must be >= 1")

    def axis(size: int) -> np.ndarray:
        idx = np.arange(size, dtype=np.float64)
        return np.exp(-((idx[:, None] - idx[None, :]) ** 2) / tau2)

    U = axis(rows)
    V = axis(cols)
    return DesignVectors(
        U=U,
        V=V,
        tau2=float(tau2),
        u_norms2=np.sum(U * U, axis=0),
        v_norms2=np.sum(V * V, axis=0),
    )


def render(atoms: AtomMap, design: DesignVectors) -> Image:
    """Render the clean frame U A V^T for a sparse amplitude map."""
    if (atoms.rows, atoms.cols) != (design.rows, design.cols):
        raise ValueError(
            f"atom map dims {(atoms.rows, atoms.cols)} do not match design "
            f"{(design.rows, design.cols)}"
        )
    dense = atoms.to_dense()
    return Image(design.U @ dense @ design.V.T)


def loss(atoms: AtomMap, design: DesignVectors, image: Image) -> float:
    """Squared Frobenius misfit ||Y - U A V^T||_F^2."""
    if (image.rows, image.cols) != (design.rows, design.cols):
        raise ValueError("image dims do not match design")
    resid = image.pixels - render(atoms, design).pixels
    return float(np.sum(resid * resid))


def add_noise(image: Image, sigma2: float, seed: int) -> Image:
    """Add i.i.d. Gaussian pixel noise of variance ``sigma2``.

    The generator is owned per call, so the same (image, sigma2, seed)
    always yields a bit-identical frame.  ``sigma2 = 0`` returns a copy.
    """
    if not (math.isfinite(sigma2) and sigma2 >= 0):
        raise ValueError(f"sigma2 must be finite and >= 0, got {sigma2}")
    if sigma2 == 0.0:
        return Image(image.pixels.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, math.sqrt(sigma2), size=image.pixels.shape)
    return Image(image.pixels + noise)
