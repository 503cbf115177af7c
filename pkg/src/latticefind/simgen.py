"""Synthetic benchmark frames: a square spot lattice with planted vacancies.

The default design places an 11 x 11 grid of unit-amplitude spots with
basis p=(6,0), q=(0,6) starting at pixel (5,5) on a 75 x 75 frame,
normalizes the clean render to [0, 1], and adds i.i.d. Gaussian noise.
Vacancies are removed from the grid either uniformly at random or from
one of four fixed cluster geometries.  All randomness is derived from
integer seeds via SeedSequence, so every artifact is reproducible from
(master seed, design index, replicate index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import AtomMap, Image, add_noise, build_design, render
from .lattice import LatticeBasis

NOISE_GRID = (0.05, 0.10, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95)
VACANCY_COUNTS = (5, 10, 15, 20, 25)
VACANCY_MODES = ("uniform", "mode1", "mode2", "mode3", "mode4")


@dataclass(frozen=True)
class SimDesign:
    """One cell of the benchmark grid."""

    rows: int = 75
    cols: int = 75
    basis: LatticeBasis = field(default_factory=lambda: LatticeBasis((6, 0), (0, 6)))
    origin: tuple[int, int] = (5, 5)
    extent: tuple[int, int] = (11, 11)
    # Spot width tuned once so the rendered default frame has pixel
    # variance ~= 0.075 after [0, 1] normalization.
    tau: float = 2.45
    vacancy_count: int = 5
    vacancy_mode: str = "uniform"
    noise_var: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("frame dims must be >= 1")
        if self.extent[0] < 1 or self.extent[1] < 1:
            raise ValueError("grid extent must be >= 1 in both directions")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.vacancy_mode not in VACANCY_MODES:
            raise ValueError(f"unknown vacancy mode {self.vacancy_mode!r}")
        n_sites = self.extent[0] * self.extent[1]
        if not (0 <= self.vacancy_count < n_sites):
            raise ValueError(f"vacancy_count must be in [0, {n_sites}), got {self.vacancy_count}")
        if not (math.isfinite(self.noise_var) and self.noise_var >= 0):
            raise ValueError(f"noise_var must be >= 0, got {self.noise_var}")
        for i, j in self.grid_sites():
            if not (1 <= i <= self.rows and 1 <= j <= self.cols):
                raise ValueError(f"lattice site {(i, j)} falls outside the frame")

    def grid_sites(self) -> list[tuple[int, int]]:
        """All extent[0] x extent[1] lattice pixel sites, row-major grid order."""
        p, q = self.basis.p, self.basis.q
        return [
            (
                self.origin[0] + zi * p[0] + zj * q[0],
                self.origin[1] + zi * p[1] + zj * q[1],
            )
            for zi in range(self.extent[0])
            for zj in range(self.extent[1])
        ]


@dataclass(frozen=True)
class GroundTruth:
    design: SimDesign
    atoms: AtomMap  # occupied sites at the post-normalization amplitude
    vacancies: tuple  # removed sites, lex-sorted
    lattice_sites: tuple  # occupied + vacant, grid order
    clean: Image
    noisy: Image
    signal_variance: float


def derive_seed(*parts: int) -> int:
    """Collapse an integer tuple into one 64-bit stream seed."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def vacancy_sites(
    mode: str, count: int, all_sites: list, seed: int
) -> list[tuple[int, int]]:
    """Choose `count` vacancy sites from a row-major square grid of sites.

    ``uniform`` samples without replacement from the whole grid; the
    cluster modes sample from a fixed sub-region of the s x s grid
    (s = sqrt(len(all_sites))):

    - mode1: bottom-right block of ceil(s/2) x ceil(s/2) sites
    - mode2: central block of the same size
    - mode3: leftmost 3 grid columns
    - mode4: main-diagonal band of half-width 1 (3 sites wide)
    """
    if mode not in VACANCY_MODES:
        raise ValueError(f"unknown vacancy mode {mode!r}")
    n = len(all_sites)
    if not (0 <= count <= n):
        raise ValueError(f"count must be in [0, {n}], got {count}")
    if count == 0:
        return []

    if mode == "uniform":
        eligible = list(range(n))
    else:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError("cluster vacancy modes need a square site grid")
        block = (side + 1) // 2
        eligible = []
        for k in range(n):
            i, j = divmod(k, side)
            if mode == "mode1":
                ok = i >= side - block and j >= side - block
            elif mode == "mode2":
                start = (side - block) // 2
                ok = start <= i < start + block and start <= j < start + block
            elif mode == "mode3":
                ok = j < min(3, side)
            else:  # mode4
                ok = abs(i - j) <= 1
            if ok:
                eligible.append(k)
    if count > len(eligible):
        raise ValueError(
            f"mode {mode!r} offers {len(eligible)} eligible sites, cannot remove {count}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=count, replace=False)
    picked = [all_sites[eligible[int(k)]] for k in chosen]
    return sorted(picked)


def make_ground_truth(design: SimDesign) -> GroundTruth:
    """Render one replicate: plant spots, remove vacancies, normalize, add noise.

    The clean frame is affinely mapped to [0, 1] (its empirical pixel
    variance is recorded as ``signal_variance``); noise is added after
    normalization.  Vacancy choice and noise use separate streams derived
    from the design seed.
    """
    sites = design.grid_sites()
    vacancies = vacancy_sites(
        design.vacancy_mode, design.vacancy_count, sites, seed=derive_seed(design.seed, 1)
    )
    vacant = set(vacancies)
    occupied = [s for s in sites if s not in vacant]

    unit_map = AtomMap(design.rows, design.cols, {s: 1.0 for s in occupied})
    dsn = build_design(design.tau**2, design.rows, design.cols)
    raw = render(unit_map, dsn).pixels
    vmin, vmax = float(raw.min()), float(raw.max())
    if vmax <= vmin:
        raise ValueError("degenerate render: constant frame")
    scale = 1.0 / (vmax - vmin)
    clean = Image((raw - vmin) * scale)

    atoms = AtomMap(design.rows, design.cols, {s: scale for s in occupied})
    noisy = add_noise(clean, design.noise_var, seed=derive_seed(design.seed, 2))
    return GroundTruth(
        design=design,
        atoms=atoms,
        vacancies=tuple(vacancies),
        lattice_sites=tuple(sites),
        clean=clean,
        noisy=noisy,
        signal_variance=float(np.var(clean.pixels)),
    )


def snr_db(signal_var: float, noise_var: float) -> float:
    """10*log10(signal variance) - 10*log10(noise variance)."""
    if signal_var <= 0 or noise_var <= 0:
        raise ValueError("variances must be positive")
    return 10.0 * math.log10(signal_var) - 10.0 * math.log10(noise_var)
