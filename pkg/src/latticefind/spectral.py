"""Lattice-basis and spot-width estimation from the image spectrum.

Pipeline:

1. ``double_fourier`` -- magnitude of the 2-D FFT of the FFT power
   spectrum of the mean-subtracted frame, center-shifted.  This is (up to
   scale and reflection) the circular autocorrelation of the frame, so a
   periodic spot pattern produces a centrosymmetric constellation of
   blobs at integer multiples of the lattice vectors, in pixel units.
2. ``detect_peaks_doh`` -- scale-normalized determinant-of-Hessian blob
   detection over a small Gaussian scale space, with an adaptive
   median + 5*MAD response threshold.
3. ``estimate_basis`` -- two shortest non-collinear peak vectors, one
   representative per centrosymmetric pair, rounded to integers and
   canonicalized.
4. ``estimate_tau`` -- Gaussian profile fits around the strongest peaks;
   the autocorrelation of a Gaussian spot of width tau is a Gaussian of
   width sqrt(2)*tau, so the fitted width is divided by sqrt(2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize

from .errors import EstimationFailure
from .imaging import Image
from .lattice import LatticeBasis

DEFAULT_SCALES = (1.0, 1.4, 2.0, 2.8, 4.0)
# 18 keeps both fundamentals in frame even when clustered vacancies damp
# one axis and its harmonics outrank it in DoH strength
DEFAULT_MAX_PEAKS = 18
DC_EXCLUSION_RADIUS = 2.0
MAD_MULTIPLIER = 5.0


@dataclass(frozen=True)
class Spectrum:
    """Center-shifted double-Fourier magnitude of a frame.

    ``center`` is the 0-based array index of the zero-displacement bin;
    displacement (dm, dn) lives at array index (center[0]+dm, center[1]+dn).
    ``signed`` keeps the real part of the outer transform (the inner power
    spectrum is real, so its transform is too, up to roundoff); mean removal
    makes its inter-blob floor negative, and the magnitude surface folds
    that floor upward.  Width fits prefer the signed surface when present.
    """

    magnitudes: np.ndarray
    signed: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def cols(self) -> int:
        return self.magnitudes.shape[1]

    @property
    def center(self) -> tuple[int, int]:
        return (self.rows // 2, self.cols // 2)


@dataclass(frozen=True)
class Peak:
    """A blob in the spectrum at displacement ``location`` from center."""

    location: tuple[float, float]
    scale: float
    strength: float


def double_fourier(image: Image) -> Spectrum:
    """|FFT2(|FFT2(Y - mean)|^2)|, shifted so zero displacement is central.

    Mean subtraction suppresses the DC pedestal.  The result is
    centrosymmetric about the center bin because the inner power spectrum
    is real.  Frames smaller than 8 x 8 carry too few periods to resolve.
    """
    if image.rows < 8 or image.cols < 8:
        raise ValueError(f"frame too small for spectral analysis: {image.rows}x{image.cols}")
    centered = image.pixels - image.pixels.mean()
    power = np.abs(np.fft.fft2(centered)) ** 2
    outer = np.fft.fft2(power)
    return Spectrum(np.fft.fftshift(np.abs(outer)), np.fft.fftshift(outer.real))


def detect_peaks_doh(
    spectrum: Spectrum,
    scales: tuple = DEFAULT_SCALES,
    max_peaks: int = DEFAULT_MAX_PEAKS,
    mad_mult: float = MAD_MULTIPLIER,
) -> list[Peak]:
    """Blob peaks of the spectrum by determinant-of-Hessian scale space.

    Responses are sigma^4 * det(Hessian of the sigma-smoothed spectrum);
    a peak is a strict 3x3x3 local maximum in (row, col, scale) above
    median + mad_mult * MAD of the windowed response stack, with a
    negative smoothed Laplacian (bright blobs only).  The search is
    limited to a central box of half-width min(rows, cols)//3 and
    excludes a 2-pixel radius around the DC bin.  Output is sorted by
    descending strength (location lexicographic on ties) and truncated
    to ``max_peaks``.
    """
    if max_peaks < 1:
        raise ValueError("max_peaks must be >= 1")
    if not (math.isfinite(mad_mult) and mad_mult >= 0):
        raise ValueError(f"mad_mult must be >= 0, got {mad_mult}")
    scales = tuple(float(s) for s in scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be positive")

    S = spectrum.magnitudes
    rows, cols = S.shape
    cm, cn = spectrum.center

    stack = np.empty((len(scales), rows, cols))
    laplacian = np.empty((len(scales), rows, cols))
    for k, sigma in enumerate(scales):
        lxx = ndimage.gaussian_filter(S, sigma, order=(2, 0))
        lyy = ndimage.gaussian_filter(S, sigma, order=(0, 2))
        lxy = ndimage.gaussian_filter(S, sigma, order=(1, 1))
        stack[k] = sigma**4 * (lxx * lyy - lxy * lxy)
        laplacian[k] = lxx + lyy

    half = min(rows, cols) // 3
    mgrid, ngrid = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    dm = mgrid - cm
    dn = ngrid - cn
    window = (np.abs(dm) <= half) & (np.abs(dn) <= half)
    window &= dm * dm + dn * dn > DC_EXCLUSION_RADIUS**2

    windowed = stack[:, window]
    med = float(np.median(windowed))
    mad = float(np.median(np.abs(windowed - med)))
    threshold = med + mad_mult * mad

    local_max = stack == ndimage.maximum_filter(stack, size=3, mode="nearest")
    # det(H) > 0 alone also fires on dark blobs (local minima of the folded
    # magnitude surface, e.g. between lattice spots); a bright blob needs a
    # negative smoothed Laplacian as well.  When the signed surface is
    # available, a genuine lattice blob must also be a positive correlation
    # there: half-period anti-correlation minima fold into magnitude peaks
    # just as tall as the real ones.
    candidates = (
        local_max & (stack > threshold) & (stack > 0) & (laplacian < 0) & window[None, :, :]
    )
    if spectrum.signed is not None:
        candidates &= (spectrum.signed > 0)[None, :, :]

    ks, ms, ns = np.nonzero(candidates)
    peaks = [
        Peak(
            location=(float(m - cm), float(n - cn)),
            scale=scales[k],
            strength=float(stack[k, m, n]),
        )
        for k, m, n in zip(ks, ms, ns)
    ]
    peaks.sort(key=lambda pk: (-pk.strength, pk.location))
    return peaks[:max_peaks]


def _halfplane(vec: tuple[int, int]) -> tuple[int, int]:
    # Representative of {v, -v} with positive leading nonzero component.
    if vec[0] < 0 or (vec[0] == 0 and vec[1] < 0):
        return (-vec[0], -vec[1])
    return vec


def estimate_basis(peaks: list) -> LatticeBasis:
    """Two shortest non-collinear integer peak vectors, canonicalized.

    Peaks are rounded to integer displacements and merged across
    centrosymmetric pairs (strongest representative kept).  The second
    vector must make |det| >= 0.25 * ||p|| * ||candidate|| with the first,
    which rejects near-collinear harmonics of p.  Raises
    EstimationFailure (carrying the peak list) when no valid pair exists.
    """
    merged: dict[tuple[int, int], float] = {}
    for pk in peaks:
        vec = _halfplane((round(pk.location[0]), round(pk.location[1])))
        if vec == (0, 0):
            continue
        merged[vec] = max(merged.get(vec, 0.0), pk.strength)
    if len(merged) < 2:
        raise EstimationFailure(
            f"need at least two distinct off-center peaks, found {len(merged)}", peaks
        )

    def angle(vec: tuple[int, int]) -> float:
        return math.atan2(vec[1], vec[0]) % math.pi

    cands = sorted(merged, key=lambda v: (v[0] * v[0] + v[1] * v[1], angle(v), v))
    p = cands[0]
    pnorm = math.hypot(*p)
    for cand in cands[1:]:
        det = p[0] * cand[1] - p[1] * cand[0]
        if abs(det) >= 0.25 * pnorm * math.hypot(*cand):
            return LatticeBasis(*_gauss_reduce(p, cand)).canonical()
    raise EstimationFailure(f"all candidate vectors near-collinear with {p}", peaks)


def _gauss_reduce(p: tuple[int, int], q: tuple[int, int]) -> tuple:
    # Lagrange reduction to the two shortest generators of the same lattice;
    # guards against a missing short peak making q a diagonal like p + q'.
    while True:
        if p[0] ** 2 + p[1] ** 2 > q[0] ** 2 + q[1] ** 2:
            p, q = q, p
        t = round((p[0] * q[0] + p[1] * q[1]) / (p[0] ** 2 + p[1] ** 2))
        if t == 0:
            return p, q
        q = (q[0] - t * p[0], q[1] - t * p[1])


_WIDTH_GRID = np.linspace(0.5, 7.0, 66)


def _fit_blob_width(
    mm: np.ndarray,
    nn: np.ndarray,
    values: np.ndarray,
    m0: float,
    n0: float,
    neighbors: list,
) -> float | None:
    """Shared Gaussian width of the blob at (m0, n0) in a crowded patch.

    On a dense lattice the blobs overlap and ride a negative pedestal
    (mean removal), so a lone-Gaussian fit is biased.  The patch is
    modeled as the central Gaussian plus equal-width Gaussians at the
    other detected blob centers, each with its own free amplitude, over a
    free pedestal.  The width is scanned on a grid with the linear
    parameters solved exactly (variable projection), then polished with a
    full nonlinear fit that also frees the central position.  Returns the
    fitted shared width, or None when the fit fails.
    """
    if values.size < 10 or not np.any(values != values[0]):
        return None
    t_m = np.array([t[0] for t in neighbors], dtype=np.float64)
    t_n = np.array([t[1] for t in neighbors], dtype=np.float64)

    def columns(w: float, dm: float = 0.0, dn: float = 0.0) -> np.ndarray:
        own = np.exp(-(((mm - m0 - dm) ** 2) + (nn - n0 - dn) ** 2) / (w * w))
        cols = [own]
        for rm, rn in zip(t_m, t_n):
            cols.append(
                np.exp(-(((mm - m0 - dm - rm) ** 2) + (nn - n0 - dn - rn) ** 2) / (w * w))
            )
        cols.append(np.ones_like(own))
        return np.stack(cols, axis=1)

    best_w, best_cost, best_coef = None, np.inf, None
    for w in _WIDTH_GRID:
        design = columns(float(w))
        coef, *_ = np.linalg.lstsq(design, values, rcond=None)
        cost = float(np.sum((design @ coef - values) ** 2))
        if cost < best_cost:
            best_w, best_cost, best_coef = float(w), cost, coef
    if best_w is None:
        return None

    nb = len(neighbors)

    def model(_, *params):
        dm, dn, w = params[:3]
        amps = np.asarray(params[3 : 3 + 1 + nb])
        b = params[3 + 1 + nb]
        design = columns(w, dm, dn)
        return design[:, :-1] @ amps + b

    p0 = [0.0, 0.0, best_w] + [float(a) for a in best_coef[: 1 + nb]] + [float(best_coef[-1])]
    lb = [-2.0, -2.0, 0.3] + [-np.inf] * (1 + nb) + [-np.inf]
    ub = [2.0, 2.0, 8.0] + [np.inf] * (1 + nb) + [np.inf]
    try:
        popt, _ = optimize.curve_fit(
            model, None, values, p0=p0, bounds=(lb, ub), maxfev=20000
        )
    except (RuntimeError, ValueError):
        return best_w
    return float(popt[2])


def estimate_tau(spectrum: Spectrum, peaks: list) -> float:
    """Spot width from Gaussian fits around the strongest spectrum peaks.

    Around each of the top five peaks, an axis-aligned Gaussian profile is
    least-squares fitted inside a (2r+1)^2 window with r = 3 * (median
    peak scale).  The fit models the other detected peaks (and the
    zero-displacement blob) that reach into the window as equal-width
    Gaussians with free amplitudes over a free pedestal, since on a dense
    lattice the neighboring blobs' tails are not negligible anywhere in
    the window.  Returns median fitted width / sqrt(2); invariant under
    positive rescaling of the spectrum.
    """
    if not peaks:
        raise EstimationFailure("no peaks available for width estimation", peaks)
    S = spectrum.signed if spectrum.signed is not None else spectrum.magnitudes
    cm, cn = spectrum.center

    med_scale = float(np.median([pk.scale for pk in peaks]))
    r = max(2, int(round(3.0 * med_scale)))
    centers = [(0.0, 0.0)] + [pk.location for pk in peaks]

    widths = []
    for pk in peaks[:5]:
        om, on = pk.location
        pm = cm + int(round(om))
        pn = cn + int(round(on))
        lo_m, hi_m = max(0, pm - r), min(S.shape[0], pm + r + 1)
        lo_n, hi_n = max(0, pn - r), min(S.shape[1], pn + r + 1)
        patch = S[lo_m:hi_m, lo_n:hi_n].astype(np.float64)
        if patch.size < 9:
            continue
        m0, n0 = float(pm - lo_m), float(pn - lo_n)
        mm, nn = np.meshgrid(
            np.arange(patch.shape[0], dtype=np.float64),
            np.arange(patch.shape[1], dtype=np.float64),
            indexing="ij",
        )
        # Any blob whose center lies within r + 8 px can leak tails into
        # the window; model it instead of masking it out.
        neighbors = [
            (qm - om, qn - on)
            for (qm, qn) in centers
            if 0.5 < math.hypot(qm - om, qn - on) <= r + 8.0
        ]
        w = _fit_blob_width(mm.ravel(), nn.ravel(), patch.ravel(), m0, n0, neighbors)
        if w is not None and w > 0:
            widths.append(w)
    if not widths:
        raise EstimationFailure("no usable Gaussian fit around any peak", peaks)
    return float(np.median(widths)) / math.sqrt(2.0)


def estimate_lattice(
    image: Image,
    scales: tuple = DEFAULT_SCALES,
    max_peaks: int = DEFAULT_MAX_PEAKS,
    mad_mult: float = MAD_MULTIPLIER,
):
    """Convenience wrapper: spectrum, peaks, basis, and tau for a frame.

    Returns (basis, tau, peaks, spectrum).
    """
    spectrum = double_fourier(image)
    peaks = detect_peaks_doh(spectrum, scales=scales, max_peaks=max_peaks, mad_mult=mad_mult)
    basis = estimate_basis(peaks)
    tau = estimate_tau(spectrum, peaks)
    return basis, tau, peaks, spectrum
