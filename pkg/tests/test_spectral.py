"""Spectral stage tests: double-Fourier surface, blob peaks, basis, width.

Plant-and-recover oracles build the surfaces and peak lists by hand, so
the expectations are independent of the detection code. The width plants
use the same Gaussian parameterization the fitter reports, exp(-d^2/w^2),
which corresponds to tau = w / sqrt(2).
"""

import math

import numpy as np
import pytest

from latticefind.errors import EstimationFailure
from latticefind.evaluation import basis_bias
from latticefind.imaging import Image
from latticefind.lattice import LatticeBasis
from latticefind.simgen import SimDesign, make_ground_truth
from latticefind.spectral import (
    Peak,
    Spectrum,
    detect_peaks_doh,
    double_fourier,
    estimate_basis,
    estimate_lattice,
    estimate_tau,
)

TRUTH_BASIS = LatticeBasis((6, 0), (0, 6))


def axis_cosine_frame(n: int = 75, period: float = 6.0) -> Image:
    ax = np.arange(n)
    return Image(
        np.cos(2 * np.pi * ax[None, :] / period)
        + np.cos(2 * np.pi * ax[:, None] / period)
    )


def planted_spectrum(width: float, n: int = 75) -> Spectrum:
    """Signed surface with blobs at DC and the four period-6 axis offsets."""
    c = n // 2
    yy, xx = np.mgrid[0:n, 0:n]
    surf = np.zeros((n, n))
    blobs = [((0, 0), 50.0), ((6, 0), 10.0), ((-6, 0), 10.0), ((0, 6), 10.0), ((0, -6), 10.0)]
    for (dy, dx), amp in blobs:
        r2 = (yy - (c + dy)) ** 2 + (xx - (c + dx)) ** 2
        surf += amp * np.exp(-r2 / (width * width))
    return Spectrum(np.abs(surf), surf)


AXIS_PEAKS = [
    Peak((6.0, 0.0), 1.4, 10.0),
    Peak((-6.0, 0.0), 1.4, 10.0),
    Peak((0.0, 6.0), 1.4, 10.0),
    Peak((0.0, -6.0), 1.4, 10.0),
]


class TestDoubleFourier:
    def test_constant_image_is_silent(self):
        spectrum = double_fourier(Image(np.full((20, 20), 3.7)))
        assert np.max(spectrum.magnitudes) < 1e-9

    def test_centrosymmetry(self):
        rng = np.random.default_rng(11)
        spectrum = double_fourier(Image(rng.normal(size=(40, 40))))
        mags = spectrum.magnitudes
        # centrosymmetric about the fftshift center bin on even dims
        mirrored = np.roll(np.roll(mags[::-1, ::-1], 1, axis=0), 1, axis=1)
        assert np.max(np.abs(mags - mirrored)) < 1e-6 * np.max(mags)

    def test_cyclic_shift_invariance(self):
        gt = make_ground_truth(SimDesign(noise_var=0.0))
        base = double_fourier(gt.clean).magnitudes
        rolled = np.roll(np.roll(gt.clean.pixels, 4, axis=0), 9, axis=1)
        shifted = double_fourier(Image(rolled)).magnitudes
        assert np.max(np.abs(base - shifted)) < 1e-6 * np.max(base)

    def test_too_small_frame(self):
        with pytest.raises(ValueError):
            double_fourier(Image(np.zeros((5, 20))))


class TestDetectPeaks:
    def test_zero_spectrum_has_no_peaks(self):
        assert detect_peaks_doh(Spectrum(np.zeros((40, 40)), None)) == []

    def test_planted_blob_recovered(self):
        # lone Gaussian of width 2 at displacement (0, 10)
        mags = np.zeros((41, 41))
        yy, xx = np.mgrid[0:41, 0:41]
        mags += 5.0 * np.exp(-(((yy - 20) ** 2) + (xx - 30) ** 2) / 2.0**2)
        peaks = detect_peaks_doh(Spectrum(mags, None))
        assert len(peaks) == 1
        assert math.hypot(peaks[0].location[0], peaks[0].location[1] - 10.0) <= 1.0
        assert 2.0 / 1.5 <= peaks[0].scale <= 2.0 * 1.5
        assert peaks[0].strength > 0

    def test_cosine_period_six_dominates(self):
        peaks = detect_peaks_doh(double_fourier(axis_cosine_frame()))
        top4 = sorted(p.location for p in peaks[:4])
        assert top4 == [(-6.0, 0.0), (0.0, -6.0), (0.0, 6.0), (6.0, 0.0)]

    def test_lattice_frame_axis_peaks(self):
        gt = make_ground_truth(SimDesign(noise_var=0.0, vacancy_count=0))
        peaks = detect_peaks_doh(double_fourier(gt.clean))
        wanted = {(6.0, 0.0), (-6.0, 0.0), (0.0, 6.0), (0.0, -6.0)}
        hits = {
            w
            for w in wanted
            for p in peaks
            if math.hypot(p.location[0] - w[0], p.location[1] - w[1]) <= 1.0
        }
        assert hits == wanted

    def test_strongest_non_dc_peaks_are_fundamentals(self):
        gt = make_ground_truth(SimDesign(noise_var=0.0, vacancy_count=0))
        peaks = detect_peaks_doh(double_fourier(gt.clean))
        assert {p.location for p in peaks[:4]} == {
            (6.0, 0.0),
            (-6.0, 0.0),
            (0.0, 6.0),
            (0.0, -6.0),
        }

    def test_peak_symmetry(self):
        gt = make_ground_truth(SimDesign(noise_var=0.05, seed=3))
        peaks = detect_peaks_doh(double_fourier(gt.noisy))
        locations = {p.location for p in peaks}
        truncated = len(peaks) == 18
        for m, n in locations:
            if (-m, -n) not in locations:
                # the strength-sorted truncation may split one mirror pair
                assert truncated

    def test_max_peaks_truncation_and_validation(self):
        spectrum = double_fourier(axis_cosine_frame())
        assert len(detect_peaks_doh(spectrum, max_peaks=2)) == 2
        with pytest.raises(ValueError):
            detect_peaks_doh(spectrum, max_peaks=0)
        with pytest.raises(ValueError):
            detect_peaks_doh(spectrum, scales=(0.0,))
        with pytest.raises(ValueError):
            detect_peaks_doh(spectrum, mad_mult=-1.0)


class TestEstimateBasis:
    def test_shortest_independent_pair(self):
        peaks = [
            Peak((6.0, 0.0), 1.0, 4.0),
            Peak((0.0, 6.0), 1.0, 3.0),
            Peak((6.0, 6.0), 1.0, 2.0),
            Peak((12.0, 0.0), 1.0, 1.5),
        ]
        basis = estimate_basis(peaks)
        assert (basis.p, basis.q) == ((6, 0), (0, 6))

    def test_collinear_peaks_fail(self):
        peaks = [
            Peak((6.0, 0.0), 1.0, 2.0),
            Peak((-6.0, 0.0), 1.0, 1.0),
            Peak((12.0, 0.0), 1.0, 0.5),
        ]
        with pytest.raises(EstimationFailure):
            estimate_basis(peaks)

    def test_too_few_peaks_fail(self):
        with pytest.raises(EstimationFailure):
            estimate_basis([])
        with pytest.raises(EstimationFailure):
            estimate_basis([Peak((6.0, 0.0), 1.0, 1.0)])

    def test_harmonic_pair_reduces_to_fundamentals(self):
        # a missing short peak must not leave q as a diagonal
        peaks = [
            Peak((6.0, 0.0), 1.0, 4.0),
            Peak((6.0, 6.0), 1.0, 2.0),
        ]
        basis = estimate_basis(peaks)
        assert (basis.p, basis.q) == ((6, 0), (0, 6))

    def test_moderate_noise_recovers_exactly(self):
        gt = make_ground_truth(SimDesign(noise_var=0.25, seed=0))
        basis, _, _, _ = estimate_lattice(gt.noisy)
        assert basis_bias(basis, TRUTH_BASIS) == 0.0


class TestEstimateTau:
    @pytest.mark.parametrize("width", [1.5, 2.0, 3.0, 4.0])
    def test_planted_width_recovery(self, width):
        spectrum = planted_spectrum(width)
        tau = estimate_tau(spectrum, AXIS_PEAKS)
        assert tau == pytest.approx(width / math.sqrt(2.0), rel=0.10)

    def test_scale_invariance(self):
        spectrum = planted_spectrum(2.0)
        tau = estimate_tau(spectrum, AXIS_PEAKS)
        scaled = Spectrum(spectrum.magnitudes * 5.0, spectrum.signed * 5.0)
        assert estimate_tau(scaled, AXIS_PEAKS) == pytest.approx(tau, rel=1e-6)

    def test_lattice_frame_accuracy(self):
        gt = make_ground_truth(SimDesign(tau=2.0, noise_var=0.0, vacancy_count=0))
        _, tau, _, _ = estimate_lattice(gt.clean)
        assert tau == pytest.approx(2.0, rel=0.15)

    def test_no_peaks_fails(self):
        with pytest.raises(EstimationFailure):
            estimate_tau(planted_spectrum(2.0), [])


class TestVacancyRobustness:
    def test_basis_survives_heavy_vacancies(self):
        # 24 of 121 sites removed (just under 20%) at noise var 0.25
        ok = 0
        for seed in range(20):
            gt = make_ground_truth(
                SimDesign(vacancy_count=24, noise_var=0.25, seed=seed)
            )
            try:
                basis, _, _, _ = estimate_lattice(gt.noisy)
            except EstimationFailure:
                continue
            ok += basis_bias(basis, TRUTH_BASIS) == 0.0
        assert ok >= 19
