# Test FMCW range profiles and array spatial spectra

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

import logging
import math
import time

import numpy as np
import pytest

from rfit.errors import OutOfRangeError, ParameterError, RfitError, ShapeMismatchError
from rfit.geometry import Mesh, Scene, SceneParams
from rfit.radar import (MUSIC_FLOOR, AngleGrid, ArrayGeometry, RadarConfig,
                        SurrogateConfig, Taps, airy_pattern, airy_spatial_surrogate,
                        arrival_angles, beamform_spectrum, covariance_eigen, exact_profile,
                        if_signal, music_spectrum, range_angle_map, range_profile_exact,
                        range_profile_surrogate, snapshots_from_scene, spectrum_peaks,
                        steering_matrix, steering_vector)
from rfit.tracer import trace_paths

from conftest import BANDWIDTH, CHIRP, F0

WAVELENGTH = 299792458.0 / F0


def _ura(side=4):
    """Square array at half-wavelength spacing"""
    offsets = (np.arange(side) - (side - 1) / 2.0) * WAVELENGTH / 2.0
    xx, yy = np.meshgrid(offsets, offsets, indexing="ij")
    return ArrayGeometry(np.column_stack([xx.ravel(), yy.ravel()]), WAVELENGTH)


def _ula(size=8):
    """Line array along x at half-wavelength spacing"""
    x = (np.arange(size) - (size - 1) / 2.0) * WAVELENGTH / 2.0
    return ArrayGeometry(np.column_stack([x, np.zeros(size)]), WAVELENGTH)


def _grid():
    return AngleGrid(np.linspace(-1.5, 1.5, 31), np.linspace(0.0, 1.5, 16))


def test_carrier_must_exceed_bandwidth():
    """A carrier no larger than the bandwidth is rejected"""
    with pytest.raises(ParameterError) as info:
        RadarConfig(1e9, 4e9, CHIRP, 256)
    assert info.value.name == "f0"
    with pytest.raises(ParameterError):
        RadarConfig(F0, BANDWIDTH, CHIRP, 256, window="blackman")


def test_bin_count_defaults_to_samples():
    """Without a bin count every DFT bin is kept"""
    assert RadarConfig(F0, BANDWIDTH, CHIRP, 64).n_bins == 64


def test_if_signal_phase(radar):
    """A unit tap gives a unit-modulus IF signal with the de-chirped phase"""
    tau = 12.5 / BANDWIDTH
    signal = if_signal([(tau, 1.0)], radar)
    np.testing.assert_allclose(np.abs(signal), 1.0, rtol=1e-12)
    t = radar.sample_times
    expected = np.exp(2j * np.pi * (BANDWIDTH / CHIRP * tau * t + F0 * tau - BANDWIDTH / (2 * CHIRP) * tau ** 2))
    np.testing.assert_allclose(signal, expected, atol=1e-9)


def test_identical_taps_add(radar):
    """Two identical taps give exactly twice the response of one"""
    tap = (20.0 / BANDWIDTH, 0.3 + 0.1j)
    single = if_signal([tap], radar)
    double = if_signal([tap, tap], radar)
    np.testing.assert_array_equal(double, 2 * single)
    np.testing.assert_allclose(range_profile_exact(double, radar).values,
                               2 * range_profile_exact(single, radar).values, rtol=1e-14)


def test_delay_beyond_chirp(radar):
    """Taps at or beyond the chirp duration are out of range"""
    with pytest.raises(OutOfRangeError):
        if_signal([(CHIRP, 1.0)], radar)


def test_zero_signal_gives_zero_profile(radar):
    """The profile of silence is zero in every bin"""
    profile = range_profile_exact(np.zeros(radar.n_samples), radar)
    np.testing.assert_array_equal(profile.values, 0)
    assert len(profile) == 128
    assert profile.delays[1] == pytest.approx(1.0 / BANDWIDTH)


def test_profile_length_is_checked(radar):
    """The IF signal must have one value per sample"""
    with pytest.raises(ShapeMismatchError):
        range_profile_exact(np.zeros(100), radar)


def test_peak_in_expected_bin(radar):
    """A tap at delay 40/B peaks in bin 40"""
    profile = exact_profile([(40.0 / BANDWIDTH, 1.0)], radar)
    assert int(np.argmax(np.abs(profile.values))) == 40


def _sidelobes(config, offsets):
    reference = abs(exact_profile([(40.0 / BANDWIDTH, 1.0)], config).values[40])
    levels = [abs(exact_profile([((40.0 + d) / BANDWIDTH, 1.0)], config).values[40]) for d in offsets]
    return 20 * np.log10(np.max(levels) / reference)


def test_rectangular_window_sidelobes():
    """The unwindowed profile has the sinc sidelobe level near -13 dB"""
    config = RadarConfig(F0, BANDWIDTH, CHIRP, 256, window="rect", n_bins=128)
    level = _sidelobes(config, np.arange(1.1, 6.0, 0.01))
    assert -14.0 < level < -12.5


def test_hamming_window_sidelobes(radar):
    """The Hamming window keeps sidelobes below -40 dB"""
    assert _sidelobes(radar, np.arange(2.1, 6.0, 0.01)) < -40.0


def test_exact_partials_match_finite_differences(radar):
    """Closed-form tap partials of the exact profile agree with central differences"""
    tau, alpha, phi = 33.7 / BANDWIDTH, 0.7, 1.1
    profile = exact_profile(Taps([tau], [alpha], [phi]), radar, with_partials=True)
    h = 1e-16
    fd = (exact_profile(Taps([tau + h], [alpha], [phi]), radar).values
          - exact_profile(Taps([tau - h], [alpha], [phi]), radar).values) / (2 * h)
    analytic = profile.partials.d_tau[0]
    assert np.max(np.abs(fd - analytic)) < 1e-6 * np.max(np.abs(analytic))
    np.testing.assert_allclose(profile.partials.d_phi[0], 1j * profile.values, atol=1e-9)


def test_surrogate_peaks_at_delay(radar):
    """The surrogate profile peaks at the tap's bin"""
    surrogate = SurrogateConfig.for_radar(radar)
    profile = range_profile_surrogate(Taps([40.2 / BANDWIDTH], [1.0], [0.0]), radar, surrogate)
    assert int(np.argmax(np.abs(profile.values))) == 40
    assert profile.provenance == "surrogate"


def test_surrogate_derivative(radar):
    """The surrogate tau derivative agrees with central differences"""
    surrogate = SurrogateConfig.for_radar(radar)
    tau, alpha, phi = 40.3 / BANDWIDTH, 0.8, 0.4
    profile = range_profile_surrogate(Taps([tau], [alpha], [phi]), radar, surrogate)
    h = surrogate.sigma * 1e-4
    fd = (range_profile_surrogate(Taps([tau + h], [alpha], [phi]), radar, surrogate).values
          - range_profile_surrogate(Taps([tau - h], [alpha], [phi]), radar, surrogate).values) / (2 * h)
    analytic = profile.partials.d_tau[0]
    assert np.max(np.abs(fd - analytic)) < 1e-6 * np.max(np.abs(analytic))
    np.testing.assert_allclose(profile.partials.d_phi[0], 1j * profile.values)


def test_surrogate_is_linear_in_taps(radar):
    """The surrogate of a union of taps is the sum of the surrogates"""
    surrogate = SurrogateConfig.for_radar(radar)
    a = Taps([10.0 / BANDWIDTH, 50.5 / BANDWIDTH], [0.4, 0.2], [0.3, 2.0])
    b = Taps([31.2 / BANDWIDTH], [0.9], [5.0])
    both = range_profile_surrogate(a + b, radar, surrogate).values
    apart = range_profile_surrogate(a, radar, surrogate).values + range_profile_surrogate(b, radar, surrogate).values
    np.testing.assert_allclose(both, apart, atol=1e-15)


def _strong_peaks(values):
    magnitude = np.abs(values)
    inner = magnitude[1:-1]
    peaks = (inner > magnitude[:-2]) & (inner >= magnitude[2:]) & (inner > 0.5 * magnitude.max())
    return int(np.count_nonzero(peaks))


@pytest.mark.parametrize("separation, expected", [(2.0, 2), (0.25, 1)])
def test_range_resolution(separation, expected):
    """Taps two bins apart give two peaks; a quarter of a bin apart they merge"""
    config = RadarConfig(F0, BANDWIDTH, CHIRP, 256, window="rect", n_bins=128)
    first, second = 40.0 / BANDWIDTH, (40.0 + separation) / BANDWIDTH
    a = exact_profile(Taps([first], [1.0], [0.0]), config).values[40]
    b = exact_profile(Taps([second], [1.0], [0.0]), config).values[40]
    phase = float(np.angle(a) - np.angle(b))
    profile = exact_profile(Taps([first, second], [1.0, 1.0], [0.0, phase]), config)
    assert _strong_peaks(profile.values) == expected


def test_surrogate_partials_over_random_taps(radar):
    """All three tap partials of the surrogate agree with central differences for a thousand taps"""
    surrogate = SurrogateConfig.for_radar(radar)
    rng = np.random.default_rng(17)
    steps = {"tau": surrogate.sigma * 1e-4, "alpha": 1e-6, "phi": 1e-6}
    start = time.perf_counter()
    for tau, alpha, phi in zip(rng.uniform(5, 120, 1000) / BANDWIDTH, rng.uniform(0.1, 2.0, 1000),
                               rng.uniform(0, 2 * np.pi, 1000)):
        tap = {"tau": tau, "alpha": alpha, "phi": phi}
        partials = range_profile_surrogate(Taps([tau], [alpha], [phi]), radar, surrogate).partials
        for name, h in steps.items():
            up, down = dict(tap), dict(tap)
            up[name] += h
            down[name] -= h
            fd = (range_profile_surrogate(Taps([up["tau"]], [up["alpha"]], [up["phi"]]), radar, surrogate).values
                  - range_profile_surrogate(Taps([down["tau"]], [down["alpha"]], [down["phi"]]), radar,
                                            surrogate).values) / (2 * h)
            analytic = getattr(partials, f"d_{name}")[0]
            assert np.max(np.abs(fd - analytic)) < 1e-6 * np.max(np.abs(analytic)), name
    assert time.perf_counter() - start < 5.0


def test_narrow_surrogate_warns(radar, caplog):
    """A pulse far narrower than a bin is reported"""
    with caplog.at_level(logging.WARNING, logger="rfit.radar"):
        range_profile_surrogate(Taps([1e-8], [1.0], [0.0]), radar, SurrogateConfig(sigma=0.05 / BANDWIDTH))
    assert "tenth of a range bin" in caplog.text


def test_taps_from_cir():
    """Complex CIR taps are split into magnitude and a phase in [0, 2 pi)"""
    taps = Taps.from_cir([(1e-8, -0.5j)])
    assert taps.alpha[0] == pytest.approx(0.5)
    assert taps.phi[0] == pytest.approx(1.5 * math.pi)
    with pytest.raises(ShapeMismatchError):
        Taps([1e-8, 2e-8], [1.0], [0.0])


def test_steering_vectors():
    """Broadside steering is all ones and the matrix agrees with single vectors"""
    array = _ura()
    np.testing.assert_allclose(steering_vector(array, 0.3, 0.0), 1.0)
    grid = _grid()
    matrix = steering_matrix(array, grid)
    np.testing.assert_allclose(np.abs(matrix), 1.0)
    az, el = grid.azimuth[21], grid.elevation[4]
    np.testing.assert_allclose(matrix[:, 21, 4], steering_vector(array, az, el), atol=1e-12)


def test_beamformer_peak():
    """A single plane wave beamforms to L^2 in its own direction"""
    array = _ura()
    grid = _grid()
    az, el = grid.azimuth[21], grid.elevation[4]
    spectrum = beamform_spectrum(steering_vector(array, az, el), array, grid)
    assert spectrum.power[21, 4] == pytest.approx(array.size ** 2)
    assert spectrum.argmax() == pytest.approx((az, el))


def test_beamformer_peak_with_noise():
    """At 20 dB SNR the strongest cell is within one cell of the source"""
    array = _ura()
    grid = _grid()
    a = steering_vector(array, grid.azimuth[21], grid.elevation[4])
    rng = np.random.default_rng(13)
    noise_scale = math.sqrt(0.01 / 2.0)
    for _ in range(20):
        s = (rng.normal(size=64) + 1j * rng.normal(size=64)) / math.sqrt(2.0)
        n = noise_scale * (rng.normal(size=(array.size, 64)) + 1j * rng.normal(size=(array.size, 64)))
        power = beamform_spectrum(a[:, None] * s + n, array, grid).power
        i, j = np.unravel_index(int(np.argmax(power)), power.shape)
        assert abs(i - 21) <= 1 and abs(j - 4) <= 1


def test_beamformer_two_sources():
    """Two uncorrelated plane waves give the two strongest peaks"""
    array = _ura()
    grid = _grid()
    first = (grid.azimuth[21], grid.elevation[4])
    second = (grid.azimuth[5], grid.elevation[9])
    rng = np.random.default_rng(2)
    phases = np.exp(1j * rng.uniform(0, 2 * np.pi, (2, 200)))
    X = (steering_vector(array, *first)[:, None] * phases[0]
         + steering_vector(array, *second)[:, None] * phases[1])
    peaks = spectrum_peaks(beamform_spectrum(X, array, grid), 2)
    found = sorted((az, el) for az, el, _ in peaks)
    np.testing.assert_allclose(found, sorted([first, second]))


def test_snapshot_shape_is_checked():
    """Snapshots must have one row per element"""
    with pytest.raises(ShapeMismatchError):
        beamform_spectrum(np.ones((3, 4)), _ura(), _grid())


def test_covariance_eigenvalues_sum_to_trace():
    """Eigenvalues of the sample covariance sum to its trace"""
    rng = np.random.default_rng(4)
    X = rng.normal(size=(6, 40)) + 1j * rng.normal(size=(6, 40))
    covariance, values, _ = covariance_eigen(X)
    assert np.sum(values) == pytest.approx(np.trace(covariance).real)
    assert list(values) == sorted(values, reverse=True)


def test_music_clamps_at_truth(caplog):
    """A noise-free source drives the pseudospectrum to its clamp at the true angle"""
    array = _ula()
    grid = AngleGrid([0.0], np.deg2rad(np.arange(-60, 60.001, 0.25)))
    truth = grid.elevation[200]
    rng = np.random.default_rng(8)
    X = steering_vector(array, 0.0, truth)[:, None] * np.exp(1j * rng.uniform(0, 2 * np.pi, 10))
    with caplog.at_level(logging.WARNING, logger="rfit.radar"):
        spectrum = music_spectrum(X, array, 1, grid)
    assert spectrum.power[0, 200] == pytest.approx(1.0 / MUSIC_FLOOR)
    assert "near singular" in caplog.text


def test_music_source_count():
    """MUSIC needs at least one source and one noise dimension"""
    array = _ula(4)
    X = np.ones((4, 10))
    with pytest.raises(RfitError):
        music_spectrum(X, array, 4, AngleGrid([0.0], [0.0, 0.1]))
    with pytest.raises(RfitError):
        music_spectrum(X, array, 0, AngleGrid([0.0], [0.0, 0.1]))


def test_music_resolves_close_sources():
    """Sources 15 degrees apart at 10 dB SNR are located to within a degree RMS from 64 snapshots"""
    array = _ula()
    grid = AngleGrid([0.0], np.deg2rad(np.arange(0.0, 90.001, 0.25)))
    truth = np.deg2rad([5.0, 20.0])
    A = np.column_stack([steering_vector(array, 0.0, el) for el in truth])
    rng = np.random.default_rng(21)
    noise_scale = math.sqrt(0.1 / 2.0)
    errors = []
    for _ in range(100):
        s = (rng.normal(size=(2, 64)) + 1j * rng.normal(size=(2, 64))) / math.sqrt(2.0)
        n = noise_scale * (rng.normal(size=(8, 64)) + 1j * rng.normal(size=(8, 64)))
        peaks = spectrum_peaks(music_spectrum(A @ s + n, array, 2, grid), 2)
        assert len(peaks) == 2
        found = np.sort([el for _, el, _ in peaks])
        errors.extend(found - truth)
    assert math.degrees(math.sqrt(np.mean(np.square(errors)))) < 1.0


def test_airy_pattern():
    """The Airy pattern is one at the centre and zero at the first null"""
    assert airy_pattern(0.0) == 1.0
    assert airy_pattern(3.8317059702) < 1e-15
    assert airy_pattern(1.0) == pytest.approx((2 * 0.4400505857449335) ** 2)


def test_airy_surrogate_peak():
    """A single arrival gives unit power in its own direction"""
    grid = _grid()
    az, el = grid.azimuth[21], grid.elevation[4]
    surrogate = SurrogateConfig(sigma=1e-9, aperture_radius=2 * WAVELENGTH)
    spectrum = airy_spatial_surrogate([(az, el, 1.0)], surrogate, grid, WAVELENGTH)
    assert spectrum.power[21, 4] == pytest.approx(1.0, rel=1e-6)
    assert spectrum.argmax() == pytest.approx((az, el))


def test_airy_surrogate_seeding():
    """Phases come from the seed, so equal seeds give equal spectra"""
    grid = _grid()
    arrivals = [(0.6, 0.4, 1.0), (0.5, 0.45, 0.8)]
    surrogate = SurrogateConfig(sigma=1e-9, aperture_radius=WAVELENGTH, seed=3)
    a = airy_spatial_surrogate(arrivals, surrogate, grid, WAVELENGTH)
    b = airy_spatial_surrogate(arrivals, surrogate, grid, WAVELENGTH)
    c = airy_spatial_surrogate(arrivals, surrogate, grid, WAVELENGTH, rng=np.random.default_rng(99))
    np.testing.assert_array_equal(a.power, b.power)
    assert not np.allclose(a.power, c.power)
    with pytest.raises(ParameterError):
        airy_spatial_surrogate(arrivals, SurrogateConfig(sigma=1e-9), grid, WAVELENGTH)


def _far_source_scene(metal, rx):
    direction = np.array([math.sin(0.4) * math.cos(0.6), math.sin(0.4) * math.sin(0.6), math.cos(0.4)])
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    return Scene(empty, SceneParams(), metal, 100.0 * direction, rx, F0)


def test_arrival_angles(metal):
    """A line-of-sight path arrives from the transmitter's direction"""
    scene = _far_source_scene(metal, [[0, 0, 0]])
    sample = trace_paths(scene)
    angles = arrival_angles(sample.paths, scene.rx_array[0])
    np.testing.assert_allclose(angles[0, :2], [0.6, 0.4], atol=1e-12)


def test_snapshots_follow_steering_vector(metal):
    """A far transmitter produces snapshots proportional to its steering vector"""
    array = _ura()
    rx = np.column_stack([array.positions, np.zeros(array.size)])
    scene = _far_source_scene(metal, rx)
    X = snapshots_from_scene(scene, ArrayGeometry.from_scene(scene))[:, 0]
    a = steering_vector(array, 0.6, 0.4)
    correlation = abs(np.vdot(a, X)) / (np.linalg.norm(a) * np.linalg.norm(X))
    assert correlation > 0.999


def test_snapshot_noise_power(metal):
    """Added noise has the requested power relative to the signal"""
    array = _ura()
    rx = np.column_stack([array.positions, np.zeros(array.size)])
    scene = _far_source_scene(metal, rx)
    clean = snapshots_from_scene(scene, array, n_snapshots=10000)
    noisy = snapshots_from_scene(scene, array, n_snapshots=10000, snr_db=3.0, rng=np.random.default_rng(6))
    expected = np.mean(np.abs(clean) ** 2) / 10 ** 0.3
    assert np.mean(np.abs(noisy - clean) ** 2) == pytest.approx(expected, rel=0.05)
    with pytest.raises(RfitError):
        snapshots_from_scene(scene, array, snr_db=3.0)


def test_range_angle_map_shape():
    """Every bin of per-element profiles is beamformed"""
    array = _ura()
    grid = _grid()
    profiles = np.ones((array.size, 5))
    spectrum = range_angle_map(profiles, array, grid)
    assert spectrum.power.shape == (5,) + grid.shape
    assert spectrum.power[0, 0, 0] == pytest.approx(array.size ** 2)
