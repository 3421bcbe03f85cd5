# rfit/radar.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=invalid-name,too-many-arguments,too-many-locals

"""FMCW range profiles, their Gaussian surrogate, and array spatial spectra"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.special import j1, softmax

from .errors import OutOfRangeError, ParameterError, RfitError, ShapeMismatchError
from .tracer import trace_paths

logger = logging.getLogger(__name__)

EXACT = "exact"
SURROGATE = "surrogate"

BEAMFORM = "beamform"
MUSIC = "music"
AIRY = "airy_surrogate"

# MUSIC pseudospectrum denominators are clamped to this floor
MUSIC_FLOOR = 1e-12
MUSIC_CONDITION_LIMIT = 1e12

_WINDOWS = ("hamming", "rect")


@dataclass(frozen=True)
class RadarConfig:
    """FMCW chirp parameters"""
    f0: float
    bandwidth: float
    chirp_duration: float
    n_samples: int
    window: str = "hamming"
    n_bins: Optional[int] = None

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ParameterError("bandwidth", "Sweep bandwidth must be positive")
        if self.chirp_duration <= 0:
            raise ParameterError("chirp_duration", "Chirp duration must be positive")
        if self.n_samples < 2:
            raise ParameterError("n_samples", "At least two samples per chirp are needed")
        if self.f0 <= self.bandwidth:
            raise ParameterError("f0", "Carrier must exceed the sweep bandwidth")
        if self.window not in _WINDOWS:
            raise ParameterError("window", f"Window must be one of {_WINDOWS}")
        if self.n_bins is None:
            object.__setattr__(self, "n_bins", self.n_samples)
        if not 1 <= self.n_bins <= self.n_samples:
            raise ParameterError("n_bins", "Bin count must lie between 1 and the sample count")

    @property
    def slope(self):
        """Chirp slope B/T (Hz/s)"""
        return self.bandwidth / self.chirp_duration

    @property
    def bin_spacing(self):
        """Delay step between range bins (s)"""
        return 1.0 / self.bandwidth

    @property
    def bin_delays(self):
        """Round-trip delay of each range bin (s)"""
        return np.arange(self.n_bins) / self.bandwidth

    @property
    def sample_times(self):
        """Sampling instants within one chirp (s)"""
        return np.arange(self.n_samples) * self.chirp_duration / self.n_samples

    def window_values(self):
        """The window w[n]"""
        if self.window == "hamming":
            return np.hamming(self.n_samples)
        return np.ones(self.n_samples)


@dataclass(frozen=True)
class SurrogateConfig:
    """Parameters of the Gaussian range surrogate and the Airy spatial surrogate"""
    sigma: float
    aperture_radius: Optional[float] = None
    field_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError("sigma", "Surrogate pulse width must be positive")
        if self.aperture_radius is not None and not self.aperture_radius > 0:
            raise ParameterError("aperture_radius", "Aperture radius must be positive")

    @classmethod
    def for_radar(cls, radar: RadarConfig, bins=2.0, **kwargs):
        """Surrogate whose pulse width spans ``bins`` range bins"""
        return cls(sigma=bins / radar.bandwidth, **kwargs)


@dataclass(frozen=True, eq=False)
class Taps:
    """Discrete CIR taps as parallel (tau, alpha, phi) arrays"""
    tau: np.ndarray
    alpha: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for name in ("tau", "alpha", "phi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not len(self.tau) == len(self.alpha) == len(self.phi):
            raise ShapeMismatchError("Tap arrays must have equal lengths")

    @classmethod
    def from_cir(cls, taps):
        """Build from a list of (tau, complex amplitude) pairs"""
        taps = list(taps)
        values = np.array([complex(a) for _, a in taps], dtype=complex)
        return cls(np.array([t for t, _ in taps], dtype=float), np.abs(values),
                   np.mod(np.angle(values), 2 * np.pi))

    @classmethod
    def from_paths(cls, paths):
        """Build from traced paths"""
        return cls([p.tau for p in paths], [p.alpha for p in paths], [p.phi for p in paths])

    def __len__(self):
        return len(self.tau)

    def __add__(self, other):
        return Taps(np.concatenate([self.tau, other.tau]), np.concatenate([self.alpha, other.alpha]),
                    np.concatenate([self.phi, other.phi]))

    @property
    def amplitudes(self):
        """Complex tap values alpha * exp(j phi)"""
        return self.alpha * np.exp(1j * self.phi)


def _as_taps(taps):
    return taps if isinstance(taps, Taps) else Taps.from_cir(taps)


@dataclass(frozen=True, eq=False)
class TapPartials:
    """Derivatives of every profile bin with respect to each tap's tau, alpha and phi.

    Each array has shape (taps, bins)."""
    d_tau: np.ndarray
    d_alpha: np.ndarray
    d_phi: np.ndarray


@dataclass(frozen=True, eq=False)
class RangeProfile:
    """Complex radar response per range bin"""
    values: np.ndarray
    delays: np.ndarray
    provenance: str
    partials: Optional[TapPartials] = None

    def __post_init__(self):
        if len(self.values) != len(self.delays):
            raise ShapeMismatchError("Profile values and delay map differ in length")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Planar receive array; element positions in metres relative to the array centre"""
    positions: np.ndarray
    wavelength: float

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "positions", positions)
        if not len(positions):
            raise RfitError("An array needs at least one element")
        if len(np.unique(np.round(positions, 12), axis=0)) != len(positions):
            raise RfitError("Array element positions must be distinct")
        if not self.wavelength > 0:
            raise ParameterError("wavelength", "Wavelength must be positive")

    @classmethod
    def from_positions(cls, positions, wavelength):
        """Array from 3D element positions, using their x and y relative to the centroid"""
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        return cls(positions[:, :2] - positions[:, :2].mean(axis=0), wavelength)

    @classmethod
    def from_scene(cls, scene):
        """The scene's receive array at the scene's carrier"""
        return cls.from_positions(scene.rx_array, scene.wavelength)

    @property
    def size(self):
        """Number of elements L"""
        return len(self.positions)

    @property
    def wavenumber(self):
        """k = 2 pi / lambda"""
        return 2.0 * math.pi / self.wavelength

    @property
    def half_aperture(self):
        """Largest element distance from the array centre (never zero)"""
        reach = float(np.max(np.linalg.norm(self.positions, axis=1)))
        return reach if reach > 0 else self.wavelength / 2.0


@dataclass(frozen=True, eq=False)
class AngleGrid:
    """Azimuth by elevation search grid (radians); elevation is measured from boresight +z"""
    azimuth: np.ndarray
    elevation: np.ndarray

    def __post_init__(self):
        az = np.atleast_1d(np.asarray(self.azimuth, dtype=float))
        el = np.atleast_1d(np.asarray(self.elevation, dtype=float))
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)
        if np.any(np.diff(az) <= 0) or np.any(np.diff(el) <= 0):
            raise RfitError("Angle grids must be strictly increasing")

    @classmethod
    def regular(cls, n_azimuth=181, n_elevation=46, azimuth=(-math.pi, math.pi), elevation=(0.0, math.pi / 2)):
        """Uniform grid including both end points"""
        return cls(np.linspace(*azimuth, n_azimuth), np.linspace(*elevation, n_elevation))

    @property
    def shape(self):
        """(n_azimuth, n_elevation)"""
        return (len(self.azimuth), len(self.elevation))

    def directions(self):
        """Unit arrival vectors for every grid point, shape (n_az, n_el, 3)"""
        az, el = np.meshgrid(self.azimuth, self.elevation, indexing="ij")
        return np.stack([np.sin(el) * np.cos(az), np.sin(el) * np.sin(az), np.cos(el)], axis=-1)

    def nearest(self, azimuth, elevation):
        """Grid indices closest to an angle pair"""
        return (int(np.argmin(np.abs(self.azimuth - azimuth))),
                int(np.argmin(np.abs(self.elevation - elevation))))


@dataclass(frozen=True, eq=False)
class SpatialSpectrum:
    """Non-negative power over an angle grid, optionally with a leading range-bin axis"""
    power: np.ndarray
    grid: AngleGrid
    method: str
    bins: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.power.shape[-2:] != self.grid.shape:
            raise ShapeMismatchError("Spectrum does not match its angle grid")
        if np.any(self.power < 0):
            raise RfitError("Spectrum power must be non-negative")

    def argmax(self):
        """(azimuth, elevation) of the strongest grid point"""
        power = self.power if self.power.ndim == 2 else self.power.max(axis=0)
        i, j = np.unravel_index(int(np.argmax(power)), power.shape)
        return float(self.grid.azimuth[i]), float(self.grid.elevation[j])


def if_signal(taps, config: RadarConfig):
    """Synthesise the de-chirped IF signal of a set of CIR taps.

    ``S[n] = sum_i alpha_i exp(j (2 pi (B/T tau_i t_n + f0 tau_i - B/(2T) tau_i^2) + phi_i))``
    with the tap phase phi_i in radians.

    :raises OutOfRangeError: if any tap delay is at or beyond the chirp duration
    """
    taps = _as_taps(taps)
    if np.any(taps.tau >= config.chirp_duration):
        raise OutOfRangeError(f"Tap delay {taps.tau.max():.4g} s exceeds the unambiguous range")
    if not len(taps):
        return np.zeros(config.n_samples, dtype=complex)
    return np.sum(taps.alpha[:, None] * np.exp(1j * _if_phase(taps, config)), axis=0)


def _if_phase(taps, config):
    t = config.sample_times
    tau = taps.tau[:, None]
    return 2.0 * np.pi * (config.slope * tau * t + config.f0 * tau - 0.5 * config.slope * tau ** 2) \
        + taps.phi[:, None]


def range_profile_exact(signal, config: RadarConfig) -> RangeProfile:
    """Windowed DFT of the IF signal; bin l maps to delay l/B"""
    signal = np.asarray(signal, dtype=complex)
    if len(signal) != config.n_samples:
        raise ShapeMismatchError(f"Expected {config.n_samples} IF samples, got {len(signal)}")
    values = np.fft.fft(signal * config.window_values())[:config.n_bins]
    return RangeProfile(values, config.bin_delays, EXACT)


def range_profile_exact_partials(taps, config: RadarConfig) -> TapPartials:
    """Closed-form derivatives of the exact profile with respect to every tap"""
    taps = _as_taps(taps)
    if not len(taps):
        empty = np.zeros((0, config.n_bins), dtype=complex)
        return TapPartials(empty, empty, empty)
    phasor = np.exp(1j * _if_phase(taps, config))
    rate = 2.0 * np.pi * (config.slope * config.sample_times[None, :] + config.f0
                          - config.slope * taps.tau[:, None])
    w = config.window_values()[None, :]

    def dft(x):
        return np.fft.fft(x * w, axis=1)[:, :config.n_bins]

    return TapPartials(
        d_tau=dft(1j * rate * taps.alpha[:, None] * phasor),
        d_alpha=dft(phasor),
        d_phi=dft(1j * taps.alpha[:, None] * phasor),
    )


def exact_profile(taps, config: RadarConfig, with_partials=False) -> RangeProfile:
    """IF synthesis followed by the windowed DFT, optionally carrying tap partials"""
    profile = range_profile_exact(if_signal(taps, config), config)
    if not with_partials:
        return profile
    return RangeProfile(profile.values, profile.delays, EXACT, range_profile_exact_partials(taps, config))


def surrogate_kernel(tau, config: RadarConfig, sigma):
    """Normalised Gaussian kernel G (taps x bins) and its derivative with respect to tau.

    Each tap's kernel is normalised over the profile bins, so the exact derivative is
    ``G_k (tau_k - mean_tau) / sigma^2`` where ``mean_tau`` is the kernel-weighted bin delay."""
    delays = config.bin_delays
    diff = delays[None, :] - np.asarray(tau, dtype=float)[:, None]
    kernel = softmax(-diff ** 2 / (2.0 * sigma ** 2), axis=1)
    centre = np.sum(kernel * delays[None, :], axis=1, keepdims=True)
    return kernel, kernel * (delays[None, :] - centre) / sigma ** 2


def range_profile_surrogate(taps, config: RadarConfig, surrogate: SurrogateConfig) -> RangeProfile:
    """Phase-decoupled Gaussian surrogate of the range profile with tap-wise partials"""
    taps = _as_taps(taps)
    if surrogate.sigma < config.bin_spacing / 10.0:
        logger.warning("Surrogate width %.3g s is below a tenth of a range bin; the profile "
                       "degenerates to isolated spikes", surrogate.sigma)
    if not len(taps):
        empty = np.zeros((0, config.n_bins), dtype=complex)
        return RangeProfile(np.zeros(config.n_bins, dtype=complex), config.bin_delays, SURROGATE,
                            TapPartials(empty, empty, empty))
    kernel, d_kernel = surrogate_kernel(taps.tau, config, surrogate.sigma)
    rotor = np.exp(1j * taps.phi)[:, None]
    alpha = taps.alpha[:, None]
    partials = TapPartials(
        d_tau=d_kernel * alpha * rotor,
        d_alpha=kernel * rotor,
        d_phi=1j * kernel * alpha * rotor,
    )
    values = np.sum(kernel * alpha * rotor, axis=0)
    return RangeProfile(values, config.bin_delays, SURROGATE, partials)


def steering_vector(array: ArrayGeometry, azimuth, elevation):
    """Far-field steering vector A(azimuth, elevation) of the array"""
    x, y = array.positions[:, 0], array.positions[:, 1]
    s = math.sin(elevation)
    return np.exp(-1j * array.wavenumber * (x * s * math.cos(azimuth) + y * s * math.sin(azimuth)))


def steering_matrix(array: ArrayGeometry, grid: AngleGrid):
    """Steering vectors for every grid point, shape (L, n_az, n_el)"""
    u = grid.directions()
    phase = np.einsum("pk,abk->pab", array.positions, u[..., :2])
    return np.exp(-1j * array.wavenumber * phase)


def _check_snapshots(snapshots, array):
    X = np.asarray(snapshots, dtype=complex)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != array.size:
        raise ShapeMismatchError(f"Snapshots have {X.shape[0]} rows but the array has {array.size} elements")
    if X.shape[1] < 1:
        raise ShapeMismatchError("At least one snapshot is needed")
    return X


def beamform_spectrum(snapshots, array: ArrayGeometry, grid: AngleGrid) -> SpatialSpectrum:
    """Conventional beamformer: mean over snapshots of |X^H A|^2"""
    X = _check_snapshots(snapshots, array)
    beams = np.einsum("pt,pab->tab", X.conj(), steering_matrix(array, grid))
    return SpatialSpectrum(np.mean(np.abs(beams) ** 2, axis=0), grid, BEAMFORM)


def covariance_eigen(snapshots):
    """Eigendecomposition of the sample covariance, eigenvalues in descending order.

    Each eigenvector is rotated so its first non-negligible component is real and
    positive, which makes the subspaces reproducible."""
    X = np.asarray(snapshots, dtype=complex)
    covariance = X @ X.conj().T / X.shape[1]
    values, vectors = np.linalg.eigh(covariance)
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    for k in range(vectors.shape[1]):
        column = vectors[:, k]
        lead = np.flatnonzero(np.abs(column) > 1e-12)
        if len(lead):
            pivot = column[lead[0]]
            vectors[:, k] = column * (abs(pivot) / pivot)
    return covariance, values, vectors


def music_spectrum(snapshots, array: ArrayGeometry, n_sources, grid: AngleGrid) -> SpatialSpectrum:
    """MUSIC pseudospectrum 1 / (A^H U_n U_n^H A), clamped at 1/MUSIC_FLOOR"""
    X = _check_snapshots(snapshots, array)
    if not 1 <= n_sources < array.size:
        raise RfitError(f"Source count must lie in [1, {array.size - 1}]")
    if X.shape[1] < n_sources:
        raise RfitError("MUSIC needs at least as many snapshots as sources")
    _, values, vectors = covariance_eigen(X)
    smallest = abs(values[-1])
    if smallest == 0 or abs(values[0]) / smallest > MUSIC_CONDITION_LIMIT:
        logger.warning("Snapshot covariance is near singular (eigenvalue ratio %.3g)",
                       abs(values[0]) / smallest if smallest else float("inf"))
    noise = vectors[:, n_sources:]
    projection = np.einsum("pk,pab->kab", noise.conj(), steering_matrix(array, grid))
    denominator = np.sum(np.abs(projection) ** 2, axis=0)
    return SpatialSpectrum(1.0 / np.maximum(denominator, MUSIC_FLOOR), grid, MUSIC)


def airy_pattern(x):
    """(2 J1(x) / x)^2 with the limit value 1 at x = 0"""
    x = np.asarray(x, dtype=float)
    safe = np.where(np.abs(x) < 1e-12, 1.0, x)
    ratio = np.where(np.abs(x) < 1e-12, 1.0, 2.0 * j1(safe) / safe)
    return ratio ** 2


def airy_spatial_surrogate(arrivals, surrogate: SurrogateConfig, grid: AngleGrid, wavelength,
                           rng: Optional[np.random.Generator] = None) -> SpatialSpectrum:
    """Spatial surrogate: each path contributes an Airy disc centred on its arrival direction
    with a random phase; the spectrum is the squared magnitude of the coherent sum.

    :param arrivals: rows of (azimuth, elevation, amplitude)
    :param wavelength: carrier wavelength (m)
    :param rng: phase generator; defaults to one seeded from ``surrogate.seed``
    """
    arrivals = np.asarray(arrivals, dtype=float).reshape(-1, 3)
    if surrogate.aperture_radius is None:
        raise ParameterError("aperture_radius", "The Airy surrogate needs an aperture radius")
    rng = rng if rng is not None else np.random.default_rng(surrogate.seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, len(arrivals))
    k = 2.0 * np.pi / wavelength
    u = grid.directions()
    field_sum = np.zeros(grid.shape, dtype=complex)
    for (az, el, amplitude), phase in zip(arrivals, phases):
        centre = np.array([math.sin(el) * math.cos(az), math.sin(el) * math.sin(az), math.cos(el)])
        psi = np.arccos(np.clip(u @ centre, -1.0, 1.0))
        pattern = airy_pattern(k * surrogate.aperture_radius * np.sin(psi))
        field_sum += surrogate.field_scale * amplitude * pattern * np.exp(1j * phase)
    return SpatialSpectrum(np.abs(field_sum) ** 2, grid, AIRY)


def arrival_angles(paths, rx_position):
    """(azimuth, elevation, alpha) of each path as seen from a receive position"""
    rows = []
    for path in paths:
        u = path.vertex_chain[-2] - np.asarray(rx_position, dtype=float)
        u = u / np.linalg.norm(u)
        rows.append((math.atan2(u[1], u[0]), math.acos(max(-1.0, min(1.0, u[2]))), path.alpha))
    return np.array(rows, dtype=float).reshape(-1, 3)


def _plane_key(sample_path):
    # Reflection chains off the same planes share a key across receive elements
    if not sample_path.order:
        return ()
    chain = sample_path.vertex_chain
    key = []
    for k in range(1, len(chain) - 1):
        incoming = chain[k] - chain[k - 1]
        outgoing = chain[k + 1] - chain[k]
        normal = outgoing / np.linalg.norm(outgoing) - incoming / np.linalg.norm(incoming)
        normal /= np.linalg.norm(normal)
        key.append(tuple(np.round(np.append(normal, normal @ chain[k]), 3)))
    return tuple(key)


def snapshots_from_scene(scene, array: ArrayGeometry, sample=None, n_snapshots=1, snr_db=None,
                         decorrelate=False, rng: Optional[np.random.Generator] = None, max_order=2):
    """Narrowband array snapshots X (L x T) from the scene's traced paths.

    Element p sees ``sum alpha exp(j phi)`` over its paths. With ``decorrelate`` each
    reflector gets a fresh random phase per snapshot; with ``snr_db`` circular white
    noise is added at that ratio to the mean element power.
    """
    if sample is None:
        sample = trace_paths(scene, max_order=max_order)
    if sample.n_rx != array.size:
        raise ShapeMismatchError("The traced sample and the array differ in element count")
    if (decorrelate or snr_db is not None) and rng is None:
        raise RfitError("A seeded generator is needed for random snapshots")
    X = np.zeros((array.size, n_snapshots), dtype=complex)
    keys = sorted({_plane_key(p) for p in sample.paths})
    jitter = {}
    if decorrelate:
        draws = rng.uniform(0.0, 2.0 * np.pi, (len(keys), n_snapshots))
        jitter = {key: np.exp(1j * row) for key, row in zip(keys, draws)}
    for path in sample.paths:
        phase = jitter.get(_plane_key(path), np.ones(n_snapshots)) if decorrelate else 1.0
        X[path.rx_index] += path.amplitude * phase
    if snr_db is not None and math.isfinite(snr_db):
        power = float(np.mean(np.abs(X) ** 2))
        noise_power = power / 10.0 ** (snr_db / 10.0)
        noise = rng.standard_normal((2,) + X.shape)
        X = X + math.sqrt(noise_power / 2.0) * (noise[0] + 1j * noise[1])
    return X


def spectrum_peaks(spectrum: SpatialSpectrum, count) -> Sequence[tuple]:
    """The ``count`` strongest local maxima as (azimuth, elevation, power), strongest first"""
    power = spectrum.power if spectrum.power.ndim == 2 else spectrum.power.max(axis=0)
    local = (power == maximum_filter(power, size=3, mode="nearest")) & (power > 0)
    idx = np.argwhere(local)
    values = power[local]
    order = np.lexsort((idx[:, 1], idx[:, 0], -values))[:count]
    return [(float(spectrum.grid.azimuth[idx[k, 0]]), float(spectrum.grid.elevation[idx[k, 1]]),
             float(values[k])) for k in order]


def range_angle_map(profiles, array: ArrayGeometry, grid: AngleGrid) -> SpatialSpectrum:
    """Beamform every range bin of per-element profiles (L x bins)"""
    profiles = np.asarray(profiles, dtype=complex)
    if profiles.shape[0] != array.size:
        raise ShapeMismatchError("One profile per array element is needed")
    beams = np.einsum("pb,pxy->bxy", profiles.conj(), steering_matrix(array, grid))
    return SpatialSpectrum(np.abs(beams) ** 2, grid, BEAMFORM, bins=np.arange(profiles.shape[1]))
