# rfit/optimize.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=invalid-name,too-many-arguments,too-many-locals,too-many-instance-attributes

"""The inverse fitting loop: multiscale loss, regularised gradient steps, checkpoints"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DivergedError, ParameterError, RfitError, ShapeMismatchError
from .geometry import LaplacianMatrix, Scene, build_laplacian
from .gradients import BoundaryConfig, GradientResult, path_signature, total_gradient
from .radar import (AngleGrid, ArrayGeometry, RadarConfig, SurrogateConfig, TapPartials, Taps,
                    exact_profile, range_profile_surrogate, steering_matrix, surrogate_kernel)
from .tracer import TriangleSoup, trace_paths
from .utils import atomic_write

logger = logging.getLogger(__name__)

MAGNITUDE = "magnitude"
COMPLEX = "complex"

SURROGATE = "surrogate"
EXACT = "exact"
BEAMFORM = "beamform"
KINDS = (SURROGATE, EXACT, BEAMFORM)

CONVERGED = "converged"
MAX_ITER = "max_iter"
DIVERGED = "diverged"
ERROR = "error"

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LossConfig:
    """Multiscale MSE settings.

    ``weights`` default to 1/n_scales each. Complex inputs are compared by magnitude
    unless ``domain`` is "complex"."""
    n_scales: int = 4
    weights: Optional[Tuple[float, ...]] = None
    domain: str = MAGNITUDE
    normalize: bool = False

    def __post_init__(self):
        if self.n_scales < 1:
            raise ParameterError("n_scales", "At least one scale is needed")
        if self.weights is None:
            object.__setattr__(self, "weights", (1.0 / self.n_scales,) * self.n_scales)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != self.n_scales:
            raise ParameterError("weights", "One weight is needed per scale")
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ParameterError("weights", "Weights must be non-negative with at least one positive")
        if self.domain not in (MAGNITUDE, COMPLEX):
            raise ParameterError("domain", f"Loss domain must be {MAGNITUDE!r} or {COMPLEX!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    """Gradient descent settings"""
    learning_rate: float
    regularization: float = 0.0
    max_iter: int = 100
    tol: float = 1e-8
    seed: int = 0
    minibatch: float = 1.0
    free: Optional[Tuple[str, ...]] = None
    divergence_factor: float = 1e6
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate", "Learning rate must be positive")
        if self.regularization < 0:
            raise ParameterError("regularization", "Regularisation weight must not be negative")
        if self.max_iter < 0:
            raise ParameterError("max_iter", "Iteration limit must not be negative")
        if not 0.0 < self.minibatch <= 1.0:
            raise ParameterError("minibatch", "Minibatch fraction must lie in (0, 1]")
        if self.free is not None:
            object.__setattr__(self, "free", tuple(self.free))

    def free_mask(self, names: Sequence[str]):
        """Boolean mask of the components that may change"""
        if self.free is None:
            return np.ones(len(names), dtype=bool)
        mask = np.zeros(len(names), dtype=bool)
        for name in self.free:
            matches = [i for i, n in enumerate(names) if n == name or n.startswith(name + ".")]
            if not matches:
                raise ParameterError(name, f"Unknown free parameter {name!r}")
            mask[matches] = True
        return mask


@dataclass(frozen=True)
class FitRecord:
    """One iteration of a fit"""
    iteration: int
    loss: float
    grad_norm: float
    reg_energy: float
    theta: Tuple[float, ...]


@dataclass
class FitTrace:
    """Per-iteration history of a fit and how it ended"""
    names: Tuple[str, ...]
    records: List[FitRecord] = field(default_factory=list)
    status: Optional[str] = None
    message: str = ""

    def append(self, record: FitRecord):
        """Add the next iteration; iterations must be contiguous from 0"""
        expected = len(self.records)
        if record.iteration != expected:
            raise RfitError(f"Trace expected iteration {expected}, got {record.iteration}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        """Loss per iteration"""
        return np.array([r.loss for r in self.records])

    @property
    def final_theta(self):
        """Parameter vector of the last recorded iteration"""
        return np.array(self.records[-1].theta)

    def to_json(self):
        """JSON-compatible representation"""
        return {
            "names": list(self.names),
            "status": self.status,
            "message": self.message,
            "records": [{"iteration": r.iteration, "loss": r.loss, "grad_norm": r.grad_norm,
                         "reg_energy": r.reg_energy, "theta": list(r.theta)} for r in self.records],
        }

    @classmethod
    def from_json(cls, data):
        """Inverse of to_json"""
        trace = cls(tuple(data["names"]), status=data.get("status"), message=data.get("message", ""))
        for r in data["records"]:
            trace.append(FitRecord(int(r["iteration"]), float(r["loss"]), float(r["grad_norm"]),
                                   float(r["reg_energy"]), tuple(float(x) for x in r["theta"])))
        return trace


def _pool_matrix(n):
    groups = (n + 1) // 2
    matrix = np.zeros((groups, n))
    for i in range(groups):
        members = [j for j in (2 * i, 2 * i + 1) if j < n]
        matrix[i, members] = 1.0 / len(members)
    return matrix


def _apply(x, matrices, transpose=False):
    for axis, matrix in enumerate(matrices):
        op = matrix.T if transpose else matrix
        x = np.moveaxis(np.tensordot(op, x, axes=([1], [axis])), 0, axis)
    return x


def _pyramid(shape, levels):
    """Pooling matrices per level and axis; level 0 is the identity"""
    pyramid = [[np.eye(n) for n in shape]]
    current = list(shape)
    for _ in range(1, levels):
        step = [_pool_matrix(n) for n in current]
        pyramid.append([s @ m for s, m in zip(step, pyramid[-1])])
        current = [s.shape[0] for s in step]
    return pyramid


def downsample(x, scale):
    """Apply ``scale`` rounds of 2x average pooling along every axis.

    Odd trailing elements are pooled on their own."""
    x = np.asarray(x)
    return _apply(x, _pyramid(x.shape, scale + 1)[scale])


def multiscale_mse(sim, obs, config: LossConfig):
    """Weighted sum over scales of the MSE between pooled ``sim`` and ``obs``.

    :return: (loss, gradient). For real inputs the gradient is dL/dsim. For complex
        inputs it is the complex sensitivity G with ``dL = Re(sum conj(G) dsim)``.
    """
    sim = np.asarray(sim)
    obs = np.asarray(obs)
    if sim.shape != obs.shape:
        raise ShapeMismatchError(f"Simulated shape {sim.shape} differs from observed {obs.shape}")
    is_complex = np.iscomplexobj(sim) or np.iscomplexobj(obs)
    magnitude = is_complex and config.domain == MAGNITUDE
    if magnitude:
        residual = np.abs(sim) - np.abs(obs)
    else:
        residual = sim - obs
    scale = 1.0
    if config.normalize:
        peak = float(np.max(np.abs(obs), initial=0.0))
        if peak > 0:
            scale = peak
    residual = residual / scale

    loss = 0.0
    gradient = np.zeros(sim.shape, dtype=residual.dtype)
    for level, (weight, matrices) in enumerate(zip(config.weights, _pyramid(sim.shape, config.n_scales))):
        if weight == 0.0:
            continue
        pooled = _apply(residual, matrices)
        loss += weight * float(np.mean(np.abs(pooled) ** 2))
        gradient = gradient + weight * 2.0 / pooled.size * _apply(pooled, matrices, transpose=True)
        logger.debug("Scale %d: %s", level, pooled.shape)
    gradient = gradient / scale
    if magnitude:
        size = np.abs(sim)
        gradient = gradient * np.where(size > 0, np.exp(1j * np.angle(sim)), 0.0)
    return loss, gradient


def sgd_step(theta, gradient, laplacian: Optional[LaplacianMatrix], config: OptimizerConfig, mask=None):
    """One step of ``theta - eta * (g + lambda L theta)``; masked components stay put.

    :raises DivergedError: if the gradient is not finite
    """
    theta = np.asarray(theta, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if theta.shape != gradient.shape:
        raise ShapeMismatchError("Gradient and parameter vector differ in length")
    if not np.all(np.isfinite(gradient)):
        raise DivergedError("Refusing a step along a non-finite gradient")
    direction = gradient
    if laplacian is not None and config.regularization:
        direction = gradient + config.regularization * (laplacian @ theta)
    stepped = theta - config.learning_rate * direction
    return stepped if mask is None else np.where(mask, stepped, theta)


@dataclass(frozen=True, eq=False)
class ObjectiveState:
    """Everything one objective evaluation produced"""
    loss: float
    gamma: np.ndarray
    measurement: np.ndarray
    sample: object
    soup: TriangleSoup
    partials: Tuple[TapPartials, ...]
    steering: Optional[np.ndarray] = None


class SceneObjective:
    """A scene, a radar pipeline and an observation bound into a differentiable loss.

    ``kind`` selects the pipeline: the Gaussian surrogate profile, the exact FMCW
    profile, or the beamforming spectrum of narrowband array snapshots."""
    def __init__(self, scene: Scene, observation, radar: RadarConfig, loss: LossConfig,
                 surrogate: Optional[SurrogateConfig] = None, kind=SURROGATE,
                 grid: Optional[AngleGrid] = None, max_order=2, threads=1, batch=None):
        if kind not in KINDS:
            raise ParameterError("kind", f"Objective kind must be one of {KINDS}")
        if kind == BEAMFORM and grid is None:
            raise ParameterError("grid", "A beamforming objective needs an angle grid")
        self.scene = scene
        self.radar = radar
        self.loss_config = loss
        self.surrogate = surrogate if surrogate is not None else SurrogateConfig.for_radar(radar)
        self.kind = kind
        self.grid = grid
        self.max_order = max_order
        self.threads = threads
        self.batch = batch
        self.observation = None if observation is None else np.asarray(observation)
        if self.observation is not None and self.observation.shape != self.shape:
            raise ShapeMismatchError(f"Observation shape {self.observation.shape} does not match "
                                     f"the {kind} pipeline output {self.shape}")

    @property
    def shape(self):
        """Shape of the pipeline output"""
        if self.kind == BEAMFORM:
            return self.grid.shape
        return (self.scene.n_rx, self.radar.n_bins)

    def with_batch(self, batch):
        """A copy restricted to ``(rx_indices, bin_slice)``"""
        return SceneObjective(self.scene, self.observation, self.radar, self.loss_config, self.surrogate,
                              self.kind, self.grid, self.max_order, self.threads, batch)

    def with_observation(self, observation):
        """A copy comparing against a different observation"""
        return SceneObjective(self.scene, observation, self.radar, self.loss_config, self.surrogate,
                              self.kind, self.grid, self.max_order, self.threads, self.batch)

    def scene_at(self, theta) -> Scene:
        """The bound scene with its parameters replaced by ``theta``"""
        return self.scene.with_params(self.scene.params.unpack(theta))

    def _profiles(self, sample):
        n_rx = sample.n_rx
        values = np.zeros((n_rx, self.radar.n_bins), dtype=complex)
        partials = []
        for rx in range(n_rx):
            taps = Taps.from_paths(sample.for_rx(rx))
            if self.kind == SURROGATE:
                profile = range_profile_surrogate(taps, self.radar, self.surrogate)
            else:
                profile = exact_profile(taps, self.radar, with_partials=True)
            values[rx] = profile.values
            partials.append(profile.partials)
        return values, tuple(partials)

    def _snapshots(self, sample):
        X = np.zeros(sample.n_rx, dtype=complex)
        partials = []
        for rx in range(sample.n_rx):
            taps = Taps.from_paths(sample.for_rx(rx))
            rotor = np.exp(1j * taps.phi)[:, None]
            X[rx] = np.sum(taps.amplitudes)
            partials.append(TapPartials(np.zeros((len(taps), 1), dtype=complex), rotor,
                                        1j * taps.alpha[:, None] * rotor))
        return X, tuple(partials)

    def _steering(self):
        return steering_matrix(ArrayGeometry.from_scene(self.scene), self.grid)

    def measure(self, scene: Scene, keep_candidates=False, near_miss=0.0):
        """Run the forward pipeline: (measurement, sample, soup, partials, steering)"""
        soup = TriangleSoup(scene)
        sample = trace_paths(scene, max_order=self.max_order, keep_candidates=keep_candidates,
                             near_miss=near_miss, threads=self.threads, soup=soup)
        if self.kind == BEAMFORM:
            X, partials = self._snapshots(sample)
            return X[:, None], sample, soup, partials, self._steering()
        values, partials = self._profiles(sample)
        return values, sample, soup, partials, None

    def feature(self, measurement, steering=None):
        """The array the loss compares: profiles as they are, or the beamformed power"""
        if self.kind != BEAMFORM:
            return measurement
        if steering is None:
            steering = self._steering()
        beams = np.einsum("p,pab->ab", np.conj(measurement[:, 0]), steering)
        return np.abs(beams) ** 2

    def observe(self, scene: Optional[Scene] = None):
        """The feature this pipeline produces for a scene, for use as an observation"""
        measurement, _, _, _, steering = self.measure(scene if scene is not None else self.scene)
        return self.feature(measurement, steering)

    def _select(self, array):
        if self.batch is None or self.kind == BEAMFORM:
            return array
        rows, bins = self.batch
        return array[np.asarray(rows)][:, bins]

    def loss_and_gamma(self, measurement, steering=None):
        """Loss of a measurement and the complex sensitivity with respect to it"""
        if self.observation is None:
            raise RfitError("The objective has no observation to compare with")
        if self.kind == BEAMFORM:
            beams = np.einsum("p,pab->ab", np.conj(measurement[:, 0]), steering)
            loss, g_power = multiscale_mse(np.abs(beams) ** 2, self.observation, self.loss_config)
            gamma = 2.0 * np.einsum("ab,ab,pab->p", g_power, np.conj(beams), steering)
            return loss, gamma[:, None]
        loss, g_sel = multiscale_mse(self._select(measurement), self._select(self.observation),
                                     self.loss_config)
        gamma = np.zeros(measurement.shape, dtype=complex)
        if self.batch is None:
            gamma[:] = g_sel
        else:
            rows, bins = self.batch
            index = np.arange(measurement.shape[1])[bins]
            gamma[np.ix_(np.asarray(rows), index)] = g_sel
        return loss, gamma

    def evaluate(self, scene: Scene, keep_candidates=False, near_miss=0.0) -> ObjectiveState:
        """Forward pipeline, loss and sensitivity for one scene"""
        measurement, sample, soup, partials, steering = self.measure(scene, keep_candidates, near_miss)
        loss, gamma = self.loss_and_gamma(measurement, steering)
        return ObjectiveState(loss, gamma, measurement, sample, soup, partials, steering)

    def contribution(self, state: ObjectiveState, path):  # pylint: disable=unused-argument
        """The response of one path alone, in the shape of one measurement row"""
        taps = Taps.from_paths([path])
        if self.kind == BEAMFORM:
            return taps.amplitudes
        if self.kind == SURROGATE:
            kernel, _ = surrogate_kernel(taps.tau, self.radar, self.surrogate.sigma)
            return kernel[0] * taps.amplitudes[0]
        return exact_profile(taps, self.radar).values

    def jump(self, state: ObjectiveState, path, present):
        """Loss with the path minus loss without it"""
        response = self.contribution(state, path)
        changed = state.measurement.copy()
        if present:
            changed[path.rx_index] -= response
            other, _ = self.loss_and_gamma(changed, state.steering)
            return state.loss - other
        changed[path.rx_index] += response
        other, _ = self.loss_and_gamma(changed, state.steering)
        return other - state.loss

    def loss_at(self, theta):
        """Loss at a parameter vector; NaN where the scene is invalid"""
        try:
            return self.evaluate(self.scene_at(theta)).loss
        except RfitError as exc:
            logger.info("Loss undefined at theta: %s", exc)
            return math.nan

    def gradient_at(self, theta, boundary: Optional[BoundaryConfig] = None) -> np.ndarray:
        """Total gradient at a parameter vector"""
        return total_gradient(self.scene_at(theta), self, boundary, threads=self.threads,
                              max_order=self.max_order).gradient

    def signature_at(self, theta):
        """Visible path signature at a parameter vector"""
        scene = self.scene_at(self.scene.params.project(theta))
        soup = TriangleSoup(scene)
        return path_signature(trace_paths(scene, max_order=self.max_order, soup=soup), soup)


@dataclass
class FitResult:
    """Outcome of a fit"""
    trace: FitTrace
    theta: np.ndarray
    scene: Scene


def _draw_batch(objective: SceneObjective, config: OptimizerConfig, iteration):
    if config.minibatch >= 1.0 or objective.kind == BEAMFORM:
        return None
    rng = np.random.default_rng([config.seed, iteration])
    n_rx = objective.scene.n_rx
    n_bins = objective.radar.n_bins
    rows = np.sort(rng.choice(n_rx, max(1, math.ceil(config.minibatch * n_rx)), replace=False))
    width = max(1, math.ceil(config.minibatch * n_bins))
    start = int(rng.integers(0, n_bins - width + 1))
    return rows, slice(start, start + width)


def save_checkpoint(path, trace: FitTrace, theta, next_iteration, initial_loss):
    """Atomically write a resumable checkpoint"""
    data = {
        "version": CHECKPOINT_VERSION,
        "next_iteration": int(next_iteration),
        "theta": [float(x) for x in theta],
        "initial_loss": initial_loss,
        "trace": trace.to_json(),
    }
    atomic_write(path, json.dumps(data, indent=1))


def load_checkpoint(path):
    """Read a checkpoint: (trace, theta, next_iteration, initial_loss)"""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if data.get("version") != CHECKPOINT_VERSION:
        raise RfitError(f"{path}: unsupported checkpoint version {data.get('version')!r}")
    return (FitTrace.from_json(data["trace"]), np.array(data["theta"], dtype=float),
            int(data["next_iteration"]), data["initial_loss"])


def fit(objective: SceneObjective, config: OptimizerConfig, boundary: Optional[BoundaryConfig] = None,
        laplacian: Optional[LaplacianMatrix] = None, checkpoint=None, resume=False) -> FitResult:
    """Gradient descent on the objective's parameters.

    Each iteration records the loss at the current parameters, then stops on the loss
    tolerance, the iteration limit or divergence, or takes one regularised step.

    :param boundary: include the visibility boundary term with these settings
    :param laplacian: regulariser; built from the target mesh when regularisation is on
    :param checkpoint: path of a JSON checkpoint written every ``checkpoint_every`` steps
    :param resume: continue from ``checkpoint`` if it exists
    """
    params = objective.scene.params
    names = tuple(params.names())
    mask = config.free_mask(names)
    if config.regularization and laplacian is None:
        laplacian = build_laplacian(objective.scene.target, params)

    trace = FitTrace(names)
    theta = params.pack()
    start = 0
    initial_loss = None
    if resume and checkpoint is not None:
        try:
            trace, theta, start, initial_loss = load_checkpoint(checkpoint)
            trace.status = None
            logger.info("Resuming from iteration %d", start)
        except FileNotFoundError:
            logger.info("No checkpoint at %s; starting afresh", checkpoint)

    for iteration in range(start, config.max_iter + 1):
        batch = _draw_batch(objective, config, iteration)
        batched = objective.with_batch(batch)
        try:
            scene = batched.scene_at(theta)
            result: GradientResult = total_gradient(scene, batched, boundary,
                                                    threads=objective.threads, max_order=objective.max_order)
            # Stopping tests always see every receiver and bin
            loss = result.loss if batch is None else objective.with_batch(None).evaluate(scene).loss
        except RfitError as exc:
            trace.status, trace.message = ERROR, str(exc)
            logger.warning("Forward evaluation failed at iteration %d: %s", iteration, exc)
            break
        gradient = np.where(mask, result.gradient, 0.0)
        energy = laplacian.energy(theta) if laplacian is not None else 0.0
        trace.append(FitRecord(iteration, loss, float(np.linalg.norm(gradient)), energy,
                               tuple(float(x) for x in theta)))
        if initial_loss is None:
            initial_loss = loss
        logger.info("Iteration %d: loss %.6g, |g| %.3g", iteration, loss, np.linalg.norm(gradient))

        if not math.isfinite(loss) or (initial_loss > 0 and loss > config.divergence_factor * initial_loss):
            trace.status, trace.message = DIVERGED, "Loss grew beyond the divergence limit"
            break
        if loss < config.tol:
            trace.status = CONVERGED
            break
        if iteration == config.max_iter:
            trace.status = MAX_ITER
            break
        try:
            theta = params.project(sgd_step(theta, gradient, laplacian, config, mask))
        except DivergedError as exc:
            trace.status, trace.message = DIVERGED, str(exc)
            break
        if checkpoint is not None and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint, trace, theta, iteration + 1, initial_loss)

    if trace.status is None:
        trace.status = MAX_ITER
    logger.info("Fit finished after %d iterations: %s", len(trace), trace.status)
    final = trace.final_theta if len(trace) else theta
    return FitResult(trace, final, objective.scene_at(final))


def sweep(objectives: Dict[str, SceneObjective], name, low, high, steps):
    """Evaluate each objective along one parameter over a uniform grid.

    :return: (values, {label: losses})
    """
    if steps < 1:
        raise ParameterError("steps", "At least one step is needed")
    if low == high:
        raise ParameterError(name, "Sweep range endpoints must differ")
    values = np.linspace(low, high, steps)
    results = {}
    for label, objective in objectives.items():
        index = objective.scene.params.index(name)
        theta = objective.scene.params.pack()
        losses = np.empty(steps)
        for k, value in enumerate(values):
            probe = theta.copy()
            probe[index] = value
            losses[k] = objective.loss_at(probe)
        results[label] = losses
    return values, results


def count_local_minima(values):
    """Number of strict interior local minima of a sampled curve"""
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        return 0
    return int(np.count_nonzero((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))
