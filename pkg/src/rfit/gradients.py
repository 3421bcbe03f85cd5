# rfit/gradients.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=invalid-name,too-many-locals,too-many-arguments,too-many-instance-attributes

"""Path derivatives: the analytic interior term, the visibility boundary term and
a finite-difference oracle to check them against"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from .checks import gradient_check, secant_check
from .errors import RfitError
from .geometry import Scene, d_vertices_d_theta
from .tracer import OCCLUDED, OUTSIDE, CirSample, PropagationPath, TriangleSoup, trace_paths

logger = logging.getLogger(__name__)

SMOOTH = "smooth"
BOUNDARY_AFFECTED = "boundary-affected"

SILHOUETTE = "silhouette"
SHARP = "sharp"
BORDER = "border"

# Incidence cosines below this make the reflection point derivative singular
GRAZING_COS = 1e-9

DEFAULT_STEPS = (1e-4, 1e-5, 1e-6)

# Edges lying within this distance (m) of a bounce plane belong to that plane
_PLANE_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class PathJacobian:
    """Derivatives of one path's delay, amplitude and phase with respect to theta.

    ``d_points`` holds the (3, n) Jacobian of each reflection point."""
    path: PropagationPath
    d_tau: np.ndarray
    d_alpha: np.ndarray
    d_phi: np.ndarray
    d_points: Tuple[np.ndarray, ...] = ()
    singular: bool = False
    flag: str = SMOOTH

    @property
    def boundary_affected(self):
        """True if a visibility event lies near this path"""
        return self.flag == BOUNDARY_AFFECTED


@dataclass(frozen=True)
class BoundaryConfig:
    """Settings of the edge-sampling boundary estimator"""
    n_edge_samples: int = 64
    beam_width: float = 1e-3
    cutoff: float = 6.0
    sharp_angle_deg: float = 30.0
    near_miss: Optional[float] = None
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.n_edge_samples < 1:
            raise RfitError("At least one edge sample is needed")
        if not self.beam_width > 0:
            raise RfitError("Beam width must be positive")
        if not self.cutoff > 0:
            raise RfitError("Edge cutoff must be positive")
        if self.near_miss is None:
            object.__setattr__(self, "near_miss", self.cutoff * self.beam_width)

    @property
    def reach(self):
        """Distance (m) beyond which an edge cannot affect a path"""
        return self.cutoff * self.beam_width


@dataclass(frozen=True, eq=False)
class BoundaryEdgeSample:
    """One Monte Carlo sample on an edge bounding a path's visibility.

    ``velocity`` is the normal velocity of the boundary relative to the path, per
    parameter; ``weight`` is the beam density times the sampling measure."""
    edge: np.ndarray
    kind: str
    normal: np.ndarray
    point: np.ndarray
    velocity: np.ndarray
    weight: float


@dataclass(frozen=True, eq=False)
class VisibilityEvent:
    """The visibility derivative of one path near one or more edges"""
    path: PropagationPath
    present: bool
    d_visibility: np.ndarray
    samples: Tuple[BoundaryEdgeSample, ...]


@dataclass(frozen=True, eq=False)
class BoundaryTerm:
    """Boundary contributions of every path close to a visibility event.

    ``profile_gradient`` has shape (n_rx, bins, n) when a per-path contribution
    map was supplied."""
    events: Tuple[VisibilityEvent, ...]
    n_parameters: int
    profile_gradient: Optional[np.ndarray] = None
    rejected: int = 0

    @property
    def mask(self):
        """Parameters that any event touches"""
        touched = np.zeros(self.n_parameters, dtype=bool)
        for event in self.events:
            touched |= event.d_visibility != 0.0
        return touched


@dataclass(frozen=True, eq=False)
class GradientResult:
    """The total loss gradient and the pieces it was built from"""
    gradient: np.ndarray
    interior: np.ndarray
    boundary: np.ndarray
    loss: float
    jacobians: Tuple[PathJacobian, ...]
    boundary_term: Optional[BoundaryTerm] = None

    @property
    def boundary_mask(self):
        """Parameters with a non-zero boundary contribution"""
        if self.boundary_term is None:
            return np.zeros(len(self.gradient), dtype=bool)
        return self.boundary_term.mask

    @property
    def singular_mask(self):
        """Parameters that a path at grazing incidence depends on"""
        touched = np.zeros(len(self.gradient), dtype=bool)
        for jac in self.jacobians:
            if jac.singular:
                for d in (jac.d_tau, jac.d_alpha):
                    touched |= (d != 0.0) | ~np.isfinite(d)
                for d in jac.d_points:
                    touched |= ~np.all(np.isfinite(d), axis=0)
        return touched


@dataclass(frozen=True, eq=False)
class GradientReport:
    """Analytic and finite-difference gradients side by side.

    Errors are always recomputed from the two stored vectors."""
    names: Tuple[str, ...]
    analytic: np.ndarray
    fd: np.ndarray
    steps: np.ndarray
    boundary: np.ndarray
    verifiable: np.ndarray
    schedule: Tuple[float, ...]
    secant: Optional[np.ndarray] = None
    stencil: Optional[np.ndarray] = None
    singular: Optional[np.ndarray] = None

    @property
    def abs_err(self):
        """Per component |analytic - fd|"""
        return np.abs(self.analytic - self.fd)

    @property
    def rel_err(self):
        """Per component |analytic - fd| / max(|fd|, 1e-12)"""
        return self.abs_err / np.maximum(np.abs(self.fd), 1e-12)

    def passed(self, rtol=1e-3, atol="1e-6 max", strict=False):
        """Per component pass mask.

        Smooth components must agree with the finite differences. Components near a
        visibility event pass on secant agreement when a secant was measured and are
        otherwise excluded. Unverifiable components pass unless ``strict``.
        """
        smooth_ok = gradient_check(rtol, atol)(self.analytic, self.fd)
        result = np.where(self.boundary, True, smooth_ok)
        if self.secant is not None and self.stencil is not None:
            measured = self.boundary & np.isfinite(self.secant)
            across = secant_check()(np.nan_to_num(self.stencil), np.nan_to_num(self.secant))
            result = np.where(measured, across, result)
        return np.where(self.verifiable, result, not strict)

    @property
    def flags(self):
        """Per component label: singular, boundary or smooth"""
        singular = np.zeros(len(self.names), dtype=bool) if self.singular is None else self.singular
        return tuple("singular" if s else "boundary" if b else "smooth"
                     for s, b in zip(singular, self.boundary))

    def ok(self, rtol=1e-3, atol="1e-6 max", strict=False):
        """True if every component passes"""
        return bool(np.all(self.passed(rtol, atol, strict)))


@dataclass(frozen=True, eq=False)
class _PlaneChart:
    point: np.ndarray
    normal: np.ndarray
    d_point: np.ndarray
    d_normal: np.ndarray


def _mirror(x, dx, chart):
    n = chart.normal
    rel = x - chart.point
    h = float(rel @ n)
    image = x - 2.0 * h * n
    d_image = dx - 2.0 * np.outer(n, n @ dx) + 2.0 * np.outer(n, n @ chart.d_point) \
        - 2.0 * np.outer(n, rel @ chart.d_normal) - 2.0 * h * chart.d_normal
    return image, d_image


def _intersection_derivative(q, dq, image, d_image, chart):
    """Derivative of the point where the line q -> image meets the chart's plane"""
    n = chart.normal
    D = image - q
    den = np.float64(D @ n)
    d_num = n @ (chart.d_point - dq) + (chart.point - q) @ chart.d_normal
    d_den = n @ (d_image - dq) + D @ chart.d_normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((chart.point - q) @ n) / den
        dt = (d_num - t * d_den) / den
        return dq + np.outer(D, dt) + t * (d_image - dq)


class _Differentiator:
    """Shares vertex and plane Jacobians between the paths of one scene evaluation"""
    def __init__(self, scene: Scene, soup: Optional[TriangleSoup] = None):
        self.scene = scene
        self.soup = soup if soup is not None else TriangleSoup(scene)
        self.params = scene.params
        self.n = scene.params.size
        self.n_target_vertices = scene.target.n_vertices
        self._target_jacobian = None
        self._charts: Dict[int, _PlaneChart] = {}
        self._materials = scene.params.layout.get("material_scalars")

    @property
    def target_jacobian(self):
        """dw/dtheta for every target vertex, shape (V, 3, n)"""
        if self._target_jacobian is None:
            self._target_jacobian = d_vertices_d_theta(self.scene.target, self.params)
        return self._target_jacobian

    def vertex_jacobian(self, vertex):
        """(3, n) Jacobian of one vertex of the triangle soup"""
        if vertex < self.n_target_vertices:
            return self.target_jacobian[vertex]
        return np.zeros((3, self.n))

    def chart(self, tri) -> _PlaneChart:
        """Supporting plane of a triangle and its derivatives"""
        if tri not in self._charts:
            soup = self.soup
            n = soup.normals[tri]
            if soup.is_target(tri):
                dv0, dv1, dv2 = (self.vertex_jacobian(v) for v in soup.triangles[tri])
                de1, de2 = dv1 - dv0, dv2 - dv0
                cross = np.cross(soup.e1[tri], soup.e2[tri])
                d_cross = np.cross(de1.T, soup.e2[tri]).T + np.cross(soup.e1[tri], de2.T).T
                d_normal = (np.eye(3) - np.outer(n, n)) @ d_cross / np.linalg.norm(cross)
            else:
                dv0 = np.zeros((3, self.n))
                d_normal = np.zeros((3, self.n))
            self._charts[tri] = _PlaneChart(soup.v0[tri], n, dv0, d_normal)
        return self._charts[tri]

    def rho_gradient(self, tri):
        """d(reflection coefficient)/dtheta for one triangle"""
        gradient = np.zeros(self.n)
        if self._materials is not None:
            gradient[self._materials.start + int(self.soup.material_ids[tri])] = 1.0
        return gradient

    def path_jacobian(self, path: PropagationPath) -> PathJacobian:
        """Chain rule through the image construction of one path"""
        scene = self.scene
        charts = [self.chart(t) for t in path.triangle_ids]
        images = [scene.tx_position]
        d_images = [np.zeros((3, self.n))]
        for chart in charts:
            image, d_image = _mirror(images[-1], d_images[-1], chart)
            images.append(image)
            d_images.append(d_image)

        rx = path.vertex_chain[-1]
        length = path.length
        if path.order:
            u = images[-1] - rx
            d_length = (u / np.linalg.norm(u)) @ d_images[-1]
        else:
            d_length = np.zeros(self.n)

        d_tau = d_length / scene.c
        rho = [float(self.soup.rho[t]) for t in path.triangle_ids]
        d_alpha = -path.alpha / length * d_length
        spread = scene.wavelength / (4.0 * math.pi * length)
        for k, tri in enumerate(path.triangle_ids):
            others = math.prod(r for j, r in enumerate(rho) if j != k)
            d_alpha = d_alpha + spread * others * self.rho_gradient(tri)
        d_phi = 2.0 * math.pi * scene.f0 * d_tau

        singular = False
        chain = path.vertex_chain
        for k, chart in enumerate(charts):
            incoming = chain[k + 1] - chain[k]
            cosine = abs(incoming @ chart.normal) / np.linalg.norm(incoming)
            if cosine < GRAZING_COS:
                singular = True
        d_points = []
        q, dq = rx, np.zeros((3, self.n))
        for k in range(path.order, 0, -1):
            dq = _intersection_derivative(q, dq, images[k], d_images[k], charts[k - 1])
            q = chain[k]
            d_points.append(dq)
        d_points.reverse()

        if not all(np.all(np.isfinite(x)) for x in [d_tau, d_alpha] + d_points):
            singular = True
        if singular:
            logger.warning("Grazing incidence on path via triangles %s to receiver %d; "
                           "derivatives are unreliable", path.triangle_ids, path.rx_index)
        return PathJacobian(path, d_tau, d_alpha, d_phi, tuple(d_points), singular)


def interior_path_jacobian(scene: Scene, path: PropagationPath,
                           soup: Optional[TriangleSoup] = None) -> PathJacobian:
    """Analytic derivatives of (tau, alpha, phi) of one path, holding its triangles fixed"""
    return _Differentiator(scene, soup).path_jacobian(path)


def _gaussian(r_sq, width):
    return np.exp(-r_sq / (2.0 * width ** 2)) / (2.0 * math.pi * width ** 2)


class _VisibilityModel:
    """Gaussian-beam visibility of path segments and reflection points.

    A segment's visibility is the unblocked mass of a transverse Gaussian of width
    ``beam_width``; a reflection point's is the mass of an in-plane Gaussian inside
    its face. Both derivatives are line integrals over the bounding edges, sampled
    over the window where the Gaussian is not negligible."""
    def __init__(self, diff: _Differentiator, config: BoundaryConfig, rng: np.random.Generator):
        self.diff = diff
        self.config = config
        self.rng = rng
        soup = diff.soup
        self.soup = soup
        if soup.mesh is None:
            ids = np.zeros((0, 2), dtype=np.int64)
            faces = np.zeros((0, 2), dtype=np.int64)
            discontinuous = np.zeros(0, dtype=bool)
        else:
            table = soup.mesh.edges
            ids, faces = table.vertices, table.faces
            discontinuous = table.discontinuous(soup.vertices, soup.triangles, config.sharp_angle_deg)
        self.ids = ids
        self.faces = faces
        self.border = faces[:, 1] < 0
        self.discontinuous = discontinuous
        self.a = soup.vertices[ids[:, 0]]
        self.b = soup.vertices[ids[:, 1]]
        self.centroids = soup.vertices[soup.triangles].mean(axis=1) if soup.n_triangles \
            else np.zeros((0, 3))
        self.rejected = 0

    def _positions(self, lo, hi):
        """Sample positions on [lo, hi]: one jittered sample per equal stratum, or i.i.d. uniform"""
        count = self.config.n_edge_samples
        if not self.config.stratified:
            return self.rng.uniform(lo, hi, count)
        return lo + (np.arange(count) + self.rng.uniform(0.0, 1.0, count)) * (hi - lo) / count

    def _edge_velocity(self, edge, s):
        da = self.diff.vertex_jacobian(self.ids[edge, 0])
        db = self.diff.vertex_jacobian(self.ids[edge, 1])
        return (1.0 - s)[:, None, None] * da[None] + s[:, None, None] * db[None]

    def _in_plane(self, edges, tri):
        n = self.soup.normals[tri]
        d = self.soup.offsets[tri]
        return (np.abs(self.a[edges] @ n - d) < _PLANE_TOLERANCE) & \
            (np.abs(self.b[edges] @ n - d) < _PLANE_TOLERANCE)

    def _accumulate(self, weights, velocities, edge, kind, normal, points):
        samples = []
        total = np.zeros(self.diff.n)
        for w, v, p in zip(weights, velocities, points):
            if w == 0.0:
                continue
            contribution = w * v
            if not np.all(np.isfinite(contribution)):
                self.rejected += 1
                continue
            total += contribution
            samples.append(BoundaryEdgeSample(np.stack([self.a[edge], self.b[edge]]), kind,
                                              normal, p, v, float(w)))
        return total, samples

    def segment(self, A, B, dA, dB, end_triangles):
        """Derivative of one segment's visibility"""
        config = self.config
        n_params = self.diff.n
        total = np.zeros(n_params)
        samples: List[BoundaryEdgeSample] = []
        delta = B - A
        seg_len = float(np.linalg.norm(delta))
        if not len(self.ids) or seg_len <= 0.0:
            return total, samples
        d = delta / seg_len
        rel_a = self.a - A
        rel_b = self.b - A
        ax_a = rel_a @ d
        ax_b = rel_b @ d
        ta = rel_a - ax_a[:, None] * d
        tb = rel_b - ax_b[:, None] * d
        span = tb - ta
        span_sq = np.einsum("ij,ij->i", span, span)
        s_min = np.clip(-np.einsum("ij,ij->i", ta, span) / np.where(span_sq > 0, span_sq, 1.0), 0.0, 1.0)
        closest = np.linalg.norm(ta + s_min[:, None] * span, axis=1)
        near = (closest < config.reach) & (np.maximum(ax_a, ax_b) > 0.0) & \
            (np.minimum(ax_a, ax_b) < seg_len) & (span_sq > 1e-24)
        facing = self.soup.normals @ d
        f0 = self.faces[:, 0]
        f1 = self.faces[:, 1]
        fold = ~self.border & (np.sign(facing[f0]) != np.sign(facing[np.maximum(f1, 0)]))
        candidates = near & (self.border | fold)
        for tri in end_triangles:
            candidates &= ~self._in_plane(np.arange(len(self.ids)), tri)

        for edge in np.flatnonzero(candidates):
            span_len = math.sqrt(span_sq[edge])
            m = span[edge] / span_len
            centre = self.centroids[f0[edge]] - self.a[edge]
            centre = centre - (centre @ d) * d
            normal = centre - (centre @ m) * m
            if np.linalg.norm(normal) < 1e-15:
                continue
            normal = normal / np.linalg.norm(normal)
            s_c = -float(ta[edge] @ span[edge]) / span_sq[edge]
            half = config.reach / span_len
            lo, hi = max(0.0, s_c - half), min(1.0, s_c + half)
            if hi <= lo:
                continue
            s = self._positions(lo, hi)
            points = self.a[edge] + s[:, None] * (self.b[edge] - self.a[edge])
            axial = (points - A) @ d
            transverse = (points - A) - axial[:, None] * d
            density = _gaussian(np.einsum("ij,ij->i", transverse, transverse), config.beam_width)
            density = np.where((axial > 0.0) & (axial < seg_len), density, 0.0)
            f = (axial / seg_len)[:, None, None]
            relative = self._edge_velocity(edge, s) - ((1.0 - f) * dA[None] + f * dB[None])
            velocities = np.einsum("k,skn->sn", normal, relative)
            weights = density * span_len * (hi - lo) / config.n_edge_samples
            part, found = self._accumulate(weights, velocities, edge, SILHOUETTE, normal, points)
            total += part
            samples += found
        return total, samples

    def face(self, x, dx, tri):
        """Derivative of one reflection point's visibility inside its face"""
        config = self.config
        soup = self.soup
        total = np.zeros(self.diff.n)
        samples: List[BoundaryEdgeSample] = []
        if not len(self.ids):
            return total, samples
        n = soup.normals[tri]
        coplanar = (soup.normals @ n > 1.0 - 1e-9) & \
            (np.abs(soup.offsets - soup.offsets[tri]) < _PLANE_TOLERANCE)
        f0 = self.faces[:, 0]
        f1 = self.faces[:, 1]
        owner = np.where(coplanar[f0], f0, np.where((f1 >= 0) & coplanar[np.maximum(f1, 0)], f1, -1))
        edge_vec = self.b - self.a
        length_sq = np.einsum("ij,ij->i", edge_vec, edge_vec)
        s_min = np.clip(np.einsum("ij,ij->i", x - self.a, edge_vec) / length_sq, 0.0, 1.0)
        closest = np.linalg.norm(self.a + s_min[:, None] * edge_vec - x, axis=1)
        candidates = self.discontinuous & (owner >= 0) & (closest < config.reach)

        for edge in np.flatnonzero(candidates):
            length = math.sqrt(length_sq[edge])
            m = edge_vec[edge] / length
            inward = self.centroids[owner[edge]] - self.a[edge]
            inward = inward - (inward @ m) * m - (inward @ n) * n
            if np.linalg.norm(inward) < 1e-15:
                continue
            normal = -inward / np.linalg.norm(inward)
            s_c = float((x - self.a[edge]) @ edge_vec[edge]) / length_sq[edge]
            half = config.reach / length
            lo, hi = max(0.0, s_c - half), min(1.0, s_c + half)
            if hi <= lo:
                continue
            s = self._positions(lo, hi)
            points = self.a[edge] + s[:, None] * edge_vec[edge]
            offset = points - x
            density = _gaussian(np.einsum("ij,ij->i", offset, offset), config.beam_width)
            relative = self._edge_velocity(edge, s) - dx[None]
            velocities = np.einsum("k,skn->sn", normal, relative)
            weights = density * length * (hi - lo) / config.n_edge_samples
            kind = BORDER if self.border[edge] else SHARP
            part, found = self._accumulate(weights, velocities, edge, kind, normal, points)
            total += part
            samples += found
        return total, samples

    def path_event(self, jacobian: PathJacobian) -> Optional[VisibilityEvent]:
        """Visibility derivative of a path as the product of its segment and face factors"""
        path = jacobian.path
        chain = path.vertex_chain
        zeros = np.zeros((3, self.diff.n))
        d_chain = [zeros] + list(jacobian.d_points) + [zeros]
        tris = path.triangle_ids

        values = []
        derivatives = []
        samples: List[BoundaryEdgeSample] = []
        blocked = np.zeros(len(chain) - 1, dtype=bool)
        if path.status == OCCLUDED:
            blocked = self.soup.first_blockers(chain[:-1], chain[1:]) >= 0
        for k in range(len(chain) - 1):
            ends = [tris[j] for j in (k - 1, k) if 0 <= j < len(tris)]
            d_value, found = self.segment(chain[k], chain[k + 1], d_chain[k], d_chain[k + 1], ends)
            values.append(0.0 if blocked[k] else 1.0)
            derivatives.append(d_value)
            samples += found
        for k, tri in enumerate(tris):
            inside = True
            if path.status == OUTSIDE:
                inside = bool(self.soup.classify(chain[k + 1][None], np.array([tri]), 0.0)[0][0])
            d_value, found = self.face(chain[k + 1], d_chain[k + 1], tri)
            values.append(1.0 if inside else 0.0)
            derivatives.append(d_value)
            samples += found
        if not samples:
            return None

        d_visibility = np.zeros(self.diff.n)
        for k, d_value in enumerate(derivatives):
            others = math.prod(v for j, v in enumerate(values) if j != k)
            if others:
                d_visibility += others * d_value
        return VisibilityEvent(path, path.status not in (OCCLUDED, OUTSIDE), d_visibility, tuple(samples))


def boundary_term(scene: Scene, config: BoundaryConfig, sample: Optional[CirSample] = None,
                  soup: Optional[TriangleSoup] = None,
                  contribution: Optional[Callable[[PropagationPath], np.ndarray]] = None,
                  jacobians: Optional[Dict[int, PathJacobian]] = None, max_order=2) -> BoundaryTerm:
    """Monte Carlo estimate of the visibility boundary term.

    Every visible path and every retained candidate path is tested against the
    silhouette edges near its segments and the border or sharp edges near its
    reflection points. With ``contribution`` mapping a path to its per-bin response,
    the result carries the complex profile gradient ``sum_i r_i (x) dV_i``.

    :param sample: a traced sample holding candidates; traced here when omitted
    :param jacobians: precomputed path Jacobians keyed by ``id(path)``
    """
    soup = soup if soup is not None else TriangleSoup(scene, config.sharp_angle_deg)
    if sample is None:
        sample = trace_paths(scene, max_order=max_order, keep_candidates=True,
                             near_miss=config.near_miss, soup=soup)
    diff = _Differentiator(scene, soup)
    model = _VisibilityModel(diff, config, np.random.default_rng(config.seed))
    jacobians = jacobians or {}
    events = []
    for path in list(sample.paths) + list(sample.candidates):
        jacobian = jacobians.get(id(path)) or diff.path_jacobian(path)
        event = model.path_event(jacobian)
        if event is not None:
            events.append(event)
    if model.rejected:
        logger.warning("Rejected %d non-finite boundary samples", model.rejected)
    logger.debug("Boundary term: %d events from %d paths and %d candidates",
                 len(events), len(sample.paths), len(sample.candidates))

    profile_gradient = None
    if contribution is not None and events:
        rows = {}
        for event in events:
            response = np.asarray(contribution(event.path), dtype=complex)
            block = rows.setdefault(event.path.rx_index,
                                    np.zeros((len(response), diff.n), dtype=complex))
            block += np.outer(response, event.d_visibility)
        n_bins = len(next(iter(rows.values())))
        profile_gradient = np.zeros((sample.n_rx, n_bins, diff.n), dtype=complex)
        for rx, block in rows.items():
            profile_gradient[rx] = block
    return BoundaryTerm(tuple(events), diff.n, profile_gradient, model.rejected)


def path_signature(sample: CirSample, soup: TriangleSoup):
    """Hashable description of which reflector planes each visible path uses.

    Coplanar triangles share a plane, so a reflection point crossing a shared
    diagonal does not change the signature."""
    keys = np.round(np.hstack([soup.normals, soup.offsets[:, None]]), 9) if soup.n_triangles \
        else np.zeros((0, 4))
    plane_of = {}
    groups = []
    for tri in range(soup.n_triangles):
        key = (tri >= soup.n_target,) + tuple(keys[tri])
        groups.append(plane_of.setdefault(key, len(plane_of)))
    return tuple(sorted((p.rx_index, p.order, tuple(groups[t] for t in p.triangle_ids))
                        for p in sample.paths))


def total_gradient(scene: Scene, objective, boundary: Optional[BoundaryConfig] = None,
                   threads=1, max_order=2) -> GradientResult:
    """Gradient of the objective's loss with respect to the flat parameter vector.

    The objective is duck-typed: ``evaluate(scene, keep_candidates, near_miss)``
    returns a state with ``loss``, ``gamma`` (complex sensitivity per rx and bin, so
    that ``dL = Re(sum conj(gamma) dR)``), ``sample``, ``soup`` and ``partials`` (one
    TapPartials per receiver, rows in ``sample.for_rx`` order); ``contribution(state,
    path)`` and ``jump(state, path, present)`` serve the boundary term.

    :param boundary: boundary estimator settings; None gives the interior term only
    """
    keep = boundary is not None
    state = objective.evaluate(scene, keep_candidates=keep,
                               near_miss=boundary.near_miss if keep else 0.0)
    sample = state.sample
    diff = _Differentiator(scene, state.soup)
    paths = list(sample.paths)
    if keep:
        paths += list(sample.candidates)
    if threads > 1 and len(paths) > 1:
        _ = diff.target_jacobian
        with ThreadPoolExecutor(max_workers=threads) as pool:
            computed = list(pool.map(diff.path_jacobian, paths))
    else:
        computed = [diff.path_jacobian(p) for p in paths]
    by_path = {id(j.path): j for j in computed}

    interior = np.zeros(diff.n)
    for rx in range(sample.n_rx):
        partials = state.partials[rx]
        gamma = np.conj(np.asarray(state.gamma[rx]))
        for row, path in enumerate(sample.for_rx(rx)):
            jac = by_path[id(path)]
            w_tau = float(np.real(gamma @ partials.d_tau[row]))
            w_alpha = float(np.real(gamma @ partials.d_alpha[row]))
            w_phi = float(np.real(gamma @ partials.d_phi[row]))
            interior += w_tau * jac.d_tau + w_alpha * jac.d_alpha + w_phi * jac.d_phi

    boundary_part = np.zeros(diff.n)
    term = None
    jacobians = [by_path[id(p)] for p in sample.paths]
    if keep:
        term = boundary_term(scene, boundary, sample=sample, soup=state.soup,
                             contribution=lambda p: objective.contribution(state, p),
                             jacobians=by_path)
        affected = set()
        for event in term.events:
            jump = objective.jump(state, event.path, event.present)
            if not math.isfinite(jump):
                logger.warning("Non-finite loss jump for path via %s", event.path.triangle_ids)
                continue
            boundary_part += jump * event.d_visibility
            affected.add(id(event.path))
        jacobians = [replace(j, flag=BOUNDARY_AFFECTED) if id(j.path) in affected else j
                     for j in jacobians]
    gradient = interior + boundary_part
    return GradientResult(gradient, interior, boundary_part, float(state.loss), tuple(jacobians), term)


def stencil_average(gradient_fn: Callable[[np.ndarray], np.ndarray], theta, index, halfwidth,
                    n_points=9):
    """Mean of one gradient component over [theta - h, theta + h] along that component,
    by the trapezoid rule; compare it with the secant of the loss over the same span"""
    theta = np.asarray(theta, dtype=float)
    offsets = np.linspace(-halfwidth, halfwidth, n_points)
    values = []
    for t in offsets:
        shifted = theta.copy()
        shifted[index] += t
        values.append(float(gradient_fn(shifted)[index]))
    return float(trapezoid(values, offsets) / (2.0 * halfwidth))


def _difference(loss_fn, theta, index, h, forward, base):
    up = theta.copy()
    up[index] += h
    f_up = float(loss_fn(up))
    if forward:
        return (f_up - base) / h
    down = theta.copy()
    down[index] -= h
    return (f_up - float(loss_fn(down))) / (2.0 * h)


def fd_oracle(loss_fn: Callable[[np.ndarray], float], theta, analytic,
              h_schedule: Sequence[float] = DEFAULT_STEPS, names: Optional[Sequence[str]] = None,
              indices: Optional[Sequence[int]] = None, forward=False,
              signature_fn: Optional[Callable[[np.ndarray], object]] = None,
              gradient_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
              secant_halfwidth: Optional[float] = None, boundary_mask=None,
              secant_points=9, singular_mask=None) -> GradientReport:
    """Finite-difference check of an analytic gradient.

    Each checked component is differenced at every step of ``h_schedule`` and the
    step agreeing best with the analytic value is reported. A component is
    boundary-affected when ``boundary_mask`` marks it or when ``signature_fn``
    changes within the stencil (or within ``secant_halfwidth``); for those, with
    ``gradient_fn`` supplied, the stencil-averaged analytic gradient and the loss
    secant are recorded instead of trusting pointwise differences.

    :param loss_fn: theta -> loss, deterministic
    :param analytic: the analytic gradient over all of theta
    :param forward: use forward instead of central differences
    :param singular_mask: components fed by a path at grazing incidence, reported as such
    """
    theta = np.asarray(theta, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    if analytic.shape != theta.shape:
        raise RfitError("Analytic gradient and theta differ in shape")
    indices = list(range(len(theta))) if indices is None else [int(i) for i in indices]
    names = list(names) if names is not None else [f"theta[{i}]" for i in range(len(theta))]
    schedule = tuple(float(h) for h in h_schedule)
    if not schedule or min(schedule) <= 0:
        raise RfitError("Finite-difference steps must be positive")

    base = float(loss_fn(theta))
    reach = max(schedule) if secant_halfwidth is None else max(max(schedule), secant_halfwidth)
    base_signature = signature_fn(theta) if signature_fn is not None else None
    mask = np.zeros(len(theta), dtype=bool) if boundary_mask is None else np.asarray(boundary_mask, bool)

    fd = np.full(len(indices), np.nan)
    steps = np.full(len(indices), np.nan)
    boundary = np.zeros(len(indices), dtype=bool)
    verifiable = np.zeros(len(indices), dtype=bool)
    secant = np.full(len(indices), np.nan)
    stencil = np.full(len(indices), np.nan)
    for row, index in enumerate(indices):
        best = None
        for h in schedule:
            value = _difference(loss_fn, theta, index, h, forward, base)
            if not math.isfinite(value):
                best = None
                break
            error = abs(value - analytic[index])
            if best is None or error < best[0]:
                best = (error, value, h)
        if best is not None and math.isfinite(base):
            verifiable[row] = True
            _, fd[row], steps[row] = best
        else:
            logger.warning("Parameter %s is unverifiable: non-finite loss in its stencil", names[index])

        flagged = bool(mask[index])
        if signature_fn is not None:
            for offset in sorted({max(schedule), reach}):
                for sign in (-1.0, 1.0):
                    shifted = theta.copy()
                    shifted[index] += sign * offset
                    if signature_fn(shifted) != base_signature:
                        flagged = True
        boundary[row] = flagged
        if flagged and gradient_fn is not None and secant_halfwidth is not None:
            secant[row] = _difference(loss_fn, theta, index, secant_halfwidth, False, base)
            stencil[row] = stencil_average(gradient_fn, theta, index, secant_halfwidth, secant_points)

    return GradientReport(
        names=tuple(names[i] for i in indices),
        analytic=analytic[indices].copy(),
        fd=fd,
        steps=steps,
        boundary=boundary,
        verifiable=verifiable,
        schedule=schedule,
        secant=secant,
        stencil=stencil,
        singular=None if singular_mask is None else np.asarray(singular_mask, bool)[indices].copy(),
    )
