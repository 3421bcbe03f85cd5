# rfit/tracer.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=invalid-name,too-many-locals,too-many-arguments

"""Image-method ray tracing of line-of-sight and specular paths up to second order"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import RfitError, UnsupportedOrderError
from .geometry import Mesh, Scene, ray_triangle_distances

logger = logging.getLogger(__name__)

# Segment endpoints are pulled in by this much (m) before occlusion tests
EPSILON_RAY = 1e-6

MAX_ORDER = 2

# Barycentric slack for points lying exactly on a triangle edge
_INSIDE_TOLERANCE = 1e-12

# Reflection chains closer than this (m) are the same path found twice
_DUPLICATE_DISTANCE = 1e-9
_DUPLICATE_DELAY = 1e-17

_PAIR_CHUNK = 128
# Per-pair side tables are kept across receivers up to this many triangles
_PAIR_CACHE_LIMIT = 2048
_SEGMENT_CHUNK = 64

VISIBLE = "visible"
OCCLUDED = "occluded"
OUTSIDE = "outside"


@dataclass(frozen=True, eq=False)
class PropagationPath:
    """One traced path from the transmitter to one receive element"""
    vertex_chain: np.ndarray
    order: int
    triangle_ids: Tuple[int, ...]
    tau: float
    alpha: float
    phi: float
    rx_index: int
    material_ids: Tuple[int, ...] = ()
    status: str = VISIBLE
    blocker: Optional[int] = None

    @property
    def length(self):
        """Total geometric length of the path (m)"""
        return float(np.sum(np.linalg.norm(np.diff(self.vertex_chain, axis=0), axis=1)))

    @property
    def segments(self):
        """The (start, end) point pairs making up the path"""
        return list(zip(self.vertex_chain[:-1], self.vertex_chain[1:]))

    @property
    def sort_key(self):
        """Deterministic ordering key"""
        return (self.rx_index, self.tau, self.order, self.triangle_ids)

    @property
    def amplitude(self):
        """Complex tap value alpha * exp(j phi)"""
        return self.alpha * complex(math.cos(self.phi), math.sin(self.phi))


@dataclass(frozen=True, eq=False)
class CirSample:
    """All paths traced for one scene evaluation, sorted by (rx_index, tau)"""
    paths: Tuple[PropagationPath, ...]
    n_rx: int
    params_hash: str
    candidates: Tuple[PropagationPath, ...] = ()

    def for_rx(self, rx_index):
        """Visible paths arriving at one receive element"""
        if not 0 <= rx_index < self.n_rx:
            raise RfitError(f"Unknown receive element {rx_index}")
        return [p for p in self.paths if p.rx_index == rx_index]

    def candidates_for_rx(self, rx_index):
        """Invisible candidate paths for one receive element"""
        return [p for p in self.candidates if p.rx_index == rx_index]


@dataclass(frozen=True)
class Hit:
    """Nearest ray/triangle intersection"""
    triangle_id: int
    point: np.ndarray
    barycentric: Tuple[float, float, float]
    distance: float


class TriangleSoup:
    """Every triangle of a scene in world space, flattened for vectorised tests.

    Target triangles come first, so global triangle ids below ``n_target`` belong
    to the optimised object."""
    def __init__(self, scene: Scene, sharp_angle_deg=30.0):
        meshes = [scene.world_target] + list(scene.static_meshes)
        vertex_start = np.cumsum([0] + [m.n_vertices for m in meshes])
        vertices = np.concatenate([m.vertices for m in meshes])
        triangles = np.concatenate([m.triangles + s for m, s in zip(meshes, vertex_start)])
        material_ids = np.concatenate([m.material_ids for m in meshes])
        self.mesh = Mesh(vertices, triangles, material_ids) if len(triangles) else None
        self.n_target = scene.world_target.n_triangles
        self.vertex_start = vertex_start
        self.n_triangles = len(triangles)
        self.triangles = triangles
        self.vertices = vertices
        self.material_ids = material_ids
        self.rho = scene.reflection_coefficients()[material_ids] if len(material_ids) else np.zeros(0)

        self.v0 = vertices[triangles[:, 0]]
        self.e1 = vertices[triangles[:, 1]] - self.v0
        self.e2 = vertices[triangles[:, 2]] - self.v0
        cross = np.cross(self.e1, self.e2)
        self.normals = cross / np.linalg.norm(cross, axis=1, keepdims=True) if len(cross) else cross
        self.offsets = np.einsum("ij,ij->i", self.normals, self.v0)
        corners = vertices[triangles] if len(triangles) else np.zeros((0, 3, 3))
        self.lower = corners.min(axis=1) if len(triangles) else np.zeros((0, 3))
        self.upper = corners.max(axis=1) if len(triangles) else np.zeros((0, 3))

        self._d00 = np.einsum("ij,ij->i", self.e1, self.e1)
        self._d01 = np.einsum("ij,ij->i", self.e1, self.e2)
        self._d11 = np.einsum("ij,ij->i", self.e2, self.e2)
        self._denom = self._d00 * self._d11 - self._d01 ** 2

        # Discontinuity flag for each triangle edge (v0v1, v1v2, v2v0)
        self.edge_discontinuous = np.zeros((self.n_triangles, 3), dtype=bool)
        if self.mesh is not None:
            table = self.mesh.edges
            flags = table.discontinuous(vertices, triangles, sharp_angle_deg)
            lookup = {tuple(e): f for e, f in zip(table.vertices.tolist(), flags)}
            for slot, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
                pairs = np.sort(triangles[:, [a, b]], axis=1).tolist()
                self.edge_discontinuous[:, slot] = [lookup[tuple(p)] for p in pairs]

    def is_target(self, triangle_id):
        """True if the global triangle id belongs to the optimised object"""
        return triangle_id < self.n_target

    def barycentric(self, points, tri):
        """Coefficients (b1, b2) with point = v0 + b1 e1 + b2 e2 for in-plane points"""
        rel = points - self.v0[tri]
        d20 = np.einsum("ij,ij->i", rel, self.e1[tri])
        d21 = np.einsum("ij,ij->i", rel, self.e2[tri])
        denom = self._denom[tri]
        b1 = (self._d11[tri] * d20 - self._d01[tri] * d21) / denom
        b2 = (self._d00[tri] * d21 - self._d01[tri] * d20) / denom
        return b1, b2

    def classify(self, points, tri, near_miss):
        """Return (inside, near) masks for in-plane points.

        ``near`` marks points outside their triangle, within ``near_miss`` of it, and
        outside only across border or sharp edges."""
        b1, b2 = self.barycentric(points, tri)
        b0 = 1.0 - b1 - b2
        inside = (b1 >= -_INSIDE_TOLERANCE) & (b2 >= -_INSIDE_TOLERANCE) & (b0 >= -_INSIDE_TOLERANCE)
        if near_miss <= 0.0:
            return inside, np.zeros_like(inside)
        # b0 < 0 crosses edge v1v2 (slot 1), b1 < 0 crosses v2v0 (slot 2), b2 < 0 crosses v0v1 (slot 0)
        flags = self.edge_discontinuous[tri]
        crossed_ok = ((b0 >= 0) | flags[:, 1]) & ((b1 >= 0) | flags[:, 2]) & ((b2 >= 0) | flags[:, 0])
        distance = self.distance_to_triangle(points, tri)
        near = ~inside & crossed_ok & (distance < near_miss)
        return inside, near

    def distance_to_triangle(self, points, tri):
        """Distance from in-plane points to the closest point of their triangle's boundary"""
        corners = [self.v0[tri], self.v0[tri] + self.e1[tri], self.v0[tri] + self.e2[tri]]
        best = np.full(len(tri), np.inf)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            seg = corners[b] - corners[a]
            t = np.clip(np.einsum("ij,ij->i", points - corners[a], seg)
                        / np.einsum("ij,ij->i", seg, seg), 0.0, 1.0)
            closest = corners[a] + t[:, None] * seg
            best = np.minimum(best, np.linalg.norm(points - closest, axis=1))
        return best

    def first_blockers(self, starts, ends):
        """Index of the nearest triangle blocking each segment, or -1.

        Hits within EPSILON_RAY of either endpoint are ignored."""
        result = np.full(len(starts), -1, dtype=np.int64)
        if not self.n_triangles or not len(starts):
            return result
        for lo in range(0, len(starts), _SEGMENT_CHUNK):
            s = starts[lo:lo + _SEGMENT_CHUNK]
            e = ends[lo:lo + _SEGMENT_CHUNK]
            result[lo:lo + len(s)] = self._blockers_chunk(s, e)
        return result

    def _blockers_chunk(self, starts, ends):
        seg_lo = np.minimum(starts, ends)[:, None, :]
        seg_hi = np.maximum(starts, ends)[:, None, :]
        # AABB prefilter
        overlap = np.all((self.lower[None] <= seg_hi) & (self.upper[None] >= seg_lo), axis=2)
        delta = ends - starts
        lengths = np.linalg.norm(delta, axis=1)
        direction = delta / np.where(lengths > 0, lengths, 1.0)[:, None]
        out = np.full(len(starts), -1, dtype=np.int64)
        for k in np.flatnonzero(overlap.any(axis=1)):
            tri = np.flatnonzero(overlap[k])
            t, _, _ = ray_triangle_distances(starts[k], direction[k], self.v0[tri], self.e1[tri], self.e2[tri])
            t = np.where((t > EPSILON_RAY) & (t < lengths[k] - EPSILON_RAY), t, np.inf)
            best = int(np.argmin(t))
            if np.isfinite(t[best]):
                out[k] = tri[best]
        return out


def intersect(origin, direction, scene) -> Optional[Hit]:
    """Nearest intersection of a ray with the scene.

    :param origin: ray origin
    :param direction: unit direction
    :param scene: a Scene or a prebuilt TriangleSoup
    :return: the nearest hit beyond EPSILON_RAY, ties going to the lowest triangle id,
        or None for a miss
    """
    soup = scene if isinstance(scene, TriangleSoup) else TriangleSoup(scene)
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise RfitError("Ray direction must be normalised")
    if not soup.n_triangles:
        return None
    t, u, v = ray_triangle_distances(origin, direction, soup.v0, soup.e1, soup.e2)
    t = np.where(t > EPSILON_RAY, t, np.inf)
    best = int(np.argmin(t))
    if not np.isfinite(t[best]):
        return None
    return Hit(best, origin + t[best] * direction,
               (1.0 - u[best] - v[best], float(u[best]), float(v[best])), float(t[best]))


def occluded(start, end, scene) -> Optional[int]:
    """Return the id of the nearest triangle blocking the segment, or None"""
    soup = scene if isinstance(scene, TriangleSoup) else TriangleSoup(scene)
    blocker = soup.first_blockers(np.asarray([start], dtype=float), np.asarray([end], dtype=float))[0]
    return None if blocker < 0 else int(blocker)


def _mirror(points, normals, offsets):
    side = np.einsum("ij,ij->i", points, normals) - offsets
    return points - 2.0 * side[:, None] * normals


class _RxTracer:
    """Enumerates the paths for one receive element"""
    def __init__(self, scene, soup, max_order, keep_candidates, near_miss):
        self.scene = scene
        self.soup = soup
        self.max_order = max_order
        self.keep_candidates = keep_candidates
        self.near_miss = near_miss if keep_candidates else 0.0
        self.tx = scene.tx_position
        self.wavelength = scene.wavelength
        self._sides = {}

    def _pair_sides(self, lo, a_idx):
        """Side tests that any bounce on a then b must pass, shape (len(a_idx), T) each.

        ``front``: some vertex of b lies on the transmitter's side of a. ``above`` and
        ``below``: some vertex of a lies on the positive or negative side of b."""
        cached = self._sides.get(lo)
        if cached is not None:
            return cached
        soup = self.soup
        n, d = soup.normals, soup.offsets
        slack = self.near_miss + EPSILON_RAY
        corners = soup.vertices[soup.triangles]
        toward = np.sign(n[a_idx] @ self.tx - d[a_idx])
        to_a = np.einsum("bkj,aj->abk", corners, n[a_idx]) - d[a_idx, None, None]
        front = np.any(to_a * toward[:, None, None] > -slack, axis=2)
        to_b = np.einsum("akj,bj->abk", corners[a_idx], n) - d[None, :, None]
        sides = (front, np.any(to_b > -slack, axis=2), np.any(to_b < slack, axis=2))
        if soup.n_triangles <= _PAIR_CACHE_LIMIT:
            self._sides[lo] = sides
        return sides

    def chains(self, rx):
        """List of (vertex chains, triangle ids, near-miss flags), one entry per batch"""
        soup = self.soup
        tx = self.tx
        found = []
        if np.linalg.norm(rx - tx) > EPSILON_RAY:
            found.append((np.array([[tx, rx]]), np.zeros((1, 0), dtype=np.int64), np.zeros(1, dtype=bool)))
        if self.max_order < 1 or not soup.n_triangles:
            return found

        n, d = soup.normals, soup.offsets
        side_tx = n @ tx - d
        side_rx = n @ rx - d
        facing = (np.abs(side_tx) > EPSILON_RAY) & (side_tx * side_rx > 0) & (np.abs(side_rx) > EPSILON_RAY)
        tri = np.flatnonzero(facing)
        if len(tri):
            image = tx - 2.0 * side_tx[tri, None] * n[tri]
            t = side_rx[tri] / (side_rx[tri] + side_tx[tri])
            x = rx + t[:, None] * (image - rx)
            inside, near = soup.classify(x, tri, self.near_miss)
            keep = inside | near
            if np.any(keep):
                k = np.flatnonzero(keep)
                chain = np.stack([np.broadcast_to(tx, (len(k), 3)), x[k], np.broadcast_to(rx, (len(k), 3))], axis=1)
                found.append((chain, tri[k, None], near[k]))

        if self.max_order < 2:
            return found

        tx_ok = np.flatnonzero(np.abs(side_tx) > EPSILON_RAY)
        for lo in range(0, len(tx_ok), _PAIR_CHUNK):
            a_idx = tx_ok[lo:lo + _PAIR_CHUNK]
            first_image = tx - 2.0 * side_tx[a_idx, None] * n[a_idx]
            side_b = first_image @ n.T - d[None, :]
            valid = (side_b * side_rx[None, :] > 0) & (np.abs(side_b) > EPSILON_RAY) \
                & (np.abs(side_rx)[None, :] > EPSILON_RAY)
            valid[np.arange(len(a_idx)), a_idx] = False
            front, above, below = self._pair_sides(lo, a_idx)
            valid &= front & np.where(side_rx[None, :] > 0, above, below)
            rows, b = np.nonzero(valid)
            if not len(rows):
                continue
            a = a_idx[rows]
            image1 = first_image[rows]
            s = side_b[rows, b]
            image2 = image1 - 2.0 * s[:, None] * n[b]
            t2 = side_rx[b] / (side_rx[b] + s)
            x2 = rx + t2[:, None] * (image2 - rx)
            inside_b, near_b = soup.classify(x2, b, self.near_miss)
            ok = inside_b | near_b
            side_x2 = np.einsum("ij,ij->i", x2, n[a]) - d[a]
            ok &= (side_x2 * side_tx[a] > 0) & (np.abs(side_x2) > EPSILON_RAY)
            if not np.any(ok):
                continue
            sel = np.flatnonzero(ok)
            a, b, x2, image1 = a[sel], b[sel], x2[sel], image1[sel]
            near_b, side_x2 = near_b[sel], side_x2[sel]
            t1 = side_x2 / (side_x2 + side_tx[a])
            x1 = x2 + t1[:, None] * (image1 - x2)
            inside_a, near_a = soup.classify(x1, a, self.near_miss)
            ok = inside_a | near_a
            if not np.any(ok):
                continue
            sel = np.flatnonzero(ok)
            m = len(sel)
            chain = np.stack([np.broadcast_to(tx, (m, 3)), x1[sel], x2[sel], np.broadcast_to(rx, (m, 3))], axis=1)
            found.append((chain, np.stack([a[sel], b[sel]], axis=1), near_a[sel] | near_b[sel]))
        return found

    def trace(self, rx_index):
        """Trace all visible (and optionally candidate) paths for one receive element"""
        rx = self.scene.rx_array[rx_index]
        visible = []
        candidates = []
        for chain, tris, near in self.chains(rx):
            n_seg = chain.shape[1] - 1
            starts = chain[:, :-1].reshape(-1, 3)
            ends = chain[:, 1:].reshape(-1, 3)
            blockers = self.soup.first_blockers(starts, ends).reshape(len(chain), n_seg)
            for k in range(len(chain)):
                blocked = blockers[k][blockers[k] >= 0]
                if near[k]:
                    if len(blocked):
                        continue
                    status = OUTSIDE
                elif len(blocked):
                    if not self.keep_candidates:
                        continue
                    status = OCCLUDED
                else:
                    status = VISIBLE
                path = self._make_path(chain[k], tuple(int(t) for t in tris[k]), rx_index, status,
                                       int(blocked[0]) if len(blocked) else None)
                if path is None:
                    continue
                (visible if status == VISIBLE else candidates).append(path)
        return _deduplicate(visible), _deduplicate(candidates)

    def _make_path(self, chain, triangle_ids, rx_index, status, blocker):
        length = float(np.sum(np.linalg.norm(np.diff(chain, axis=0), axis=1)))
        rho = [float(self.soup.rho[t]) for t in triangle_ids]
        alpha = self.wavelength / (4.0 * math.pi * length) * math.prod(rho)
        if alpha <= 0.0:
            logger.debug("Dropping zero-amplitude path via triangles %s", triangle_ids)
            return None
        tau = length / self.scene.c
        phi = math.fmod(2.0 * math.pi * self.scene.f0 * tau, 2.0 * math.pi)
        return PropagationPath(
            vertex_chain=np.array(chain, dtype=float),
            order=len(triangle_ids),
            triangle_ids=triangle_ids,
            tau=tau,
            alpha=alpha,
            phi=phi,
            rx_index=rx_index,
            material_ids=tuple(int(self.soup.material_ids[t]) for t in triangle_ids),
            status=status,
            blocker=blocker,
        )


def _deduplicate(paths: List[PropagationPath]) -> List[PropagationPath]:
    """Sort paths and drop reflection chains found on two coplanar triangles"""
    paths = sorted(paths, key=lambda p: p.sort_key)
    kept: List[PropagationPath] = []
    for path in paths:
        duplicate = False
        for other in reversed(kept):
            if path.tau - other.tau > _DUPLICATE_DELAY:
                break
            if other.order == path.order and \
                    np.max(np.abs(other.vertex_chain - path.vertex_chain)) < _DUPLICATE_DISTANCE:
                duplicate = True
                break
        if not duplicate:
            kept.append(path)
    return kept


def trace_paths(scene: Scene, max_order=2, keep_candidates=False, near_miss=0.0,
                threads=1, soup: Optional[TriangleSoup] = None) -> CirSample:
    """Enumerate line-of-sight and specular paths with the image method.

    :param scene: the scene to trace
    :param max_order: highest reflection order (0, 1 or 2)
    :param keep_candidates: also return occluded chains and, when ``near_miss`` is
        positive, chains whose reflection point lies just outside a border or sharp edge
    :param near_miss: distance (m) outside a face for which a near-miss chain is kept
    :param threads: worker threads, one receive element per task
    :param soup: a prebuilt TriangleSoup for this scene
    """
    if max_order not in (0, 1, 2):
        raise UnsupportedOrderError(f"Reflection order {max_order} is not supported (maximum {MAX_ORDER})")
    soup = soup if soup is not None else TriangleSoup(scene)
    worker = _RxTracer(scene, soup, max_order, keep_candidates, near_miss)
    indices = range(scene.n_rx)
    if threads > 1 and scene.n_rx > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(worker.trace, indices))
    else:
        results = [worker.trace(i) for i in indices]
    paths = sorted((p for v, _ in results for p in v), key=lambda p: p.sort_key)
    candidates = sorted((p for _, c in results for p in c), key=lambda p: p.sort_key)
    logger.debug("Traced %d paths (%d candidates) for %d receivers",
                 len(paths), len(candidates), scene.n_rx)
    return CirSample(tuple(paths), scene.n_rx, scene.params.fingerprint(), tuple(candidates))


def assemble_cir(sample: CirSample, rx_index) -> List[Tuple[float, complex]]:
    """Discrete CIR taps (tau, alpha * exp(j phi)) for one receive element"""
    return [(p.tau, p.amplitude) for p in sample.for_rx(rx_index)]


def coherent_sum(taps: Sequence[Tuple[float, complex]]) -> complex:
    """Superpose taps; the result does not depend on the order of the taps"""
    values = [complex(a) for _, a in taps]
    return complex(math.fsum(v.real for v in values), math.fsum(v.imag for v in values))
