# rfit/geometry.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=invalid-name,too-many-instance-attributes

"""Meshes, materials, the differentiable scene parameterisation and the mesh Laplacian"""

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from .errors import MeshError, ParameterError, SceneError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299792458.0

# Triangles smaller than this (m^2) are rejected as numerically useless
MIN_TRIANGLE_AREA = 1e-12

# Default dihedral angle above which an edge is treated as sharp
SHARP_ANGLE_DEG = 30.0

_AXES = "xyz"


def triangle_areas(vertices, triangles):
    """Return the area of each triangle"""
    v0 = vertices[triangles[:, 0]]
    cross = np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)
    return 0.5 * np.linalg.norm(cross, axis=1)


def ray_triangle_distances(origin, direction, v0, e1, e2, epsilon=1e-12):
    """Moller-Trumbore test of one ray against many triangles.

    Edges and vertices count as hits so that rays through shared edges never leak
    between adjacent triangles.

    :param origin: ray origin, shape (3,)
    :param direction: unit ray direction, shape (3,)
    :param v0: first vertex of each triangle, shape (T, 3)
    :param e1: edge v1 - v0 of each triangle, shape (T, 3)
    :param e2: edge v2 - v0 of each triangle, shape (T, 3)
    :return: tuple of (distance, u, v) arrays; distance is ``inf`` for a miss
    """
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    parallel = np.abs(det) < epsilon
    inv_det = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    hit = ~parallel & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return np.where(hit, t, np.inf), u, v


@dataclass(frozen=True)
class Material:
    """A surface material with a scalar amplitude reflection coefficient"""
    name: str
    reflection_coefficient: float

    def __post_init__(self):
        if not 0.0 <= self.reflection_coefficient <= 1.0:
            raise ParameterError(
                f"material.{self.name}",
                f"Reflection coefficient of {self.name!r} must lie in [0, 1]"
            )


@dataclass(frozen=True)
class EdgeTable:
    """Unique undirected edges of a mesh with their adjacent faces.

    ``faces[:, 1]`` is -1 for border edges."""
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def is_border(self):
        """True for edges with a single adjacent face"""
        return self.faces[:, 1] < 0

    def dihedral_angles(self, vertices, triangles):
        """Angle between the normals of the two faces adjacent to each edge
        (radians, zero for coplanar faces and for border edges)"""
        normals = face_normals(vertices, triangles)
        angles = np.zeros(len(self.faces))
        inner = ~self.is_border
        f = self.faces[inner]
        cosines = np.einsum("ij,ij->i", normals[f[:, 0]], normals[f[:, 1]])
        angles[inner] = np.arccos(np.clip(cosines, -1.0, 1.0))
        return angles

    def discontinuous(self, vertices, triangles, sharp_angle_deg=SHARP_ANGLE_DEG):
        """Mask of edges across which the surface is not smooth (border or sharp)"""
        sharp = self.dihedral_angles(vertices, triangles) > np.radians(sharp_angle_deg)
        return self.is_border | sharp


def face_normals(vertices, triangles):
    """Unit normal of each triangle, following the right-hand winding rule"""
    v0 = vertices[triangles[:, 0]]
    cross = np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)
    return cross / np.linalg.norm(cross, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Mesh:
    """A triangle mesh with a material id per triangle"""
    vertices: np.ndarray
    triangles: np.ndarray
    material_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.material_ids is None:
            material_ids = np.zeros(len(triangles), dtype=np.int64)
        else:
            material_ids = np.array(self.material_ids, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "material_ids", material_ids)

        if len(material_ids) != len(triangles):
            raise MeshError("There must be one material id per triangle")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("Mesh vertices must be finite")
        if len(triangles):
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise MeshError("Triangle index out of range")
            areas = triangle_areas(vertices, triangles)
            bad = np.flatnonzero(areas <= MIN_TRIANGLE_AREA)
            if len(bad):
                raise MeshError(f"Degenerate triangle {int(bad[0])} (area {areas[bad[0]]:.3g} m^2)")
        # Building the edge table checks adjacency consistency
        _ = self.edges

    @cached_property
    def edges(self) -> EdgeTable:
        """The unique edges of the mesh; raises MeshError for non-manifold edges"""
        if not len(self.triangles):
            return EdgeTable(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64))
        half = np.concatenate([self.triangles[:, [0, 1]],
                               self.triangles[:, [1, 2]],
                               self.triangles[:, [2, 0]]])
        owner = np.tile(np.arange(len(self.triangles)), 3)
        keys = np.sort(half, axis=1)
        unique, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            bad = unique[np.argmax(counts)]
            raise MeshError(f"Edge {tuple(int(i) for i in bad)} is shared by more than two triangles")
        faces = np.full((len(unique), 2), -1, dtype=np.int64)
        order = np.lexsort((owner, inverse))
        for slot_edge, slot_owner in zip(inverse[order], owner[order]):
            column = 0 if faces[slot_edge, 0] < 0 else 1
            faces[slot_edge, column] = slot_owner
        return EdgeTable(unique, faces)

    @property
    def n_vertices(self):
        """Number of vertices"""
        return len(self.vertices)

    @property
    def n_triangles(self):
        """Number of triangles"""
        return len(self.triangles)

    @property
    def is_closed(self):
        """True if every edge is shared by two triangles"""
        return bool(len(self.triangles)) and not np.any(self.edges.is_border)

    def with_vertices(self, vertices):
        """Return a mesh with the same topology and new vertex positions"""
        new = Mesh.__new__(Mesh)
        vertices = np.asarray(vertices, dtype=float)
        if vertices.shape != self.vertices.shape:
            raise MeshError("Replacement vertices must match the mesh vertex count")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("Mesh vertices must be finite")
        object.__setattr__(new, "vertices", vertices)
        object.__setattr__(new, "triangles", self.triangles)
        object.__setattr__(new, "material_ids", self.material_ids)
        new.__dict__["edges"] = self.edges
        areas = triangle_areas(vertices, self.triangles) if len(self.triangles) else np.zeros(0)
        if np.any(areas <= MIN_TRIANGLE_AREA):
            raise MeshError("Transformed mesh has a degenerate triangle")
        return new

    def contains(self, point):
        """Ray-parity inside test. Open meshes contain nothing."""
        if not self.is_closed:
            return False
        point = np.asarray(point, dtype=float)
        v0 = self.vertices[self.triangles[:, 0]]
        e1 = self.vertices[self.triangles[:, 1]] - v0
        e2 = self.vertices[self.triangles[:, 2]] - v0
        # An irrational-ish direction avoids hitting shared edges exactly
        direction = np.array([0.5773502691896258, 0.5773502691896257, 0.5773502691896259])
        direction /= np.linalg.norm(direction)
        t, _, _ = ray_triangle_distances(point, direction, v0, e1, e2)
        return bool(np.count_nonzero(np.isfinite(t) & (t > 0.0)) % 2)


@dataclass(frozen=True, eq=False)
class SceneParams:
    """The differentiable parameter vector theta of the optimised object.

    The flat layout is always ``[translation, rotation, scale, vertex_offsets,
    material_scalars]`` with the optional blocks omitted when absent.
    """
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    uniform_scale: float = 1.0
    vertex_offsets: Optional[np.ndarray] = None
    material_scalars: Optional[np.ndarray] = None
    material_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3))
        object.__setattr__(self, "uniform_scale", float(self.uniform_scale))
        if self.vertex_offsets is not None:
            object.__setattr__(self, "vertex_offsets",
                               np.array(self.vertex_offsets, dtype=float).reshape(-1, 3))
        if self.material_scalars is not None:
            object.__setattr__(self, "material_scalars",
                               np.array(self.material_scalars, dtype=float).reshape(-1))
            if self.material_names is None:
                names = tuple(str(i) for i in range(len(self.material_scalars)))
                object.__setattr__(self, "material_names", names)
            elif len(self.material_names) != len(self.material_scalars):
                raise ParameterError("material", "One material name is needed per material scalar")

        vector = self.pack()
        bad = np.flatnonzero(~np.isfinite(vector))
        if len(bad):
            name = self.names()[bad[0]]
            raise ParameterError(name, f"Parameter {name!r} is not finite")
        if self.uniform_scale <= 0.0:
            raise ParameterError("scale", "Uniform scale must be positive")
        if self.material_scalars is not None:
            for name, value in zip(self.material_names, self.material_scalars):
                if not 0.0 <= value <= 1.0:
                    raise ParameterError(f"material.{name}", f"Material scalar {name!r} must lie in [0, 1]")

    @classmethod
    def identity(cls, n_vertices=None, material_names=None, material_values=None):
        """Parameters that leave the base mesh unchanged.

        :param n_vertices: include a zero vertex offset block for this many vertices
        :param material_names: include a material scalar block with these names
        :param material_values: initial material scalars (defaults to ones)
        """
        offsets = None if n_vertices is None else np.zeros((n_vertices, 3))
        scalars = None
        if material_names is not None:
            material_names = tuple(material_names)
            scalars = (np.ones(len(material_names)) if material_values is None
                       else np.asarray(material_values, dtype=float))
        return cls(vertex_offsets=offsets, material_scalars=scalars, material_names=material_names)

    @property
    def layout(self) -> Dict[str, slice]:
        """Ordered map from parameter block name to its slice of the flat vector"""
        blocks = {"translation": slice(0, 3), "rotation": slice(3, 6), "scale": slice(6, 7)}
        start = 7
        if self.vertex_offsets is not None:
            stop = start + self.vertex_offsets.size
            blocks["vertex_offsets"] = slice(start, stop)
            start = stop
        if self.material_scalars is not None:
            blocks["material_scalars"] = slice(start, start + len(self.material_scalars))
        return blocks

    @property
    def size(self):
        """Length n of the flat parameter vector"""
        return 7 + (0 if self.vertex_offsets is None else self.vertex_offsets.size) + \
            (0 if self.material_scalars is None else len(self.material_scalars))

    def names(self) -> List[str]:
        """Human readable name of every component of the flat vector"""
        names = [f"translation.{a}" for a in _AXES] + [f"rotation.{a}" for a in _AXES] + ["scale"]
        if self.vertex_offsets is not None:
            names += [f"offset.{i}.{a}" for i in range(len(self.vertex_offsets)) for a in _AXES]
        if self.material_scalars is not None:
            names += [f"material.{n}" for n in self.material_names]
        return names

    def index(self, name):
        """Flat index of a named component"""
        try:
            return self.names().index(name)
        except ValueError:
            raise ParameterError(name, f"Unknown parameter {name!r}") from None

    def pack(self):
        """Flatten to the vector theta"""
        parts = [self.translation, self.rotation, [self.uniform_scale]]
        if self.vertex_offsets is not None:
            parts.append(self.vertex_offsets.reshape(-1))
        if self.material_scalars is not None:
            parts.append(self.material_scalars)
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def project(self, theta):
        """Clip the material scalars of a flat vector into [0, 1]"""
        theta = np.array(theta, dtype=float).reshape(-1)
        block = self.layout.get("material_scalars")
        if block is not None:
            theta[block] = np.clip(theta[block], 0.0, 1.0)
        return theta

    def unpack(self, theta):
        """Return parameters with this layout holding the values of ``theta``"""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if len(theta) != self.size:
            raise ParameterError("theta", f"Expected {self.size} parameters, got {len(theta)}")
        blocks = self.layout
        offsets = None
        scalars = None
        if "vertex_offsets" in blocks:
            offsets = theta[blocks["vertex_offsets"]].reshape(-1, 3).copy()
        if "material_scalars" in blocks:
            scalars = theta[blocks["material_scalars"]].copy()
        return SceneParams(theta[0:3].copy(), theta[3:6].copy(), theta[6], offsets, scalars,
                           self.material_names)

    def fingerprint(self):
        """Stable digest of the parameter values"""
        return hashlib.sha256(self.pack().tobytes()).hexdigest()[:16]


def rotation_matrix(rotation):
    """Rodrigues rotation matrix for an axis-angle vector"""
    return Rotation.from_rotvec(np.asarray(rotation, dtype=float)).as_matrix()


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_derivatives(rotation):
    """The three matrices dR/dr_i for the axis-angle vector r"""
    r = np.asarray(rotation, dtype=float)
    angle_sq = float(r @ r)
    if angle_sq < 1e-16:
        return [_skew(e) for e in np.eye(3)]
    R = rotation_matrix(r)
    eye = np.eye(3)
    return [(r[i] * _skew(r) + _skew(np.cross(r, (eye - R)[:, i]))) @ R / angle_sq
            for i in range(3)]


def _object_points(mesh, params):
    points = mesh.vertices
    if params.vertex_offsets is not None:
        if params.vertex_offsets.shape != points.shape:
            raise ParameterError("vertex_offsets", "Vertex offsets do not match the mesh")
        points = points + params.vertex_offsets
    return points


def apply_params(mesh: Mesh, params: SceneParams) -> Mesh:
    """Map the base mesh to world space: ``w = s R(r) (v + offset) + t``.

    Triangle topology is unchanged."""
    points = _object_points(mesh, params)
    world = params.uniform_scale * points @ rotation_matrix(params.rotation).T + params.translation
    return mesh.with_vertices(world)


def d_vertices_d_theta(mesh: Mesh, params: SceneParams, vertex_ids: Optional[Sequence[int]] = None):
    """Analytic Jacobian of world vertices with respect to the flat parameter vector.

    :param vertex_ids: restrict to these vertices (all vertices by default)
    :return: array of shape (k, 3, n)
    """
    points = _object_points(mesh, params)
    ids = np.arange(mesh.n_vertices) if vertex_ids is None else np.asarray(vertex_ids, dtype=np.int64)
    p = points[ids]
    s = params.uniform_scale
    R = rotation_matrix(params.rotation)
    jac = np.zeros((len(ids), 3, params.size))
    jac[:, :, 0:3] = np.eye(3)
    for i, dR in enumerate(rotation_derivatives(params.rotation)):
        jac[:, :, 3 + i] = s * p @ dR.T
    jac[:, :, 6] = p @ R.T
    blocks = params.layout
    if "vertex_offsets" in blocks:
        start = blocks["vertex_offsets"].start
        for row, vid in enumerate(ids):
            jac[row, :, start + 3 * vid:start + 3 * vid + 3] = s * R
    return jac


@dataclass(frozen=True, eq=False)
class LaplacianMatrix:
    """Regulariser matrix over the flat parameter vector.

    ``graph`` is the uniform vertex graph Laplacian; ``matrix`` embeds it, expanded
    over coordinates, into the vertex-offset block and places ``rigid_diagonal`` on
    the diagonal of every other component."""
    graph: sparse.csr_matrix
    matrix: sparse.csr_matrix
    offset_slice: Optional[slice]

    def energy(self, theta):
        """The quadratic form theta^T L theta"""
        theta = np.asarray(theta, dtype=float)
        return float(theta @ (self.matrix @ theta))

    def offset_energy(self, theta):
        """The quadratic form restricted to the vertex offset block"""
        if self.offset_slice is None:
            return 0.0
        x = np.asarray(theta, dtype=float)[self.offset_slice]
        block = self.matrix[self.offset_slice, self.offset_slice]
        return float(x @ (block @ x))

    def __matmul__(self, theta):
        return self.matrix @ np.asarray(theta, dtype=float)

    def max_eigenvalue(self):
        """Largest eigenvalue of the full matrix"""
        dense_limit = 600
        n = self.matrix.shape[0]
        if n <= dense_limit:
            return float(np.linalg.eigvalsh(self.matrix.toarray())[-1])
        from scipy.sparse.linalg import eigsh  # pylint: disable=import-outside-toplevel
        return float(eigsh(self.matrix, k=1, which="LA", return_eigenvectors=False)[0])


def build_laplacian(mesh: Mesh, params: Optional[SceneParams] = None, rigid_diagonal=1.0):
    """Build the uniform graph Laplacian of the mesh, embedded in the parameter layout.

    :param params: defines the layout; by default rigid parameters plus a vertex offset block
    :param rigid_diagonal: diagonal value for parameters outside the vertex offset block
    """
    if params is None:
        params = SceneParams.identity(n_vertices=mesh.n_vertices)
    n_vertices = mesh.n_vertices
    pairs = mesh.edges.vertices
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adjacency = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)),
                                  shape=(n_vertices, n_vertices)).tocsr()
    degree = np.asarray(adjacency.sum(axis=1)).reshape(-1)
    isolated = np.flatnonzero(degree == 0)
    if len(isolated):
        logger.warning("%d isolated vertices (first %d) have zero Laplacian rows",
                       len(isolated), int(isolated[0]))
    graph = (sparse.diags(degree) - adjacency).tocsr()

    blocks = params.layout
    offset_slice = blocks.get("vertex_offsets")
    n = params.size
    diagonal = np.full(n, float(rigid_diagonal))
    pieces = []
    if offset_slice is not None:
        if params.vertex_offsets.shape[0] != n_vertices:
            raise ParameterError("vertex_offsets", "Vertex offsets do not match the mesh")
        diagonal[offset_slice] = 0.0
        expanded = sparse.kron(graph, sparse.identity(3)).tocoo()
        pieces.append(sparse.coo_matrix(
            (expanded.data, (expanded.row + offset_slice.start, expanded.col + offset_slice.start)),
            shape=(n, n)))
    pieces.append(sparse.diags(diagonal))
    matrix = sparse.csr_matrix((n, n))
    for piece in pieces:
        matrix = matrix + piece
    return LaplacianMatrix(graph, matrix.tocsr(), offset_slice)


@dataclass(frozen=True, eq=False)
class Scene:
    """The optimised target, the static environment and the radar antennas"""
    target: Mesh
    params: SceneParams
    materials: Tuple[Material, ...]
    tx_position: np.ndarray
    rx_array: np.ndarray
    f0: float
    static_meshes: Tuple[Mesh, ...] = ()
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "static_meshes", tuple(self.static_meshes))
        object.__setattr__(self, "tx_position", np.array(self.tx_position, dtype=float).reshape(3))
        object.__setattr__(self, "rx_array", np.array(self.rx_array, dtype=float).reshape(-1, 3))
        if not len(self.rx_array):
            raise SceneError("The receive array must contain at least one element")
        if self.f0 <= 0.0 or self.c <= 0.0:
            raise SceneError("Carrier frequency and speed of light must be positive")
        n_materials = len(self.materials)
        for mesh in (self.target,) + self.static_meshes:
            if len(mesh.material_ids) and mesh.material_ids.max() >= n_materials:
                raise SceneError("Mesh refers to an undefined material")
        if self.params.material_scalars is not None and len(self.params.material_scalars) != n_materials:
            raise SceneError("One material scalar is needed per scene material")
        for mesh in (self.world_target,) + self.static_meshes:
            for antenna in np.vstack([self.tx_position, self.rx_array]):
                if mesh.contains(antenna):
                    raise SceneError(f"Antenna at {tuple(antenna)} lies inside a mesh")

    @cached_property
    def world_target(self) -> Mesh:
        """The target mesh in world space under the current parameters"""
        return apply_params(self.target, self.params)

    @property
    def wavelength(self):
        """Carrier wavelength (m)"""
        return self.c / self.f0

    @property
    def n_rx(self):
        """Number of receive elements"""
        return len(self.rx_array)

    def reflection_coefficients(self):
        """Effective reflection coefficient per material, honouring material scalars"""
        if self.params.material_scalars is not None:
            return np.array(self.params.material_scalars, dtype=float)
        return np.array([m.reflection_coefficient for m in self.materials], dtype=float)

    def with_params(self, params: SceneParams) -> "Scene":
        """Return a copy of the scene with new target parameters"""
        return Scene(self.target, params, self.materials, self.tx_position, self.rx_array,
                     self.f0, self.static_meshes, self.c)

    def with_antennas(self, tx_position, rx_array) -> "Scene":
        """Return a copy of the scene with new antenna positions"""
        return Scene(self.target, self.params, self.materials, tx_position, rx_array,
                     self.f0, self.static_meshes, self.c)
