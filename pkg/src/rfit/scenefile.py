# rfit/scenefile.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=too-many-locals

"""Reading scene descriptions and reading and writing the result file formats"""

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import trimesh

from .errors import RfitError, SceneFileError
from .geometry import Material, Mesh, Scene, SceneParams
from .gradients import BoundaryConfig, GradientReport
from .optimize import FitTrace, LossConfig, OptimizerConfig
from .radar import AngleGrid, RadarConfig, SpatialSpectrum, SurrogateConfig
from .tracer import CirSample
from .utils import atomic_write

logger = logging.getLogger(__name__)

REQUIRED_SECTIONS = ("mesh", "materials", "params", "radar", "array")

GRID_MAGIC = b"RFGRID01"
GRID_DTYPE = b"f8"

CIR_COLUMNS = ("rx_index", "order", "tau_s", "alpha", "phi_rad", "vertex_chain")
PROFILE_COLUMNS = ("rx_index", "bin", "tau_s", "re", "im")
SPECTRUM_COLUMNS = ("bin", "azimuth_rad", "elevation_rad", "power")
GRADIENT_COLUMNS = ("param_name", "analytic", "fd", "abs_err", "rel_err", "boundary_flag")


@dataclass(frozen=True, eq=False)
class SceneFile:
    """A parsed scene description with the optional configuration sections"""
    path: Path
    scene: Scene
    radar: RadarConfig
    surrogate: Optional[SurrogateConfig]
    boundary: Optional[BoundaryConfig]
    loss: Optional[LossConfig]
    optimizer: Optional[OptimizerConfig]
    raw: dict


def _line_of(text, key):
    """1-based line of the first occurrence of a JSON key, if any"""
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


class _Reader:
    """Pulls typed fields out of the JSON document, reporting path, line and field on failure"""
    def __init__(self, path, text):
        self.path = path
        self.text = text

    def fail(self, field, message):
        """Raise a SceneFileError located at ``field``"""
        raise SceneFileError(self.path, message, line=_line_of(self.text, field.split(".")[-1]),
                             field=field)

    def section(self, data, name, required=True):
        """A mapping-valued entry"""
        if name not in data:
            if required:
                raise SceneFileError(self.path, f"Missing required section {name!r}", field=name)
            return None
        if not isinstance(data[name], dict):
            self.fail(name, "Expected an object")
        return data[name]

    def array(self, data, key, field, shape=None):
        """A numeric array entry"""
        if key not in data:
            self.fail(field, "Missing required field")
        try:
            value = np.asarray(data[key], dtype=float)
        except (TypeError, ValueError):
            self.fail(field, "Expected numbers")
        if shape is not None and value.shape != shape:
            self.fail(field, f"Expected shape {shape}, got {value.shape}")
        return value

    def build(self, field, factory, values):
        """Construct a configuration object, relocating its validation errors"""
        try:
            return factory(**values)
        except TypeError as exc:
            self.fail(field, str(exc))
        except RfitError as exc:
            self.fail(field, str(exc))
        return None

    def mesh(self, spec, field):
        """A mesh given inline or as a path to an OBJ file"""
        if "path" in spec:
            mesh_path = (Path(self.path).parent / spec["path"]).resolve()
            if not mesh_path.exists():
                raise SceneFileError(mesh_path, "Mesh file not found", field=f"{field}.path")
            try:
                loaded = trimesh.load(mesh_path, force="mesh", process=False)
            except Exception as exc:  # pylint: disable=broad-exception-caught
                raise SceneFileError(mesh_path, f"Unreadable mesh: {exc}", field=f"{field}.path") from exc
            if isinstance(loaded, trimesh.Scene):
                meshes = [g for g in loaded.geometry.values() if isinstance(g, trimesh.Trimesh)]
                if not meshes:
                    raise SceneFileError(mesh_path, "No mesh geometry in file", field=f"{field}.path")
                loaded = trimesh.util.concatenate(meshes)
            vertices = np.asarray(loaded.vertices, dtype=float)
            triangles = np.asarray(loaded.faces, dtype=np.int64)
        else:
            vertices = self.array(spec, "vertices", f"{field}.vertices")
            triangles = self.array(spec, "triangles", f"{field}.triangles").astype(np.int64)
        material_ids = spec.get("material_ids")
        if isinstance(material_ids, int):
            material_ids = np.full(len(triangles), material_ids)
        try:
            return Mesh(vertices, triangles, material_ids)
        except RfitError as exc:
            self.fail(field, str(exc))
        return None


def _params(reader, section, n_vertices, materials):
    values = {}
    for key, size in (("translation", 3), ("rotation", 3)):
        if key in section:
            values[key] = reader.array(section, key, f"params.{key}", (size,))
    if "scale" in section:
        values["uniform_scale"] = section["scale"]
    offsets = section.get("vertex_offsets")
    if offsets is True:
        values["vertex_offsets"] = np.zeros((n_vertices, 3))
    elif offsets not in (None, False):
        values["vertex_offsets"] = reader.array(section, "vertex_offsets", "params.vertex_offsets",
                                                (n_vertices, 3))
    scalars = section.get("material_scalars")
    if scalars is True:
        values["material_scalars"] = np.array([m.reflection_coefficient for m in materials])
    elif scalars not in (None, False):
        values["material_scalars"] = reader.array(section, "material_scalars", "params.material_scalars",
                                                  (len(materials),))
    if "material_scalars" in values:
        values["material_names"] = tuple(m.name for m in materials)
    return reader.build("params", SceneParams, values)


def load_scene(path) -> SceneFile:
    """Parse a JSON scene description.

    :raises SceneFileError: naming the file, line and field of the first problem
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneFileError(path, f"Cannot read scene file: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFileError(path, exc.msg, line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise SceneFileError(path, "A scene file must hold a JSON object")
    reader = _Reader(path, text)
    for name in REQUIRED_SECTIONS:
        if name not in data:
            raise SceneFileError(path, f"Missing required section {name!r}", field=name)

    target = reader.mesh(reader.section(data, "mesh"), "mesh")
    if not isinstance(data["materials"], list) or not data["materials"]:
        reader.fail("materials", "Expected a non-empty list of materials")
    materials = tuple(reader.build(f"materials.{i}", Material, m) for i, m in enumerate(data["materials"]))
    params = _params(reader, reader.section(data, "params"), target.n_vertices, materials)
    radar = reader.build("radar", RadarConfig, reader.section(data, "radar"))
    array = reader.section(data, "array")
    tx = reader.array(array, "tx", "array.tx", (3,))
    rx = reader.array(array, "rx", "array.rx")
    if rx.ndim != 2 or rx.shape[1] != 3:
        reader.fail("array.rx", "Expected a list of [x, y, z] positions")
    static = data.get("static_meshes", [])
    if not isinstance(static, list):
        reader.fail("static_meshes", "Expected a list of meshes")
    static_meshes = tuple(reader.mesh(spec, f"static_meshes.{i}") for i, spec in enumerate(static))
    try:
        scene = Scene(target, params, materials, tx, rx, radar.f0, static_meshes)
    except RfitError as exc:
        raise SceneFileError(path, str(exc)) from exc

    optional = {}
    for name, factory in (("surrogate", SurrogateConfig), ("boundary", BoundaryConfig),
                          ("loss", LossConfig), ("optimizer", OptimizerConfig)):
        section = reader.section(data, name, required=False)
        optional[name] = None if section is None else reader.build(name, factory, section)
    logger.info("Loaded scene %s: %d target triangles, %d static meshes, %d receivers",
                path, target.n_triangles, len(static_meshes), scene.n_rx)
    return SceneFile(path, scene, radar, raw=data, **optional)


def save_scene(scene_file: SceneFile, params: SceneParams, path):
    """Write the scene description again with new target parameters"""
    data = json.loads(json.dumps(scene_file.raw))
    section = {"translation": params.translation.tolist(), "rotation": params.rotation.tolist(),
               "scale": params.uniform_scale}
    if params.vertex_offsets is not None:
        section["vertex_offsets"] = params.vertex_offsets.tolist()
    if params.material_scalars is not None:
        section["material_scalars"] = params.material_scalars.tolist()
    data["params"] = section
    # Relative mesh paths stay valid when written next to the original
    for spec in [data["mesh"]] + list(data.get("static_meshes", [])):
        if "path" in spec:
            spec["path"] = str((scene_file.path.parent / spec["path"]).resolve())
    return atomic_write(path, json.dumps(data, indent=2) + "\n")


def _csv_text(header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _read_rows(path, columns):
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header[:len(columns)]) != tuple(columns):
                raise SceneFileError(path, f"Expected columns {', '.join(columns)}", line=1)
            return [row for row in reader if row]
    except OSError as exc:
        raise SceneFileError(path, f"Cannot read file: {exc.strerror}") from exc


def write_cir_csv(path, sample: CirSample):
    """One row per visible path; the vertex chain is ``x y z`` triples joined by ``;``"""
    rows = []
    for p in sample.paths:
        chain = ";".join(" ".join(repr(float(c)) for c in point) for point in p.vertex_chain)
        rows.append((p.rx_index, p.order, repr(p.tau), repr(p.alpha), repr(p.phi), chain))
    return atomic_write(path, _csv_text(CIR_COLUMNS, rows))


def read_cir_csv(path):
    """Rows of (rx_index, order, tau, alpha, phi, vertex_chain)"""
    result = []
    for number, row in enumerate(_read_rows(path, CIR_COLUMNS), start=2):
        try:
            chain = np.array([[float(c) for c in point.split()] for point in row[5].split(";")])
            result.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4]), chain))
        except (IndexError, ValueError) as exc:
            raise SceneFileError(path, f"Malformed CIR row: {exc}", line=number) from exc
    return result


def write_profile_csv(path, values, delays):
    """Complex profiles, one row per receiver and bin"""
    values = np.asarray(values, dtype=complex).reshape(len(values), -1)
    rows = [(rx, k, repr(float(delays[k])), repr(float(v.real)), repr(float(v.imag)))
            for rx, row in enumerate(values) for k, v in enumerate(row)]
    return atomic_write(path, _csv_text(PROFILE_COLUMNS, rows))


def read_profile_csv(path):
    """Inverse of write_profile_csv: (values (n_rx, bins) complex, delays)"""
    rows = _read_rows(path, PROFILE_COLUMNS)
    if not rows:
        raise SceneFileError(path, "Profile file holds no rows")
    try:
        rx = np.array([int(r[0]) for r in rows])
        bins = np.array([int(r[1]) for r in rows])
        n_rx, n_bins = rx.max() + 1, bins.max() + 1
        values = np.zeros((n_rx, n_bins), dtype=complex)
        delays = np.zeros(n_bins)
        for r, k, row in zip(rx, bins, rows):
            values[r, k] = complex(float(row[3]), float(row[4]))
            delays[k] = float(row[2])
    except (IndexError, ValueError) as exc:
        raise SceneFileError(path, f"Malformed profile row: {exc}") from exc
    if len(rows) != n_rx * n_bins:
        raise SceneFileError(path, "Profile rows do not cover every receiver and bin")
    return values, delays


def write_spectrum_csv(path, spectrum: SpatialSpectrum):
    """Power per grid point; 2D spectra use bin 0"""
    power = spectrum.power if spectrum.power.ndim == 3 else spectrum.power[None]
    bins = spectrum.bins if spectrum.bins is not None else [0]
    rows = [(int(b), repr(float(az)), repr(float(el)), repr(float(power[k, i, j])))
            for k, b in enumerate(bins)
            for i, az in enumerate(spectrum.grid.azimuth)
            for j, el in enumerate(spectrum.grid.elevation)]
    return atomic_write(path, _csv_text(SPECTRUM_COLUMNS, rows))


def read_spectrum_csv(path) -> SpatialSpectrum:
    """Inverse of write_spectrum_csv"""
    rows = _read_rows(path, SPECTRUM_COLUMNS)
    try:
        bins = sorted({int(r[0]) for r in rows})
        azimuth = np.array(sorted({float(r[1]) for r in rows}))
        elevation = np.array(sorted({float(r[2]) for r in rows}))
        power = np.zeros((len(bins), len(azimuth), len(elevation)))
        slot = {b: k for k, b in enumerate(bins)}
        az_index = {a: i for i, a in enumerate(azimuth)}
        el_index = {e: j for j, e in enumerate(elevation)}
        for row in rows:
            power[slot[int(row[0])], az_index[float(row[1])], el_index[float(row[2])]] = float(row[3])
    except (IndexError, ValueError) as exc:
        raise SceneFileError(path, f"Malformed spectrum row: {exc}") from exc
    grid = AngleGrid(azimuth, elevation)
    if len(bins) == 1:
        return SpatialSpectrum(power[0], grid, "file")
    return SpatialSpectrum(power, grid, "file", bins=np.array(bins))


def write_grid(path, array):
    """Binary grid: magic, uint32 ndim, uint32 dims, dtype code, little-endian float64 data"""
    array = np.ascontiguousarray(array, dtype="<f8")
    header = GRID_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape) + GRID_DTYPE
    return atomic_write(path, header + array.tobytes())


def read_grid(path):
    """Inverse of write_grid"""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SceneFileError(path, f"Cannot read grid file: {exc.strerror}") from exc
    if data[:8] != GRID_MAGIC:
        raise SceneFileError(path, "Not a grid file")
    try:
        (ndim,) = struct.unpack_from("<I", data, 8)
        dims = struct.unpack_from(f"<{ndim}I", data, 12)
    except struct.error as exc:
        raise SceneFileError(path, f"Truncated grid header: {exc}") from exc
    start = 12 + 4 * ndim
    if data[start:start + 2] != GRID_DTYPE:
        raise SceneFileError(path, f"Unsupported grid dtype {data[start:start + 2]!r}")
    payload = data[start + 2:]
    if len(payload) != 8 * int(np.prod(dims)):
        raise SceneFileError(path, "Grid payload does not match its dimensions")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def write_gradient_report(path, report: GradientReport):
    """One row per checked component"""
    rows = [(name, repr(float(a)), repr(float(f)), repr(float(ae)), repr(float(re)),
             flag)
            for name, a, f, ae, re, flag in zip(report.names, report.analytic, report.fd,
                                                report.abs_err, report.rel_err, report.flags)]
    return atomic_write(path, _csv_text(GRADIENT_COLUMNS, rows))


def write_trace_csv(path, trace: FitTrace):
    """Iteration history with every parameter component"""
    header = ("iter", "loss", "grad_norm", "reg_energy") + tuple(trace.names)
    rows = [(r.iteration, repr(r.loss), repr(r.grad_norm), repr(r.reg_energy)) + tuple(repr(x) for x in r.theta)
            for r in trace.records]
    return atomic_write(path, _csv_text(header, rows))


def write_sweep_csv(path, name, values, losses):
    """Loss landscape: the swept value then one column per objective"""
    labels = sorted(losses)
    header = (name,) + tuple(f"loss_{label}" for label in labels)
    rows = [(repr(float(v)),) + tuple(repr(float(losses[label][k])) for label in labels)
            for k, v in enumerate(values)]
    return atomic_write(path, _csv_text(header, rows))


def load_observation(path):
    """An observation array from a profile CSV, a spectrum CSV or a binary grid"""
    path = Path(path)
    if not path.exists():
        raise SceneFileError(path, "Observation file not found")
    if path.read_bytes()[:8] == GRID_MAGIC:
        return read_grid(path)
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip().split(",")
    if tuple(first[:len(PROFILE_COLUMNS)]) == PROFILE_COLUMNS:
        return read_profile_csv(path)[0]
    if tuple(first[:len(SPECTRUM_COLUMNS)]) == SPECTRUM_COLUMNS:
        return read_spectrum_csv(path).power
    raise SceneFileError(path, "Unrecognised observation format", line=1)
