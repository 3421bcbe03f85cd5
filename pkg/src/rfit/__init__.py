# rfit

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

"""rfit: differentiable FMCW radar ray tracing and scene fitting"""

__version__ = "0.1.0"

from .errors import (RfitError, ParameterError, MeshError, SceneError, UnsupportedOrderError,
                     OutOfRangeError, ShapeMismatchError, SceneFileError, DivergedError)
from .geometry import (Mesh, Material, SceneParams, Scene, LaplacianMatrix, apply_params,
                       d_vertices_d_theta, build_laplacian)
from .tracer import PropagationPath, CirSample, trace_paths, assemble_cir, coherent_sum
from .radar import (RadarConfig, SurrogateConfig, Taps, RangeProfile, ArrayGeometry, AngleGrid,
                    SpatialSpectrum, if_signal, range_profile_exact, range_profile_surrogate,
                    steering_vector, beamform_spectrum, music_spectrum, airy_spatial_surrogate)
from .gradients import (BoundaryConfig, GradientReport, GradientResult, interior_path_jacobian,
                        boundary_term, total_gradient, fd_oracle)
from .optimize import (LossConfig, OptimizerConfig, SceneObjective, FitTrace, multiscale_mse, sgd_step,
                       fit, sweep)
from .checks import RelativeTolerance, AbsoluteTolerance, SameSign, Finite, gradient_check, secant_check

__all__ = [
    "RfitError", "ParameterError", "MeshError", "SceneError", "UnsupportedOrderError", "OutOfRangeError",
    "ShapeMismatchError", "SceneFileError", "DivergedError",
    "Mesh", "Material", "SceneParams", "Scene", "LaplacianMatrix", "apply_params", "d_vertices_d_theta",
    "build_laplacian",
    "PropagationPath", "CirSample", "trace_paths", "assemble_cir", "coherent_sum",
    "RadarConfig", "SurrogateConfig", "Taps", "RangeProfile", "ArrayGeometry", "AngleGrid", "SpatialSpectrum",
    "if_signal", "range_profile_exact", "range_profile_surrogate", "steering_vector", "beamform_spectrum",
    "music_spectrum", "airy_spatial_surrogate",
    "BoundaryConfig", "GradientReport", "GradientResult", "interior_path_jacobian", "boundary_term",
    "total_gradient", "fd_oracle",
    "LossConfig", "OptimizerConfig", "SceneObjective", "FitTrace", "multiscale_mse", "sgd_step", "fit", "sweep",
    "RelativeTolerance", "AbsoluteTolerance", "SameSign", "Finite", "gradient_check", "secant_check",
]
