# rfit/errors.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

"""Exceptions raised by rfit"""


class RfitError(ValueError):
    """Base class of all rfit errors. Subclasses ValueError so that callers
    can treat any bad input uniformly."""


class ParameterError(RfitError):
    """A scene parameter is out of range or non-finite"""
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"Invalid value for parameter {name!r}")


class MeshError(RfitError):
    """A mesh violates one of its structural invariants"""


class SceneError(RfitError):
    """A scene is inconsistent (antenna placement, empty arrays, ...)"""


class UnsupportedOrderError(RfitError):
    """A reflection order beyond what the tracer implements was requested"""


class OutOfRangeError(RfitError):
    """A delay lies outside the unambiguous range of the radar"""


class ShapeMismatchError(RfitError):
    """Two arrays that must agree in shape do not"""


class SceneFileError(RfitError):
    """A scene or observation file could not be parsed"""
    def __init__(self, path, message, line=None, field=None):
        self.path = str(path)
        self.line = line
        self.field = field
        where = self.path
        if line is not None:
            where += f":{line}"
        if field is not None:
            where += f" [{field}]"
        super().__init__(f"{where}: {message}")


class DivergedError(RfitError):
    """An optimisation step was refused because the gradient is not finite"""
