# rfit/checks.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=too-few-public-methods

"""A set of composable callables that compare computed values with reference values"""

import re

import numpy as np

_ATOL_SPEC = re.compile(r"\s*([0-9.]+(?:[eE][+-]?\d+)?)\s*(max)?\s*$")


class BaseCheck:
    """The base class of comparison checks. Do not use this class directly.

    A check is called with ``(value, reference)`` array-likes and returns a boolean
    array of the same shape. Checks combine with ``&`` and ``|``."""
    def __call__(self, value, reference):
        value = np.asarray(value, dtype=float)
        reference = np.asarray(reference, dtype=float)
        if value.shape != reference.shape:
            raise ValueError("Checked values and references must have the same shape")
        return self._compare(value, reference)

    def _compare(self, value, reference):  # pragma: no cover
        raise NotImplementedError

    def __and__(self, other):
        if not isinstance(other, BaseCheck):
            raise ValueError("rhs value must be another check")
        return AllOf(self, other)

    def __or__(self, other):
        if not isinstance(other, BaseCheck):
            raise ValueError("rhs value must be another check")
        return AnyOf(self, other)


class RelativeTolerance(BaseCheck):
    """Passes where ``|value - reference| / max(|reference|, floor) < rtol``"""
    def __init__(self, rtol, floor=1e-12):
        if not isinstance(rtol, (int, float)) or rtol <= 0:
            raise ValueError("Relative tolerance must be a positive number")
        self._rtol = rtol
        self._floor = floor

    def _compare(self, value, reference):
        return np.abs(value - reference) / np.maximum(np.abs(reference), self._floor) < self._rtol


class AbsoluteTolerance(BaseCheck):
    """Passes where ``|value - reference| < atol``"""
    def __init__(self, atol):
        """
        :param atol: either a number or a string of a number optionally followed by
            "max", in which case the tolerance is that fraction of the largest
            reference magnitude
        """
        self._scaled = False
        if isinstance(atol, str):
            match = _ATOL_SPEC.match(atol)
            if not match:
                raise ValueError("Malformed absolute tolerance string")
            count, unit = match.groups()
            atol = float(count)
            self._scaled = unit == "max"
        elif not isinstance(atol, (int, float)):
            raise ValueError("Absolute tolerance must be a number or a string of a number and 'max'")
        if atol < 0:
            raise ValueError("Absolute tolerance must not be negative")
        self._atol = float(atol)

    def _compare(self, value, reference):
        atol = self._atol
        if self._scaled:
            atol *= float(np.max(np.abs(reference), initial=0.0))
        return np.abs(value - reference) < atol


class SameSign(BaseCheck):
    """Passes where value and reference have the same sign"""
    def _compare(self, value, reference):
        return np.sign(value) == np.sign(reference)


class Finite(BaseCheck):
    """Passes where both value and reference are finite"""
    def _compare(self, value, reference):
        return np.isfinite(value) & np.isfinite(reference)


class AllOf(BaseCheck):
    """Passes where every sub-check passes"""
    def __init__(self, *checks):
        if not all(isinstance(c, BaseCheck) for c in checks):
            raise ValueError("AllOf only combines checks")
        self._checks = checks

    def _compare(self, value, reference):
        result = np.ones(value.shape, dtype=bool)
        for check in self._checks:
            result &= check(value, reference)
        return result


class AnyOf(BaseCheck):
    """Passes where at least one sub-check passes"""
    def __init__(self, *checks):
        if not all(isinstance(c, BaseCheck) for c in checks):
            raise ValueError("AnyOf only combines checks")
        self._checks = checks

    def _compare(self, value, reference):
        result = np.zeros(value.shape, dtype=bool)
        for check in self._checks:
            result |= check(value, reference)
        return result


def gradient_check(rtol=1e-3, atol="1e-6 max"):
    """The smooth-region check: relative agreement, or absolute agreement for tiny components"""
    return Finite() & (RelativeTolerance(rtol) | AbsoluteTolerance(atol))


def secant_check(rtol=0.2):
    """The check across visibility events: same sign and loose relative agreement"""
    return Finite() & SameSign() & RelativeTolerance(rtol)
