"""Camera pose values and the median error metrics used for evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DegenerateQuaternionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


UNIT_TOL = 1e-9


def quat_normalize(q) -> np.ndarray:
    """Scale a (w, x, y, z) quaternion to unit length."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = float(np.sqrt(np.dot(q, q)))
    if not norm > 1e-12:
        raise DegenerateQuaternionError(f"quaternion norm {norm:g} too small to normalize")
    return q / norm


@dataclass(frozen=True)
class Pose:
    """Position in meters plus a unit quaternion stored as (w, x, y, z)."""

    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]

    @classmethod
    def from_arrays(cls, position, orientation, normalize: bool = True) -> "Pose":
        p = np.asarray(position, dtype=np.float64).reshape(3)
        q = np.asarray(orientation, dtype=np.float64).reshape(4)
        if normalize:
            q = quat_normalize(q)
        return cls(tuple(float(v) for v in p), tuple(float(v) for v in q))

    @property
    def p(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def q(self) -> np.ndarray:
        return np.array(self.orientation)


def position_error(est: Pose, truth: Pose) -> float:
    d = est.p - truth.p
    return float(np.sqrt(np.dot(d, d)))


def orientation_error(est: Pose, truth: Pose) -> float:
    """Geodesic rotation angle between two unit quaternions, in degrees.

    Equals 2 * arccos(|<a, b>|), evaluated as 4 * atan2(|a - b|, |a + b|)
    after aligning signs, which is exact at zero and well conditioned near
    it. q and -q compare as the same rotation.
    """
    a, b = est.q, truth.q
    for name, q in (("estimate", a), ("truth", b)):
        if abs(float(np.dot(q, q)) - 1.0) > 2 * UNIT_TOL:
            raise ContractError(f"{name} quaternion is not unit norm")
    if float(np.dot(a, b)) < 0.0:
        b = -b
    diff = a - b
    summ = a + b
    half = math.atan2(math.sqrt(float(np.dot(diff, diff))), math.sqrt(float(np.dot(summ, summ))))
    return min(180.0, math.degrees(4.0 * half))


def median(values: Sequence[float]) -> float:
    vals = sorted(float(v) for v in values)
    n = len(vals)
    if n == 0:
        raise EmptyInputError("median of empty list")
    mid = n // 2
    if n % 2:
        return vals[mid]
    return (vals[mid - 1] + vals[mid]) / 2.0
