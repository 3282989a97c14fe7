"""Pose arithmetic shared by the simulator, feature training and evaluation."""

import math

import numpy as np

from ..models.schemas import Pose, wrap_angle

DEFAULT_HEADING_WEIGHT = 0.5


def heading_difference(a: float, b: float) -> float:
    """|wrap(a - b)|, in [0, pi]."""
    return abs(wrap_angle(a - b))


def spatial_distance(a: Pose, b: Pose, heading_weight: float = DEFAULT_HEADING_WEIGHT) -> float:
    """Euclidean distance plus ``heading_weight`` world units per radian of heading difference."""
    return math.hypot(a.x - b.x, a.y - b.y) + heading_weight * heading_difference(
        a.heading, b.heading
    )


def spatial_distance_array(
    a: np.ndarray, b: np.ndarray, heading_weight: float = DEFAULT_HEADING_WEIGHT
) -> np.ndarray:
    """Vectorized ``spatial_distance`` over (..., 3) pose arrays [x, y, heading]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    position = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    dh = np.abs(wrap_angle_array(a[..., 2] - b[..., 2]))
    return position + heading_weight * dh


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)


def goal_check(pose: Pose, goal: Pose, radius: float, heading_tol: float) -> bool:
    """Closed-ball position test plus heading tolerance."""
    if radius <= 0:
        raise ValueError(f"Goal radius must be positive, got {radius}")
    distance = math.hypot(pose.x - goal.x, pose.y - goal.y)
    return distance <= radius and heading_difference(pose.heading, goal.heading) <= heading_tol
