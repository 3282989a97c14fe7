import math

import numpy as np
import pytest

from src.models.schemas import Pose
from src.utils.geometry import (
    goal_check,
    heading_difference,
    spatial_distance,
    spatial_distance_array,
    wrap_angle_array,
)


def test_heading_difference_wraps_across_pi():
    assert heading_difference(math.pi - 0.1, -math.pi + 0.1) == pytest.approx(0.2)
    assert heading_difference(0.0, math.pi) == pytest.approx(math.pi)


def test_spatial_distance_adds_weighted_heading():
    a = Pose(x=0.0, y=0.0, heading=0.0)
    b = Pose(x=3.0, y=4.0, heading=1.0)
    assert spatial_distance(a, b) == pytest.approx(5.5)
    assert spatial_distance(a, b, heading_weight=0.0) == pytest.approx(5.0)


def test_spatial_distance_array_matches_scalar(rng):
    a = rng.uniform(-4.0, 4.0, size=(20, 3))
    b = rng.uniform(-4.0, 4.0, size=(20, 3))
    expected = [
        spatial_distance(Pose(x=p[0], y=p[1], heading=p[2]), Pose(x=q[0], y=q[1], heading=q[2]))
        for p, q in zip(a, b)
    ]
    np.testing.assert_allclose(spatial_distance_array(a, b), expected, atol=1e-9)


def test_wrap_angle_array_range():
    wrapped = wrap_angle_array(np.array([math.pi, -math.pi, 3 * math.pi, 7.0, -7.0]))
    assert np.all(wrapped >= -math.pi) and np.all(wrapped < math.pi)
    assert wrapped[0] == pytest.approx(-math.pi)
    assert wrapped[3] == pytest.approx(7.0 - 2 * math.pi)


def test_goal_check_closed_ball():
    goal = Pose(x=0.0, y=0.0, heading=0.0)
    assert goal_check(Pose(x=0.5, y=0.0, heading=0.0), goal, radius=0.5, heading_tol=0.1)
    assert not goal_check(Pose(x=0.51, y=0.0, heading=0.0), goal, radius=0.5, heading_tol=0.1)


def test_goal_check_heading_tolerance():
    goal = Pose(x=0.0, y=0.0, heading=0.0)
    assert goal_check(Pose(x=0.0, y=0.0, heading=1.0), goal, radius=0.5, heading_tol=math.pi / 3)
    assert not goal_check(Pose(x=0.0, y=0.0, heading=1.2), goal, radius=0.5, heading_tol=math.pi / 3)


def test_goal_check_rejects_non_positive_radius():
    with pytest.raises(ValueError, match="radius"):
        goal_check(Pose(x=0.0, y=0.0), Pose(x=0.0, y=0.0), radius=0.0, heading_tol=1.0)
