import math

import numpy as np
import pytest

from src.models.schemas import OMEGA_MAX, V_MAX, Action, Pose, WorldSpec, wrap_angle
from src.services.simulator_service import SimulatorService, compile_world


def test_action_is_clamped_to_robot_limits():
    action = Action(v=5.0, omega=-3.0)
    assert action.v == V_MAX
    assert action.omega == -OMEGA_MAX
    assert Action(v=-1.0).v == 0.0


def test_pose_heading_is_wrapped():
    assert Pose(x=0.0, y=0.0, heading=3 * math.pi / 2).heading == pytest.approx(-math.pi / 2)
    assert wrap_angle(math.pi) == pytest.approx(-math.pi)


def test_step_integrates_unicycle(simulator, world):
    pose, collided = simulator.step(Pose(x=2.0, y=2.0, heading=0.0), Action(v=0.3, omega=0.5), 1.0, world)
    assert not collided
    assert pose.x == pytest.approx(2.3)
    assert pose.y == pytest.approx(2.0)
    assert pose.heading == pytest.approx(0.5)


def test_step_rejects_non_positive_dt(simulator, world):
    with pytest.raises(ValueError, match="dt must be positive"):
        simulator.step(Pose(x=2.0, y=2.0), Action(), 0.0, world)


def test_wall_collision_pushes_robot_back_inside(simulator, world):
    pose, collided = simulator.step(Pose(x=7.9, y=4.0, heading=0.0), Action(v=0.3), 1.0, world)
    assert collided
    assert pose.x == pytest.approx(world.width - world.robot_radius)
    assert pose.y == pytest.approx(4.0)


def test_step_into_wall_stops_at_robot_radius(simulator, world):
    r = world.robot_radius
    start = Pose(x=world.width - r - 0.05, y=4.0, heading=0.0)
    pose, collided = simulator.step(start, Action(v=0.2), 1.0, world)
    assert collided
    assert world.width - pose.x == pytest.approx(r)
    assert pose.y == pytest.approx(4.0)


def test_landmark_collision_keeps_robot_outside_disc(simulator, world):
    landmark = world.landmarks[0]
    start = Pose(x=landmark.x, y=landmark.y - 0.5, heading=math.pi / 2)
    pose, collided = simulator.step(start, Action(v=0.3), 1.0, world)
    assert collided
    assert math.hypot(pose.x - landmark.x, pose.y - landmark.y) >= landmark.radius + world.robot_radius - 1e-9


def test_render_shape_range_and_purity(simulator, world):
    pose = Pose(x=4.0, y=4.0, heading=0.3)
    image = simulator.render(pose, world)
    assert image.shape == (3, world.image_height, world.n_rays)
    assert image.dtype == np.float32
    assert image.min() >= 0.0 and image.max() <= 1.0
    np.testing.assert_array_equal(image, simulator.render(pose, world))


def test_render_small_world_resolution(simulator, small_world):
    image = simulator.render(Pose(x=2.0, y=2.0), small_world)
    assert image.shape == (3, 8, 16)


def test_pixel_noise_needs_rng(simulator):
    noisy = WorldSpec(pixel_noise=0.05)
    pose = Pose(x=4.0, y=4.0)
    clean = simulator.render(pose, noisy)
    np.testing.assert_array_equal(clean, simulator.render(pose, WorldSpec()))
    assert not np.array_equal(clean, simulator.render(pose, noisy, rng=np.random.default_rng(0)))


def test_chair_walls_alias_under_quarter_turn(simulator, world):
    pose = Pose(x=4.0, y=1.5, heading=-math.pi / 2)
    twin = simulator.aliased_twin(pose, world)
    assert twin.x == pytest.approx(6.5)
    assert twin.y == pytest.approx(4.0)
    assert twin.heading == pytest.approx(0.0)
    difference = np.abs(simulator.render(pose, world) - simulator.render(twin, world))
    assert float(difference.mean()) < 0.01


def test_plain_wall_breaks_aliasing(simulator, world):
    pose = Pose(x=4.0, y=6.5, heading=math.pi / 2)
    twin = simulator.aliased_twin(pose, world)
    difference = np.abs(simulator.render(pose, world) - simulator.render(twin, world))
    assert float(difference.mean()) > 0.05


def test_aliased_twin_needs_square_arena(simulator):
    with pytest.raises(ValueError, match="square"):
        simulator.aliased_twin(Pose(x=1.0, y=1.0), WorldSpec(width=8.0, height=6.0))


def test_rays_hit_facing_wall(simulator, world):
    hits = simulator.cast_rays(4.0, 4.0, np.array([0.0, math.pi / 2]), world)
    assert hits.wall_distance[0] == pytest.approx(4.0)
    assert hits.wall_distance[1] == pytest.approx(4.0)
    assert np.all(np.isfinite(hits.distance))


def test_probe_distances_subtract_radius(simulator, world):
    distances = simulator.probe_distances(Pose(x=4.0, y=2.0, heading=-math.pi / 2), np.array([0.0]), world)
    assert distances[0] == pytest.approx(2.0 - world.robot_radius)


def test_world_rejects_open_boundary():
    with pytest.raises(ValueError, match="closed boundary"):
        WorldSpec(walls=[{"start": (0.0, 0.0), "end": (8.0, 0.0)}, {"start": (8.0, 1.0), "end": (0.0, 0.0)}])


def test_world_rejects_landmark_outside():
    with pytest.raises(ValueError, match="outside the arena"):
        WorldSpec(landmarks=[{"x": 9.0, "y": 1.0, "color": (1.0, 0.0, 0.0)}])


def test_compiled_world_has_inward_normals(world):
    geo = compile_world(world)
    center = np.array([world.width / 2, world.height / 2])
    for start, normal in zip(geo.starts, geo.normals):
        assert float(np.dot(center - start, normal)) > 0


def test_loop_poses_completes_one_lap(simulator, world):
    poses, actions = simulator.loop_poses(world)
    assert poses.shape[0] == actions.shape[0]
    assert poses.shape[1] == 3 and actions.shape[1] == 2
    assert poses.shape[0] < 2000
    margin = 1.6
    assert np.all(poses[:, 0] > margin - 0.2) and np.all(poses[:, 0] < world.width - margin + 0.2)
    assert np.all(poses[:, 1] > margin - 0.2) and np.all(poses[:, 1] < world.height - margin + 0.2)
    assert math.hypot(poses[-1, 0] - poses[0, 0], poses[-1, 1] - poses[0, 1]) < 0.1
    assert np.all(actions[:, 0] <= V_MAX + 1e-6)
    assert np.all(np.abs(actions[:, 1]) <= OMEGA_MAX + 1e-6)


def test_service_singleton():
    from src.services.simulator_service import get_simulator_service

    assert get_simulator_service() is get_simulator_service()
    assert isinstance(get_simulator_service(), SimulatorService)


def test_pure_rotation_keeps_position(simulator, world):
    start = Pose(x=3.0, y=3.0, heading=0.0)
    pose, collided = simulator.step(start, Action(v=0.0, omega=1.0), math.pi / 2, world)
    assert not collided
    assert (pose.x, pose.y) == (3.0, 3.0)
    assert pose.heading == pytest.approx(math.pi / 2)
    still, _ = simulator.step(start, Action(), 1.0, world)
    assert still == start


def test_green_landmark_dominates_its_columns(simulator, world):
    image = simulator.render(Pose(x=6.4, y=6.0, heading=math.pi / 2), world)
    patch = image[:, 13:19, 15:17]
    assert np.all(patch[1] > patch[0])
    assert np.all(patch[1] > patch[2])


def test_full_turn_in_place_returns_to_first_view(simulator, world):
    n, dt = 32, 0.2
    pose = Pose(x=4.0, y=3.0, heading=0.3)
    frames = [simulator.render(pose, world)]
    for _ in range(n):
        pose, _ = simulator.step(pose, Action(v=0.0, omega=2 * math.pi / (n * dt)), dt, world)
        frames.append(simulator.render(pose, world))
    first_last = np.mean((frames[0] - frames[n]) ** 2)
    first_mid = np.mean((frames[0] - frames[n // 2]) ** 2)
    assert first_last < 1e-6 < first_mid
