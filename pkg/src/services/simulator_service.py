"""
Arena simulator: unicycle kinematics, collision handling and an egocentric
column raycast renderer.

The three "chair" walls are textured by the along-wall coordinate measured
counter-clockwise from each wall's start, so a pose and its 90-degree rotation
about the arena centre see the same image. The plain wall carries the
landmarks.
"""

import logging
import math
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np

from ..models.schemas import OMEGA_MAX, V_MAX, Action, Pose, WorldSpec, wrap_angle

logger = logging.getLogger(__name__)

CEILING_COLOR = np.array([0.90, 0.90, 0.92], dtype=np.float32)
FLOOR_COLOR = np.array([0.35, 0.33, 0.30], dtype=np.float32)
WALL_COLORS = {
    "chair": np.array([0.80, 0.72, 0.55], dtype=np.float32),
    "plain": np.array([0.30, 0.42, 0.75], dtype=np.float32),
}
CHAIR_COLOR = np.array([0.35, 0.22, 0.12], dtype=np.float32)
LANDMARK_HEIGHT = 0.6  # fraction of wall height
SHADE_FALLOFF = 0.08


class CompiledWorld(NamedTuple):
    starts: np.ndarray  # (W, 2)
    edges: np.ndarray  # (W, 2)
    lengths: np.ndarray  # (W,)
    normals: np.ndarray  # (W, 2) inward
    chair: np.ndarray  # (W,) bool
    wall_colors: np.ndarray  # (W, 3)
    centers: np.ndarray  # (L, 2)
    radii: np.ndarray  # (L,)
    landmark_colors: np.ndarray  # (L, 3)


class RayHits(NamedTuple):
    distance: np.ndarray  # ray parameter to nearest hit
    wall_distance: np.ndarray  # ray parameter to the wall hit
    wall_index: np.ndarray
    along: np.ndarray  # along-wall coordinate of the wall hit
    landmark_distance: np.ndarray  # inf where no landmark is hit
    landmark_index: np.ndarray


@lru_cache(maxsize=16)
def _compile(world_json: str) -> CompiledWorld:
    world = WorldSpec.model_validate_json(world_json)
    starts = np.array([w.start for w in world.walls], dtype=np.float64)
    ends = np.array([w.end for w in world.walls], dtype=np.float64)
    edges = ends - starts
    lengths = np.linalg.norm(edges, axis=1)
    unit = edges / lengths[:, None]
    normals = np.stack([-unit[:, 1], unit[:, 0]], axis=1)
    chair = np.array([w.texture == "chair" for w in world.walls])
    wall_colors = np.stack([WALL_COLORS.get(w.texture, WALL_COLORS["plain"]) for w in world.walls])
    centers = np.array([[lm.x, lm.y] for lm in world.landmarks], dtype=np.float64).reshape(-1, 2)
    radii = np.array([lm.radius for lm in world.landmarks], dtype=np.float64)
    landmark_colors = np.array([lm.color for lm in world.landmarks], dtype=np.float32).reshape(-1, 3)
    return CompiledWorld(
        starts, edges, lengths, normals, chair, wall_colors, centers, radii, landmark_colors
    )


def compile_world(world: WorldSpec) -> CompiledWorld:
    return _compile(world.model_dump_json())


def _chair_texture(phase: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Chair silhouette mask for texture phase in [0, 1) and wall height fraction v (0 = top)."""
    back = (phase >= 0.30) & (phase <= 0.70) & (v >= 0.35) & (v < 0.60)
    seat = (phase >= 0.25) & (phase <= 0.75) & (v >= 0.60) & (v < 0.68)
    legs = (((phase >= 0.27) & (phase <= 0.32)) | ((phase >= 0.68) & (phase <= 0.73))) & (v >= 0.68)
    return back | seat | legs


class SimulatorService:
    """Stateless arena physics and rendering."""

    def __init__(self, shade_falloff: float = SHADE_FALLOFF):
        self.shade_falloff = shade_falloff

    # ------------------------------------------------------------------
    # Kinematics

    def step(self, pose: Pose, action: Action, dt: float, world: WorldSpec) -> tuple[Pose, bool]:
        """Unicycle update followed by collision resolution."""
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        x = pose.x + action.v * math.cos(pose.heading) * dt
        y = pose.y + action.v * math.sin(pose.heading) * dt
        heading = wrap_angle(pose.heading + action.omega * dt)
        x, y, collided = self.resolve_collisions(x, y, world)
        return Pose(x=x, y=y, heading=heading), collided

    def resolve_collisions(self, x: float, y: float, world: WorldSpec) -> tuple[float, float, bool]:
        """Push the robot disc out of landmarks and walls, then clamp to the shrunk interior."""
        geo = compile_world(world)
        r = world.robot_radius
        p = np.array([x, y], dtype=np.float64)
        collided = False

        for center, radius in zip(geo.centers, geo.radii):
            offset = p - center
            dist = float(np.hypot(*offset))
            limit = radius + r
            if dist < limit:
                direction = offset / dist if dist > 1e-12 else np.array([0.0, -1.0])
                p = center + direction * limit
                collided = True

        for start, edge, length, normal in zip(geo.starts, geo.edges, geo.lengths, geo.normals):
            along = float(np.dot(p - start, edge)) / length
            if along < 0.0 or along > length:
                continue
            signed = float(np.dot(p - start, normal))
            if signed < r:
                p = p + (r - signed) * normal
                collided = True

        cx = min(max(p[0], r), world.width - r)
        cy = min(max(p[1], r), world.height - r)
        if cx != p[0] or cy != p[1]:
            collided = True
        return float(cx), float(cy), collided

    # ------------------------------------------------------------------
    # Raycasting

    def cast_rays(self, x: float, y: float, angles: np.ndarray, world: WorldSpec) -> RayHits:
        geo = compile_world(world)
        angles = np.asarray(angles, dtype=np.float64)
        d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (R, 2)
        o = np.array([x, y], dtype=np.float64)

        # Walls: o + t d = a + s e
        ao = geo.starts - o  # (W, 2)
        denom = d[:, None, 0] * geo.edges[None, :, 1] - d[:, None, 1] * geo.edges[None, :, 0]
        safe = np.where(np.abs(denom) < 1e-12, np.nan, denom)
        t = (ao[None, :, 0] * geo.edges[None, :, 1] - ao[None, :, 1] * geo.edges[None, :, 0]) / safe
        s = (ao[None, :, 0] * d[:, None, 1] - ao[None, :, 1] * d[:, None, 0]) / safe
        valid = (t > 1e-9) & (s >= -1e-9) & (s <= 1.0 + 1e-9)
        t = np.where(valid, t, np.inf)
        wall_index = np.argmin(t, axis=1)
        rows = np.arange(len(angles))
        wall_t = t[rows, wall_index]
        along = np.clip(s[rows, wall_index], 0.0, 1.0) * geo.lengths[wall_index]

        if len(geo.radii):
            oc = o - geo.centers  # (L, 2)
            b = d @ oc.T  # (R, L)
            c = np.sum(oc * oc, axis=1) - geo.radii**2
            disc = b * b - c[None, :]
            root = np.sqrt(np.maximum(disc, 0.0))
            tl = -b - root
            tl = np.where((disc >= 0.0) & (tl > 1e-9), tl, np.inf)
            landmark_index = np.argmin(tl, axis=1)
            landmark_t = tl[rows, landmark_index]
        else:
            landmark_index = np.zeros(len(angles), dtype=np.int64)
            landmark_t = np.full(len(angles), np.inf)

        return RayHits(
            distance=np.minimum(wall_t, landmark_t),
            wall_distance=wall_t,
            wall_index=wall_index,
            along=along,
            landmark_distance=landmark_t,
            landmark_index=landmark_index,
        )

    def ray_offsets(self, world: WorldSpec) -> np.ndarray:
        """Per-column angle relative to heading, left column first (positive = left)."""
        n = world.n_rays
        screen = (2.0 * (np.arange(n) + 0.5) / n) - 1.0
        return -np.arctan(math.tan(world.fov / 2.0) * screen)

    def probe_distances(self, pose: Pose, offsets: np.ndarray, world: WorldSpec) -> np.ndarray:
        """Ground-truth free distance along a few directions, minus the robot radius."""
        hits = self.cast_rays(pose.x, pose.y, pose.heading + np.asarray(offsets), world)
        return hits.distance - world.robot_radius

    # ------------------------------------------------------------------
    # Rendering

    def render(
        self,
        pose: Pose,
        world: WorldSpec,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """3 x H x W float32 image in [0, 1]. Pure function of pose and world unless noise is on."""
        geo = compile_world(world)
        offsets = self.ray_offsets(world)
        hits = self.cast_rays(pose.x, pose.y, pose.heading + offsets, world)
        cos_off = np.cos(offsets)
        h = world.image_height
        focal = float(h)
        horizon = h / 2.0
        rows = np.arange(h, dtype=np.float64)[:, None]  # (H, 1)

        image = np.where(rows < horizon, 1.0, 0.0)[..., None] * CEILING_COLOR + np.where(
            rows < horizon, 0.0, 1.0
        )[..., None] * FLOOR_COLOR
        image = np.broadcast_to(image, (h, world.n_rays, 3)).astype(np.float64)

        # Walls
        perp = np.maximum(hits.wall_distance * cos_off, 1e-6)
        half = 0.5 * world.wall_height * focal / perp
        top, bottom = horizon - half, horizon + half
        coverage = np.clip(np.minimum(rows + 1.0, bottom) - np.maximum(rows, top), 0.0, 1.0)
        v = np.clip((rows + 0.5 - top) / (bottom - top), 0.0, 1.0)
        phase = np.mod(hits.along / world.texture_period, 1.0)
        chair_mask = _chair_texture(np.broadcast_to(phase, v.shape), v) & geo.chair[hits.wall_index]
        wall_color = np.where(
            chair_mask[..., None], CHAIR_COLOR, geo.wall_colors[hits.wall_index][None, :, :]
        )
        shade = (1.0 / (1.0 + self.shade_falloff * perp))[None, :, None]
        image = image * (1.0 - coverage[..., None]) + wall_color * shade * coverage[..., None]

        # Landmarks in front of the wall
        if len(geo.radii):
            seen = np.isfinite(hits.landmark_distance) & (hits.landmark_distance < hits.wall_distance)
            lperp = np.maximum(np.where(seen, hits.landmark_distance, 1.0) * cos_off, 1e-6)
            ltop = horizon + world.wall_height * focal * (0.5 - LANDMARK_HEIGHT) / lperp
            lbottom = horizon + 0.5 * world.wall_height * focal / lperp
            lcover = np.clip(np.minimum(rows + 1.0, lbottom) - np.maximum(rows, ltop), 0.0, 1.0)
            lcover = lcover * seen[None, :]
            lshade = (1.0 / (1.0 + self.shade_falloff * lperp))[None, :, None]
            lcolor = geo.landmark_colors[hits.landmark_index][None, :, :] * lshade
            image = image * (1.0 - lcover[..., None]) + lcolor * lcover[..., None]

        if world.pixel_noise > 0 and rng is not None:
            image = image + rng.normal(0.0, world.pixel_noise, size=image.shape)

        out = np.clip(image, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)
        if out.shape != (3, h, world.n_rays):
            raise ValueError(f"Rendered shape {out.shape} does not match world resolution")
        return out

    def aliased_twin(self, pose: Pose, world: WorldSpec, quarter_turns: int = 1) -> Pose:
        """Pose rotated by quarter turns about the arena centre (square arenas only)."""
        if abs(world.width - world.height) > 1e-9:
            raise ValueError("Aliased twins are defined for square arenas only")
        cx, cy = world.width / 2.0, world.height / 2.0
        x, y, heading = pose.x, pose.y, pose.heading
        for _ in range(quarter_turns % 4):
            x, y = cx - (y - cy), cy + (x - cx)
            heading += math.pi / 2.0
        return Pose(x=x, y=y, heading=heading)

    # ------------------------------------------------------------------
    # Scripted trajectories

    def loop_poses(
        self,
        world: WorldSpec,
        dt: float = 0.2,
        margin: float = 1.6,
        start_heading: float = 0.0,
        max_steps: int = 2000,
    ) -> tuple[np.ndarray, np.ndarray]:
        """One counter-clockwise lap around the arena at ``margin`` from the walls.

        Returns (poses (T, 3), actions (T, 2)); actions[t] is the command issued at t.
        """
        corners = [
            (margin, margin),
            (world.width - margin, margin),
            (world.width - margin, world.height - margin),
            (margin, world.height - margin),
        ]
        pose = Pose(x=corners[0][0], y=corners[0][1], heading=start_heading)
        target = 1
        visited = 0
        poses, actions = [], []
        for _ in range(max_steps):
            tx, ty = corners[target]
            bearing = math.atan2(ty - pose.y, tx - pose.x)
            error = wrap_angle(bearing - pose.heading)
            if abs(error) > 0.1:
                action = Action(v=0.0, omega=math.copysign(min(OMEGA_MAX, abs(error) / dt), error))
            else:
                remaining = math.hypot(tx - pose.x, ty - pose.y)
                action = Action(v=min(V_MAX, remaining / dt), omega=error / dt)
            poses.append(pose.as_tuple())
            actions.append(action.as_tuple())
            pose, _ = self.step(pose, action, dt, world)
            if math.hypot(tx - pose.x, ty - pose.y) < 0.05:
                visited += 1
                if visited == len(corners):
                    break
                target = (target + 1) % len(corners)
        poses.append(pose.as_tuple())
        actions.append((0.0, 0.0))
        return np.asarray(poses, dtype=np.float32), np.asarray(actions, dtype=np.float32)


# Global service instance
_simulator_service: Optional[SimulatorService] = None


def get_simulator_service() -> SimulatorService:
    """Get or create simulator service instance."""
    global _simulator_service
    if _simulator_service is None:
        _simulator_service = SimulatorService()
    return _simulator_service
