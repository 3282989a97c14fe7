"""Pydantic models for configs, manifests and log records."""

import hashlib
import math
from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

# Robot limits (differential-drive scale).
V_MAX = 0.3
OMEGA_MAX = 1.0

OBS_SHAPE = (3, 24, 32)
ACTION_DIM = 2


def wrap_angle(theta: float) -> float:
    """Map any finite angle into [-pi, pi)."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


class PlannerMode(str, Enum):
    """Action-selection variant."""

    FULL = "full"  # MTRSSM, epistemic + extrinsic
    RSSM = "rssm"  # single-level world model
    ONLY_EXTRINSIC = "only_extrinsic"  # epistemic weight 0

    @classmethod
    def parse(cls, value: str) -> "PlannerMode":
        return cls(value.replace("-", "_"))


class ScheduleKind(str, Enum):
    COSINE = "cosine"
    LINEAR = "linear"


class SampleMode(str, Enum):
    SAMPLE = "sample"
    ARGMAX = "argmax"


class Facing(str, Enum):
    """Start facing class of an evaluation trial."""

    INTERIOR = "interior"  # NoExp
    WALL = "wall"  # Exp: faces the aliased wall


# ---------------------------------------------------------------------------
# Simulator values


class Pose(BaseModel):
    """Robot position (world units) and heading (radians, wrapped to [-pi, pi))."""

    x: float
    y: float
    heading: float = 0.0

    model_config = {"frozen": True}

    @field_validator("heading", mode="before")
    @classmethod
    def wrap_heading(cls, v: float) -> float:
        return wrap_angle(float(v))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


class Action(BaseModel):
    """Velocity command, clamped to the robot limits on construction."""

    v: float = Field(default=0.0, description="Linear velocity in [0, V_MAX]")
    omega: float = Field(default=0.0, description="Angular velocity in [-OMEGA_MAX, OMEGA_MAX]")

    model_config = {"frozen": True}

    @field_validator("v", mode="before")
    @classmethod
    def clamp_v(cls, v: float) -> float:
        return min(max(float(v), 0.0), V_MAX)

    @field_validator("omega", mode="before")
    @classmethod
    def clamp_omega(cls, v: float) -> float:
        return min(max(float(v), -OMEGA_MAX), OMEGA_MAX)

    def as_tuple(self) -> tuple[float, float]:
        return (self.v, self.omega)


class WallSegment(BaseModel):
    """Wall from ``start`` to ``end``; the texture coordinate runs start -> end."""

    start: tuple[float, float]
    end: tuple[float, float]
    texture: str = Field(default="chair", description="'chair' (aliased) or 'plain'")


class Landmark(BaseModel):
    """Colored cylindrical stool."""

    x: float
    y: float
    color: tuple[float, float, float]
    radius: float = Field(default=0.25, gt=0)


class WorldSpec(BaseModel):
    """Arena geometry. Defaults: 8x8 room, three walls with the repeating chair texture,
    the fourth plain with four colored stools (red, red, black, green) in front of it."""

    width: float = Field(default=8.0, gt=0)
    height: float = Field(default=8.0, gt=0)
    walls: list[WallSegment] = Field(default_factory=list)
    landmarks: Optional[list[Landmark]] = None
    robot_radius: float = Field(default=0.2, gt=0)
    fov: float = Field(default=math.pi / 2, gt=0, lt=math.pi, description="Horizontal field of view")
    n_rays: int = Field(default=32, ge=1, description="One ray per image column")
    image_height: int = Field(default=24, ge=1)
    wall_height: float = Field(default=1.0, gt=0, description="Projected wall height scale")
    texture_period: float = Field(default=1.0, gt=0, description="Chair spacing along aliased walls")
    pixel_noise: float = Field(default=0.0, ge=0, description="Optional Gaussian pixel noise sigma")

    @model_validator(mode="after")
    def fill_and_validate(self) -> "WorldSpec":
        if not self.walls:
            w, h = self.width, self.height
            # Counter-clockwise so corresponding points on rotated walls share texture coordinates.
            self.walls = [
                WallSegment(start=(0.0, 0.0), end=(w, 0.0), texture="chair"),
                WallSegment(start=(w, 0.0), end=(w, h), texture="chair"),
                WallSegment(start=(w, h), end=(0.0, h), texture="plain"),
                WallSegment(start=(0.0, h), end=(0.0, 0.0), texture="chair"),
            ]
        if self.landmarks is None:
            w, h = self.width, self.height
            y = h - 0.45
            self.landmarks = [
                Landmark(x=0.2 * w, y=y, color=(0.85, 0.1, 0.1)),
                Landmark(x=0.4 * w, y=y, color=(0.85, 0.1, 0.1)),
                Landmark(x=0.6 * w, y=y, color=(0.05, 0.05, 0.05)),
                Landmark(x=0.8 * w, y=y, color=(0.1, 0.75, 0.15)),
            ]

        for i, wall in enumerate(self.walls):
            following = self.walls[(i + 1) % len(self.walls)]
            if math.dist(wall.end, following.start) > 1e-6:
                raise ValueError(f"Walls do not form a closed boundary at wall {i}")
        for lm in self.landmarks:
            if not (0.0 < lm.x < self.width and 0.0 < lm.y < self.height):
                raise ValueError(f"Landmark at ({lm.x}, {lm.y}) lies outside the arena")
        return self

    def world_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Dataset


class DatasetConfig(BaseModel):
    n_sequences: int = Field(default=15, ge=1, description="Reference collection: 15 sequences")
    seq_len: int = Field(default=2000, ge=2, description="Reference collection: 2,000 steps each")
    dt: float = Field(default=0.2, gt=0, description="Sampling period in seconds (5 Hz)")
    path: Optional[str] = Field(default=None, description="Dataset directory (default: <out_dir>/dataset)")


class DatasetManifest(BaseModel):
    dt: float
    seq_len: int
    n_sequences: int
    obs_shape: list[int]
    action_dim: int
    seed: int
    world_hash: str
    format: str = "f32-le/1"


# ---------------------------------------------------------------------------
# Policy


class PolicyConfig(BaseModel):
    horizon: int = Field(default=16, ge=1, description="T_F future steps (full scale: 64)")
    execute_steps: int = Field(default=8, ge=1, description="T_a executed steps (full scale: 32)")
    diffusion_steps: int = Field(default=100, ge=2, description="K training steps")
    sample_steps: int = Field(default=10, ge=1, description="DDIM steps at deployment")
    schedule: ScheduleKind = ScheduleKind.COSINE
    n_candidates: int = Field(default=8, ge=1, description="Candidates per inference")
    base_channels: int = Field(default=32, ge=4, description="U-Net base width (3 levels)")
    step_embed_dim: int = Field(default=64, ge=4)
    keypoints: int = Field(default=32, ge=1, description="Spatial-softmax keypoints per image")
    segment_len: int = Field(default=48, ge=4, description="Training segment length")
    segment_stride: int = Field(default=16, ge=1)

    @model_validator(mode="after")
    def check_lengths(self) -> "PolicyConfig":
        if self.execute_steps > self.horizon:
            raise ValueError(
                f"execute_steps ({self.execute_steps}) must not exceed horizon ({self.horizon})"
            )
        if self.sample_steps > self.diffusion_steps:
            raise ValueError(
                f"sample_steps ({self.sample_steps}) must not exceed diffusion_steps ({self.diffusion_steps})"
            )
        if self.segment_len < self.horizon + 2:
            raise ValueError(f"segment_len must be at least horizon + 2 = {self.horizon + 2}")
        return self

    @property
    def sequence_length(self) -> int:
        return self.horizon + 2


class PolicyTrainConfig(BaseModel):
    steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=3e-4, gt=0)
    log_every: int = Field(default=50, ge=1)


FULL_SCALE_POLICY = {
    "horizon": 64,
    "execute_steps": 32,
    "diffusion_steps": 100,
    "sample_steps": 10,
    "segment_len": 128,
    "segment_stride": 32,
}


# ---------------------------------------------------------------------------
# World model


class WmConfig(BaseModel):
    hierarchical: bool = Field(default=True, description="False selects the single-level RSSM")
    tau_h: float = Field(default=64.0, ge=1, description="Higher-level time constant")
    tau_l: float = Field(default=4.0, ge=1, description="Lower-level time constant")
    d_h: int = Field(default=32, ge=1)
    d_l: int = Field(default=128, ge=1)
    s_h_vars: int = Field(default=4, ge=1)
    s_h_classes: int = Field(default=4, ge=2)
    s_l_vars: int = Field(default=8, ge=1)
    s_l_classes: int = Field(default=8, ge=2)
    embed_dim: int = Field(default=128, ge=1, description="Observation embedding size")
    hidden: int = Field(default=128, ge=1, description="Posterior/prediction MLP width")
    beta: float = Field(default=1.0, ge=0, description="KL weight")
    free_bits: float = Field(default=1.0, ge=0, description="Floor per KL term, nats")
    window: int = Field(default=50, ge=1, description="TBPTT window")
    decoder_channels: int = Field(default=32, ge=4)
    decoder_res_blocks: int = Field(default=2, ge=0, description="Full scale: 8")
    encoder_channels: tuple[int, int, int] = (16, 32, 64)

    @model_validator(mode="after")
    def check_timescales(self) -> "WmConfig":
        if self.hierarchical and not self.tau_h > self.tau_l:
            raise ValueError(f"tau_h ({self.tau_h}) must exceed tau_l ({self.tau_l})")
        return self

    def single_level(self) -> "WmConfig":
        """Config of the RSSM ablation: one level, tau 1."""
        return self.model_copy(update={"hierarchical": False, "tau_l": 1.0})


class WmTrainConfig(BaseModel):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=3e-4, gt=0)
    segment_len: int = Field(default=200, ge=2, description="Full scale: 600")
    segment_stride: int = Field(default=100, ge=1, description="Full scale: 100")
    subseq_len: int = Field(default=150, ge=2, description="Full scale: 500")

    @model_validator(mode="after")
    def check_subseq(self) -> "WmTrainConfig":
        if self.subseq_len > self.segment_len:
            raise ValueError("subseq_len must not exceed segment_len")
        return self


# ---------------------------------------------------------------------------
# Planner


class FeatureConfig(BaseModel):
    feature_dim: int = Field(default=64, ge=1)
    hidden: int = Field(default=256, ge=1, description="Full scale: 1024")
    distance_scale: float = Field(default=2.0, gt=0, description="World units per feature unit")
    heading_weight: float = Field(default=0.5, ge=0, description="lambda_h, units per radian")
    near_radius: float = Field(default=2.0, gt=0, description="Radius for near pairs")
    steps: int = Field(default=3000, ge=1)
    batch_size: int = Field(default=64, ge=2)
    lr: float = Field(default=3e-4, gt=0)
    log_every: int = Field(default=100, ge=1)


class PrecisionSchedule(BaseModel):
    floor: float = Field(default=0.08, ge=0)
    ceiling: float = Field(default=3.0, gt=0)
    slope: float = Field(default=0.6, gt=0)
    midpoint: float = 10.0

    @model_validator(mode="after")
    def check_bounds(self) -> "PrecisionSchedule":
        if self.ceiling <= self.floor:
            raise ValueError("ceiling must exceed floor")
        return self


class PlannerConfig(BaseModel):
    m_samples: int = Field(default=5, ge=1, description="M higher-level samples")
    n_samples: int = Field(default=5, ge=1, description="N lower-level samples per higher-level sample")
    n_candidates: int = Field(default=8, ge=1)
    mode: PlannerMode = PlannerMode.FULL
    sample_mode: SampleMode = SampleMode.SAMPLE
    horizon: Optional[int] = Field(
        default=None, ge=1, description="Imagined steps per candidate (default: whole candidate)"
    )


class EpisodeLimits(BaseModel):
    max_steps: int = Field(default=1000, ge=0)
    goal_radius: float = Field(default=0.7, gt=0)
    heading_tol: float = Field(default=math.pi / 3, gt=0)


class StartCase(BaseModel):
    """Start position with the two facing classes."""

    x: float
    y: float
    interior_heading: float
    wall_heading: float

    def pose(self, facing: Facing) -> Pose:
        heading = self.interior_heading if facing == Facing.INTERIOR else self.wall_heading
        return Pose(x=self.x, y=self.y, heading=heading)


def _default_starts() -> list[StartCase]:
    return [
        StartCase(x=4.0, y=1.2, interior_heading=math.pi / 2, wall_heading=-math.pi / 2),
        StartCase(x=6.8, y=3.0, interior_heading=math.pi, wall_heading=0.0),
        StartCase(x=1.2, y=4.5, interior_heading=0.0, wall_heading=math.pi),
    ]


def _default_goals() -> list[Pose]:
    return [
        Pose(x=2.5, y=6.2, heading=math.pi / 2),
        Pose(x=5.5, y=6.2, heading=math.pi / 2),
        Pose(x=4.0, y=5.0, heading=math.pi / 2),
    ]


class EvalGrid(BaseModel):
    starts: list[StartCase] = Field(default_factory=_default_starts)
    facings: list[Facing] = Field(default_factory=lambda: [Facing.INTERIOR, Facing.WALL])
    goals: list[Pose] = Field(default_factory=_default_goals)
    trials: int = Field(default=2, ge=1)

    def n_cases(self) -> int:
        return len(self.starts) * len(self.facings) * len(self.goals)


class ExperimentConfig(BaseModel):
    """Everything a run needs; JSON-serializable and reproducible with the seed ledger."""

    name: str = "desk"
    seed: int = 0
    out_dir: str = "runs/desk"
    world: WorldSpec = Field(default_factory=WorldSpec)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    policy_train: PolicyTrainConfig = Field(default_factory=PolicyTrainConfig)
    world_model: WmConfig = Field(default_factory=WmConfig)
    wm_train: WmTrainConfig = Field(default_factory=WmTrainConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    precision: PrecisionSchedule = Field(default_factory=PrecisionSchedule)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    limits: EpisodeLimits = Field(default_factory=EpisodeLimits)
    grid: EvalGrid = Field(default_factory=EvalGrid)
    modes: list[PlannerMode] = Field(
        default_factory=lambda: [PlannerMode.FULL, PlannerMode.RSSM, PlannerMode.ONLY_EXTRINSIC]
    )
    imagine_warmup: int = Field(default=20, ge=1)
    imagine_horizon: int = Field(default=50, ge=1)

    model_config = {
        "json_schema_extra": {
            "examples": [{"name": "desk", "seed": 7, "dataset": {"n_sequences": 15, "seq_len": 2000}}]
        }
    }

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        """Full-scale horizon and diffusion settings; explicit ``policy`` fields win."""
        policy = overrides.pop("policy", None)
        if isinstance(policy, PolicyConfig):
            policy = policy.model_dump(exclude_unset=True)
        settings = {**FULL_SCALE_POLICY, **(policy or {})}
        return cls(policy=PolicyConfig(**settings), **overrides)

    def dataset_dir(self) -> str:
        return self.dataset.path or f"{self.out_dir}/dataset"

    def checkpoint_dir(self, component: str) -> str:
        return f"{self.out_dir}/checkpoints/{component}"

    def episodes_dir(self) -> str:
        return f"{self.out_dir}/episodes"

    def report_dir(self) -> str:
        return f"{self.out_dir}/report"


# ---------------------------------------------------------------------------
# Episode logs and results


class CandidateScore(BaseModel):
    epistemic: float
    extrinsic: float
    total: float
    mean_omega: float


class PlanningRecord(BaseModel):
    kind: Literal["plan"] = "plan"
    n: int
    t: int
    precision: float
    candidates: list[CandidateScore]
    chosen: int


class StepRecord(BaseModel):
    kind: Literal["step"] = "step"
    t: int
    pose: tuple[float, float, float]
    action: tuple[float, float]
    collided: bool


class EpisodeSummary(BaseModel):
    kind: Literal["summary"] = "summary"
    episode_id: str
    mode: PlannerMode
    facing: Facing
    start: tuple[float, float, float]
    goal: tuple[float, float, float]
    success: bool
    steps: int
    collisions: int
    seed: int


EpisodeRecord = Union[PlanningRecord, StepRecord, EpisodeSummary]


class ResultsRow(BaseModel):
    """Success rates in percent; None where a category has no trials."""

    mode: PlannerMode
    overall: Optional[float] = Field(default=None, ge=0, le=100)
    exp: Optional[float] = Field(default=None, ge=0, le=100)
    noexp: Optional[float] = Field(default=None, ge=0, le=100)
    collisions_overall: Optional[float] = None
    collisions_exp: Optional[float] = None
    collisions_noexp: Optional[float] = None
    n_overall: int = 0
    n_exp: int = 0
    n_noexp: int = 0


class FeatureEvaluation(BaseModel):
    """Held-out quality of the feature encoder."""

    spearman: float = Field(description="Rank correlation of feature vs spatial distance")
    aliased_distance: float = Field(description="Mean feature distance between aliased-wall twins")
    median_distance: float = Field(description="Median feature distance over held-out pairs")
    n_pairs: int
