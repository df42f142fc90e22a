"""
Synthetic multimodal demonstrations.

Each mode is a parametric two-arm trajectory: a straight reach from a fixed
start pose to a jittered goal, a lateral detour of +/- bump metres, a wrist
tilt and yaw, and a gripper closing at a mode-specific time. Modes of the same
family share their context encoding, so the chunk distribution given the
context stays multimodal.

Per-arm action layout: [position (3), rotation (3 axis-angle or 6D), gripper (1)].
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from core.errors import ConfigError, DimensionError
from modules import rotations
from modules.shards import SampleRecord, decode_array, encode_array
from storage import read_yaml, write_yaml

logger = logging.getLogger(__name__)

SCALE_EPS = 1e-6
N_ARMS = 2
GRIPPER_OPEN = 0.08
GRIPPER_MAX = 0.1

ARM_START = np.array([[0.30, 0.20, 0.10], [0.30, -0.20, 0.10]])
ARM_GOAL = np.array([[0.50, 0.25, 0.20], [0.50, -0.15, 0.20]])
GOAL_JITTER = 0.05
INSTRUCTION_LIFT = 0.05
YAW_RANGE = 0.5


# =============================================================================
# TYPES
# =============================================================================

@dataclass
class ModeSpec:
    name: str
    family: int = 0
    bump: float = 0.1
    tilt: float = 0.2
    close_at: float = 0.7
    sigma: float = 0.005
    weight: float = 1.0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_modes() -> List[ModeSpec]:
    return [
        ModeSpec("pass_left", family=0, bump=0.1, tilt=0.2),
        ModeSpec("pass_right", family=0, bump=-0.1, tilt=-0.2),
    ]


@dataclass
class ActionLayout:
    """Index map of one action vector."""

    rotation_format: str = "axis_angle"

    def __post_init__(self):
        if self.rotation_format not in ("axis_angle", "6d"):
            raise ConfigError(f"Unknown rotation format '{self.rotation_format}'")

    @property
    def rot_width(self) -> int:
        return 3 if self.rotation_format == "axis_angle" else 6

    @property
    def arm_width(self) -> int:
        return 3 + self.rot_width + 1

    @property
    def d(self) -> int:
        return N_ARMS * self.arm_width

    def position_slices(self):
        return [slice(a * self.arm_width, a * self.arm_width + 3) for a in range(N_ARMS)]

    def rotation_slices(self):
        return [slice(a * self.arm_width + 3, a * self.arm_width + 3 + self.rot_width) for a in range(N_ARMS)]

    def gripper_indices(self):
        return [a * self.arm_width + self.arm_width - 1 for a in range(N_ARMS)]

    def position_indices(self) -> np.ndarray:
        return np.concatenate([np.arange(s.start, s.stop) for s in self.position_slices()])

    def ranges(self):
        """Declared per-dimension (lo, hi) before normalization."""
        lo, hi = np.zeros(self.d), np.zeros(self.d)
        rot_lim = np.pi if self.rotation_format == "axis_angle" else 1.0
        for ps, rs, g in zip(self.position_slices(), self.rotation_slices(), self.gripper_indices()):
            lo[ps], hi[ps] = -1.0, 1.0
            lo[rs], hi[rs] = -rot_lim, rot_lim
            lo[g], hi[g] = 0.0, GRIPPER_MAX
        return lo, hi


@dataclass
class TaskSpec:
    d: int = 14
    T_a: int = 32
    modes: List[ModeSpec] = field(default_factory=default_modes)
    context_dim: int = 16
    n_instructions: int = 4
    context_noise: float = 0.05
    mode_in_context: bool = False
    context_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        self.modes = [m if isinstance(m, ModeSpec) else ModeSpec.from_dict(m) for m in self.modes]
        if not self.modes:
            raise ConfigError("TaskSpec needs at least one mode")
        weights = np.array([m.weight for m in self.modes], dtype=np.float64)
        if np.any(weights < 0) or weights.sum() <= 0:
            raise ConfigError(f"Mode weights must be >= 0 and not all zero, got {weights.tolist()}")
        if self.T_a < 2:
            raise ConfigError(f"T_a must be >= 2, got {self.T_a}")
        if self.d == 14:
            self.layout = ActionLayout("axis_angle")
        elif self.d == 20:
            self.layout = ActionLayout("6d")
        else:
            raise ConfigError(f"Action dimension must be 14 (axis-angle) or 20 (6D), got {self.d}")

    @property
    def n_families(self) -> int:
        return max(m.family for m in self.modes) + 1

    def mode_weights(self) -> np.ndarray:
        w = np.array([m.weight for m in self.modes], dtype=np.float64)
        return w / w.sum()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {
            "d": self.d, "T_a": self.T_a, "context_dim": self.context_dim,
            "n_instructions": self.n_instructions, "context_noise": self.context_noise,
            "mode_in_context": self.mode_in_context, "context_seed": self.context_seed,
            "seed": self.seed, "modes": [vars(m).copy() for m in self.modes],
        }


@dataclass
class DemoChunk:
    actions: np.ndarray
    context: np.ndarray
    instruction_id: int
    mode_id: int
    goal: np.ndarray


@dataclass
class NormStats:
    mean: np.ndarray
    scale: np.ndarray
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ConfigError("NormStats scale must be > 0 in every dimension")

    def normalize(self, actions):
        return (np.asarray(actions, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, actions):
        return np.asarray(actions, dtype=np.float64) * self.scale + self.mean

    @classmethod
    def from_actions(cls, actions: np.ndarray, layout: Optional[ActionLayout] = None):
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, actions.shape[-1])
        mean = flat.mean(axis=0)
        scale = flat.std(axis=0)
        degenerate = np.nonzero(scale < SCALE_EPS)[0]
        if degenerate.size:
            logger.warning(f"Clamped zero-variance dimensions {degenerate.tolist()} to scale {SCALE_EPS}")
            scale = np.maximum(scale, SCALE_EPS)
        lo, hi = layout.ranges() if layout is not None else (flat.min(axis=0), flat.max(axis=0))
        return cls(mean, scale, lo, hi)

    def save(self, path):
        data = {"mean": self.mean, "scale": self.scale}
        if self.lo is not None:
            data.update({"lo": np.asarray(self.lo), "hi": np.asarray(self.hi)})
        return write_yaml(data, path)

    @classmethod
    def load(cls, path):
        data = read_yaml(path)
        lo = np.asarray(data["lo"]) if "lo" in data else None
        hi = np.asarray(data["hi"]) if "hi" in data else None
        return cls(np.asarray(data["mean"]), np.asarray(data["scale"]), lo, hi)


# =============================================================================
# GENERATION
# =============================================================================

def _context_projection(spec: TaskSpec) -> np.ndarray:
    n_feat = _feature_width(spec)
    rng = np.random.default_rng(spec.context_seed)
    return rng.standard_normal((n_feat, spec.context_dim)) / np.sqrt(n_feat)


def _feature_width(spec: TaskSpec) -> int:
    width = spec.n_families + N_ARMS * 3 + N_ARMS + spec.n_instructions
    return width + (len(spec.modes) if spec.mode_in_context else 0)


def _context_features(spec, mode, instr, goal, yaw):
    n = mode.shape[0]
    families = np.array([m.family for m in spec.modes])[mode]
    parts = [
        np.eye(spec.n_families)[families],
        goal.reshape(n, -1),
        yaw,
        np.eye(spec.n_instructions)[instr],
    ]
    if spec.mode_in_context:
        parts.append(np.eye(len(spec.modes))[mode])
    return np.concatenate(parts, axis=1)


def generate_arrays(spec: TaskSpec, n_chunks: int, seed: Optional[int] = None) -> dict:
    """Vectorized generator; returns stacked arrays keyed like DemoChunk fields."""
    if n_chunks < 1:
        raise ConfigError(f"n_chunks must be >= 1, got {n_chunks}")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    T = spec.T_a
    modes = spec.modes

    mode = rng.choice(len(modes), size=n_chunks, p=spec.mode_weights())
    instr = rng.integers(0, spec.n_instructions, size=n_chunks)
    goal = ARM_GOAL[None] + rng.uniform(-GOAL_JITTER, GOAL_JITTER, size=(n_chunks, N_ARMS, 3))
    goal[:, :, 2] += INSTRUCTION_LIFT * instr[:, None]
    yaw = rng.uniform(-YAW_RANGE, YAW_RANGE, size=(n_chunks, N_ARMS))

    bump = np.array([m.bump for m in modes])[mode]
    tilt = np.array([m.tilt for m in modes])[mode]
    close_at = np.array([m.close_at for m in modes])[mode]
    sigma = np.array([m.sigma for m in modes])[mode]

    s = np.linspace(0.0, 1.0, T)
    arc = np.sin(np.pi * s)

    pos = ARM_START[None, None] + s[None, :, None, None] * (goal - ARM_START[None])[:, None]
    pos[..., 1] += bump[:, None, None] * arc[None, :, None]
    pos += sigma[:, None, None, None] * rng.standard_normal((n_chunks, T, N_ARMS, 3))

    rotvec = np.zeros((n_chunks, T, N_ARMS, 3))
    rotvec[..., 0] = tilt[:, None, None] * arc[None, :, None]
    rotvec[..., 2] = yaw[:, None, :] * s[None, :, None]
    rotvec += sigma[:, None, None, None] * rng.standard_normal((n_chunks, T, N_ARMS, 3))

    closing = 1.0 / (1.0 + np.exp(-(s[None, :] - close_at[:, None]) * 20.0))
    grip = GRIPPER_OPEN * (1.0 - closing)[:, :, None] + sigma[:, None, None] * rng.standard_normal((n_chunks, T, N_ARMS))
    grip = np.clip(grip, 0.0, GRIPPER_MAX)

    if spec.layout.rotation_format == "6d":
        rot = rotations.matrix_to_6d(rotations.axis_angle_to_matrix(rotvec))
    else:
        rot = rotvec
    actions = np.concatenate([pos, rot, grip[..., None]], axis=-1).reshape(n_chunks, T, spec.d)

    features = _context_features(spec, mode, instr, goal, yaw)
    context = features @ _context_projection(spec)
    context += spec.context_noise * rng.standard_normal(context.shape)

    return {"actions": actions, "context": context, "instruction": instr, "mode": mode, "goal": goal}


def generate_dataset(spec: TaskSpec, n_chunks: int, seed: Optional[int] = None):
    """Returns (list of DemoChunk, NormStats computed over the generated set)."""
    arrays = generate_arrays(spec, n_chunks, seed)
    counts = np.bincount(arrays["mode"], minlength=len(spec.modes))
    logger.info(f"Generated {n_chunks} chunks ({spec.T_a}x{spec.d}); mode counts {counts.tolist()}")
    if not np.isfinite(arrays["actions"]).all():
        raise DimensionError("generator produced non-finite actions")
    norm = NormStats.from_actions(arrays["actions"], spec.layout)
    chunks = [
        DemoChunk(arrays["actions"][i], arrays["context"][i], int(arrays["instruction"][i]),
                  int(arrays["mode"][i]), arrays["goal"][i])
        for i in range(n_chunks)
    ]
    return chunks, norm


def stack_chunks(chunks: List[DemoChunk]) -> dict:
    return {
        "actions": np.stack([c.actions for c in chunks]),
        "context": np.stack([c.context for c in chunks]),
        "instruction": np.array([c.instruction_id for c in chunks], dtype=np.int64),
        "mode": np.array([c.mode_id for c in chunks], dtype=np.int64),
        "goal": np.stack([c.goal for c in chunks]),
    }


# =============================================================================
# MODE DIAGNOSTICS
# =============================================================================

def lateral_deviation(actions: np.ndarray, layout: ActionLayout) -> np.ndarray:
    """Mid-chunk y offset from the straight start-to-end line, averaged over arms."""
    actions = np.asarray(actions, dtype=np.float64)
    T = actions.shape[-2]
    mid = T // 2
    frac = mid / (T - 1)
    devs = []
    for ps in layout.position_slices():
        y = actions[..., ps][..., 1]
        line = y[..., 0] + frac * (y[..., -1] - y[..., 0])
        devs.append(y[..., mid] - line)
    return np.mean(devs, axis=0)


def nearest_mode(actions: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Classify denormalized chunks by the closest mode detour."""
    dev = lateral_deviation(actions, spec.layout)
    bumps = np.array([m.bump for m in spec.modes])
    return np.argmin(np.abs(np.asarray(dev)[..., None] - bumps), axis=-1)


# =============================================================================
# SHARD RECORDS
# =============================================================================

def chunk_to_record(chunk: DemoChunk, key: str) -> SampleRecord:
    meta = f"instruction_id={chunk.instruction_id}\nmode_id={chunk.mode_id}\n"
    return SampleRecord(key, {
        "actions.bin": encode_array(chunk.actions),
        "context.bin": encode_array(chunk.context),
        "goal.bin": encode_array(chunk.goal),
        "meta.txt": meta.encode("ascii"),
    })


def record_to_chunk(record: SampleRecord) -> DemoChunk:
    meta = dict(line.split("=", 1) for line in record.entries["meta.txt"].decode("ascii").split())
    return DemoChunk(
        actions=decode_array(record.entries["actions.bin"]),
        context=decode_array(record.entries["context.bin"]),
        instruction_id=int(meta["instruction_id"]),
        mode_id=int(meta["mode_id"]),
        goal=decode_array(record.entries["goal.bin"]),
    )


def chunks_to_records(chunks: List[DemoChunk], prefix: str = "sample"):
    for i, chunk in enumerate(chunks):
        yield chunk_to_record(chunk, f"{prefix}{i:08d}")
