"""Synthetic Block-Transfer demonstrations.

The active arm follows cubic-eased segments between waypoints, one gesture
per leg; the idle arm holds a fixed pose.  Positions are in device units
(micrometres by default), grasper angles in radians.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .kinematics import (
    ANGVEL,
    GRASPER,
    LINVEL,
    N_FEATURES,
    N_PER_ARM,
    POS,
    ROT,
    ConfigurationError,
    GestureSegment,
    Trajectory,
    arm_offset,
    save_trajectory,
)
from .task_model import BLOCK_TRANSFER_ORDER

NOISE_FAMILIES = ("position", "rotation", "grasper", "linear_velocity", "angular_velocity")

# operator styles: (duration scale, noise scale)
OPERATOR_STYLES = {"A": (1.0, 1.0), "B": (1.1, 1.2)}


@dataclass
class SimParams:
    sample_rate_hz: float = 100.0
    seed: int = 0
    operator: str = "A"
    active_arm: str = "R"
    home: tuple = (-30000.0, -10000.0, 20000.0)
    pickup: tuple = (0.0, 0.0, 0.0)
    receptacle: tuple = (40000.0, 25000.0, 5000.0)
    end_point: tuple = (15000.0, 40000.0, 25000.0)
    idle_position: tuple = (-20000.0, 30000.0, 15000.0)
    approach_height: float = 15000.0
    carry_height: float = 20000.0
    drop_height: float = 10000.0
    waypoint_jitter: float = 8000.0
    grasper_open: float = 1.2
    grasper_closed: float = 0.3
    durations_ms: dict = field(default_factory=lambda: {12: 300.0, 2: 300.0, 5: 2000.0, 6: 3200.0, 11: 2000.0})
    duration_jitter: float = 0.05
    # fractions of G2 spent closing and of G11 spent opening / holding over the receptacle
    grasp_close_fraction: float = 0.4
    drop_open_fraction: float = 0.1
    drop_hold_fraction: float = 0.6
    noise: dict = field(default_factory=lambda: {
        "position": 30.0,
        "rotation": 0.005,
        "grasper": 0.02,
        "linear_velocity": 300.0,
        "angular_velocity": 0.05,
    })
    order: tuple = BLOCK_TRANSFER_ORDER

    def validate(self):
        if not self.sample_rate_hz > 0:
            raise ConfigurationError("sample_rate_hz must be positive")
        if not self.grasper_open > self.grasper_closed:
            raise ConfigurationError("grasper open angle must exceed the closed angle")
        if any(float(self.durations_ms.get(g, 0)) <= 0 for g in self.order):
            raise ConfigurationError("every gesture needs a positive nominal duration")
        if any(v < 0 for v in self.noise.values()):
            raise ConfigurationError("noise levels must be non-negative")
        if not 0 <= self.duration_jitter < 1:
            raise ConfigurationError("duration_jitter must be in [0, 1)")
        if self.operator not in OPERATOR_STYLES:
            raise ConfigurationError(f"unknown operator style {self.operator!r}")
        if set(self.order) != {12, 2, 5, 6, 11}:
            raise ConfigurationError("order must be a permutation of the Block-Transfer gestures")
        arm_offset(self.active_arm)

    def to_dict(self):
        d = asdict(self)
        d["durations_ms"] = {str(k): v for k, v in self.durations_ms.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "durations_ms" in d:
            d["durations_ms"] = {int(k): float(v) for k, v in d["durations_ms"].items()}
        for key in ("home", "pickup", "receptacle", "end_point", "idle_position", "order"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _ease(u):
    return 3 * u ** 2 - 2 * u ** 3


def _leg(a, b, n):
    """``n`` samples moving from ``a`` to ``b`` with a cubic ease; the last sample is ``b``."""
    u = _ease(np.arange(1, n + 1) / n)[:, None]
    return np.asarray(a) + u * (np.asarray(b) - np.asarray(a))


def _ramp(a, b, n):
    return a + _ease(np.arange(1, n + 1) / n) * (b - a)


def generate_block_transfer(params: SimParams) -> Trajectory:
    """One annotated fault-free demonstration; a pure function of ``params``."""
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x51]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x52]))
    dur_scale, noise_scale = OPERATOR_STYLES[params.operator]
    rate = params.sample_rate_hz

    def jit(p):
        return np.asarray(p, dtype=np.float64) + rng.uniform(-1, 1, 3) * params.waypoint_jitter

    home, pickup, recept, end = jit(params.home), jit(params.pickup), jit(params.receptacle), jit(params.end_point)
    above_pick = pickup + [0, 0, params.approach_height]
    drop_at = recept + [0, 0, params.drop_height]
    center = np.r_[(pickup[:2] + recept[:2]) / 2, params.carry_height]

    # segment boundaries on a ms grid keep sample-rate changes from moving them
    bounds_ms = [0.0]
    for g in params.order:
        d = params.durations_ms[g] * dur_scale * (1 + rng.uniform(-1, 1) * params.duration_jitter)
        bounds_ms.append(bounds_ms[-1] + d)
    idx = np.round(np.asarray(bounds_ms) * rate / 1000.0).astype(int)
    lengths = np.diff(idx)
    if (lengths < 2).any():
        raise ConfigurationError("sample rate too low for the gesture durations")

    pos_parts, grasp_parts, segments = [], [], []
    cursor = home
    g_open, g_closed = params.grasper_open, params.grasper_closed
    for g, n, s in zip(params.order, lengths, idx[:-1]):
        if g == 12:
            p = _leg(cursor, above_pick, n)
            ga = np.full(n, g_open)
        elif g == 2:
            m = max(1, int(round(n * (1 - params.grasp_close_fraction))))
            p = np.vstack([_leg(cursor, pickup, m), np.repeat(pickup[None], n - m, axis=0)])
            ga = np.r_[np.full(m, g_open), _ramp(g_open, g_closed, n - m)]
        elif g == 5:
            p = _leg(cursor, center, n)
            ga = np.full(n, g_closed)
        elif g == 6:
            p = _leg(cursor, drop_at, n)
            ga = np.full(n, g_closed)
        else:  # 11: open over the receptacle, hold, then move to the end point
            n_open = max(1, int(round(n * params.drop_open_fraction)))
            n_hold = max(n_open, int(round(n * params.drop_hold_fraction)))
            p = np.vstack([np.repeat(cursor[None], n_hold, axis=0), _leg(cursor, end, n - n_hold)])
            ga = np.r_[_ramp(g_closed, g_open, n_open), np.full(n - n_open, g_open)]
        cursor = p[-1]
        pos_parts.append(p)
        grasp_parts.append(ga)
        segments.append(GestureSegment(int(g), int(s), int(s + n - 1)))

    pos = np.vstack(pos_parts)
    grasp = np.concatenate(grasp_parts)
    T = len(pos)
    dt = 1.0 / rate
    data = np.zeros((T, N_FEATURES))

    sig = {k: float(v) * noise_scale for k, v in params.noise.items()}
    active = arm_offset(params.active_arm)
    idle = N_PER_ARM - active
    idle_pos = np.repeat(np.asarray(params.idle_position, dtype=np.float64)[None], T, axis=0)
    for base, p, ga in ((active, pos, grasp), (idle, idle_pos, np.full(T, g_closed))):
        rotvec = noise_rng.normal(0.0, sig["rotation"], (T, 3))
        R = Rotation.from_rotvec(rotvec).as_matrix().reshape(T, 9)
        p_noisy = p + noise_rng.normal(0.0, sig["position"], p.shape)
        blk = data[:, base:base + N_PER_ARM]
        blk[:, POS] = p_noisy
        blk[:, ROT] = R
        blk[:, GRASPER] = ga + noise_rng.normal(0.0, sig["grasper"], T)
        blk[:, LINVEL] = np.gradient(p, dt, axis=0) + noise_rng.normal(0.0, sig["linear_velocity"], (T, 3))
        # orientation is nominally fixed, so angular velocity is pure sensor noise
        blk[:, ANGVEL] = noise_rng.normal(0.0, sig["angular_velocity"], (T, 3))

    return Trajectory(
        data,
        rate,
        segments,
        source="synthetic",
        length_unit="um",
        name=f"bt_{params.operator}_{params.seed}",
        group=params.operator,
        meta={
            "seed": params.seed,
            "operator": params.operator,
            "active_arm": params.active_arm,
            "pickup": pickup.tolist(),
            "receptacle": recept.tolist(),
            "drop_point": drop_at.tolist(),
        },
    )


def add_noise(traj: Trajectory, sigma: dict, seed: int) -> Trajectory:
    """Add independent Gaussian noise per feature family; labels are untouched."""
    unknown = set(sigma) - set(NOISE_FAMILIES)
    if unknown:
        raise ConfigurationError(f"unknown noise families {sorted(unknown)}")
    if any(v < 0 for v in sigma.values()):
        raise ConfigurationError("noise sigma must be non-negative")
    rng = np.random.default_rng(seed)
    out = traj.copy()
    cols = {
        "position": POS, "rotation": ROT, "grasper": slice(GRASPER, GRASPER + 1),
        "linear_velocity": LINVEL, "angular_velocity": ANGVEL,
    }
    T = len(traj)
    for fam in NOISE_FAMILIES:
        s = float(sigma.get(fam, 0.0))
        if s == 0.0:
            continue
        for base in (0, N_PER_ARM):
            sl = cols[fam]
            c = slice(base + sl.start, base + sl.stop)
            out.data[:, c] += rng.normal(0.0, s, (T, sl.stop - sl.start))
    return out


def write_demo(traj: Trajectory, params: SimParams, directory) -> Path:
    """Trajectory CSV plus a ``.sim.json`` file with the generating parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = save_trajectory(traj, directory / f"{traj.name}.csv")
    (directory / f"{traj.name}.sim.json").write_text(
        json.dumps(params.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path
