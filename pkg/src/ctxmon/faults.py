"""Fault injection, the kinematic failure oracle and fault campaigns."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import GRASPER, POS, Trajectory, arm_offset, save_trajectory
from .simulator import add_noise

GRASPER_ANGLE = "grasper_angle"
CARTESIAN_POSITION = "cartesian_position"
BLOCK_DROP = "BlockDrop"
DROPOFF_FAILURE = "DropoffFailure"


class InjectionError(ValueError):
    pass


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    """One perturbation of a kinematic state variable.

    ``target`` is the injected grasper value in radians, or the Euclidean
    Cartesian deviation in device units.  ``theta`` is the grasper ramp in
    radians per sample.
    """

    variable: str
    start_fraction: float
    duration: float
    target: float
    theta: float = 0.005
    arm: str = "R"

    def __post_init__(self):
        if self.variable not in (GRASPER_ANGLE, CARTESIAN_POSITION):
            raise InjectionError(f"unknown fault variable {self.variable!r}")
        if self.start_fraction < 0 or self.duration <= 0 or self.start_fraction + self.duration > 1 + 1e-9:
            raise InjectionError(
                f"fault window [{self.start_fraction}, {self.start_fraction + self.duration}] "
                "outside the trajectory"
            )
        if self.variable == GRASPER_ANGLE and not self.theta > 0:
            raise InjectionError("grasper ramp theta must be positive")
        if self.variable == CARTESIAN_POSITION and self.target < 0:
            raise InjectionError("Cartesian deviation must be non-negative")
        arm_offset(self.arm)

    def window(self, n_samples: int) -> tuple[int, int]:
        """Half-open sample range ``[start, stop)`` covered by the fault."""
        start = int(math.floor(self.start_fraction * n_samples))
        n = max(1, int(round(self.duration * n_samples)))
        stop = min(start + n, n_samples)
        if start >= n_samples:
            raise InjectionError("fault starts after the last sample")
        return start, stop

    def to_dict(self):
        return asdict(self)


def inject_grasper_fault(traj: Trajectory, spec: FaultSpec) -> Trajectory:
    """Ramp the grasper angle by ``theta`` per sample toward the target, then hold it."""
    if spec.variable != GRASPER_ANGLE:
        raise InjectionError("not a grasper-angle fault")
    start, stop = spec.window(len(traj))
    col = arm_offset(spec.arm) + GRASPER
    out = traj.copy()
    s0 = traj.data[start, col]
    k = np.arange(1, stop - start + 1)
    if spec.target >= s0:
        ramp = np.minimum(s0 + spec.theta * k, spec.target)
    else:
        ramp = np.maximum(s0 - spec.theta * k, spec.target)
    out.data[start:stop, col] = ramp
    return out


def inject_cartesian_fault(traj: Trajectory, spec: FaultSpec) -> Trajectory:
    """Add a linear ramp of ``target / sqrt(3)`` to each of x, y, z over the window."""
    if spec.variable != CARTESIAN_POSITION:
        raise InjectionError("not a Cartesian fault")
    start, stop = spec.window(len(traj))
    out = traj.copy()
    if spec.target == 0:
        return out
    off = arm_offset(spec.arm)
    n = stop - start
    per_axis = spec.target / math.sqrt(3.0)
    ramp = per_axis * np.arange(1, n + 1) / n
    out.data[start:stop, off:off + 3] += ramp[:, None]
    return out


def inject(traj: Trajectory, spec: FaultSpec) -> Trajectory:
    if spec.variable == GRASPER_ANGLE:
        return inject_grasper_fault(traj, spec)
    return inject_cartesian_fault(traj, spec)


def dtw_distance(a, b) -> float:
    """Classic DTW cost with Euclidean point distance and no window constraint."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("dtw_distance needs non-empty sequences")
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        prev = acc[i - 1]
        row = acc[i]
        ci = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = ci[j - 1] + min(prev[j], prev[j - 1], row[j - 1])
    return float(acc[n, m])


@dataclass(frozen=True)
class FailureEvent:
    kind: str
    timestamp_ms: float
    gesture_id: int
    sample_index: int

    def to_dict(self):
        return asdict(self)


@dataclass
class OracleParams:
    drop_threshold: float = 0.8
    release_threshold: float = 1.0
    pickup_radius: float = 5000.0
    drop_window_ms: float = 200.0
    dtw_threshold: float | None = None
    arm: str = "R"
    grasp_gesture: int = 2
    carry_gestures: tuple = (5, 6)
    drop_gesture: int = 11


def _segment(traj, gid):
    for seg in traj.segments:
        if seg.gesture_id == gid:
            return seg
    raise OracleError(f"trajectory {traj.name!r} has no G{gid} segment")


def release_index(traj: Trajectory, params: OracleParams) -> int | None:
    seg = _segment(traj, params.drop_gesture)
    ga = traj.data[seg.start_index:seg.end_index + 1, arm_offset(params.arm) + GRASPER]
    hits = np.flatnonzero(ga > params.release_threshold)
    return None if len(hits) == 0 else seg.start_index + int(hits[0])


def drop_deviation(faulted: Trajectory, reference: Trajectory, params: OracleParams) -> float:
    """Mean per-sample DTW cost between end-effector traces around the reference drop point."""
    r = release_index(reference, params)
    if r is None:
        raise OracleError("reference trajectory never releases the block")
    h = int(round(params.drop_window_ms / reference.dt_ms))
    lo, hi = max(0, r - h), min(len(reference), r + h + 1)
    off = arm_offset(params.arm)
    a = faulted.data[lo:hi, off:off + 3]
    b = reference.data[lo:hi, off:off + 3]
    return dtw_distance(a, b) / (hi - lo)


def calibrate_dtw_threshold(corpus: Sequence[Trajectory], params: OracleParams,
                            position_sigma: float, seed: int = 0, factor: float = 5.0) -> float:
    """``factor`` times the largest drop-point deviation between fault-free replays."""
    worst = 0.0
    for i, traj in enumerate(corpus):
        replay = add_noise(traj, {"position": position_sigma}, seed=seed * 100003 + i)
        worst = max(worst, drop_deviation(replay, traj, params))
    return factor * worst


def failure_oracle(faulted: Trajectory, reference: Trajectory, params: OracleParams) -> list[FailureEvent]:
    """Decide whether a run ended in a block drop or a failed drop-off.

    The block is picked up during the grasp gesture once the grasper closes
    near the pickup point, is dropped if the grasper opens past the drop
    threshold during the carry gestures, and must be released (grasper past
    the release threshold) during the drop gesture without the end effector
    straying from the reference trace.  A block that is dropped early cannot
    also fail drop-off.
    """
    if not faulted.segments or not reference.segments:
        raise OracleError("failure oracle needs gesture annotations")
    if len(faulted) != len(reference):
        raise OracleError("faulted and reference trajectories differ in length")
    off = arm_offset(params.arm)
    ga = faulted.data[:, off + GRASPER]
    pos = faulted.data[:, off:off + 3]
    grasp = _segment(reference, params.grasp_gesture)
    drop = _segment(faulted, params.drop_gesture)
    pickup_point = reference.data[grasp.end_index, off:off + 3]
    labels = faulted.gesture_labels()
    t_ms = faulted.t_ms

    def event(kind, i):
        return FailureEvent(kind, float(t_ms[i]), int(labels[i]), int(i))

    held = False
    released = None
    for i in range(grasp.start_index, drop.end_index + 1):
        g = labels[i]
        if not held:
            if g == params.grasp_gesture and ga[i] < params.drop_threshold \
                    and np.linalg.norm(pos[i] - pickup_point) <= params.pickup_radius:
                held = True
            continue
        if g in params.carry_gestures and ga[i] > params.drop_threshold:
            return [event(BLOCK_DROP, i)]
        if g == params.drop_gesture and ga[i] > params.release_threshold:
            released = i
            break
    if released is None:
        return [event(DROPOFF_FAILURE, drop.end_index)]
    if params.dtw_threshold is not None and drop_deviation(faulted, reference, params) > params.dtw_threshold:
        return [event(DROPOFF_FAILURE, drop.end_index)]
    return []


def label_erroneous_gestures(traj: Trajectory, specs: FaultSpec | Sequence[FaultSpec],
                             events: Sequence[FailureEvent]) -> Trajectory:
    """Mark every segment overlapping [injection start, latest failure] as unsafe."""
    out = traj.copy()
    for seg in out.segments:
        seg.unsafe = False
        seg.error_codes = []
    if not events:
        return out
    if isinstance(specs, FaultSpec):
        specs = [specs]
    starts = [s.window(len(traj))[0] for s in specs]
    marks = [e.sample_index for e in events]
    lo = min(starts + marks)
    hi = max(marks)
    for seg in out.segments:
        if seg.start_index <= hi and seg.end_index >= lo:
            seg.unsafe = True
        for e in events:
            if seg.contains(e.sample_index):
                seg.error_codes.append(e.kind)
    out.meta["faults"] = [s.to_dict() for s in specs]
    out.meta["events"] = [e.to_dict() for e in events]
    out.meta["injection_start_index"] = int(min(starts))
    return out


# ---------------------------------------------------------------- campaigns


@dataclass(frozen=True)
class GridCell:
    grasper: tuple[float, float]
    duration: tuple[float, float]
    cart: tuple[float, float]
    cart_duration: tuple[float, float]
    n: int
    start: tuple[float, float] = (0.09, 0.10)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def table3_grid(n_per_cell: int = 20, grasper_ranges=((0.3, 0.4), (1.5, 1.6))) -> list[GridCell]:
    """Cells shaped like the reference fault table: each grasper range is paired
    with a short and a long window, and small and large Cartesian deviations."""
    cells = []
    for g in grasper_ranges:
        for dur, cdur in (((0.55, 0.70), (0.50, 0.60)), ((0.65, 0.90), (0.70, 0.90))):
            for cart in ((3000.0, 6000.0), (6000.0, 65000.0)):
                cells.append(GridCell(tuple(g), dur, cart, cdur, n_per_cell))
    return cells


@dataclass
class RunRecord:
    run_id: str
    cell: int
    member: str
    specs: list
    events: list
    path: str | None = None


@dataclass
class CampaignResult:
    cells: list[GridCell]
    counts: list[dict] = field(default_factory=list)
    runs: list[RunRecord] = field(default_factory=list)

    def rates(self, cell_index: int) -> dict:
        c = self.counts[cell_index]
        n = max(c["n_injections"], 1)
        return {
            "blockdrop": c["n_blockdrop"] / n,
            "dropoff": c["n_dropoff"] / n,
            "any": c["n_failed"] / n,
        }

    def pooled(self, predicate) -> dict:
        n = bd = do = anyf = 0
        for cell, c in zip(self.cells, self.counts):
            if predicate(cell):
                n += c["n_injections"]
                bd += c["n_blockdrop"]
                do += c["n_dropoff"]
                anyf += c["n_failed"]
        return {"n": n, "blockdrop": bd / max(n, 1), "dropoff": do / max(n, 1), "any": anyf / max(n, 1)}

    @property
    def totals(self):
        return {k: sum(c[k] for c in self.counts) for k in ("n_injections", "n_blockdrop", "n_dropoff")}

    def write_report(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grasper_lo", "grasper_hi", "dur_lo", "dur_hi", "cart_lo", "cart_hi",
                        "n_injections", "n_blockdrop", "n_dropoff"])
            for cell, c in zip(self.cells, self.counts):
                w.writerow([*cell.grasper, *cell.duration, *cell.cart,
                            c["n_injections"], c["n_blockdrop"], c["n_dropoff"]])

    def write_runs(self, path):
        rows = [asdict(r) for r in sorted(self.runs, key=lambda r: r.run_id)]
        Path(path).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def draw_specs(cell: GridCell, rng: np.random.Generator, theta: float, arm: str) -> list[FaultSpec]:
    s_prime = rng.uniform(*cell.grasper)
    d = rng.uniform(*cell.duration)
    delta = rng.uniform(*cell.cart)
    d_cart = rng.uniform(*cell.cart_duration)
    start = min(rng.uniform(*cell.start), 1.0 - max(d, d_cart))
    return [
        FaultSpec(GRASPER_ANGLE, start, d, s_prime, theta=theta, arm=arm),
        FaultSpec(CARTESIAN_POSITION, start, d_cart, delta, arm=arm),
    ]


def run_one(reference: Trajectory, specs: Sequence[FaultSpec], params: OracleParams):
    faulted = reference
    for spec in specs:
        faulted = inject(faulted, spec)
    events = failure_oracle(faulted, reference, params)
    return label_erroneous_gestures(faulted, specs, events), events


def run_campaign(cells: Sequence[GridCell], corpus: Sequence[Trajectory], seed: int,
                 params: OracleParams, theta: float = 0.005, out_dir=None) -> CampaignResult:
    """Inject, judge and label ``cell.n`` runs per grid cell.

    Every run draws from its own ``(seed, cell, run)`` stream, so results do
    not depend on execution order.
    """
    result = CampaignResult(list(cells))
    if not cells:
        return result
    if not corpus:
        raise InjectionError("campaign needs a non-empty fault-free corpus")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for ci, cell in enumerate(cells):
        counts = {"n_injections": 0, "n_blockdrop": 0, "n_dropoff": 0, "n_failed": 0}
        for ri in range(cell.n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, ci, ri]))
            ref = corpus[int(rng.integers(len(corpus)))]
            specs = draw_specs(cell, rng, theta, params.arm)
            labeled, events = run_one(ref, specs, params)
            kinds = {e.kind for e in events}
            counts["n_injections"] += 1
            counts["n_blockdrop"] += BLOCK_DROP in kinds
            counts["n_dropoff"] += DROPOFF_FAILURE in kinds
            counts["n_failed"] += bool(kinds)
            run_id = f"c{ci:02d}_r{ri:03d}"
            path = None
            if out_dir is not None:
                labeled.name = f"{ref.name}_{run_id}"
                path = str(save_trajectory(labeled, out_dir / f"{labeled.name}.csv"))
            result.runs.append(RunRecord(run_id, ci, ref.name, [s.to_dict() for s in specs],
                                         [e.to_dict() for e in events], path))
        result.counts.append(counts)
    return result
