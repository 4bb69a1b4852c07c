"""Grasp table and reverse-trajectory dataset generation.

The data pipeline plans EXITS from grasps rather than entries into them: a
trajectory is rolled out with the joint-space planner fabric from the grasp
configuration (at rest) up to a sampled pre-grasp pose, then reversed. The
reversed sequence descends onto the grasp and terminates exactly at
(q^g, 0), which is what the policy should imitate. Velocities are negated
on reversal so the kinematic reading of the frames stays consistent.

Datasets persist in the NGFD container with a JSON manifest sidecar.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DataGenError,
    EncodingMode,
    FormatError,
    InvalidArgumentError,
    NoGraspError,
    NoIKError,
    ObjectEncoding,
    JointState,
    TrajectoryRejectedError,
    stream,
    wrap_angle,
)
from .env import (
    GRIPPER_OPEN,
    ArmModel,
    SceneObject,
    Shape,
    arm_collision_points,
    boundary_points,
    chain_fk,
    forward_kinematics,
    grasp_menu,
    grasp_success,
    ik_solve,
    sample_above_region,
    signed_distance,
)
from .fabric import PlannerFabricConfig, planner_accel
from .integrator import IntegratorConfig, Trajectory, rollout

SHAPE_IDS = {Shape.CIRCLE: 0, Shape.BOX: 1, Shape.CAPSULE: 2}
SHAPE_FROM_ID = {v: k for k, v in SHAPE_IDS.items()}

# Convergence gate for the exit plan; keeps the reversed first frame within
# a few millimeters of the sampled pre-grasp pose.
REVERSE_Q_TOL = 1.5e-3
REVERSE_V_TOL = 1e-2
REVERSE_MAX_ATTEMPTS = 10
_PLAN_MAX_STEPS = 600
_PLAN_OBSTACLE_POINTS = 32

_NGFD_MAGIC = b"NGFD"
_NGFD_VERSION = 1


@dataclass
class GraspEntry:
    q_g: np.ndarray
    obj: SceneObject
    encoding: ObjectEncoding


@dataclass
class GraspTable:
    entries: list

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def make_grid(nx: int, ny: int, thetas, x_range=(0.38, 0.56),
              y_range=(-0.24, -0.06)):
    """Row-major table poses: nx x ny positions crossed with orientations.

    The default ranges keep every object's pre-grasp region inside the
    arm's pose-reachable set, so x0 sampling rarely wastes attempts.
    """
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(y_range[0], y_range[1], ny)
    return [(float(x), float(y), float(th))
            for x in xs for y in ys for th in thetas]


# Workspace band the default grids cover; the position encoding is expressed
# in these units so one coordinate step spans the band, not meters. Raw-meter
# codes differ by ~0.05 between neighboring poses, which downstream networks
# cannot resolve against radian-scale joint inputs.
POS_CENTER = np.array([0.47, -0.15])
POS_SCALE = 0.09


def pos_vector(obj: SceneObject) -> np.ndarray:
    """Object position in normalized workspace coordinates (about [-1, 1])."""
    return (obj.centroid - POS_CENTER) / POS_SCALE


def pos_encoding(obj: SceneObject) -> ObjectEncoding:
    return ObjectEncoding(EncodingMode.POS, pos_vector(obj))


def build_grasp_table(templates, grid, arm: ArmModel | None = None,
                      encode_fn=None) -> GraspTable:
    """One entry per (shape template, grid pose) that admits a grasp.

    templates: [(Shape, size), ...]. For each placement the grasp menu is
    walked in order and the first IK-feasible candidate is stored; poses
    whose placement, grasp geometry, or IK fail are skipped silently.
    """
    arm = arm or ArmModel()
    encode_fn = encode_fn or pos_encoding
    entries = []
    for shape, size in templates:
        for pose in grid:
            try:
                obj = SceneObject(shape, tuple(size), pose)
            except InvalidArgumentError:
                continue
            try:
                menu = grasp_menu(obj, arm)
            except NoGraspError:
                continue
            # Walk candidates nearest the natural reach direction first (EE
            # between base and object): those leave the arm unwrapped, which
            # keeps the exit plans used for data generation clean.
            toward_base = np.arctan2(-obj.pose[1], -obj.pose[0])
            def approach_mismatch(spec):
                u = spec.ee_pose[:2] - obj.centroid
                return abs(wrap_angle(np.arctan2(u[1], u[0]) - toward_base))
            for spec in sorted(menu, key=approach_mismatch):
                try:
                    q = ik_solve(arm, spec.ee_pose, arm.home_q)
                except NoIKError:
                    continue
                q[arm.n_arm:] = spec.closures
                if grasp_success(arm, q, obj):
                    entries.append(GraspEntry(q, obj, encode_fn(obj)))
                    break
    if not entries:
        raise DataGenError("no (shape, pose) admitted a grasp")
    return GraspTable(entries)


def _collision_sweep_clear(traj: Trajectory, obj: SceneObject,
                           arm: ArmModel) -> bool:
    pts = []
    for i in range(len(traj)):
        q = traj.q[i]
        pts.append(arm_collision_points(arm, q))
        pts.append(forward_kinematics(arm, q)[0][None, :2])
    return bool(np.min(signed_distance(obj, np.vstack(pts))) > 0.0)


def generate_reverse_trajectory(entry: GraspEntry, rng: np.random.Generator,
                                arm: ArmModel | None = None,
                                planner_cfg: PlannerFabricConfig | None = None,
                                int_cfg: IntegratorConfig | None = None,
                                max_attempts: int = REVERSE_MAX_ATTEMPTS
                                ) -> Trajectory:
    """Plan out of the grasp to a sampled pre-grasp pose, then reverse.

    Raises TrajectoryRejectedError when no sampled pre-grasp pose yields a
    converged, collision-free plan within max_attempts.
    """
    arm = arm or ArmModel()
    planner_cfg = planner_cfg or PlannerFabricConfig()
    if int_cfg is None:
        int_cfg = IntegratorConfig(max_steps=_PLAN_MAX_STEPS)
    obstacles = [boundary_points(entry.obj, _PLAN_OBSTACLE_POINTS)]
    start = JointState(entry.q_g, np.zeros(arm.dof))

    def fk(q):
        return chain_fk(arm, q)

    last_reason = "no attempt"
    for attempt in range(max_attempts):
        x0 = sample_above_region(entry.obj, rng)
        try:
            # Seeding at the grasp keeps the goal on the same arm branch,
            # so the exit plan is a short ascent instead of a reconfiguration.
            q_goal = ik_solve(arm, x0, entry.q_g)
        except NoIKError:
            last_reason = "pre-grasp pose unreachable"
            continue
        q_goal[arm.n_arm:] = GRIPPER_OPEN

        def accel(state, _z):
            return planner_accel(state, q_goal, obstacles, planner_cfg, fk)

        def stop(state, _k):
            return (np.linalg.norm(state.q - q_goal) <= REVERSE_Q_TOL
                    and np.linalg.norm(state.qdot) <= REVERSE_V_TOL)

        plan = rollout(accel, start, None, int_cfg, stop_fn=stop)
        end = plan.state(len(plan) - 1)
        if not stop(end, len(plan) - 1):
            last_reason = "planner did not converge"
            continue
        if not _collision_sweep_clear(plan, entry.obj, arm):
            last_reason = "collision sweep failed"
            continue
        T = len(plan)
        return Trajectory(np.arange(T) * int_cfg.dt, plan.q[::-1].copy(),
                          -plan.qdot[::-1],
                          meta={"x0": x0, "attempts": attempt + 1,
                                "dt": int_cfg.dt})
    raise TrajectoryRejectedError(
        f"no valid trajectory in {max_attempts} attempts ({last_reason})")


@dataclass
class DatasetEntry:
    traj: Trajectory
    z: np.ndarray
    shape_id: int
    pose: tuple
    grasp_index: int


@dataclass
class TrajectoryDataset:
    entries: list
    d: int
    z_dim: int
    dt: float
    seed: int = 0
    requested: int = 0
    rejected: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def manifest(self) -> dict:
        return {"format": "fabricgrasp-dataset", "version": _NGFD_VERSION,
                "d": self.d, "z_dim": self.z_dim, "dt": self.dt,
                "seed": self.seed, "count": len(self.entries),
                "requested": self.requested, "rejected": self.rejected,
                "grasp_indices": [e.grasp_index for e in self.entries],
                **self.extra}


def build_dataset(table: GraspTable, samples_per_entry: int, seed: int,
                  arm: ArmModel | None = None,
                  planner_cfg: PlannerFabricConfig | None = None,
                  int_cfg: IntegratorConfig | None = None
                  ) -> TrajectoryDataset:
    """samples_per_entry reverse trajectories per grasp entry.

    Each (entry, sample) pair draws from its own RNG stream, so results do
    not depend on generation order. Rejected samples are dropped and counted.
    """
    if len(table) == 0:
        raise InvalidArgumentError("empty grasp table")
    arm = arm or ArmModel()
    if int_cfg is None:
        int_cfg = IntegratorConfig(max_steps=_PLAN_MAX_STEPS)
    entries = []
    rejected = 0
    for ei, ge in enumerate(table.entries):
        for m in range(samples_per_entry):
            rng = stream(seed, "datagen", ei, m)
            try:
                traj = generate_reverse_trajectory(
                    ge, rng, arm, planner_cfg, int_cfg)
            except TrajectoryRejectedError:
                rejected += 1
                continue
            entries.append(DatasetEntry(
                traj, ge.encoding.data.copy(), SHAPE_IDS[ge.obj.shape],
                tuple(float(v) for v in ge.obj.pose), ei))
    return TrajectoryDataset(entries, d=arm.dof,
                             z_dim=table.entries[0].encoding.dim,
                             dt=int_cfg.dt, seed=seed,
                             requested=samples_per_entry * len(table),
                             rejected=rejected)


def check_dataset(ds: TrajectoryDataset, table: GraspTable,
                  arm: ArmModel | None = None) -> dict:
    """Fractions of stored trajectories passing each contract check."""
    arm = arm or ArmModel()
    n = len(ds.entries)
    ok_terminal = ok_collision = ok_timing = ok_velocity = 0
    bound = ds.dt * IntegratorConfig().acceleration_clamp
    for e in ds.entries:
        ge = table.entries[e.grasp_index]
        traj = e.traj
        if grasp_success(arm, traj.q[-1], ge.obj):
            ok_terminal += 1
        if _collision_sweep_clear(traj, ge.obj, arm):
            ok_collision += 1
        dts = np.diff(traj.t)
        if np.all(dts > 0.0) and np.allclose(dts, ds.dt, atol=1e-9):
            ok_timing += 1
        steps = (traj.q[1:] - traj.q[:-1]) / ds.dt - traj.qdot[1:]
        if len(traj) < 2 or np.max(np.linalg.norm(steps, axis=1)) <= bound:
            ok_velocity += 1
    return {"count": n,
            "terminal": ok_terminal / n if n else 1.0,
            "collision_free": ok_collision / n if n else 1.0,
            "monotone_time": ok_timing / n if n else 1.0,
            "velocity_consistent": ok_velocity / n if n else 1.0}


# ---------------------------------------------------------------------------
# NGFD container
# ---------------------------------------------------------------------------

def _manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save_dataset(ds: TrajectoryDataset, path) -> None:
    """Binary NGFD file plus a JSON manifest sidecar at <path>.json."""
    chunks = [_NGFD_MAGIC, struct.pack("<I", _NGFD_VERSION),
              struct.pack("<II", ds.d, ds.z_dim),
              struct.pack("<Q", len(ds.entries))]
    for e in ds.entries:
        T = len(e.traj)
        if e.traj.q.shape != (T, ds.d) or e.z.shape != (ds.z_dim,):
            raise InvalidArgumentError("entry shape disagrees with dataset")
        chunks.append(struct.pack("<I", T))
        chunks.append(np.ascontiguousarray(e.traj.q, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(e.traj.qdot, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(e.z, dtype="<f8").tobytes())
        chunks.append(struct.pack("<I", e.shape_id))
        chunks.append(struct.pack("<3d", *e.pose))
    Path(path).write_bytes(b"".join(chunks))
    _manifest_path(path).write_text(json.dumps(ds.manifest(), indent=1,
                                               sort_keys=True))


def load_dataset(path) -> TrajectoryDataset:
    blob = Path(path).read_bytes()
    if blob[:4] != _NGFD_MAGIC:
        raise FormatError("bad NGFD magic", offset=0)
    if len(blob) < 24:
        raise FormatError("truncated NGFD header", offset=len(blob))
    version, = struct.unpack_from("<I", blob, 4)
    if version != _NGFD_VERSION:
        raise FormatError(f"unsupported NGFD version {version}", offset=4)
    d, z_dim = struct.unpack_from("<II", blob, 8)
    count, = struct.unpack_from("<Q", blob, 16)

    try:
        manifest = json.loads(_manifest_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest sidecar: {exc}", offset=0) \
            from None
    if manifest.get("count") != count or manifest.get("d") != d \
            or manifest.get("z_dim") != z_dim:
        raise FormatError("manifest disagrees with binary header", offset=8)
    dt = float(manifest["dt"])
    indices = manifest.get("grasp_indices", [0] * count)
    if len(indices) != count:
        raise FormatError("manifest grasp_indices length mismatch", offset=16)

    off = 24
    entries = []
    for k in range(count):
        if off + 4 > len(blob):
            raise FormatError("truncated trajectory header", offset=off)
        T, = struct.unpack_from("<I", blob, off)
        off += 4
        need = 8 * (2 * T * d + z_dim) + 4 + 24
        if off + need > len(blob):
            raise FormatError("truncated trajectory payload", offset=off)
        q = np.frombuffer(blob, dtype="<f8", count=T * d,
                          offset=off).reshape(T, d).copy()
        off += 8 * T * d
        qdot = np.frombuffer(blob, dtype="<f8", count=T * d,
                             offset=off).reshape(T, d).copy()
        off += 8 * T * d
        z = np.frombuffer(blob, dtype="<f8", count=z_dim, offset=off).copy()
        off += 8 * z_dim
        shape_id, = struct.unpack_from("<I", blob, off)
        off += 4
        pose = struct.unpack_from("<3d", blob, off)
        off += 24
        traj = Trajectory(np.arange(T) * dt, q, qdot, meta={"dt": dt})
        entries.append(DatasetEntry(traj, z, int(shape_id), pose,
                                    int(indices[k])))
    if off != len(blob):
        raise FormatError("trailing bytes after last trajectory", offset=off)
    extra = {k: v for k, v in manifest.items()
             if k not in {"format", "version", "d", "z_dim", "dt", "seed",
                          "count", "requested", "rejected", "grasp_indices"}}
    return TrajectoryDataset(entries, d=d, z_dim=z_dim, dt=dt,
                             seed=int(manifest.get("seed", 0)),
                             requested=int(manifest.get("requested", 0)),
                             rejected=int(manifest.get("rejected", 0)),
                             extra=extra)
