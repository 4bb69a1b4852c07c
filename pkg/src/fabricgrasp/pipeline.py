"""Planner-in-the-loop deployment and the evaluation protocol.

An episode runs three phases. A spline planner moves the arm from home to a
start configuration looked up in the training set (solving IK instead puts
the arm in configurations the policy never saw; a flag exposes that variant
anyway). The learned policy then runs at 30 Hz until the grasp predicate
fires or its step budget runs out. A fabric planner finally raises the arm;
the toy world has no contact physics, so the lift cannot fail and success
is decided by the predicate at grasp end. Reports say so.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ContractError,
    DatasetLookupError,
    InvalidArgumentError,
    JointState,
    NoIKError,
    RolloutAbortError,
    stream,
    wrap_angle,
)
from .datagen import TrajectoryDataset, pos_vector
from .env import (
    GRIPPER_OPEN,
    ArmModel,
    SceneObject,
    arm_collision_points,
    forward_kinematics,
    grasp_success,
    ik_solve,
    sample_above_region,
    signed_distance,
)
from .fabric import PlannerFabricConfig, planner_accel
from .integrator import IntegratorConfig, rollout

REPORT_VERSION = 1

APPROACH = "approach"
GRASP = "grasp"
LIFT = "lift"


@dataclass(frozen=True)
class EpisodeConfig:
    approach_seconds: float = 2.0
    grasp_max_steps: int = 300
    lift_seconds: float = 2.0
    lift_height: float = 0.25
    use_ik_start: bool = False
    int_cfg: IntegratorConfig = field(default_factory=IntegratorConfig)
    planner_cfg: PlannerFabricConfig = field(
        default_factory=PlannerFabricConfig)

    def __post_init__(self):
        if self.approach_seconds <= 0.0 or self.lift_seconds <= 0.0 \
                or self.lift_height <= 0.0:
            raise InvalidArgumentError("phase durations must be positive")
        if self.grasp_max_steps < 1:
            raise InvalidArgumentError("grasp_max_steps must be >= 1")


@dataclass
class EpisodeOutcome:
    phase: str
    success: bool
    terminal: JointState
    steps: dict
    diagnostics: dict

    def __post_init__(self):
        if self.phase not in (APPROACH, GRASP, LIFT):
            raise InvalidArgumentError(f"unknown phase {self.phase!r}")
        if self.success and self.phase != LIFT:
            raise ContractError("success implies the lift phase was reached")


def _start_cost(ee_pose: np.ndarray, x0: np.ndarray) -> float:
    # planar pose distance: meters plus 0.1 * wrapped angle gap
    return float(np.linalg.norm(ee_pose[:2] - x0[:2])
                 + 0.1 * abs(wrap_angle(ee_pose[2] - x0[2])))


def nearest_start_index(z_query, x0, ds: TrajectoryDataset,
                        arm: ArmModel | None = None) -> int:
    """Entry whose encoding is L2-closest to z_query and, among those,
    whose first-frame EE pose is closest to x0. Ties go to the lowest id."""
    if len(ds.entries) == 0:
        raise DatasetLookupError("empty dataset")
    arm = arm or ArmModel()
    z_query = np.asarray(z_query, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    zdist = np.array([np.linalg.norm(e.z - z_query) for e in ds.entries])
    zmin = float(np.min(zdist))
    best = (np.inf, -1)
    for i, e in enumerate(ds.entries):
        if zdist[i] != zmin:
            continue
        ee, _ = forward_kinematics(arm, e.traj.q[0])
        c = _start_cost(ee, x0)
        if c < best[0]:
            best = (c, i)
    return best[1]


def nearest_start_lookup(z_query, x0, ds: TrajectoryDataset,
                         arm: ArmModel | None = None) -> np.ndarray:
    return ds.entries[nearest_start_index(z_query, x0, ds, arm)].traj.q[0].copy()


def approach_spline(q0: np.ndarray, q1: np.ndarray, seconds: float,
                    dt: float) -> np.ndarray:
    """Cubic joint-space blend from q0 to q1, zero end velocities.

    Returns the visited configurations including both endpoints.
    """
    steps = max(1, int(round(seconds / dt)))
    s = np.arange(steps + 1) / steps
    blend = 3.0 * s ** 2 - 2.0 * s ** 3
    return q0[None, :] + blend[:, None] * (q1 - q0)[None, :]


def _path_clear(path: np.ndarray, obj: SceneObject, arm: ArmModel) -> bool:
    pts = [arm_collision_points(arm, q) for q in path]
    return bool(np.min(signed_distance(obj, np.vstack(pts))) > 0.0)


def pos_encode(obj: SceneObject) -> np.ndarray:
    # same normalized position code the datasets store
    return pos_vector(obj)


def run_episode(obj: SceneObject, policy, ds: TrajectoryDataset,
                cfg: EpisodeConfig, rng: np.random.Generator,
                encode_fn=pos_encode, arm: ArmModel | None = None,
                record: dict | None = None) -> EpisodeOutcome:
    """record, if given, receives the per-phase paths for offline dumps."""
    arm = arm or ArmModel()
    dt = cfg.int_cfg.dt
    steps = {APPROACH: 0, GRASP: 0, LIFT: 0}
    diags = {"pose": [float(v) for v in obj.pose],
             "lift_physics": "kinematic formality; success is decided by "
                             "the grasp predicate at grasp end"}

    # phase 1: spline from home to a dataset start configuration
    x0 = sample_above_region(obj, rng)
    z = np.asarray(encode_fn(obj), dtype=np.float64)
    diags["x0"] = [float(v) for v in x0]
    if cfg.use_ik_start:
        try:
            q_start = ik_solve(arm, x0, arm.home_q)
            q_start[arm.n_arm:] = GRIPPER_OPEN
        except NoIKError:
            diags["failure"] = "ik start unreachable"
            return EpisodeOutcome(APPROACH, False,
                                  JointState(arm.home_q, np.zeros(arm.dof)),
                                  steps, diags)
    else:
        q_start = nearest_start_lookup(z, x0, ds, arm)
    path = approach_spline(arm.home_q, q_start, cfg.approach_seconds, dt)
    steps[APPROACH] = len(path) - 1
    state = JointState(q_start, np.zeros(arm.dof))
    if record is not None:
        record[APPROACH] = path
    if not _path_clear(path, obj, arm):
        diags["failure"] = "approach spline collides"
        return EpisodeOutcome(APPROACH, False, state, steps, diags)

    # phase 2: learned policy at 30 Hz until the predicate fires
    grasp_cfg = IntegratorConfig(
        dt=dt, max_steps=cfg.grasp_max_steps,
        velocity_clamp=cfg.int_cfg.velocity_clamp,
        acceleration_clamp=cfg.int_cfg.acceleration_clamp)
    try:
        traj = rollout(lambda s, zz: policy.accel(s, zz), state, z, grasp_cfg,
                       stop_fn=lambda s, k: grasp_success(arm, s.q, obj))
    except RolloutAbortError as err:
        steps[GRASP] = err.step
        diags["failure"] = f"policy produced non-finite accel ({err})"
        return EpisodeOutcome(GRASP, False, state, steps, diags)
    if record is not None:
        record[GRASP] = traj
    state = traj.state(len(traj) - 1)
    steps[GRASP] = len(traj) - 1
    if not grasp_success(arm, state.q, obj):
        diags["failure"] = "grasp predicate never fired"
        return EpisodeOutcome(GRASP, False, state, steps, diags)

    # phase 3: fabric planner raises the EE; recorded, cannot fail
    ee, _ = forward_kinematics(arm, state.q)
    try:
        q_lift = ik_solve(arm, ee + np.array([0.0, cfg.lift_height, 0.0]),
                          state.q)
        q_lift[arm.n_arm:] = state.q[arm.n_arm:]
    except NoIKError:
        q_lift = state.q.copy()
        diags["lift_note"] = "raised pose unreachable; holding grasp config"
    lift_cfg = IntegratorConfig(
        dt=dt, max_steps=max(1, int(round(cfg.lift_seconds / dt))),
        velocity_clamp=cfg.int_cfg.velocity_clamp,
        acceleration_clamp=cfg.int_cfg.acceleration_clamp)
    lift = rollout(
        lambda s, _: planner_accel(s, q_lift, [], cfg.planner_cfg, None),
        state, None, lift_cfg)
    if record is not None:
        record[LIFT] = lift
    steps[LIFT] = len(lift) - 1
    return EpisodeOutcome(LIFT, True, lift.state(len(lift) - 1), steps, diags)


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicySpec:
    """A named policy plus the artifacts its episodes consume.

    encode_fn maps a scene object to the z vector both the start lookup and
    the policy receive; ds must be labeled in the same encoding space.
    """

    name: str
    policy: object
    ds: TrajectoryDataset
    encode_fn: object = pos_encode


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 100
    x_range: tuple = (0.38, 0.56)
    y_range: tuple = (-0.24, -0.06)
    theta_range: tuple = (-np.pi, np.pi)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    threads: int = 1

    def __post_init__(self):
        if self.trials < 0:
            raise InvalidArgumentError("trials must be >= 0")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")


def _sample_pose(rng: np.random.Generator, cfg: EvalConfig) -> tuple:
    return (float(rng.uniform(*cfg.x_range)), float(rng.uniform(*cfg.y_range)),
            float(rng.uniform(*cfg.theta_range)))


def replay_baseline(ds: TrajectoryDataset, table, arm: ArmModel | None = None
                    ) -> dict:
    """Fraction of stored trajectories whose final frame still grasps, per
    shape name. The toy generator rejects failures up front, so this is the
    honest analogue of a simulator replay rate, not a reproduction of one."""
    arm = arm or ArmModel()
    counts = {}
    for e in ds.entries:
        obj = table.entries[e.grasp_index].obj
        ok = grasp_success(arm, e.traj.q[-1], obj)
        total, good = counts.get(obj.shape.value, (0, 0))
        counts[obj.shape.value] = (total + 1, good + int(ok))
    return {k: good / total for k, (total, good) in sorted(counts.items())}


def evaluate(specs: list, shapes: list, seed: int,
             cfg: EvalConfig | None = None, arm: ArmModel | None = None,
             tables: dict | None = None):
    """Run cfg.trials episodes per (policy, shape); returns (report, episodes).

    Poses are shared across policies at equal (shape, trial) so the
    comparison is paired. Each episode draws from its own stream, keeping
    the report a pure function of (artifacts, seed, config).
    """
    cfg = cfg or EvalConfig()
    arm = arm or ArmModel()
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidArgumentError("duplicate policy names")

    jobs = []
    for si, (shape, size) in enumerate(shapes):
        for t in range(cfg.trials):
            pose = _sample_pose(stream(seed, "eval-pose", si, t), cfg)
            for pi, spec in enumerate(specs):
                jobs.append((pi, si, t, shape, size, pose))

    def run(job):
        pi, si, t, shape, size, pose = job
        spec = specs[pi]
        obj = SceneObject(shape, tuple(size), pose)
        out = run_episode(obj, spec.policy, spec.ds, cfg.episode,
                          stream(seed, "eval-episode", pi, si, t),
                          encode_fn=spec.encode_fn, arm=arm)
        return {"policy": spec.name, "shape": shape.value, "trial": t,
                "pose": list(pose), "phase": out.phase,
                "success": out.success, "steps": dict(out.steps),
                "diagnostics": out.diagnostics}

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            episodes = list(pool.map(run, jobs))
    else:
        episodes = [run(j) for j in jobs]

    results = {s.name: {shape.value: {"success": 0, "trials": 0}
                        for shape, _ in shapes} for s in specs}
    for row in episodes:
        cell = results[row["policy"]][row["shape"]]
        cell["trials"] += 1
        cell["success"] += int(row["success"])
    for per_shape in results.values():
        for cell in per_shape.values():
            cell["rate"] = (cell["success"] / cell["trials"]
                            if cell["trials"] else None)

    baselines = {}
    if tables:
        for spec in specs:
            if spec.name in tables:
                baselines[spec.name] = replay_baseline(
                    spec.ds, tables[spec.name], arm)

    report = {
        "report_version": REPORT_VERSION,
        "seed": seed,
        "trials": cfg.trials,
        "shapes": [[shape.value, list(size)] for shape, size in shapes],
        "policies": results,
        "replay_baseline": baselines,
        "lift_physics": "kinematic formality; success decided at grasp end",
        "config": {"x_range": list(cfg.x_range), "y_range": list(cfg.y_range),
                   "theta_range": list(cfg.theta_range),
                   "threads": cfg.threads,
                   "episode": {
                       "approach_seconds": cfg.episode.approach_seconds,
                       "grasp_max_steps": cfg.episode.grasp_max_steps,
                       "lift_seconds": cfg.episode.lift_seconds,
                       "lift_height": cfg.episode.lift_height,
                       "use_ik_start": cfg.episode.use_ik_start,
                       "dt": cfg.episode.int_cfg.dt}},
    }
    return report, episodes


CSV_FIELDS = ["policy", "shape", "trial", "pose_x", "pose_y", "pose_theta",
              "phase", "success", "approach_steps", "grasp_steps",
              "lift_steps"]


def write_episode_csv(episodes: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in episodes:
            w.writerow({
                "policy": row["policy"], "shape": row["shape"],
                "trial": row["trial"], "pose_x": row["pose"][0],
                "pose_y": row["pose"][1], "pose_theta": row["pose"][2],
                "phase": row["phase"], "success": int(row["success"]),
                "approach_steps": row["steps"][APPROACH],
                "grasp_steps": row["steps"][GRASP],
                "lift_steps": row["steps"][LIFT]})


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
