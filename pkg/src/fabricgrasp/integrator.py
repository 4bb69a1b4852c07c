"""Fixed-step second-order integration and generic policy rollouts.

The step rule is exact for constant acceleration:

    q'    = q + dt qdot + 0.5 dt^2 a
    qdot' = qdot + dt a

Accelerations are norm-clamped before use and velocities after the update;
the clamps guard against divergence of partially trained policies and are
recorded in the config.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import Accel, InvalidArgumentError, JointState, RolloutAbortError


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1.0 / 30.0
    max_steps: int = 300
    velocity_clamp: float = 4.0
    acceleration_clamp: float = 40.0

    def __post_init__(self):
        if self.dt <= 0.0 or self.velocity_clamp <= 0.0 \
                or self.acceleration_clamp <= 0.0:
            raise InvalidArgumentError("dt and clamps must be positive")
        if self.max_steps < 0:
            raise InvalidArgumentError("max_steps must be non-negative")


def _norm_clamp(v: np.ndarray, limit: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm > limit:
        return v * (limit / norm)
    return v


def rk2_step(state: JointState, a: Accel, dt: float,
             velocity_clamp: float = 4.0, acceleration_clamp: float = 40.0,
             step: int = 0) -> JointState:
    """One integration step; `step` only labels the abort error."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise RolloutAbortError(step)
    a = _norm_clamp(a, acceleration_clamp)
    q_next = state.q + dt * state.qdot + 0.5 * dt * dt * a
    qdot_next = _norm_clamp(state.qdot + dt * a, velocity_clamp)
    return JointState(q_next, qdot_next)


@dataclass
class Trajectory:
    """Time-stamped joint trajectory; frame 0 is the initial state."""

    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float64))
        self.qdot = np.atleast_2d(np.asarray(self.qdot, dtype=np.float64))
        if not (len(self.t) == len(self.q) == len(self.qdot)):
            raise InvalidArgumentError("trajectory arrays disagree on length")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dof(self) -> int:
        return self.q.shape[1]

    def state(self, i: int) -> JointState:
        return JointState(self.q[i], self.qdot[i])


def rollout(policy_fn, initial: JointState, z, cfg: IntegratorConfig,
            stop_fn=None) -> Trajectory:
    """Integrate policy_fn(state, z) for at most cfg.max_steps steps.

    stop_fn(state, step) may end the rollout early; it is also consulted on
    the initial state. Deterministic: equal inputs give bit-identical output.
    """
    times = [0.0]
    qs = [initial.q.copy()]
    qdots = [initial.qdot.copy()]
    state = initial
    for k in range(cfg.max_steps):
        if stop_fn is not None and stop_fn(state, k):
            break
        a = policy_fn(state, z)
        state = rk2_step(state, a, cfg.dt, cfg.velocity_clamp,
                         cfg.acceleration_clamp, step=k)
        times.append((k + 1) * cfg.dt)
        qs.append(state.q)
        qdots.append(state.qdot)
    return Trajectory(np.array(times), np.array(qs), np.array(qdots))


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write `t,q0..q{D-1},qd0..qd{D-1}` rows in round-trip decimal text."""
    d = traj.dof
    header = ["t"] + [f"q{i}" for i in range(d)] + [f"qd{i}" for i in range(d)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i in range(len(traj)):
            row = [traj.t[i], *traj.q[i], *traj.qdot[i]]
            writer.writerow([repr(float(x)) for x in row])


def trajectory_from_csv(path) -> Trajectory:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if not header or header[0] != "t" or (len(header) - 1) % 2 != 0:
            raise InvalidArgumentError(f"unexpected csv header in {path}")
        d = (len(header) - 1) // 2
        rows = [[float(x) for x in row] for row in reader]
    data = np.array(rows, dtype=np.float64).reshape(-1, 1 + 2 * d)
    return Trajectory(data[:, 0], data[:, 1:1 + d], data[:, 1 + d:])
