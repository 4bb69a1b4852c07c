"""Surrogate PD expert, nearest-trajectory targeting, DAgger training loop.

The expert is a PD law toward the NEXT frame of a reference trajectory:

    pi_e(q_next_d, q, qdot) = k_p (q_next_d - q) - k_d qdot

Rolling it under RK2 from a state near any dataset frame collapses the
motion back onto that trajectory, which is what makes it a usable labeler:
during a DAgger round the LEARNER rolls, and every visited state is labeled
with the expert acceleration toward successive frames of the nearest
dataset trajectory (identified once per segment).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    Accel,
    DatasetLookupError,
    InvalidArgumentError,
    JointState,
    RolloutAbortError,
    TrainingAbortError,
    stream,
)
from .datagen import TrajectoryDataset
from .diffnet import make_optimizer
from .integrator import IntegratorConfig, Trajectory, rk2_step
from .policy import MlpConfig, MlpPolicy, NgfConfig, NgfPolicy

W_V = 0.01
SETTLE_STEPS = 30


@dataclass(frozen=True)
class ExpertGains:
    k_p: float = 100.0
    k_d: float = 20.0

    def __post_init__(self):
        if self.k_p <= 0.0 or self.k_d <= 0.0:
            raise InvalidArgumentError("PD gains must be positive")


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 60
    rollouts_per_round: int = 8
    segment_len: int = 20
    noise_q: float = 0.05
    noise_qdot: float = 0.05
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"
    val_labels: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.rounds, self.rollouts_per_round, self.segment_len,
               self.batch_size, self.val_labels) < 1:
            raise InvalidArgumentError("train counts must be positive")
        if min(self.noise_q, self.noise_qdot, self.learning_rate) <= 0.0:
            raise InvalidArgumentError("train scalars must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError("optimizer must be 'sgd' or 'adam'")


def expert_accel(q_next_d: np.ndarray, state: JointState,
                 gains: ExpertGains) -> Accel:
    q_next_d = np.asarray(q_next_d, dtype=np.float64)
    if q_next_d.shape != state.q.shape:
        raise InvalidArgumentError("target and state dimensions disagree")
    return gains.k_p * (q_next_d - state.q) - gains.k_d * state.qdot


def nearest_trajectory(state: JointState, z: np.ndarray,
                       ds: TrajectoryDataset, weight: float = W_V):
    """(entry index, frame index) minimizing ||dq||^2 + weight ||dqdot||^2.

    Candidates are the entries whose encoding equals z exactly (the rollout
    object's own trajectories). Ties break to the lowest (entry, frame).
    """
    z = np.asarray(z, dtype=np.float64)
    best = (np.inf, -1, -1)
    for ti, e in enumerate(ds.entries):
        if not np.array_equal(e.z, z):
            continue
        dq = e.traj.q - state.q
        dv = e.traj.qdot - state.qdot
        cost = np.sum(dq * dq, axis=1) + weight * np.sum(dv * dv, axis=1)
        k = int(np.argmin(cost))
        if cost[k] < best[0]:
            best = (float(cost[k]), ti, k)
    if best[1] < 0:
        raise DatasetLookupError("no trajectory with a matching encoding")
    return best[1], best[2]


def track_indices(length: int, start: int, steps: int) -> np.ndarray:
    """Frame indices targeted from start over steps; holds the final frame."""
    return np.minimum(start + 1 + np.arange(steps), length - 1)


def collapse_error(traj: Trajectory, k: int, gains: ExpertGains,
                   rng: np.random.Generator, noise_q: float = 0.05,
                   noise_qdot: float = 0.05,
                   int_cfg: IntegratorConfig | None = None,
                   settle_steps: int = SETTLE_STEPS) -> float:
    """Terminal tracking error of the expert from a perturbed frame k.

    The expert rolls to the trajectory end and then holds the final frame
    for settle_steps more; perturbations of late frames need the hold to
    have any time to decay.
    """
    int_cfg = int_cfg or IntegratorConfig()
    d = traj.dof
    state = JointState(traj.q[k] + rng.uniform(-noise_q, noise_q, d),
                       traj.qdot[k] + rng.uniform(-noise_qdot, noise_qdot, d))
    steps = (len(traj) - 1 - k) + settle_steps
    for idx in track_indices(len(traj), k, steps):
        a = expert_accel(traj.q[idx], state, gains)
        state = rk2_step(state, a, int_cfg.dt,
                         velocity_clamp=int_cfg.velocity_clamp,
                         acceleration_clamp=int_cfg.acceleration_clamp)
    return float(np.linalg.norm(state.q - traj.q[-1]))


def _collect_segment(policy, ds: TrajectoryDataset, gains: ExpertGains,
                     cfg: TrainConfig, rng: np.random.Generator,
                     int_cfg: IntegratorConfig):
    """One on-policy segment: (states, z rows, expert labels, truncated)."""
    e = ds.entries[int(rng.integers(len(ds.entries)))]
    traj = e.traj
    k0 = int(rng.integers(len(traj)))
    d = traj.dof
    state = JointState(
        traj.q[k0] + rng.uniform(-cfg.noise_q, cfg.noise_q, d),
        traj.qdot[k0] + rng.uniform(-cfg.noise_qdot, cfg.noise_qdot, d))
    ti, k = nearest_trajectory(state, e.z, ds)
    ref = ds.entries[ti].traj

    Q, Qd, Z, A = [], [], [], []
    truncated = False
    for idx in track_indices(len(ref), k, cfg.segment_len):
        Q.append(state.q.copy())
        Qd.append(state.qdot.copy())
        Z.append(e.z)
        A.append(expert_accel(ref.q[idx], state, gains))
        try:
            a_learner = policy.accel(state, e.z)
            state = rk2_step(state, a_learner, int_cfg.dt,
                             velocity_clamp=int_cfg.velocity_clamp,
                             acceleration_clamp=int_cfg.acceleration_clamp)
        except RolloutAbortError:
            truncated = True
            break
    return (np.array(Q), np.array(Qd), np.array(Z), np.array(A), truncated)


def dagger_round(policy, ds: TrajectoryDataset, gains: ExpertGains,
                 cfg: TrainConfig, rng: np.random.Generator,
                 opt=None,
                 int_cfg: IntegratorConfig | None = None) -> dict:
    """Collect on-policy labeled segments, take one optimizer step per batch."""
    if len(ds.entries) == 0:
        raise InvalidArgumentError("empty dataset")
    int_cfg = int_cfg or IntegratorConfig()
    opt = opt or make_optimizer(cfg.optimizer, policy.nets(),
                                cfg.learning_rate, cfg.momentum)
    parts = [_collect_segment(policy, ds, gains, cfg, rng, int_cfg)
             for _ in range(cfg.rollouts_per_round)]
    Q = np.vstack([p[0] for p in parts])
    Qd = np.vstack([p[1] for p in parts])
    Z = np.vstack([p[2] for p in parts])
    A = np.vstack([p[3] for p in parts])
    truncated = sum(int(p[4]) for p in parts)

    total = 0.0
    n = Q.shape[0]
    for s in range(0, n, cfg.batch_size):
        sl = slice(s, min(s + cfg.batch_size, n))
        loss, grads = policy.loss_and_grads(Q[sl], Qd[sl], Z[sl], A[sl])
        opt.step(grads)
        total += loss * (sl.stop - sl.start)
    return {"mean_loss": total / n, "labels": int(n),
            "truncated_segments": truncated}


def _val_batch(ds: TrajectoryDataset, gains: ExpertGains, cfg: TrainConfig):
    """Fixed expert-labeled probe states for validation loss."""
    rng = stream(cfg.seed, "trainer", -1)
    d = ds.entries[0].traj.dof
    Q, Qd, Z, A = [], [], [], []
    for _ in range(cfg.val_labels):
        e = ds.entries[int(rng.integers(len(ds.entries)))]
        traj = e.traj
        k0 = int(rng.integers(len(traj)))
        state = JointState(
            traj.q[k0] + rng.uniform(-cfg.noise_q, cfg.noise_q, d),
            traj.qdot[k0] + rng.uniform(-cfg.noise_qdot, cfg.noise_qdot, d))
        ti, k = nearest_trajectory(state, e.z, ds)
        ref = ds.entries[ti].traj
        idx = int(track_indices(len(ref), k, 1)[0])
        Q.append(state.q)
        Qd.append(state.qdot)
        Z.append(e.z)
        A.append(expert_accel(ref.q[idx], state, gains))
    return np.array(Q), np.array(Qd), np.array(Z), np.array(A)


def _snapshot(nets):
    return [[w.copy() for w in net.weights] + [b.copy() for b in net.biases]
            for net in nets]


def _restore(nets, snap):
    for net, arrs in zip(nets, snap):
        n = len(net.weights)
        for w, saved in zip(net.weights, arrs[:n]):
            w[:] = saved
        for b, saved in zip(net.biases, arrs[n:]):
            b[:] = saved


def train(arch: str, encoding_mode: str, ds: TrajectoryDataset,
          cfg: TrainConfig, gains: ExpertGains = ExpertGains(),
          policy=None, int_cfg: IntegratorConfig | None = None):
    """DAgger-train a policy on ds; returns (policy, report).

    Checkpointing keeps the parameters with the best validation loss on a
    fixed expert-labeled probe batch; they are restored before returning.
    """
    if len(ds.entries) == 0:
        raise InvalidArgumentError("empty dataset")
    if policy is None:
        if arch == "ngf":
            policy = NgfPolicy.create(
                NgfConfig(d=ds.d, z_dim=ds.z_dim), cfg.seed)
        elif arch == "mlp":
            policy = MlpPolicy.create(
                MlpConfig(d=ds.d, z_dim=ds.z_dim), cfg.seed)
        else:
            raise InvalidArgumentError(f"unknown arch {arch!r}")
    opt = make_optimizer(cfg.optimizer, policy.nets(), cfg.learning_rate,
                         cfg.momentum)
    val = _val_batch(ds, gains, cfg)
    rounds = []
    best = (np.inf, None, -1)
    for r in range(cfg.rounds):
        rng = stream(cfg.seed, "trainer", r)
        stats = dagger_round(policy, ds, gains, cfg, rng, opt=opt,
                             int_cfg=int_cfg)
        if not np.isfinite(stats["mean_loss"]):
            raise TrainingAbortError(
                "non-finite DAgger loss",
                {"round": r, "mean_loss": stats["mean_loss"]})
        val_loss = float(policy.loss_and_grads(*val)[0])
        stats.update({"round": r, "val_loss": val_loss})
        rounds.append(stats)
        if val_loss < best[0]:
            best = (val_loss, _snapshot(policy.nets()), r)
    if best[1] is not None:
        _restore(policy.nets(), best[1])
    report = {"arch": arch, "encoding_mode": encoding_mode,
              "seed": cfg.seed, "rounds": rounds, "best_round": best[2],
              "best_val_loss": float(best[0]),
              "config": asdict(cfg), "gains": asdict(gains),
              "dataset": {"count": len(ds.entries), "d": ds.d,
                          "z_dim": ds.z_dim, "seed": ds.seed}}
    return policy, report
