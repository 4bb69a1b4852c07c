"""Second-order fabric calculus: energization, term resolution, planning.

A fabric is the damped sum of a geometric term (metric M_g, force f_g) and a
forcing term (metric M_f, force f_f). Resolution follows

    (M_g + M_f) qddot + f_g + f_f = 0

with the geometric part energized so it cannot change kinetic energy
L = 0.5 ||qdot||^2, plus fixed damping -beta qdot. Forced, damped fabrics of
this form come to rest at minima of the forcing potential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EPS_V, Accel, InvalidArgumentError, JointState, solve_spd


def energization_coefficient(qdot: np.ndarray, h: Accel) -> float:
    """Coefficient alpha so that qdot' (h + alpha qdot) = 0.

    Zero at rest (||qdot|| <= EPS_V), so resting states are left untouched.
    """
    qdot = np.asarray(qdot, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if not (np.all(np.isfinite(qdot)) and np.all(np.isfinite(h))):
        raise InvalidArgumentError("non-finite energization inputs")
    speed_sq = float(qdot @ qdot)
    if speed_sq <= EPS_V * EPS_V:
        return 0.0
    return -float(qdot @ h) / speed_sq


def energize(qdot: np.ndarray, h: Accel) -> Accel:
    """Project the acceleration h onto the subspace orthogonal to qdot."""
    return np.asarray(h, dtype=np.float64) + \
        energization_coefficient(qdot, h) * np.asarray(qdot, dtype=np.float64)


@dataclass
class FabricTerms:
    """Geometric and forcing metric/force pairs plus damping scalars.

    f_f is expected to already contain the learned damping contribution
    beta_f * qdot on top of the potential gradient; beta_f is carried for
    bookkeeping only. beta is the fixed damping applied directly in joint
    space (default 5).
    """

    M_g: np.ndarray
    f_g: np.ndarray
    M_f: np.ndarray
    f_f: np.ndarray
    beta_f: float
    beta: float = 5.0

    def __post_init__(self):
        self.M_g = np.asarray(self.M_g, dtype=np.float64)
        self.M_f = np.asarray(self.M_f, dtype=np.float64)
        self.f_g = np.asarray(self.f_g, dtype=np.float64)
        self.f_f = np.asarray(self.f_f, dtype=np.float64)
        for M in (self.M_g, self.M_f):
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise InvalidArgumentError("metrics must be square")
            if not np.allclose(M, M.T, atol=1e-10):
                raise InvalidArgumentError("metrics must be symmetric")
        if self.beta_f <= 0.0 or self.beta < 0.0:
            raise InvalidArgumentError("need beta_f > 0 and beta >= 0")


def resolve_fabric(terms: FabricTerms, state: JointState) -> Accel:
    """Acceleration of the damped forced fabric at the given state.

    Raises NotSPDError when the summed metric fails its Cholesky.
    """
    M = terms.M_g + terms.M_f
    sol = solve_spd(M, np.column_stack([terms.f_g, terms.f_f]))
    h_tilde, forcing = -sol[:, 0], sol[:, 1]
    return energize(state.qdot, h_tilde) - forcing - terms.beta * state.qdot


# ---------------------------------------------------------------------------
# Handcrafted planner fabric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlannerFabricConfig:
    """Gains for the obstacle-aware point planner used in data generation.

    k_a: attractor gain (rad/s^2 at saturation).
    attractor_scale: soft-norm length scale (rad); below it the pull is
        roughly linear, above it the pull saturates at k_a.
    k_r: repulsion gain on the inverse-distance barrier.
    r_0: repulsion cutoff range in meters.
    beta_p: joint-space damping.
    """

    k_a: float = 10.0
    attractor_scale: float = 0.1
    k_r: float = 1e-3
    r_0: float = 0.15
    beta_p: float = 20.0

    def __post_init__(self):
        vals = (self.k_a, self.attractor_scale, self.k_r, self.r_0, self.beta_p)
        if any(v <= 0.0 for v in vals):
            raise InvalidArgumentError("planner gains must be positive")


# Distances below this are treated as this value; keeps the barrier finite.
_REPULSION_FLOOR = 1e-4


def planner_accel(state: JointState, q_target: np.ndarray,
                  obstacles, cfg: PlannerFabricConfig, fk) -> Accel:
    """Damped attractor to q_target with obstacle repulsion at the effector.

    fk maps q to (effector position, position Jacobian); it is only consulted
    when obstacle point sets are present. Repulsion is energized so the
    barrier bends the path instead of braking it; the attractor and damping
    stay dissipative.
    """
    q_target = np.asarray(q_target, dtype=np.float64)
    if not np.all(np.isfinite(q_target)):
        raise InvalidArgumentError("non-finite planner target")
    r = state.q - q_target
    soft = np.sqrt(float(r @ r) + cfg.attractor_scale ** 2)
    accel = -cfg.k_a * r / soft

    points = [np.atleast_2d(np.asarray(p, dtype=np.float64))
              for p in obstacles if len(p) > 0]
    if points:
        pos, jac = fk(state.q)
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        jac = np.asarray(jac, dtype=np.float64)
        if jac.ndim == 2:
            jac = jac[None, :, :]
        repulse = np.zeros_like(state.q)
        for cloud in points:
            for p in range(pos.shape[0]):
                delta = pos[p][None, :] - cloud
                dist = np.maximum(np.linalg.norm(delta, axis=1),
                                  _REPULSION_FLOOR)
                near = dist < cfg.r_0
                if not np.any(near):
                    continue
                d = dist[near]
                n_hat = delta[near] / d[:, None]
                mag = cfg.k_r * (1.0 / d - 1.0 / cfg.r_0) / (d * d)
                repulse += jac[p].T @ (mag[:, None] * n_hat).sum(axis=0)
        accel = accel + energize(state.qdot, repulse)

    return accel - cfg.beta_p * state.qdot
