"""Planar desk-scale world: parametric objects, a 4R arm with a two-finger
gripper, grasp construction, and the geometric grasp-success predicate.

Conventions. World frame is the vertical plane through the arm: x is reach,
y is height, the base sits at the origin. Poses are arrays (x, y, theta).
The joint vector is q = (4 arm angles, 2 gripper opening half-angles); a
gripper value of 0 means the finger lies along the approach axis (closed) and
pi/2 means fully open. Fingertip separation for equal closures c is
2 L_f sin(c).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import (
    InvalidArgumentError,
    JointState,
    NoGraspError,
    NoIKError,
    wrap_angle,
)

TABLE_DEFAULT = ((0.2, 0.9), (-0.4, 0.4))
GRASP_MENU_SIZE = 7
# Wrist setback from the object surface, leaving room for the fingers.
PAD_OFFSET = 0.03
# Fingertip overlap past the nominal object width when closed on it.
GRIP_INTERFERENCE = 0.002
GRIPPER_OPEN = 1.2

# Success thresholds (inclusive).
POS_TOL = 0.01
ORI_TOL = 0.1
CLOSURE_TOL = 0.05


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def unit(theta: float) -> np.ndarray:
    return np.array([np.cos(theta), np.sin(theta)])


class Shape(str, Enum):
    CIRCLE = "circle"
    BOX = "box"
    CAPSULE = "capsule"


@dataclass
class SceneObject:
    """Rigid convex object with its boundary sampled into n_points points.

    size: circle (r,), box (width, height), capsule (length, radius).
    """

    shape: Shape
    size: tuple
    pose: np.ndarray
    n_points: int = 64
    table: tuple = TABLE_DEFAULT

    def __post_init__(self):
        self.shape = Shape(self.shape)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.size = tuple(float(s) for s in self.size)
        if self.pose.shape != (3,) or not np.all(np.isfinite(self.pose)):
            raise InvalidArgumentError("pose must be finite (x, y, theta)")
        want = {Shape.CIRCLE: 1, Shape.BOX: 2, Shape.CAPSULE: 2}[self.shape]
        if len(self.size) != want or any(s <= 0.0 for s in self.size):
            raise InvalidArgumentError(
                f"{self.shape.value} needs {want} positive size params")
        if self.n_points < 1:
            raise InvalidArgumentError("n_points must be >= 1")
        (x0, x1), (y0, y1) = self.table
        bx0, bx1, by0, by1 = aabb(self)
        if bx0 < x0 or bx1 > x1 or by0 < y0 or by1 > y1:
            raise InvalidArgumentError("object leaves the table bounds")

    @property
    def centroid(self) -> np.ndarray:
        return self.pose[:2]


def local_extent(obj: SceneObject, d_local: np.ndarray) -> float:
    """Support function of the centered shape: max over the body of d'x."""
    dx, dy = abs(float(d_local[0])), abs(float(d_local[1]))
    if obj.shape == Shape.CIRCLE:
        return obj.size[0]
    if obj.shape == Shape.BOX:
        w, h = obj.size
        return 0.5 * w * dx + 0.5 * h * dy
    length, r = obj.size
    return 0.5 * length * dx + r


def extent(obj: SceneObject, d_world: np.ndarray) -> float:
    """Support measured from the centroid along a world unit direction."""
    d_local = rot2(-obj.pose[2]) @ np.asarray(d_world, dtype=np.float64)
    return local_extent(obj, d_local)


def aabb(obj: SceneObject) -> tuple:
    cx, cy = obj.pose[:2]
    ex = extent(obj, np.array([1.0, 0.0]))
    ey = extent(obj, np.array([0.0, 1.0]))
    return (cx - ex, cx + ex, cy - ey, cy + ey)


def _local_boundary(obj: SceneObject, n: int) -> np.ndarray:
    """n points equally spaced in arc length on the local-frame boundary."""
    if obj.shape == Shape.CIRCLE:
        r = obj.size[0]
        ang = 2.0 * np.pi * np.arange(n) / n
        return r * np.column_stack([np.cos(ang), np.sin(ang)])
    if obj.shape == Shape.BOX:
        w, h = obj.size
        per = 2.0 * (w + h)
        s = per * np.arange(n) / n
        pts = np.empty((n, 2))
        for i, si in enumerate(s):
            if si < w:
                pts[i] = (-w / 2 + si, -h / 2)
            elif si < w + h:
                pts[i] = (w / 2, -h / 2 + (si - w))
            elif si < 2 * w + h:
                pts[i] = (w / 2 - (si - w - h), h / 2)
            else:
                pts[i] = (-w / 2, h / 2 - (si - 2 * w - h))
        return pts
    length, r = obj.size
    half = length / 2.0
    per = 2.0 * length + 2.0 * np.pi * r
    s = per * np.arange(n) / n
    pts = np.empty((n, 2))
    for i, si in enumerate(s):
        if si < length:
            pts[i] = (-half + si, -r)
        elif si < length + np.pi * r:
            a = (si - length) / r
            pts[i] = (half + r * np.sin(a), -r * np.cos(a))
        elif si < 2 * length + np.pi * r:
            pts[i] = (half - (si - length - np.pi * r), r)
        else:
            a = (si - 2 * length - np.pi * r) / r
            pts[i] = (-half - r * np.sin(a), r * np.cos(a))
    return pts


def boundary_points(obj: SceneObject, n: int | None = None) -> np.ndarray:
    """World-frame boundary point set ((n, 2), default n = obj.n_points)."""
    local = _local_boundary(obj, obj.n_points if n is None else int(n))
    return local @ rot2(obj.pose[2]).T + obj.pose[:2]


def signed_distance(obj: SceneObject, points: np.ndarray) -> np.ndarray:
    """Signed distance from world points (N, 2); negative inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    local = (pts - obj.pose[:2]) @ rot2(obj.pose[2])
    if obj.shape == Shape.CIRCLE:
        return np.linalg.norm(local, axis=1) - obj.size[0]
    if obj.shape == Shape.BOX:
        w, h = obj.size
        d = np.abs(local) - np.array([w / 2.0, h / 2.0])
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(np.max(d, axis=1), 0.0)
        return outside + inside
    length, r = obj.size
    x = np.clip(local[:, 0], -length / 2.0, length / 2.0)
    seg = np.column_stack([x, np.zeros(len(local))])
    return np.linalg.norm(local - seg, axis=1) - r


# ---------------------------------------------------------------------------
# Arm
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmModel:
    link_lengths: np.ndarray = field(
        default_factory=lambda: np.array([0.30, 0.25, 0.20, 0.15]))
    finger_length: float = 0.06
    home_q: np.ndarray = field(
        default_factory=lambda: np.array([1.9, -1.1, -0.4, -0.2,
                                          GRIPPER_OPEN, GRIPPER_OPEN]))

    def __post_init__(self):
        object.__setattr__(self, "link_lengths",
                           np.asarray(self.link_lengths, dtype=np.float64))
        object.__setattr__(self, "home_q",
                           np.asarray(self.home_q, dtype=np.float64))
        if np.any(self.link_lengths <= 0.0) or self.finger_length <= 0.0:
            raise InvalidArgumentError("link and finger lengths must be > 0")
        if self.home_q.shape != (self.dof,):
            raise InvalidArgumentError("home configuration has wrong width")

    @property
    def n_arm(self) -> int:
        return len(self.link_lengths)

    @property
    def dof(self) -> int:
        return self.n_arm + 2

    @property
    def reach(self) -> float:
        return float(np.sum(self.link_lengths))


def forward_kinematics(arm: ArmModel, q: np.ndarray):
    """EE pose (x, y, theta) plus the chain points base..joint_i..EE.

    Gripper joints do not move the EE frame.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (arm.dof,):
        raise InvalidArgumentError(f"expected {arm.dof} joints, got {q.shape}")
    angles = np.cumsum(q[:arm.n_arm])
    steps = arm.link_lengths[:, None] * np.column_stack(
        [np.cos(angles), np.sin(angles)])
    points = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    ee_pose = np.array([points[-1, 0], points[-1, 1], angles[-1]])
    return ee_pose, points


def jacobian(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Analytic 3 x D Jacobian of the EE pose; gripper columns are zero."""
    ee_pose, points = forward_kinematics(arm, q)
    jac = np.zeros((3, arm.dof))
    for j in range(arm.n_arm):
        rx, ry = ee_pose[0] - points[j, 0], ee_pose[1] - points[j, 1]
        jac[:, j] = (-ry, rx, 1.0)
    return jac


def position_fk(arm: ArmModel, q: np.ndarray):
    """(EE position, 2 x D position Jacobian) for planner pullback."""
    ee_pose, points = forward_kinematics(arm, q)
    jac = np.zeros((2, arm.dof))
    for j in range(arm.n_arm):
        jac[0, j] = -(ee_pose[1] - points[j, 1])
        jac[1, j] = ee_pose[0] - points[j, 0]
    return ee_pose[:2], jac


def chain_fk(arm: ArmModel, q: np.ndarray):
    """Positions (P, 2) and Jacobians (P, 2, D) of link ends and midpoints,
    for whole-arm obstacle pullback. The last row is the EE."""
    _, pts = forward_kinematics(arm, q)
    ctrl, segs = [], []
    for k in range(1, arm.n_arm + 1):
        ctrl.append(0.5 * (pts[k - 1] + pts[k]))
        segs.append(k)
        ctrl.append(pts[k])
        segs.append(k)
    ctrl = np.array(ctrl)
    jac = np.zeros((len(ctrl), 2, arm.dof))
    for p, seg in enumerate(segs):
        for j in range(seg):
            jac[p, 0, j] = -(ctrl[p, 1] - pts[j, 1])
            jac[p, 1, j] = ctrl[p, 0] - pts[j, 0]
    return ctrl, jac


def fingertip_positions(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """World positions of the two fingertips, rows (finger1, finger2)."""
    ee_pose, _ = forward_kinematics(arm, q)
    c1, c2 = q[arm.n_arm], q[arm.n_arm + 1]
    tips = [ee_pose[:2] + arm.finger_length * unit(ee_pose[2] + c1),
            ee_pose[:2] + arm.finger_length * unit(ee_pose[2] - c2)]
    return np.array(tips)


# ---------------------------------------------------------------------------
# Grasps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraspSpec:
    ee_pose: np.ndarray
    closures: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ee_pose",
                           np.asarray(self.ee_pose, dtype=np.float64))
        object.__setattr__(self, "closures",
                           np.asarray(self.closures, dtype=np.float64))


def grasp_target(obj: SceneObject, arm: ArmModel,
                 approach_angle: float | None = None) -> GraspSpec:
    """Grasp pose on the approach ray at the given world angle.

    The wrist sits PAD_OFFSET outside the object surface, heading at the
    centroid; closures are set so the fingertip separation equals the
    transverse object width minus the grip interference.
    """
    phi = obj.pose[2] if approach_angle is None else float(approach_angle)
    a = unit(phi)
    ee_pos = obj.centroid + (extent(obj, a) + PAD_OFFSET) * a
    width = 2.0 * extent(obj, unit(phi + np.pi / 2.0))
    separation = width - GRIP_INTERFERENCE
    if separation <= 0.0 or separation > 2.0 * arm.finger_length:
        raise NoGraspError(
            f"width {width:.3f} m not graspable with fingers "
            f"{arm.finger_length:.3f} m")
    if np.linalg.norm(ee_pos) > arm.reach:
        raise NoGraspError("grasp pose beyond arm reach")
    closure = float(np.arcsin(separation / (2.0 * arm.finger_length)))
    ee_pose = np.array([ee_pos[0], ee_pos[1], wrap_angle(phi + np.pi)])
    return GraspSpec(ee_pose, np.array([closure, closure]))


def grasp_menu(obj: SceneObject, arm: ArmModel,
               n: int = GRASP_MENU_SIZE) -> list:
    """The per-object grasp candidates: n approach angles around the object.

    Entries that fail the geometric feasibility checks are dropped; IK
    feasibility is the caller's concern.
    """
    specs = []
    for k in range(n):
        phi = obj.pose[2] + 2.0 * np.pi * k / n
        try:
            specs.append(grasp_target(obj, arm, phi))
        except NoGraspError:
            continue
    return specs


def grasp_success(arm: ArmModel, q: np.ndarray, obj: SceneObject,
                  menu: list | None = None) -> bool:
    """True iff q realizes one of the object's grasp candidates.

    Inclusive thresholds: EE position within 1 cm, orientation within
    0.1 rad, both closures within 0.05 rad.
    """
    q = np.asarray(q, dtype=np.float64)
    ee_pose, _ = forward_kinematics(arm, q)
    closures = q[arm.n_arm:]
    if menu is None:
        menu = grasp_menu(obj, arm)
    for spec in menu:
        if np.linalg.norm(ee_pose[:2] - spec.ee_pose[:2]) > POS_TOL:
            continue
        if abs(wrap_angle(ee_pose[2] - spec.ee_pose[2])) > ORI_TOL:
            continue
        if np.max(np.abs(closures - spec.closures)) > CLOSURE_TOL:
            continue
        return True
    return False


# ---------------------------------------------------------------------------
# Pre-grasp sampling and IK
# ---------------------------------------------------------------------------

CLEARANCE = 0.15
REGION_INFLATION = 1.25


def above_region(obj: SceneObject) -> tuple:
    """Rectangle (x_lo, x_hi, y_lo, y_hi) above the object's bounding box."""
    x0, x1, y0, y1 = aabb(obj)
    w, h = REGION_INFLATION * (x1 - x0), REGION_INFLATION * (y1 - y0)
    cx = 0.5 * (x0 + x1)
    return (cx - w / 2.0, cx + w / 2.0, y1 + CLEARANCE, y1 + CLEARANCE + h)


def sample_above_region(obj: SceneObject, rng: np.random.Generator) -> np.ndarray:
    """Uniform EE pose in the pre-grasp region, heading at the centroid."""
    x_lo, x_hi, y_lo, y_hi = above_region(obj)
    u = rng.random(2)
    pos = np.array([x_lo + u[0] * (x_hi - x_lo), y_lo + u[1] * (y_hi - y_lo)])
    to_obj = obj.centroid - pos
    return np.array([pos[0], pos[1], np.arctan2(to_obj[1], to_obj[0])])


IK_POS_TOL = 1e-4
IK_ORI_TOL = 1e-3
IK_MAX_ITERS = 500
_IK_DAMPING = 0.1
_IK_STEP_CAP = 0.5


def _pose_error(target: np.ndarray, ee_pose: np.ndarray) -> np.ndarray:
    return np.array([target[0] - ee_pose[0], target[1] - ee_pose[1],
                     wrap_angle(target[2] - ee_pose[2])])


def ik_solve(arm: ArmModel, target_pose: np.ndarray,
             q_init: np.ndarray) -> np.ndarray:
    """Damped least-squares IK for the arm joints (grippers pass through).

    Converges to position error <= 1e-4 m and orientation error <= 1e-3 rad
    or raises NoIKError. Retries from elbow-perturbed initializations before
    giving up.
    """
    target_pose = np.asarray(target_pose, dtype=np.float64)
    q_init = np.asarray(q_init, dtype=np.float64)
    if not np.all(np.isfinite(target_pose)):
        raise InvalidArgumentError("non-finite IK target")
    if np.linalg.norm(target_pose[:2]) > arm.reach + IK_POS_TOL:
        raise NoIKError("target beyond arm reach")
    # Pose feasibility: the EE heading fixes the last link, so the wrist
    # point must fall inside the reach annulus of the remaining links. With
    # no joint limits this is necessary and sufficient for a planar chain.
    wrist = target_pose[:2] - arm.link_lengths[-1] * unit(target_pose[2])
    inner_links = arm.link_lengths[:-1]
    outer = float(np.sum(inner_links))
    inner = max(0.0, 2.0 * float(np.max(inner_links)) - outer)
    dist = np.linalg.norm(wrist)
    if dist > outer + IK_POS_TOL or dist < inner - IK_POS_TOL:
        raise NoIKError("EE heading places the wrist out of reach")

    restarts = [np.zeros(arm.n_arm),
                np.array([0.0, 0.7, -0.7, 0.0]),
                np.array([0.0, -0.7, 0.7, 0.0]),
                np.array([0.4, 0.4, 0.4, 0.4]),
                np.array([-0.4, -0.4, -0.4, -0.4])]
    for bump in restarts:
        q = q_init.copy()
        q[:arm.n_arm] = q_init[:arm.n_arm] + bump[:arm.n_arm]
        for _ in range(IK_MAX_ITERS):
            ee_pose, _ = forward_kinematics(arm, q)
            err = _pose_error(target_pose, ee_pose)
            if np.linalg.norm(err[:2]) <= IK_POS_TOL and abs(err[2]) <= IK_ORI_TOL:
                return q
            jac = jacobian(arm, q)[:, :arm.n_arm]
            gram = jac @ jac.T + _IK_DAMPING ** 2 * np.eye(3)
            step = jac.T @ np.linalg.solve(gram, err)
            norm = np.linalg.norm(step)
            if norm > _IK_STEP_CAP:
                step *= _IK_STEP_CAP / norm
            q[:arm.n_arm] += step
    raise NoIKError(f"IK failed for target {np.round(target_pose, 4)}")


def arm_collision_points(arm: ArmModel, q: np.ndarray,
                         samples_per_link: int = 8) -> np.ndarray:
    """Sample points along the arm links (fingers excluded: they are the
    part meant to touch the object)."""
    _, pts = forward_kinematics(arm, q)
    out = []
    frac = np.linspace(0.0, 1.0, samples_per_link)
    for a, b in zip(pts[:-1], pts[1:]):
        out.append(a[None, :] + frac[:, None] * (b - a)[None, :])
    return np.vstack(out)
