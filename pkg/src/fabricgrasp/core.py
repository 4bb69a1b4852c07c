"""Shared value types, SPD linear algebra, and the seeded RNG stream contract.

All floating-point math is 64-bit. The joint-space dimension D defaults to 6
(4 arm joints + 2 gripper joints) and stays constant within a run.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

# Velocity threshold below which a joint velocity counts as "at rest".
EPS_V = 1e-8
# Shift applied after ELU so mapped outputs stay strictly positive.
EPS_P = 1e-6

DEFAULT_DOF = 6


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class FabricGraspError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(FabricGraspError):
    """Non-finite or malformed input to a numeric operation."""


class NotSPDError(FabricGraspError):
    """Cholesky factorization failed; carries the failing pivot index."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not SPD (pivot {pivot} non-positive)")
        self.pivot = pivot


class ContractError(FabricGraspError):
    """An operation was called outside its declared contract."""


class RolloutAbortError(FabricGraspError):
    """Policy produced a non-finite acceleration; carries the step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite acceleration at rollout step {step}")
        self.step = step


class NoGraspError(FabricGraspError):
    """No reachable grasp exists for the object pose."""


class NoIKError(FabricGraspError):
    """Inverse kinematics did not converge."""


class TrajectoryRejectedError(FabricGraspError):
    """Planner rollout failed to produce an acceptable trajectory."""


class DataGenError(FabricGraspError):
    """Dataset generation produced no usable entries."""


class DatasetLookupError(FabricGraspError):
    """Nearest-neighbour query against an empty candidate set."""


class FormatError(FabricGraspError):
    """Corrupt or truncated file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class TrainingAbortError(FabricGraspError):
    """Training loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ConfigError(FabricGraspError):
    """Invalid configuration file or CLI arguments."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointState:
    """Joint position/velocity pair (radians, radians/s)."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=np.float64))
        if self.q.shape != self.qdot.shape or self.q.ndim != 1:
            raise InvalidArgumentError(
                f"q/qdot shape mismatch: {self.q.shape} vs {self.qdot.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise InvalidArgumentError("non-finite joint state")

    @property
    def dof(self) -> int:
        return self.q.shape[0]


# Accelerations are plain float64 vectors of dimension D (rad/s^2).
Accel = np.ndarray


class EncodingMode(str, Enum):
    POS = "pos"
    PCD = "pcd"


@dataclass(frozen=True)
class ObjectEncoding:
    """Object feature vector fed to policies.

    POS mode carries the planar centroid (Z=2, meters); PCD mode carries a
    learned latent code (unitless).
    """

    mode: EncodingMode
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 1 or not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("encoding must be a finite 1-d vector")
        if self.mode == EncodingMode.POS and self.data.shape[0] != 2:
            raise InvalidArgumentError("POS encoding must have length 2")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


STREAM_LABELS = ("datagen", "trainer", "encoder", "eval")


@dataclass(frozen=True)
class RunSeed:
    """64-bit master seed plus the named streams each consumer draws from.

    Identical (seed, label, indices) tuples yield bit-identical streams; the
    generators are counter-based (Philox) so consumers may draw in any order.
    """

    seed: int
    labels: tuple[str, ...] = field(default=STREAM_LABELS)

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2 ** 64):
            raise InvalidArgumentError("seed must fit in 64 bits")

    def stream(self, label: str, *indices: int) -> np.random.Generator:
        return stream(self.seed, label, *indices)


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Counter-based generator for (seed, label, indices).

    The key is a SHA-256 digest of the tuple, so streams for distinct labels
    or indices never collide or depend on draw order elsewhere.
    """
    h = hashlib.sha256()
    h.update(struct.pack("<Q", int(seed)))
    h.update(label.encode("utf-8"))
    for ix in indices:
        h.update(struct.pack("<q", int(ix)))
    key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Vector / matrix helpers
# ---------------------------------------------------------------------------

def unit_velocity(qdot: np.ndarray) -> np.ndarray:
    """Normalize a velocity, mapping near-rest velocities to the zero vector.

    The zero convention (rather than NaN) keeps rest states safe as network
    inputs.
    """
    qdot = np.asarray(qdot, dtype=np.float64)
    if not np.all(np.isfinite(qdot)):
        raise InvalidArgumentError("non-finite velocity")
    norm = float(np.linalg.norm(qdot))
    if norm > EPS_V:
        return qdot / norm
    return np.zeros_like(qdot)


def _cholesky_pivot(M: np.ndarray) -> int:
    """Return the first failing pivot index of a Cholesky factorization."""
    n = M.shape[0]
    L = np.zeros_like(M)
    for j in range(n):
        d = M[j, j] - np.dot(L[j, :j], L[j, :j])
        if d <= 0.0 or not np.isfinite(d):
            return j
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            L[i, j] = (M[i, j] - np.dot(L[i, :j], L[j, :j])) / L[j, j]
    return -1


def spd_factor(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of M, raising NotSPDError with the pivot index."""
    M = np.asarray(M, dtype=np.float64)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pivot = _cholesky_pivot(M)
        raise NotSPDError(pivot if pivot >= 0 else 0) from None


def solve_spd(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve M x = b for symmetric positive definite M.

    b may carry multiple right-hand sides as columns. One step of iterative
    refinement keeps each residual within 1e-9 * (1 + ||b||) even for
    condition numbers up to ~1e6.
    """
    M = np.asarray(M, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    L = spd_factor(M)
    x = scipy.linalg.cho_solve((L, True), b, check_finite=False)
    r = b - M @ x
    x = x + scipy.linalg.cho_solve((L, True), r, check_finite=False)
    return x


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]; angles already in range pass unchanged."""
    if -np.pi < theta <= np.pi:
        return float(theta)
    wrapped = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return float(wrapped)
