"""Fabric grasp policies: the structured NGF policy and an MLP baseline.

The NGF policy parameterizes a second-order fabric with five networks:

    F_g   (q, unit qdot, z) -> lower-triangular factor of the geometric metric
    F_X   (q, unit qdot, z) -> geometry direction; pi_g = ||qdot||^2 F_X
    F_f   (q, z)            -> lower-triangular factor of the forcing metric
    F_psi (q, z)            -> scalar potential, driving force d_q psi
    F_beta(q, qdot, z)      -> positive damping scalar beta_f

and resolves them through the fabric calculus with fixed damping beta. The
training path computes exact parameter gradients of ||accel - target||^2 by
hand-rolled adjoints through the metric solves, the energization, and the
potential gradient (the last via forward-over-reverse on F_psi).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .core import (
    EPS_P,
    EPS_V,
    Accel,
    ConfigError,
    InvalidArgumentError,
    JointState,
    solve_spd,
    stream,
    unit_velocity,
)
from .diffnet import (
    Activation,
    DiffNet,
    GradBundle,
    input_grad_batch,
    mixed_second_order_batch,
    net_from_bytes,
    net_to_bytes,
    param_grad_batch,
)
from .fabric import FabricTerms, resolve_fabric

POLICY_FORMAT = "fabricgrasp-policy"
POLICY_VERSION = 1


def _poselu(u: np.ndarray) -> np.ndarray:
    return np.where(u > 0.0, u, np.expm1(np.minimum(u, 0.0))) + (1.0 + EPS_P)


def _poselu_deriv(u: np.ndarray) -> np.ndarray:
    return np.where(u > 0.0, 1.0, np.exp(np.minimum(u, 0.0)))


def lower_triangular_positive(v: np.ndarray, d: int) -> np.ndarray:
    """Map a length d(d+1)/2 vector to a lower-triangular factor.

    Entries fill the lower triangle row-major; diagonal entries pass through
    the shifted ELU so U U' is SPD for any v.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (d * (d + 1) // 2,):
        raise InvalidArgumentError(
            f"factor vector must have length {d * (d + 1) // 2}")
    rows, cols = np.tril_indices(d)
    U = np.zeros((d, d))
    U[rows, cols] = v
    diag = np.arange(d)
    U[diag, diag] = _poselu(np.diag(U).copy())
    return U


def _tri_adjoint(U_bar: np.ndarray, v: np.ndarray, d: int) -> np.ndarray:
    """Pull a cotangent on U back to the raw factor vector."""
    rows, cols = np.tril_indices(d)
    vbar = U_bar[rows, cols].copy()
    diag_mask = rows == cols
    vbar[diag_mask] *= _poselu_deriv(v[diag_mask])
    return vbar


@dataclass(frozen=True)
class NgfConfig:
    """Desk-scale NGF architecture. The reference setup in the larger
    experiments uses three 512-wide ELU layers and 1000 features.

    rff_sigma 0.5 keeps the feature length scale near the grasp-basin
    width; wider bandwidths leave the terminal contraction unrepresentable
    and rollouts hover short of the target."""

    d: int = 6
    z_dim: int = 2
    hidden: tuple = (128, 128)
    rff_count: int = 256
    rff_sigma: float = 0.5
    beta: float = 5.0

    def __post_init__(self):
        if self.d < 1 or self.z_dim < 1 or self.rff_count < 1:
            raise InvalidArgumentError("bad NGF dimensions")
        if self.rff_sigma <= 0.0 or self.beta < 0.0:
            raise InvalidArgumentError("bad NGF scalars")


class NgfPolicy:
    arch = "ngf"

    def __init__(self, cfg: NgfConfig, F_g, F_X, F_f, F_psi, F_beta):
        self.cfg = cfg
        self.F_g = F_g
        self.F_X = F_X
        self.F_f = F_f
        self.F_psi = F_psi
        self.F_beta = F_beta

    @staticmethod
    def create(cfg: NgfConfig, seed: int) -> "NgfPolicy":
        d, z = cfg.d, cfg.z_dim
        tri = d * (d + 1) // 2
        specs = [("F_g", 2 * d + z, tri, Activation.LINEAR),
                 ("F_X", 2 * d + z, d, Activation.LINEAR),
                 ("F_f", d + z, tri, Activation.LINEAR),
                 ("F_psi", d + z, 1, Activation.LINEAR),
                 ("F_beta", 2 * d + z, 1, Activation.POSITIVE_ELU)]
        nets = {}
        for i, (name, n_in, n_out, out_act) in enumerate(specs):
            rng = stream(seed, "policy-init", i)
            nets[name] = DiffNet.create(
                [n_in, *cfg.hidden, n_out], rng,
                hidden_activation=Activation.ELU, output_activation=out_act,
                rff_seed=int(stream(seed, "policy-rff", i).integers(2 ** 63)),
                rff_sigma=cfg.rff_sigma, rff_count=cfg.rff_count)
        return NgfPolicy(cfg, nets["F_g"], nets["F_X"], nets["F_f"],
                         nets["F_psi"], nets["F_beta"])

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def z_dim(self) -> int:
        return self.cfg.z_dim

    def nets(self) -> list:
        return [self.F_g, self.F_X, self.F_f, self.F_psi, self.F_beta]

    # -- evaluation ----------------------------------------------------------

    def accel(self, state: JointState, z: np.ndarray) -> Accel:
        q, qdot = state.q, state.qdot
        M_g, f_g = geometric_terms(self, q, qdot, z)
        M_f, f_f, beta_f, _ = _forcing_full(self, q, qdot, z)
        terms = FabricTerms(M_g, f_g, M_f, f_f, beta_f=beta_f,
                            beta=self.cfg.beta)
        return resolve_fabric(terms, state)

    # -- training ------------------------------------------------------------

    def loss_and_grads(self, Q, Qd, Z, targets):
        return _ngf_loss_and_grads(self, Q, Qd, Z, targets)


def _inputs_gx(q, qdot, z):
    return np.concatenate([q, unit_velocity(qdot), z])


def geometric_terms(policy: NgfPolicy, q, qdot, z):
    """(M_g, f_g) with the HD2 geometry pi_g = ||qdot||^2 F_X."""
    x = _inputs_gx(q, qdot, z)
    U_g = lower_triangular_positive(policy.F_g.forward(x), policy.d)
    M_g = U_g @ U_g.T
    pi_g = float(qdot @ qdot) * policy.F_X.forward(x)
    return M_g, M_g @ pi_g


def _forcing_full(policy: NgfPolicy, q, qdot, z):
    x_f = np.concatenate([q, z])
    U_f = lower_triangular_positive(policy.F_f.forward(x_f), policy.d)
    M_f = U_f @ U_f.T
    g_psi = input_grad_batch(policy.F_psi, x_f[None, :])[0][:policy.d]
    beta_f = float(policy.F_beta.forward(
        np.concatenate([q, qdot, z]))[0])
    f_f = g_psi + beta_f * np.asarray(qdot, dtype=np.float64)
    return M_f, f_f, beta_f, g_psi


def forcing_terms(policy: NgfPolicy, q, qdot, z):
    """(M_f, f_f) with f_f = d_q psi + beta_f qdot."""
    M_f, f_f, _, _ = _forcing_full(policy, q, qdot, z)
    return M_f, f_f


def ngf_accel(policy: NgfPolicy, q, qdot, z) -> Accel:
    return policy.accel(JointState(q, qdot), z)


def _ngf_loss_and_grads(policy: NgfPolicy, Q, Qd, Z, targets):
    """Mean squared acceleration error and its parameter gradients.

    Net evaluations are batched; the per-sample fabric assembly and its
    adjoints run in a small dense loop (D x D solves). Gradient order matches
    policy.nets().
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    Qd = np.atleast_2d(np.asarray(Qd, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    B, d = Q.shape
    tri_rows, tri_cols = np.tril_indices(d)
    beta = policy.cfg.beta

    Qhat = np.array([unit_velocity(qd) for qd in Qd])
    Xg = np.hstack([Q, Qhat, Z])
    Xf = np.hstack([Q, Z])
    Xb = np.hstack([Q, Qd, Z])

    Vg = policy.F_g.forward_batch(Xg)
    VX = policy.F_X.forward_batch(Xg)
    Vf = policy.F_f.forward_batch(Xf)
    Gpsi = input_grad_batch(policy.F_psi, Xf)[:, :d]
    Bf = policy.F_beta.forward_batch(Xb)[:, 0]

    loss = 0.0
    Vg_bar = np.zeros_like(Vg)
    VX_bar = np.zeros_like(VX)
    Vf_bar = np.zeros_like(Vf)
    Gpsi_bar = np.zeros((B, Xf.shape[1]))
    Bf_bar = np.zeros((B, 1))

    for i in range(B):
        q, qdot, tgt = Q[i], Qd[i], targets[i]
        U_g = lower_triangular_positive(Vg[i], d)
        M_g = U_g @ U_g.T
        c = float(qdot @ qdot)
        pi_g = c * VX[i]
        f_g = M_g @ pi_g
        U_f = lower_triangular_positive(Vf[i], d)
        M_f = U_f @ U_f.T
        beta_f = Bf[i]
        f_f = Gpsi[i] + beta_f * qdot

        M = M_g + M_f
        cho = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        s = scipy.linalg.cho_solve(cho, f_g, check_finite=False)
        r = scipy.linalg.cho_solve(cho, f_f, check_finite=False)
        h_tilde = -s
        energized = c > EPS_V * EPS_V
        alpha = -float(qdot @ h_tilde) / c if energized else 0.0
        a = h_tilde + alpha * qdot - r - beta * qdot

        err = a - tgt
        loss += float(err @ err)
        a_bar = (2.0 / B) * err

        # Energization: a depends on h_tilde directly and through alpha.
        if energized:
            h_bar = a_bar - qdot * float(qdot @ a_bar) / c
        else:
            h_bar = a_bar.copy()
        s_bar = -h_bar
        r_bar = -a_bar

        # Adjoint of the SPD solves x = M^{-1} b:
        #   b_bar += M^{-1} x_bar,  M_bar -= (M^{-1} x_bar) x'.
        w_s = scipy.linalg.cho_solve(cho, s_bar, check_finite=False)
        w_r = scipy.linalg.cho_solve(cho, r_bar, check_finite=False)
        fg_bar = w_s
        ff_bar = w_r
        M_bar = -np.outer(w_s, s) - np.outer(w_r, r)

        # Forcing force: f_f = g_psi + beta_f qdot.
        Gpsi_bar[i, :d] = ff_bar
        Bf_bar[i, 0] = float(ff_bar @ qdot)

        # Geometric force: f_g = M_g pi_g.
        Mg_bar = M_bar + np.outer(fg_bar, pi_g)
        pig_bar = M_g @ fg_bar
        VX_bar[i] = c * pig_bar

        # Metric factors: M = U U' gives U_bar = (M_bar + M_bar') U.
        Ug_bar = (Mg_bar + Mg_bar.T) @ U_g
        Uf_bar = (M_bar + M_bar.T) @ U_f
        Vg_bar[i] = _tri_adjoint(Ug_bar, Vg[i], d)
        Vf_bar[i] = _tri_adjoint(Uf_bar, Vf[i], d)

    g_Fg = param_grad_batch(policy.F_g, Xg, Vg_bar)
    g_FX = param_grad_batch(policy.F_X, Xg, VX_bar)
    g_Ff = param_grad_batch(policy.F_f, Xf, Vf_bar)
    g_Fpsi = mixed_second_order_batch(policy.F_psi, Xf, Gpsi_bar)
    g_Fbeta = param_grad_batch(policy.F_beta, Xb, Bf_bar)
    return loss / B, [g_Fg, g_FX, g_Ff, g_Fpsi, g_Fbeta]


# ---------------------------------------------------------------------------
# MLP baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    d: int = 6
    z_dim: int = 2
    hidden: tuple = (64, 256)

    def __post_init__(self):
        if self.d < 1 or self.z_dim < 1:
            raise InvalidArgumentError("bad MLP dimensions")


class MlpPolicy:
    arch = "mlp"

    def __init__(self, cfg: MlpConfig, net: DiffNet):
        self.cfg = cfg
        self.net = net

    @staticmethod
    def create(cfg: MlpConfig, seed: int) -> "MlpPolicy":
        rng = stream(seed, "policy-init", 0)
        net = DiffNet.create([2 * cfg.d + cfg.z_dim, *cfg.hidden, cfg.d], rng,
                             hidden_activation=Activation.RELU,
                             output_activation=Activation.LINEAR)
        return MlpPolicy(cfg, net)

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def z_dim(self) -> int:
        return self.cfg.z_dim

    def nets(self) -> list:
        return [self.net]

    def accel(self, state: JointState, z: np.ndarray) -> Accel:
        return mlp_accel(self, state.q, state.qdot, z)

    def loss_and_grads(self, Q, Qd, Z, targets):
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        Qd = np.atleast_2d(np.asarray(Qd, dtype=np.float64))
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        B = Q.shape[0]
        X = np.hstack([Q, Qd, Z])
        pred = self.net.forward_batch(X)
        err = pred - targets
        loss = float(np.sum(err * err)) / B
        g = param_grad_batch(self.net, X, (2.0 / B) * err)
        return loss, [g]


def mlp_accel(policy: MlpPolicy, q, qdot, z) -> Accel:
    x = np.concatenate([np.asarray(q, dtype=np.float64),
                        np.asarray(qdot, dtype=np.float64),
                        np.asarray(z, dtype=np.float64)])
    return policy.net.forward(x)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_policy(policy, path, encoding_mode: str = "pos") -> None:
    """JSON manifest wrapping each sub-network as a base64 DNET1 blob."""
    if policy.arch == "ngf":
        net_names = ["F_g", "F_X", "F_f", "F_psi", "F_beta"]
        nets = dict(zip(net_names, policy.nets()))
        extra = {"hidden": list(policy.cfg.hidden),
                 "rff_count": policy.cfg.rff_count,
                 "rff_sigma": policy.cfg.rff_sigma,
                 "beta": policy.cfg.beta}
    else:
        nets = {"net": policy.net}
        extra = {"hidden": list(policy.cfg.hidden)}
    manifest = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "arch": policy.arch,
        "d": policy.d,
        "z_dim": policy.z_dim,
        "mode": encoding_mode,
        **extra,
        "nets": {name: base64.b64encode(net_to_bytes(net)).decode("ascii")
                 for name, net in nets.items()},
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_policy(path):
    """Returns (policy, encoding_mode)."""
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable policy manifest {path}: {exc}") from None
    if manifest.get("format") != POLICY_FORMAT:
        raise ConfigError(f"{path} is not a policy manifest")
    if manifest.get("version") != POLICY_VERSION:
        raise ConfigError(f"unsupported policy version {manifest.get('version')}")
    blobs = {name: net_from_bytes(base64.b64decode(b64))
             for name, b64 in manifest["nets"].items()}
    if manifest["arch"] == "ngf":
        cfg = NgfConfig(d=manifest["d"], z_dim=manifest["z_dim"],
                        hidden=tuple(manifest["hidden"]),
                        rff_count=manifest["rff_count"],
                        rff_sigma=manifest["rff_sigma"],
                        beta=manifest["beta"])
        policy = NgfPolicy(cfg, blobs["F_g"], blobs["F_X"], blobs["F_f"],
                           blobs["F_psi"], blobs["F_beta"])
    elif manifest["arch"] == "mlp":
        cfg = MlpConfig(d=manifest["d"], z_dim=manifest["z_dim"],
                        hidden=tuple(manifest["hidden"]))
        policy = MlpPolicy(cfg, blobs["net"])
    else:
        raise ConfigError(f"unknown policy arch {manifest['arch']!r}")
    return policy, manifest["mode"]
