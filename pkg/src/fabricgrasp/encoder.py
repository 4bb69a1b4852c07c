"""Point-set autoencoder: permutation-invariant encoder, Chamfer training.

The encoder runs a shared per-point feature net over the set, max-pools
feature-wise, and maps the pooled vector to a latent code. The decoder
expands a latent back to a fixed-size point set. Training minimizes
symmetric mean-of-squared Chamfer distance plus an L2 latent penalty;
afterwards the encoder weights are frozen and only the encoder is used
downstream.

Point sets live in the fixed world frame. Corpora are stored in the NGFP
container (see save_point_corpus).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    EncodingMode,
    FormatError,
    InvalidArgumentError,
    ObjectEncoding,
    TrainingAbortError,
    stream,
)
from .diffnet import (
    Activation,
    DiffNet,
    GradBundle,
    SgdMomentum,
    net_from_bytes,
    net_to_bytes,
    param_grad_batch,
)

LATENT_DIM = 16
LATENT_PENALTY = 1e-3
DECODER_POINTS = 64

_NGFP_MAGIC = b"NGFP"
_NGFP_VERSION = 1


def _check_points(P, name: str) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 2 or P.shape[0] < 1:
        raise InvalidArgumentError(f"{name} must be a nonempty n x 2 array")
    if not np.all(np.isfinite(P)):
        raise InvalidArgumentError(f"{name} contains non-finite points")
    return P


def chamfer(A, B) -> float:
    """Symmetric Chamfer distance, mean of squared nearest distances."""
    A = _check_points(A, "A")
    B = _check_points(B, "B")
    d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    return float(np.mean(np.min(d2, axis=1)) + np.mean(np.min(d2, axis=0)))


def _chamfer_value_grad_a(A: np.ndarray, B: np.ndarray):
    """Chamfer value and its gradient in the first argument.

    Nearest-neighbor ties resolve to the lowest index (argmin convention),
    which fixes the subgradient choice.
    """
    d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    jb = np.argmin(d2, axis=1)
    ia = np.argmin(d2, axis=0)
    na, nb = A.shape[0], B.shape[0]
    value = float(np.mean(d2[np.arange(na), jb]) + np.mean(d2[ia, np.arange(nb)]))
    gA = (2.0 / na) * (A - B[jb])
    np.add.at(gA, ia, (2.0 / nb) * (A[ia] - B))
    return value, gA


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = LATENT_DIM
    feature_dim: int = 64
    phi_hidden: tuple = (64,)
    rho_hidden: tuple = (64,)
    decoder_hidden: tuple = (64, 128)
    decoder_points: int = DECODER_POINTS

    def __post_init__(self):
        if self.latent_dim < 1 or self.feature_dim < 1 or self.decoder_points < 1:
            raise InvalidArgumentError("bad encoder dimensions")


class SetEncoder:
    """Shared per-point net, feature-wise max-pool, post-pool net to z."""

    def __init__(self, cfg: EncoderConfig, phi: DiffNet, rho: DiffNet,
                 frozen: bool = False):
        self.cfg = cfg
        self.phi = phi
        self.rho = rho
        self.frozen = frozen
        if frozen:
            self._lock()

    @staticmethod
    def create(cfg: EncoderConfig, seed: int) -> "SetEncoder":
        phi = DiffNet.create([2, *cfg.phi_hidden, cfg.feature_dim],
                             stream(seed, "encoder", 0),
                             hidden_activation=Activation.ELU)
        rho = DiffNet.create([cfg.feature_dim, *cfg.rho_hidden, cfg.latent_dim],
                             stream(seed, "encoder", 1),
                             hidden_activation=Activation.ELU)
        return SetEncoder(cfg, phi, rho)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def _lock(self):
        for net in (self.phi, self.rho):
            for arr in (*net.weights, *net.biases):
                arr.setflags(write=False)

    def freeze(self) -> None:
        self.frozen = True
        self._lock()

    def _pool(self, points: np.ndarray):
        feats = self.phi.forward_batch(points)
        idx = np.argmax(feats, axis=0)
        return feats, idx, feats[idx, np.arange(feats.shape[1])]

    def latent(self, points) -> np.ndarray:
        points = _check_points(points, "points")
        _, _, pooled = self._pool(points)
        return self.rho.forward(pooled)


class SetDecoder:
    """Latent to a fixed-size planar point set."""

    def __init__(self, cfg: EncoderConfig, net: DiffNet):
        self.cfg = cfg
        self.net = net

    @staticmethod
    def create(cfg: EncoderConfig, seed: int) -> "SetDecoder":
        net = DiffNet.create(
            [cfg.latent_dim, *cfg.decoder_hidden, 2 * cfg.decoder_points],
            stream(seed, "encoder", 2), hidden_activation=Activation.ELU)
        return SetDecoder(cfg, net)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.net.forward(np.asarray(z, dtype=np.float64)).reshape(-1, 2)


def encode(enc: SetEncoder, points) -> ObjectEncoding:
    """Permutation-invariant latent code for a world-frame point set."""
    return ObjectEncoding(EncodingMode.PCD, enc.latent(points))


@dataclass(frozen=True)
class AutoencoderTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    latent_penalty: float = LATENT_PENALTY
    val_fraction: float = 0.1
    seed: int = 0


def _sample_loss_grads(enc: SetEncoder, dec: SetDecoder, points: np.ndarray,
                       lam: float, scale: float, grads):
    """Accumulate scaled loss gradients for one set into grads (phi, rho, dec)."""
    feats, idx, pooled = enc._pool(points)
    z = enc.rho.forward(pooled)
    flat = dec.net.forward(z)
    Y = flat.reshape(-1, 2)
    rec, gY = _chamfer_value_grad_a(Y, points)
    loss = rec + lam * float(z @ z)

    g_dec = param_grad_batch(dec.net, z[None], gY.reshape(1, -1),
                             want_input=True)
    z_bar = g_dec.input_grad[0] + 2.0 * lam * z
    g_rho = param_grad_batch(enc.rho, pooled[None], z_bar[None],
                             want_input=True)
    feats_bar = np.zeros_like(feats)
    feats_bar[idx, np.arange(feats.shape[1])] = g_rho.input_grad[0]
    g_phi = param_grad_batch(enc.phi, points, feats_bar)

    grads[0].add_scaled(g_phi, scale)
    grads[1].add_scaled(g_rho, scale)
    grads[2].add_scaled(g_dec, scale)
    return loss


def reconstruction_chamfer(enc: SetEncoder, dec: SetDecoder, sets) -> float:
    vals = [chamfer(dec.decode(enc.latent(P)), P) for P in sets]
    return float(np.mean(vals))


def train_autoencoder(corpus, cfg: AutoencoderTrainConfig = AutoencoderTrainConfig(),
                      enc: SetEncoder | None = None,
                      dec: SetDecoder | None = None,
                      enc_cfg: EncoderConfig | None = None):
    """Train on a list of point sets; returns (frozen encoder, decoder, report).

    The validation split tracks reconstruction Chamfer; the best-validation
    parameters are restored before freezing. Non-finite losses abort.
    """
    sets = [_check_points(P, f"corpus[{i}]") for i, P in enumerate(corpus)]
    if not sets:
        raise InvalidArgumentError("corpus is empty")
    ecfg = enc_cfg or EncoderConfig()
    if enc is None:
        enc = SetEncoder.create(ecfg, cfg.seed)
    if dec is None:
        dec = SetDecoder.create(enc.cfg, cfg.seed)
    if enc.frozen:
        raise InvalidArgumentError("encoder is frozen")

    rng = stream(cfg.seed, "encoder", 3)
    n_val = max(1, int(round(cfg.val_fraction * len(sets)))) \
        if len(sets) > 1 else 0
    order = rng.permutation(len(sets))
    val = [sets[i] for i in order[:n_val]]
    train = [sets[i] for i in order[n_val:]] or sets

    opt = SgdMomentum([enc.phi, enc.rho, dec.net], lr=cfg.learning_rate,
                      momentum=cfg.momentum)
    nets = [enc.phi, enc.rho, dec.net]
    best = (np.inf, None)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            grads = [GradBundle.zeros_like(net) for net in nets]
            scale = 1.0 / len(batch)
            total = 0.0
            for k in batch:
                total += _sample_loss_grads(enc, dec, train[k],
                                            cfg.latent_penalty, scale, grads)
            batch_loss = total / len(batch)
            if not np.isfinite(batch_loss):
                raise TrainingAbortError("non-finite autoencoder loss",
                                         {"epoch": epoch, "loss": batch_loss})
            opt.step(grads)
            epoch_loss += total
        epoch_loss /= len(train)
        val_chamfer = reconstruction_chamfer(enc, dec, val) if val \
            else epoch_loss
        history.append({"epoch": epoch, "train_loss": epoch_loss,
                        "val_chamfer": val_chamfer})
        if val_chamfer < best[0]:
            best = (val_chamfer, _snapshot(nets))
    if best[1] is not None:
        _restore(nets, best[1])
    _standardize_latents(enc, dec, train)
    enc.freeze()
    report = {"epochs": cfg.epochs, "train_sets": len(train),
              "val_sets": len(val), "best_val_chamfer": float(best[0]),
              "history": history}
    return enc, dec, report


def _standardize_latents(enc: SetEncoder, dec: SetDecoder, sets,
                         floor: float = 1e-6) -> None:
    """Fold a per-dimension latent whitening into the trained weights.

    The latent-L2 penalty leaves codes clustered near the origin with
    per-dimension spreads far below the other policy-input coordinates;
    downstream consumers then barely see the object identity. Absorbing
    (z - mu) / s into rho's output layer and its inverse into the decoder's
    input layer rescales the interface without changing either architecture
    or the reconstruction map.
    """
    Z = np.array([enc.latent(P) for P in sets])
    mu = Z.mean(axis=0)
    s = np.maximum(Z.std(axis=0), floor)
    W, b = enc.rho.weights[-1], enc.rho.biases[-1]
    W /= s[:, None]
    b[:] = (b - mu) / s
    W1, b1 = dec.net.weights[0], dec.net.biases[0]
    b1 += W1 @ mu
    W1 *= s[None, :]


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


# ---------------------------------------------------------------------------
# NGFP point-set corpus container
# ---------------------------------------------------------------------------

def save_point_corpus(path, entries) -> None:
    """Write [(points n x 2, shape_id, pose (x, y, theta)), ...] as NGFP."""
    chunks = [_NGFP_MAGIC, struct.pack("<I", _NGFP_VERSION),
              struct.pack("<Q", len(entries))]
    for points, shape_id, pose in entries:
        P = _check_points(points, "points")
        if len(pose) != 3:
            raise InvalidArgumentError("pose must be (x, y, theta)")
        chunks.append(struct.pack("<I", P.shape[0]))
        chunks.append(np.ascontiguousarray(P, dtype="<f8").tobytes())
        chunks.append(struct.pack("<I", int(shape_id)))
        chunks.append(struct.pack("<3d", *[float(v) for v in pose]))
    Path(path).write_bytes(b"".join(chunks))


def load_point_corpus(path):
    """Read an NGFP file back to [(points, shape_id, pose), ...]."""
    blob = Path(path).read_bytes()
    if blob[:4] != _NGFP_MAGIC:
        raise FormatError("bad NGFP magic", offset=0)
    if len(blob) < 16:
        raise FormatError("truncated NGFP header", offset=len(blob))
    version, = struct.unpack_from("<I", blob, 4)
    if version != _NGFP_VERSION:
        raise FormatError(f"unsupported NGFP version {version}", offset=4)
    count, = struct.unpack_from("<Q", blob, 8)
    off = 16
    entries = []
    for _ in range(count):
        if off + 4 > len(blob):
            raise FormatError("truncated set header", offset=off)
        n, = struct.unpack_from("<I", blob, off)
        off += 4
        need = 16 * n + 4 + 24
        if off + need > len(blob):
            raise FormatError("truncated set payload", offset=off)
        points = np.frombuffer(blob, dtype="<f8", count=2 * n,
                               offset=off).reshape(n, 2).copy()
        off += 16 * n
        shape_id, = struct.unpack_from("<I", blob, off)
        off += 4
        pose = struct.unpack_from("<3d", blob, off)
        off += 24
        entries.append((points, int(shape_id), pose))
    if off != len(blob):
        raise FormatError("trailing bytes after last set", offset=off)
    return entries


# ---------------------------------------------------------------------------
# Encoder/decoder serialization
# ---------------------------------------------------------------------------

ENCODER_FORMAT = "fabricgrasp-encoder"
ENCODER_VERSION = 1


def save_encoder(enc: SetEncoder, dec: SetDecoder, path) -> None:
    import base64
    import json
    manifest = {
        "format": ENCODER_FORMAT,
        "version": ENCODER_VERSION,
        "latent_dim": enc.cfg.latent_dim,
        "feature_dim": enc.cfg.feature_dim,
        "phi_hidden": list(enc.cfg.phi_hidden),
        "rho_hidden": list(enc.cfg.rho_hidden),
        "decoder_hidden": list(enc.cfg.decoder_hidden),
        "decoder_points": enc.cfg.decoder_points,
        "frozen": enc.frozen,
        "nets": {name: base64.b64encode(net_to_bytes(net)).decode("ascii")
                 for name, net in
                 [("phi", enc.phi), ("rho", enc.rho), ("decoder", dec.net)]},
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_encoder(path):
    """Returns (SetEncoder, SetDecoder)."""
    import base64
    import json

    from .core import ConfigError
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable encoder manifest {path}: {exc}") from None
    if manifest.get("format") != ENCODER_FORMAT:
        raise ConfigError(f"{path} is not an encoder manifest")
    if manifest.get("version") != ENCODER_VERSION:
        raise ConfigError(
            f"unsupported encoder version {manifest.get('version')}")
    cfg = EncoderConfig(latent_dim=manifest["latent_dim"],
                        feature_dim=manifest["feature_dim"],
                        phi_hidden=tuple(manifest["phi_hidden"]),
                        rho_hidden=tuple(manifest["rho_hidden"]),
                        decoder_hidden=tuple(manifest["decoder_hidden"]),
                        decoder_points=manifest["decoder_points"])
    blobs = {name: net_from_bytes(base64.b64decode(b64))
             for name, b64 in manifest["nets"].items()}
    enc = SetEncoder(cfg, blobs["phi"], blobs["rho"],
                     frozen=bool(manifest["frozen"]))
    return enc, SetDecoder(cfg, blobs["decoder"])
