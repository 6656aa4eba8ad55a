"""Variational autoencoder embedding of the material databases.

One VAE is trained per database.  The encoder compresses the normalized
attribute rows to a 2-D latent space; after training only the decoder is
kept and used as a differentiable surrogate mapping latent coordinates
to material properties.  Everything is plain numpy with hand-written
backprop so training is deterministic given a seed and the decoder
Jacobian is available in closed form.

Loss convention: mean over samples of the squared row reconstruction
error plus ``beta`` times the mean KL divergence to N(0, I).

Model file layout (all little-endian): magic ``LHTESVAE``, uint32
version, 3-byte kind, uint32 dims (d_in, n_hidden, n_latent), float64
beta, then the ten weight/bias arrays row-major float64 in the order
W1, b1, W_mu, b_mu, W_lv, b_lv, U1, c1, U2, c2, followed by the
normalization parameters (uint8 log flags, float64 lo, float64 hi).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adam import Adam
from .materials import NormalizationParams, attributes_for, denormalize

N_HIDDEN = 250
N_LATENT = 2

_MAGIC = b"LHTESVAE"
_VERSION = 1
_WEIGHT_ORDER = ("W1", "b1", "W_mu", "b_mu", "W_lv", "b_lv", "U1", "c1", "U2", "c2")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns non-finite."""


@dataclass
class DecoderModel:
    """Retained decoder: latent 2-vector -> physical property vector."""

    kind: str
    U1: np.ndarray  # (n_latent, n_hidden)
    c1: np.ndarray
    U2: np.ndarray  # (n_hidden, d)
    c2: np.ndarray
    params: NormalizationParams


@dataclass
class VaeModel:
    """Full encoder/decoder weight set plus the normalization used."""

    kind: str
    beta: float
    W1: np.ndarray  # (d, n_hidden)
    b1: np.ndarray
    W_mu: np.ndarray  # (n_hidden, n_latent)
    b_mu: np.ndarray
    W_lv: np.ndarray
    b_lv: np.ndarray
    U1: np.ndarray
    c1: np.ndarray
    U2: np.ndarray
    c2: np.ndarray
    params: NormalizationParams

    @property
    def n_attributes(self) -> int:
        return self.W1.shape[0]

    def decoder(self) -> DecoderModel:
        return DecoderModel(self.kind, self.U1, self.c1, self.U2, self.c2, self.params)


@dataclass
class LatentAtlas:
    """Encoder-mean coordinates of every database material."""

    names: list
    coords: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return len(self.names)


def _init_weights(rng: np.random.Generator, d: int) -> list:
    he = lambda fan_in: np.sqrt(2.0 / fan_in)
    return [
        rng.normal(0.0, he(d), size=(d, N_HIDDEN)),
        np.zeros(N_HIDDEN),
        rng.normal(0.0, 1.0 / np.sqrt(N_HIDDEN), size=(N_HIDDEN, N_LATENT)),
        np.zeros(N_LATENT),
        rng.normal(0.0, 1.0 / np.sqrt(N_HIDDEN), size=(N_HIDDEN, N_LATENT)),
        np.zeros(N_LATENT),
        rng.normal(0.0, he(N_LATENT), size=(N_LATENT, N_HIDDEN)),
        np.zeros(N_HIDDEN),
        rng.normal(0.0, 1.0 / np.sqrt(N_HIDDEN), size=(N_HIDDEN, d)),
        np.zeros(d),
    ]


def vae_loss_terms(X, Y, mu, logvar) -> tuple:
    """(reconstruction, kl): mean squared row error and mean KL >= 0."""
    recon = np.mean(np.sum((Y - X) ** 2, axis=1))
    kl = np.mean(-0.5 * np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar), axis=1))
    return recon, kl


def train_vae(matrix01: np.ndarray, kind: str, params: NormalizationParams,
              seed: int = 0, epochs: int = 50_000, lr: float = 2e-3,
              beta: float = 1e-7) -> tuple:
    """Train a VAE on a normalized attribute matrix.

    Full-batch gradient steps (the databases are tiny), reparameterized
    sampling during training only.  Returns the model and the per-epoch
    loss history.  Raises :class:`TrainingDivergedError` when the loss
    goes non-finite, reporting the last finite epoch.
    """
    X = np.asarray(matrix01, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training matrix must be nonempty and 2-D")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n, d = X.shape
    rng = np.random.default_rng(seed)
    weights = _init_weights(rng, d)
    opt = Adam(weights, lr=lr)
    losses = np.empty(epochs)

    for epoch in range(epochs):
        W1, b1, W_mu, b_mu, W_lv, b_lv, U1, c1, U2, c2 = weights

        pre_h = X @ W1 + b1
        h = np.maximum(pre_h, 0.0)
        mu = h @ W_mu + b_mu
        logvar = h @ W_lv + b_lv
        std = np.exp(0.5 * logvar)
        eps = rng.standard_normal((n, N_LATENT))
        z = mu + std * eps
        pre_g = z @ U1 + c1
        g = np.maximum(pre_g, 0.0)
        Y = g @ U2 + c2

        recon, kl = vae_loss_terms(X, Y, mu, logvar)
        loss = recon + beta * kl
        losses[epoch] = loss
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss non-finite at epoch {epoch}; "
                f"last finite epoch {epoch - 1} had loss {losses[epoch - 1]:.6g}"
            )

        dY = 2.0 * (Y - X) / n
        dU2 = g.T @ dY
        dc2 = dY.sum(axis=0)
        dg = dY @ U2.T
        dpre_g = dg * (pre_g > 0.0)
        dU1 = z.T @ dpre_g
        dc1 = dpre_g.sum(axis=0)
        dz = dpre_g @ U1.T
        dmu = dz + beta * mu / n
        dlogvar = dz * 0.5 * std * eps + beta * 0.5 * (np.exp(logvar) - 1.0) / n
        dW_mu = h.T @ dmu
        db_mu = dmu.sum(axis=0)
        dW_lv = h.T @ dlogvar
        db_lv = dlogvar.sum(axis=0)
        dh = dmu @ W_mu.T + dlogvar @ W_lv.T
        dpre_h = dh * (pre_h > 0.0)
        dW1 = X.T @ dpre_h
        db1 = dpre_h.sum(axis=0)

        grads = [dW1, db1, dW_mu, db_mu, dW_lv, db_lv, dU1, dc1, dU2, dc2]
        weights = opt.step(weights, grads)

    model = VaeModel(kind, beta, *weights, params=params)
    return model, losses


def encode_mean(model: VaeModel, matrix01: np.ndarray) -> np.ndarray:
    """Deterministic encoder means, no sampling noise."""
    h = np.maximum(matrix01 @ model.W1 + model.b1, 0.0)
    return h @ model.W_mu + model.b_mu


def build_atlas(model: VaeModel, matrix01: np.ndarray, names: list) -> LatentAtlas:
    coords = encode_mean(model, np.asarray(matrix01, dtype=float))
    if coords.shape[0] != len(names):
        raise ValueError("one atlas coordinate per record required")
    return LatentAtlas(list(names), coords)


def decode_normalized(decoder: DecoderModel, z) -> np.ndarray:
    """Decoder output clamped to [0, 1] (pre-denormalization)."""
    z = np.asarray(z, dtype=float)
    g = np.maximum(z @ decoder.U1 + decoder.c1, 0.0)
    return np.clip(g @ decoder.U2 + decoder.c2, 0.0, 1.0)


def decode(decoder: DecoderModel, z) -> np.ndarray:
    """Physical property vector at latent point ``z`` (all positive)."""
    return denormalize(decode_normalized(decoder, z), decoder.params)


def decode_jacobian(decoder: DecoderModel, z, normalized: bool = False) -> np.ndarray:
    """Analytic (d, 2) Jacobian of the decoded properties at ``z``.

    ReLU subgradient at exactly zero is taken as zero; clamped output
    coordinates get a zero row.  With ``normalized`` the Jacobian of the
    clamped [0, 1] outputs is returned instead of the physical one.
    """
    z = np.asarray(z, dtype=float)
    pre_g = z @ decoder.U1 + decoder.c1
    g = np.maximum(pre_g, 0.0)
    y = g @ decoder.U2 + decoder.c2
    inner = decoder.U2.T * (pre_g > 0.0)  # (d, n_hidden)
    jac = inner @ decoder.U1.T  # (d, 2)
    jac = jac * ((y > 0.0) & (y < 1.0))[:, None]
    if normalized:
        return jac
    x = denormalize(y, decoder.params)
    scale = x * (decoder.params.hi - decoder.params.lo)
    return jac * scale[:, None]


def _write_array(fh, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_model(model: VaeModel, path):
    d = model.n_attributes
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(model.kind.encode("ascii"))
        fh.write(struct.pack("<III", d, N_HIDDEN, N_LATENT))
        fh.write(struct.pack("<d", model.beta))
        for name in _WEIGHT_ORDER:
            _write_array(fh, getattr(model, name))
        fh.write(np.array(model.params.log_applied, dtype="<u1").tobytes())
        _write_array(fh, model.params.lo)
        _write_array(fh, model.params.hi)


def load_model(path) -> VaeModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    kind = raw[off:off + 3].decode("ascii")
    off += 3
    d, n_hidden, n_latent = struct.unpack_from("<III", raw, off)
    off += 12
    if (n_hidden, n_latent) != (N_HIDDEN, N_LATENT):
        raise ValueError(f"{path}: unexpected layer dimensions {(n_hidden, n_latent)}")
    (beta,) = struct.unpack_from("<d", raw, off)
    off += 8

    shapes = {
        "W1": (d, N_HIDDEN), "b1": (N_HIDDEN,),
        "W_mu": (N_HIDDEN, N_LATENT), "b_mu": (N_LATENT,),
        "W_lv": (N_HIDDEN, N_LATENT), "b_lv": (N_LATENT,),
        "U1": (N_LATENT, N_HIDDEN), "c1": (N_HIDDEN,),
        "U2": (N_HIDDEN, d), "c2": (d,),
    }
    arrays = {}
    for name in _WEIGHT_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += count * 8
    log_flags = tuple(bool(b) for b in raw[off:off + d])
    off += d
    lo = np.frombuffer(raw, dtype="<f8", count=d, offset=off).copy()
    off += d * 8
    hi = np.frombuffer(raw, dtype="<f8", count=d, offset=off).copy()
    params = NormalizationParams(
        attributes=attributes_for(kind), log_applied=log_flags, lo=lo, hi=hi
    )
    return VaeModel(kind, beta, **arrays, params=params)


def save_atlas(atlas: LatentAtlas, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,z1,z2\n")
        for name, (z1, z2) in zip(atlas.names, atlas.coords):
            fh.write(f"{name},{float(z1)!r},{float(z2)!r}\n")


def load_atlas(path) -> LatentAtlas:
    names, coords = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "name,z1,z2":
            raise ValueError(f"{path}: not an atlas file")
        for line in fh:
            if not line.strip():
                continue
            name, z1, z2 = line.rstrip("\n").rsplit(",", 2)
            names.append(name)
            coords.append((float(z1), float(z2)))
    return LatentAtlas(names, np.array(coords))
