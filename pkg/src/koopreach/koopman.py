"""Autoencoder Koopman model: MLP lift/unlift plus lifted linear dynamics.

Training uses hand-written reverse-mode gradients of the composite
reconstruction + multi-step prediction loss. All losses are evaluated on
standardised states ``(x - mean) / scale``; the standardisation is stored in the
model and folded into the first/last layers when an exact network is needed
(see :meth:`KoopmanModel.encoder_network`).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .dynamics import DimensionError, Trajectory

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "gelu")
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TrainingDiverged(FloatingPointError):
    pass


def _act(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(h, 0.0)
    return 0.5 * h * (1.0 + erf(h / _SQRT2))


def _act_grad(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (h > 0).astype(h.dtype)
    return 0.5 * (1.0 + erf(h / _SQRT2)) + h * _INV_SQRT2PI * np.exp(-0.5 * h * h)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


@dataclass
class MlpNetwork:
    """Fully connected net; ``weights[k]`` has shape (out, in). The activation
    is applied after every layer except the last."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(f"layer {k} input does not chain with layer {k - 1} output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")

    @classmethod
    def init(cls, sizes: Sequence[int], activation: str = "relu", rng=None) -> "MlpNetwork":
        rng = np.random.default_rng(rng)
        ws = [xavier_uniform(rng, o, i) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(o) for o in sizes[1:]]
        return cls(ws, bs, activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"network expects input length {self.input_dim}, got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if k < last:
                h = _act(self.activation, h)
        return h

    def forward_cache(self, x: np.ndarray):
        """Forward pass on a (B, in) batch keeping what backward needs."""
        inputs, pre = [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w.T + b
            if k < last:
                pre.append(h)
                h = _act(self.activation, h)
        return h, (inputs, pre)

    def backward(self, cache, dy: np.ndarray):
        """Returns (d input, [dW_k], [db_k]) for upstream gradient ``dy``."""
        inputs, pre = cache
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.weights)
        g = dy
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                g = g * _act_grad(self.activation, pre[k])
            dws[k] = g.T @ inputs[k]
            dbs[k] = g.sum(axis=0)
            g = g @ self.weights[k]
        return g, dws, dbs

    def copy(self) -> "MlpNetwork":
        return MlpNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> "MlpNetwork":
        return cls([np.asarray(w, dtype=float) for w in d["weights"]], d["biases"], d["activation"])


def identity_network(dim: int) -> MlpNetwork:
    return MlpNetwork([np.eye(dim)], [np.zeros(dim)])


@dataclass
class KoopmanModel:
    encoder: MlpNetwork
    decoder: MlpNetwork
    K_A: np.ndarray
    K_B: np.ndarray
    state_mean: np.ndarray | None = None
    state_scale: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.K_A = np.asarray(self.K_A, dtype=float)
        self.K_B = np.asarray(self.K_B, dtype=float)
        n, l = self.encoder.input_dim, self.encoder.output_dim
        if self.state_mean is None:
            self.state_mean = np.zeros(n)
        if self.state_scale is None:
            self.state_scale = np.ones(n)
        self.state_mean = np.asarray(self.state_mean, dtype=float).reshape(-1)
        self.state_scale = np.asarray(self.state_scale, dtype=float).reshape(-1)
        if self.decoder.input_dim != l or self.decoder.output_dim != n:
            raise DimensionError("decoder must map the latent dimension back to the state dimension")
        if self.K_A.shape != (l, l) or self.K_B.ndim != 2 or self.K_B.shape[0] != l:
            raise DimensionError(f"K_A must be {l}x{l} and K_B {l}xm; got {self.K_A.shape}, {self.K_B.shape}")
        if l < n:
            raise DimensionError(f"latent dimension {l} smaller than state dimension {n}")
        if self.state_mean.shape != (n,) or self.state_scale.shape != (n,) or np.any(self.state_scale <= 0):
            raise DimensionError("normalisation constants must be length n with positive scales")

    @property
    def n(self) -> int:
        return self.encoder.input_dim

    @property
    def l(self) -> int:
        return self.encoder.output_dim

    @property
    def m(self) -> int:
        return self.K_B.shape[1]

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.state_mean) / self.state_scale

    def denormalize(self, xn) -> np.ndarray:
        return np.asarray(xn, dtype=float) * self.state_scale + self.state_mean

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionError(f"expected state of length {self.n}, got {x.shape}")
        return self.encoder(self.normalize(x))

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.l:
            raise DimensionError(f"expected latent of length {self.l}, got {z.shape}")
        return self.denormalize(self.decoder(z))

    def latent_step(self, z, u) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.shape[-1] != self.l or u.shape[-1] != self.m:
            raise DimensionError(f"latent_step expects z[{self.l}], u[{self.m}]; got {z.shape}, {u.shape}")
        return z @ self.K_A.T + u @ self.K_B.T

    def encoder_network(self) -> MlpNetwork:
        """Encoder with the input standardisation folded into layer 0 (exact)."""
        net = self.encoder.copy()
        w0 = net.weights[0] / self.state_scale
        net.biases[0] = net.biases[0] - w0 @ self.state_mean
        net.weights[0] = w0
        return net

    def decoder_network(self) -> MlpNetwork:
        """Decoder with the output de-standardisation folded into the last layer."""
        net = self.decoder.copy()
        net.weights[-1] = net.weights[-1] * self.state_scale[:, None]
        net.biases[-1] = net.biases[-1] * self.state_scale + self.state_mean
        return net

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(self.encoder.copy(), self.decoder.copy(), self.K_A.copy(), self.K_B.copy(),
                            self.state_mean.copy(), self.state_scale.copy(), dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "l": self.l,
            "activation": self.encoder.activation,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "K_A": self.K_A.tolist(),
            "K_B": self.K_B.tolist(),
            "state_mean": self.state_mean.tolist(),
            "state_scale": self.state_scale.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "KoopmanModel":
        return cls(MlpNetwork.from_dict(d["encoder"]), MlpNetwork.from_dict(d["decoder"]),
                   np.asarray(d["K_A"], dtype=float), np.asarray(d["K_B"], dtype=float),
                   d.get("state_mean"), d.get("state_scale"), d.get("metadata", {}))

    def content_hash(self) -> str:
        d = self.to_dict()
        d.pop("metadata")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def identity_model(K_A, K_B) -> KoopmanModel:
    """phi = psi = identity; an exact Koopman model of ``x+ = K_A x + K_B u``."""
    K_A = np.asarray(K_A, dtype=float)
    n = K_A.shape[0]
    return KoopmanModel(identity_network(n), identity_network(n), K_A, K_B)


# ---------------------------------------------------------------------------
# losses and gradients


@dataclass
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    horizon: int = 10
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    latent_dim: int = 10
    hidden: tuple = (128, 128, 128)
    activation: str = "relu"
    grad_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ValueError("loss weights must be nonnegative with a positive sum")
        if self.horizon < 1:
            raise ValueError("horizon H must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Gradients:
    encoder_w: list
    encoder_b: list
    decoder_w: list
    decoder_b: list
    K_A: np.ndarray
    K_B: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [*self.encoder_w, *self.encoder_b, *self.decoder_w, *self.decoder_b, self.K_A, self.K_B]


def model_tensors(model: KoopmanModel) -> list[np.ndarray]:
    """Parameter arrays in the same order as :meth:`Gradients.tensors`."""
    e, d = model.encoder, model.decoder
    return [*e.weights, *e.biases, *d.weights, *d.biases, model.K_A, model.K_B]


def _as_batch(model: KoopmanModel, batch):
    if isinstance(batch, Trajectory):
        batch = [batch]
    X = np.stack([model.normalize(tr.states) for tr in batch])
    U = np.stack([tr.controls for tr in batch])
    if X.shape[-1] != model.n or U.shape[-1] != model.m:
        raise DimensionError("trajectory dimensions do not match the model")
    return X, U


def _composite(model: KoopmanModel, X: np.ndarray, U: np.ndarray, lam1: float, lam2: float,
               H: int, want_grad: bool = True):
    """Composite loss over a normalised batch X (B, T+1, n), U (B, T, m).

    Returns ``(L1, L2, grads)``; grads are for ``lam1*L1 + lam2*L2``.
    """
    enc, dec = model.encoder, model.decoder
    B, T1, n = X.shape
    T = T1 - 1
    l = model.l
    if lam2 and H > T:
        raise ValueError(f"multi-step horizon H={H} exceeds trajectory length T={T}")
    Xf = X.reshape(-1, n)
    Z, c_enc = enc.forward_cache(Xf)
    dZ = np.zeros_like(Z)
    g_enc = [np.zeros_like(w) for w in enc.weights], [np.zeros_like(b) for b in enc.biases]
    g_dec = [np.zeros_like(w) for w in dec.weights], [np.zeros_like(b) for b in dec.biases]
    dKA = np.zeros_like(model.K_A)
    dKB = np.zeros_like(model.K_B)

    def _acc(store, dws, dbs):
        for acc, g in zip(store[0], dws):
            acc += g
        for acc, g in zip(store[1], dbs):
            acc += g

    L1 = L2 = 0.0
    if lam1:
        Xh, c_dec = dec.forward_cache(Z)
        Z2, c_enc2 = enc.forward_cache(Xh)
        r_x = Xf - Xh
        r_z = Z - Z2
        L1 = float(np.sum(r_x * r_x) + np.sum(r_z * r_z))
        if want_grad:
            dZ += 2.0 * lam1 * r_z
            dXh_e, dws, dbs = enc.backward(c_enc2, -2.0 * lam1 * r_z)
            _acc(g_enc, dws, dbs)
            dZd, dws, dbs = dec.backward(c_dec, -2.0 * lam1 * r_x + dXh_e)
            _acc(g_dec, dws, dbs)
            dZ += dZd

    if lam2:
        S = T - H + 1
        Zr = Z.reshape(B, T1, l)
        zc = Zr[:, :S, :]
        prev, preds = [], []
        for j in range(1, H + 1):
            prev.append(zc)
            zc = zc @ model.K_A.T + U[:, j - 1:j - 1 + S, :] @ model.K_B.T
            preds.append(zc)
        P = np.stack(preds)  # (H, B, S, l)
        x_tgt = np.stack([X[:, j:j + S, :] for j in range(1, H + 1)])
        z_tgt = np.stack([Zr[:, j:j + S, :] for j in range(1, H + 1)])
        Xp, c_dec2 = dec.forward_cache(P.reshape(-1, l))
        r_x = x_tgt.reshape(-1, n) - Xp
        r_z = z_tgt - P
        L2 = float(np.sum(r_x * r_x) + np.sum(r_z * r_z))
        if want_grad:
            dP, dws, dbs = dec.backward(c_dec2, -2.0 * lam2 * r_x)
            _acc(g_dec, dws, dbs)
            dP = dP.reshape(P.shape) - 2.0 * lam2 * r_z
            dZr = np.zeros((B, T1, l))
            for j in range(1, H + 1):
                dZr[:, j:j + S, :] += 2.0 * lam2 * r_z[j - 1]
            g = np.zeros((B, S, l))
            for j in range(H, 0, -1):
                g = g + dP[j - 1]
                gf = g.reshape(-1, l)
                dKA += gf.T @ prev[j - 1].reshape(-1, l)
                dKB += gf.T @ U[:, j - 1:j - 1 + S, :].reshape(-1, model.m)
                g = g @ model.K_A
            dZr[:, :S, :] += g
            dZ += dZr.reshape(-1, l)

    grads = None
    if want_grad:
        _, dws, dbs = enc.backward(c_enc, dZ)
        _acc(g_enc, dws, dbs)
        grads = Gradients(g_enc[0], g_enc[1], g_dec[0], g_dec[1], dKA, dKB)
    return L1, L2, grads


def loss_autoencoder(model: KoopmanModel, trajectory: Trajectory) -> float:
    """Reconstruction plus latent-consistency error summed over every state."""
    X, U = _as_batch(model, trajectory)
    return _composite(model, X, U, 1.0, 0.0, 1, want_grad=False)[0]


def loss_multistep(model: KoopmanModel, trajectory: Trajectory, H: int) -> float:
    """H-step open-loop latent prediction error, summed over all window starts."""
    if H < 1 or H > trajectory.horizon:
        raise ValueError(f"need 1 <= H <= T; got H={H}, T={trajectory.horizon}")
    X, U = _as_batch(model, trajectory)
    return _composite(model, X, U, 0.0, 1.0, H, want_grad=False)[1]


def composite_loss(model: KoopmanModel, batch, config: TrainingConfig) -> float:
    X, U = _as_batch(model, batch)
    L1, L2, _ = _composite(model, X, U, config.lambda1, config.lambda2, config.horizon, want_grad=False)
    return config.lambda1 * L1 + config.lambda2 * L2


def gradients(model: KoopmanModel, batch, config: TrainingConfig) -> Gradients:
    """Exact gradient of ``lambda1*L1 + lambda2*L2`` summed over ``batch``."""
    X, U = _as_batch(model, batch)
    if len(X) == 0:
        raise ValueError("empty batch")
    return _composite(model, X, U, config.lambda1, config.lambda2, config.horizon)[2]


# ---------------------------------------------------------------------------
# training


def init_model(n: int, m: int, config: TrainingConfig, rng=None) -> KoopmanModel:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    l = config.latent_dim
    enc = MlpNetwork.init([n, *config.hidden, l], config.activation, rng)
    dec = MlpNetwork.init([l, *config.hidden, n], config.activation, rng)
    return KoopmanModel(enc, dec, np.eye(l), xavier_uniform(rng, l, m))


def dataset_arrays(dataset: Sequence[Trajectory]):
    if not dataset:
        raise ValueError("training dataset is empty")
    X = np.stack([tr.states for tr in dataset])
    U = np.stack([tr.controls for tr in dataset])
    return X, U


def train(dataset: Sequence[Trajectory], config: TrainingConfig, model: KoopmanModel | None = None) -> KoopmanModel:
    """Mini-batch SGD with momentum, cosine-annealed learning rate and weight decay.

    The full-dataset loss is recorded after every epoch and the parameters with the
    lowest recorded loss (the initial ones included) are returned, so the final loss
    never exceeds the initial one.
    """
    X_raw, U = dataset_arrays(dataset)
    N, T1, n = X_raw.shape
    m = U.shape[-1]
    if config.lambda2 and config.horizon > T1 - 1:
        raise ValueError(f"horizon H={config.horizon} exceeds trajectory length T={T1 - 1}")
    rng = np.random.default_rng(config.seed)
    # Controls are only rescaled (no shift) so the model stays linear in u: K_B is
    # learned against u / u_scale and mapped back to raw units before returning.
    u_scale = np.sqrt(np.mean(U.reshape(-1, m) ** 2, axis=0))
    u_scale = np.where(u_scale > 1e-12, u_scale, 1.0)
    if model is None:
        model = init_model(n, m, config, rng)
        flat = X_raw.reshape(-1, n)
        scale = flat.std(axis=0)
        model.state_mean = flat.mean(axis=0)
        model.state_scale = np.where(scale > 1e-8, scale, 1.0)
    else:
        model = model.copy()
        model.K_B = model.K_B * u_scale
    X = model.normalize(X_raw)
    U = U / u_scale

    def full_loss():
        L1, L2, _ = _composite(model, X, U, config.lambda1, config.lambda2, config.horizon, want_grad=False)
        return config.lambda1 * L1 + config.lambda2 * L2

    params = model_tensors(model)
    velocity = [np.zeros_like(p) for p in params]
    history = [full_loss()]
    best = (history[0], [p.copy() for p in params])
    steps_per_epoch = math.ceil(N / config.batch_size)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, _, g = _composite(model, X[idx], U[idx], config.lambda1, config.lambda2, config.horizon)
            grads = g.tensors()
            denom = len(idx) * T1
            norm = math.sqrt(sum(float(np.sum(gr * gr)) for gr in grads)) / denom
            if not math.isfinite(norm):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}")
            clip = min(1.0, config.grad_clip / norm) if config.grad_clip and norm > 0 else 1.0
            lr = 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))
            for p, v, gr in zip(params, velocity, grads):
                v *= config.momentum
                v += gr * (clip / denom) + config.weight_decay * p
                p -= lr * v
            step += 1
        loss = full_loss()
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at epoch {epoch}; last finite loss {history[-1]:.4g}")
        history.append(loss)
        if loss < best[0]:
            best = (loss, [p.copy() for p in params])
        log.debug("epoch %d loss %.6g", epoch, loss)

    for p, saved in zip(params, best[1]):
        p[...] = saved
    model.K_B = model.K_B / u_scale
    model.metadata = {
        "seed": config.seed,
        "config": config.to_dict(),
        "loss_history": history,
        "initial_loss": history[0],
        "final_loss": best[0],
        "num_trajectories": N,
        "control_scale": u_scale.tolist(),
    }
    return model


def multistep_rmse(model: KoopmanModel, dataset: Sequence[Trajectory], H: int) -> float:
    """RMSE (raw state units) of H-step open-loop decoded predictions over all windows."""
    X, U = dataset_arrays(dataset)
    T = U.shape[1]
    S = T - H + 1
    z = model.encode(X[:, :S, :])
    err = 0.0
    for j in range(1, H + 1):
        z = model.latent_step(z, U[:, j - 1:j - 1 + S, :])
        err += float(np.sum((model.decode(z) - X[:, j:j + S, :]) ** 2))
    return math.sqrt(err / (X.shape[0] * S * H * X.shape[-1]))
