"""Lifted-space tracking LQR: feedforward, Riccati gains and closed-loop rollouts."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import DimensionError, DynamicsSystem, Trajectory
from .koopman import KoopmanModel

PINV_RTOL = 1e-10


@dataclass
class LqrWeights:
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "Q_T"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.max(np.abs(M - M.T), initial=0.0) > 1e-10:
                raise ValueError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None
            setattr(self, name, M)

    @classmethod
    def default(cls, l: int, m: int, q: float = 1.0, r: float = 0.1) -> "LqrWeights":
        return cls(q * np.eye(l), r * np.eye(m), q * np.eye(l))


@dataclass
class ReferencePlan:
    z_ref: np.ndarray  # (T+1, l)
    u_ref: np.ndarray  # (T, m)
    x_ref: Trajectory

    @property
    def horizon(self) -> int:
        return len(self.u_ref)


@dataclass
class GainSchedule:
    gains: np.ndarray  # (T, m, l)

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        if self.gains.ndim != 3 or not np.all(np.isfinite(self.gains)):
            raise ValueError("gains must be a finite (T, m, l) array")

    @property
    def horizon(self) -> int:
        return len(self.gains)


def pinv(M: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """SVD pseudo-inverse; singular values below ``rtol * s_max`` are dropped."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > rtol * (s[0] if s.size else 0.0)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def feedforward(model: KoopmanModel, z_ref) -> np.ndarray:
    """Least-squares controls that best reproduce each lifted reference step."""
    z_ref = np.asarray(z_ref, dtype=float)
    if z_ref.ndim != 2 or len(z_ref) < 2:
        raise ValueError("need a lifted reference with at least two states")
    resid = z_ref[1:] - z_ref[:-1] @ model.K_A.T
    return resid @ pinv(model.K_B).T


def make_plan(model: KoopmanModel, x_ref: Trajectory) -> ReferencePlan:
    z_ref = model.encode(x_ref.states)
    return ReferencePlan(z_ref, feedforward(model, z_ref), x_ref)


def riccati_gains(K_A, K_B, weights: LqrWeights, T: int) -> GainSchedule:
    """Backward Riccati recursion for the finite-horizon tracking-error LQR."""
    K_A = np.asarray(K_A, dtype=float)
    K_B = np.asarray(K_B, dtype=float)
    l, m = K_B.shape
    if T < 1:
        raise ValueError("horizon must be >= 1")
    if K_A.shape != (l, l) or weights.Q.shape != (l, l) or weights.Q_T.shape != (l, l) or weights.R.shape != (m, m):
        raise DimensionError("system matrices and LQR weights disagree in size")
    P = weights.Q_T.copy()
    gains = np.empty((T, m, l))
    for t in range(T - 1, -1, -1):
        BtP = K_B.T @ P
        G = np.linalg.solve(weights.R + BtP @ K_B, BtP @ K_A)
        P = weights.Q + K_A.T @ P @ (K_A - K_B @ G)
        P = 0.5 * (P + P.T)
        gains[t] = G
    return GainSchedule(gains)


def riccati_cost_to_go(K_A, K_B, weights: LqrWeights, T: int) -> np.ndarray:
    """P_0 from the same recursion; optimal cost from error dz0 is dz0' P_0 dz0."""
    P = weights.Q_T.copy()
    for _ in range(T):
        BtP = K_B.T @ P
        G = np.linalg.solve(weights.R + BtP @ K_B, BtP @ K_A)
        P = weights.Q + K_A.T @ P @ (K_A - K_B @ G)
        P = 0.5 * (P + P.T)
    return P


def lifted_control(u_ref_t, G_t, z_t, z_ref_t) -> np.ndarray:
    return np.asarray(u_ref_t) - (np.asarray(z_t) - z_ref_t) @ np.asarray(G_t).T


def state_control(model: KoopmanModel, u_ref_t, G_t, x_t, z_ref_t) -> np.ndarray:
    return lifted_control(u_ref_t, G_t, model.encode(x_t), z_ref_t)


def _check_plan(model: KoopmanModel, plan: ReferencePlan, gains: GainSchedule, x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != model.n:
        raise DimensionError(f"x0 must have length {model.n}")
    if gains.horizon != plan.horizon or gains.gains.shape[1:] != (model.m, model.l):
        raise DimensionError("gain schedule does not match the plan/model")
    return x0


def _latent_loop(model, plan, gains, x0):
    x0 = _check_plan(model, plan, gains, x0)
    z = model.encode(x0)
    out = np.empty(x0.shape[:-1] + (plan.horizon + 1, model.n))
    controls = np.empty(x0.shape[:-1] + (plan.horizon, model.m))
    out[..., 0, :] = x0
    for t in range(plan.horizon):
        u = lifted_control(plan.u_ref[t], gains.gains[t], z, plan.z_ref[t])
        z = model.latent_step(z, u)
        controls[..., t, :] = u
        out[..., t + 1, :] = model.decode(z)
    return out, controls


def latent_decoded_states(model: KoopmanModel, plan: ReferencePlan, gains: GainSchedule, x0) -> np.ndarray:
    """Decoded lifted closed loop for one or many initial states: (..., T+1, n).
    The first entry is x0 itself, not its reconstruction."""
    return _latent_loop(model, plan, gains, x0)[0]


def true_closed_loop(system: DynamicsSystem, model: KoopmanModel, plan: ReferencePlan,
                     gains: GainSchedule, x0):
    """Koopman controller on the true plant; returns (states, controls) batches."""
    x = _check_plan(model, plan, gains, x0)
    T = plan.horizon
    states = np.empty(x.shape[:-1] + (T + 1, system.n))
    controls = np.empty(x.shape[:-1] + (T, system.m))
    states[..., 0, :] = x
    for t in range(T):
        u = state_control(model, plan.u_ref[t], gains.gains[t], x, plan.z_ref[t])
        x = system.step(x, u)
        controls[..., t, :] = u
        states[..., t + 1, :] = x
    return states, controls


def rollout_latent_decoded(model: KoopmanModel, plan: ReferencePlan, gains: GainSchedule, x0) -> Trajectory:
    states, controls = _latent_loop(model, plan, gains, np.asarray(x0, dtype=float).reshape(-1))
    return Trajectory(states, controls, "koopman-latent")


def rollout_true_closed_loop(system: DynamicsSystem, model: KoopmanModel, plan: ReferencePlan,
                             gains: GainSchedule, x0) -> Trajectory:
    states, controls = true_closed_loop(system, model, plan, gains, np.asarray(x0, dtype=float).reshape(-1))
    return Trajectory(states, controls, system.name, system.dt)


def plan_to_dict(plan: ReferencePlan, gains: GainSchedule, model_hash: str) -> dict:
    return {
        "model_hash": model_hash,
        "z_ref": plan.z_ref.tolist(),
        "u_ref": plan.u_ref.tolist(),
        "x_ref": plan.x_ref.to_dict(),
        "gains": gains.gains.tolist(),
    }


def plan_from_dict(d) -> tuple[ReferencePlan, GainSchedule]:
    plan = ReferencePlan(np.asarray(d["z_ref"], dtype=float), np.asarray(d["u_ref"], dtype=float),
                         Trajectory.from_dict(d["x_ref"]))
    return plan, GainSchedule(np.asarray(d["gains"], dtype=float))


def save_plan(path, plan: ReferencePlan, gains: GainSchedule, model: KoopmanModel) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan, gains, model.content_hash())))


def load_plan(path, model: KoopmanModel | None = None) -> tuple[ReferencePlan, GainSchedule]:
    d = json.loads(Path(path).read_text())
    if model is not None and d.get("model_hash") != model.content_hash():
        raise ValueError(f"{path} was built for model {d.get('model_hash')}, not {model.content_hash()}")
    return plan_from_dict(d)


def plan_hash(plan: ReferencePlan, gains: GainSchedule) -> str:
    h = hashlib.sha256()
    for a in (plan.z_ref, plan.u_ref, gains.gains):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]
