"""Benchmark plants, forward-Euler integration and the reference generator.

Every step function is vectorised over leading axes: ``x`` may be a single
state of shape ``(n,)`` or a batch ``(..., n)``; ``u`` broadcasts the same way.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

GIMBAL_TOL = 1e-6

UNICYCLE_DT = 0.1
PLANAR_QUAD_DT = 0.05
QUAD3D_DT = 0.025

PLANAR_QUAD_PARAMS = {"m": 0.5, "g": -9.81, "I_y": 0.01}
QUAD3D_PARAMS = {"m": 1.0, "g": -9.81, "I_x": 0.5, "I_y": 0.1, "I_z": 0.3}


class GimbalLock(ArithmeticError):
    """Euler-angle rates are singular because |cos(pitch)| is ~0."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned interval ``{a : lower <= a <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionError(f"box bounds differ in length: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def ball(cls, center, radius) -> "Box":
        """Infinity-norm ball of (per-dimension) ``radius`` around ``center``."""
        c = np.asarray(center, dtype=float)
        r = np.broadcast_to(np.asarray(radius, dtype=float), c.shape)
        return cls(c - r, c + r)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, points, atol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower - atol) & (p <= self.upper + atol), axis=-1)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)

    def shrink(self, factor: float) -> "Box":
        """Scale the box about its centre; ``factor=0.5`` halves every width."""
        c, h = self.center, 0.5 * factor * self.widths
        return Box(c - h, c + h)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Box":
        return cls(np.asarray(d["lower"], dtype=float), np.asarray(d["upper"], dtype=float))


def _check_dims(x, u, n: int, m: int):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1:] != (n,):
        raise DimensionError(f"expected state of length {n}, got shape {x.shape}")
    if u.shape[-1:] != (m,):
        raise DimensionError(f"expected control of length {m}, got shape {u.shape}")
    return x, u


def step_unicycle(x, u, dt: float = UNICYCLE_DT) -> np.ndarray:
    """One Euler step of the kinematic unicycle; state is (px, py, heading)."""
    x, u = _check_dims(x, u, 3, 2)
    speed, turn = u[..., 0], u[..., 1]
    heading = x[..., 2]
    xdot = np.stack([speed * np.cos(heading), speed * np.sin(heading), turn], axis=-1)
    return x + dt * xdot


def planar_quad_rhs(x, u, params: Mapping[str, float] = PLANAR_QUAD_PARAMS) -> np.ndarray:
    m, g, iy = params["m"], params["g"], params["I_y"]
    theta = x[..., 2]
    thrust, torque = u[..., 0], u[..., 1]
    return np.stack(
        [
            x[..., 3],
            x[..., 4],
            x[..., 5],
            -thrust / m * np.sin(theta),
            g + thrust / m * np.cos(theta),
            torque / iy * np.ones_like(theta),
        ],
        axis=-1,
    )


def step_planar_quad(x, u, dt: float = PLANAR_QUAD_DT, params: Mapping[str, float] = PLANAR_QUAD_PARAMS) -> np.ndarray:
    """State (px, pz, pitch, vx, vz, pitch_rate); control (thrust, torque)."""
    x, u = _check_dims(x, u, 6, 2)
    return x + dt * planar_quad_rhs(x, u, params)


def quad3d_rhs(x, u, params: Mapping[str, float] = QUAD3D_PARAMS) -> np.ndarray:
    # state: px py pz | yaw pitch roll | vx vy vz | p q r
    m, g = params["m"], params["g"]
    ix, iy, iz = params["I_x"], params["I_y"], params["I_z"]
    yaw, pitch, roll = x[..., 3], x[..., 4], x[..., 5]
    p, q, r = x[..., 9], x[..., 10], x[..., 11]
    cth = np.cos(pitch)
    if np.any(np.abs(cth) < GIMBAL_TOL):
        raise GimbalLock("pitch angle too close to +-pi/2")
    sph, cph = np.sin(roll), np.cos(roll)
    sps, cps = np.sin(yaw), np.cos(yaw)
    sth, tth = np.sin(pitch), np.tan(pitch)
    f = u[..., 0] / m
    return np.stack(
        [
            x[..., 6],
            x[..., 7],
            x[..., 8],
            q * sph / cth + r * cph / cth,
            q * cph - r * sph,
            p + q * sph * tth + r * cph * tth,
            f * (sph * sps + cph * cps * sth),
            # cos(roll)*sin(roll) is deliberate here; the textbook row has cos(yaw)*sin(roll)
            f * (cph * sph - cph * sps * sth),
            g + f * cph * cth,
            (iy - iz) / ix * q * r + u[..., 1] / ix,
            (iz - ix) / iy * p * r + u[..., 2] / iy,
            (ix - iy) / iz * p * q + u[..., 3] / iz,
        ],
        axis=-1,
    )


def step_quad3d(x, u, dt: float = QUAD3D_DT, params: Mapping[str, float] = QUAD3D_PARAMS) -> np.ndarray:
    x, u = _check_dims(x, u, 12, 4)
    return x + dt * quad3d_rhs(x, u, params)


@dataclass(frozen=True)
class DynamicsSystem:
    """Discrete-time plant ``x_{t+1} = step(x_t, u_t)``."""

    name: str
    n: int
    m: int
    dt: float
    params: dict = field(default_factory=dict)
    _step: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be >= 1")
        if not all(np.all(np.isfinite(v)) for v in self.params.values()):
            raise ValueError("system parameters must be finite")

    def step(self, x, u) -> np.ndarray:
        x, u = _check_dims(x, u, self.n, self.m)
        return self._step(x, u)

    def to_dict(self) -> dict:
        params = {k: np.asarray(v).tolist() for k, v in self.params.items()}
        return {"name": self.name, "n": self.n, "m": self.m, "dt": self.dt, "params": params}


def unicycle(dt: float = UNICYCLE_DT) -> DynamicsSystem:
    return DynamicsSystem("unicycle", 3, 2, dt, {}, lambda x, u: step_unicycle(x, u, dt))


def planar_quad(dt: float = PLANAR_QUAD_DT, **overrides) -> DynamicsSystem:
    params = {**PLANAR_QUAD_PARAMS, **overrides}
    if params["m"] <= 0 or params["I_y"] <= 0:
        raise ValueError("mass and inertia must be positive")
    return DynamicsSystem("planar_quad", 6, 2, dt, params, lambda x, u: step_planar_quad(x, u, dt, params))


def quad3d(dt: float = QUAD3D_DT, **overrides) -> DynamicsSystem:
    params = {**QUAD3D_PARAMS, **overrides}
    if params["m"] <= 0 or min(params["I_x"], params["I_y"], params["I_z"]) <= 0:
        raise ValueError("mass and inertias must be positive")
    return DynamicsSystem("quad3d", 12, 4, dt, params, lambda x, u: step_quad3d(x, u, dt, params))


def linear_system(A, B, dt: float = 1.0) -> DynamicsSystem:
    """Synthetic plant ``x+ = A x + B u``; exactly representable by a Koopman model
    with identity lifts (used for sanity checks)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    if A.shape != (n, n):
        raise DimensionError("A must be n x n with n = rows of B")

    def _step(x, u):
        # same expression order as the latent update, so the two agree bit-for-bit
        return x @ A.T + u @ B.T

    return DynamicsSystem("linear", n, m, dt, {"A": A, "B": B}, _step)


SYSTEMS: dict[str, Callable[..., DynamicsSystem]] = {
    "unicycle": unicycle,
    "planar_quad": planar_quad,
    "quad3d": quad3d,
}


def make_system(name: str, **kwargs) -> DynamicsSystem:
    if name == "linear":
        return linear_system(**kwargs)
    try:
        return SYSTEMS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)} or 'linear'") from None


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    controls: np.ndarray  # (T, m)
    system: str = ""
    dt: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise DimensionError("states and controls must be 2-D arrays")
        if len(self.states) != len(self.controls) + 1:
            raise DimensionError("trajectory needs exactly one more state than controls")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "dt": self.dt,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trajectory":
        states = np.asarray(d["states"], dtype=float)
        controls = np.asarray(d["controls"], dtype=float)
        return cls(states, controls, d.get("system", ""), d.get("dt", 0.0), d.get("seed"))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "Trajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path) -> None:
        """One row per timestep; the final row has empty control cells."""
        n, m = self.states.shape[1], self.controls.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "time"] + [f"x{j}" for j in range(n)] + [f"u{k}" for k in range(m)])
            for t, x in enumerate(self.states):
                u = self.controls[t].tolist() if t < self.horizon else [""] * m
                w.writerow([t, repr(t * self.dt)] + [repr(float(v)) for v in x] + [v if v == "" else repr(float(v)) for v in u])


def rollout_batch(system: DynamicsSystem, x0, controls) -> np.ndarray:
    """Simulate a batch: ``x0`` is ``(..., n)``, controls ``(..., T, m)``;
    returns states of shape ``(..., T+1, n)``."""
    controls = np.asarray(controls, dtype=float)
    x = np.asarray(x0, dtype=float)
    if controls.ndim < 2 or controls.shape[-2] < 1:
        raise ValueError("need at least one control step")
    if x.shape[-1] != system.n or controls.shape[-1] != system.m:
        raise DimensionError(
            f"{system.name}: expected n={system.n}, m={system.m}; got x0 {x.shape}, controls {controls.shape}"
        )
    T = controls.shape[-2]
    states = np.empty(x.shape[:-1] + (T + 1, system.n))
    states[..., 0, :] = x
    for t in range(T):
        x = system.step(x, controls[..., t, :])
        states[..., t + 1, :] = x
    return states


def rollout(system: DynamicsSystem, x0, controls) -> Trajectory:
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or np.ndim(x0) != 1:
        raise DimensionError("rollout takes one initial state and a (T, m) control sequence")
    return Trajectory(rollout_batch(system, x0, controls), controls, system.name, system.dt)


@dataclass
class ReferenceGeneratorConfig:
    """Smoothed uniform-random open-loop controls, rolled out from a random
    initial state in ``init_box``."""

    init_box: Box
    control_low: Sequence[float]
    control_high: Sequence[float]
    horizon: int = 100
    smoothing: int = 10
    seed: int = 0

    def __post_init__(self):
        lo = np.asarray(self.control_low, dtype=float)
        hi = np.asarray(self.control_high, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.smoothing < 1:
            raise ValueError("smoothing window must be >= 1")
        if lo.shape != hi.shape or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("control amplitude bounds must be finite and matching")
        if np.any(lo > hi):
            raise ValueError("control lower bound exceeds upper bound")

    def with_seed(self, seed: int) -> "ReferenceGeneratorConfig":
        return ReferenceGeneratorConfig(self.init_box, self.control_low, self.control_high,
                                        self.horizon, self.smoothing, seed)

    def to_dict(self) -> dict:
        return {
            "init_box": self.init_box.to_dict(),
            "control_low": list(map(float, self.control_low)),
            "control_high": list(map(float, self.control_high)),
            "horizon": self.horizon,
            "smoothing": self.smoothing,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReferenceGeneratorConfig":
        return cls(Box.from_dict(d["init_box"]), d["control_low"], d["control_high"],
                   d.get("horizon", 100), d.get("smoothing", 10), d.get("seed", 0))


def default_reference_config(system_name: str, horizon: int | None = None, seed: int = 0,
                             eps: float = 0.0) -> ReferenceGeneratorConfig:
    """Per-system generator defaults. The initial box is shrunk by ``eps`` so
    that perturbed starts stay inside the nominal initial set."""
    if system_name == "unicycle":
        box = Box([-1.0, -1.0, -math.pi / 4], [1.0, 1.0, math.pi / 4])
        lo, hi, T = [0.5, -0.8], [1.5, 0.8], 100
    elif system_name == "planar_quad":
        hover = PLANAR_QUAD_PARAMS["m"] * abs(PLANAR_QUAD_PARAMS["g"])
        box = Box([-1.0, -1.0, -0.1, -0.2, -0.2, -0.2], [1.0, 1.0, 0.1, 0.2, 0.2, 0.2])
        lo, hi, T = [hover - 0.5, -2e-3], [hover + 0.5, 2e-3], 100
    elif system_name == "quad3d":
        hover = QUAD3D_PARAMS["m"] * abs(QUAD3D_PARAMS["g"])
        box = Box([-1.0] * 3 + [-0.1] * 3 + [-0.1] * 6, [1.0] * 3 + [0.1] * 3 + [0.1] * 6)
        lo, hi, T = [hover - 0.5, -5e-3, -1e-3, -3e-3], [hover + 0.5, 5e-3, 1e-3, 3e-3], 200
    else:
        raise ValueError(f"no reference defaults for system {system_name!r}")
    if eps > 0:
        box = Box(box.lower + eps, box.upper - eps)
    return ReferenceGeneratorConfig(box, lo, hi, horizon if horizon is not None else T, 10, seed)


def smooth_controls(raw: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average: ``len(raw) - window + 1`` output rows."""
    if window == 1:
        return raw.copy()
    c = np.cumsum(np.vstack([np.zeros((1, raw.shape[1])), raw]), axis=0)
    return (c[window:] - c[:-window]) / window


def generate_reference(system: DynamicsSystem, cfg: ReferenceGeneratorConfig) -> Trajectory:
    rng = np.random.default_rng(cfg.seed)
    lo = np.asarray(cfg.control_low, dtype=float)
    hi = np.asarray(cfg.control_high, dtype=float)
    if lo.size != system.m or cfg.init_box.dim != system.n:
        raise DimensionError("generator config does not match the system dimensions")
    x0 = cfg.init_box.sample(rng)
    raw = rng.uniform(lo, hi, size=(cfg.horizon + cfg.smoothing - 1, system.m))
    u = np.clip(smooth_controls(raw, cfg.smoothing), lo, hi)
    traj = rollout(system, x0, u)
    traj.seed = cfg.seed
    return traj


def generate_dataset(system: DynamicsSystem, cfg: ReferenceGeneratorConfig, count: int) -> list[Trajectory]:
    """``count`` references with per-trajectory seeds spawned from ``cfg.seed``."""
    children = np.random.SeedSequence(cfg.seed).generate_state(count, dtype=np.uint32)
    return [generate_reference(system, cfg.with_seed(int(s))) for s in children]
