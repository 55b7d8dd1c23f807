"""CROWN-style affine bounds for ReLU MLPs and the Koopman reachable set (KRS).

An :class:`AffineBoundPair` certifies ``Psi s + alpha <= G(s) <= Phi s + beta``
for every ``s`` in its input box. Bounds are propagated in double precision
without outward rounding.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import GainSchedule, ReferencePlan, plan_hash
from .dynamics import Box, DimensionError
from .koopman import KoopmanModel, MlpNetwork


class UnsupportedActivation(ValueError):
    pass


def _pos(M):
    return np.maximum(M, 0.0)


def _neg(M):
    return np.minimum(M, 0.0)


@dataclass
class AffineBoundPair:
    Psi: np.ndarray
    alpha: np.ndarray
    Phi: np.ndarray
    beta: np.ndarray
    input_box: Box | None = None

    def __post_init__(self):
        self.Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        self.Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if self.Psi.shape != self.Phi.shape or self.alpha.shape != self.beta.shape \
                or self.alpha.shape[0] != self.Psi.shape[0]:
            raise DimensionError("inconsistent affine bound shapes")

    @property
    def n_out(self) -> int:
        return self.Psi.shape[0]

    @property
    def n_in(self) -> int:
        return self.Psi.shape[1]

    def lower_at(self, s) -> np.ndarray:
        return np.asarray(s) @ self.Psi.T + self.alpha

    def upper_at(self, s) -> np.ndarray:
        return np.asarray(s) @ self.Phi.T + self.beta


@dataclass(frozen=True)
class ReluRelaxation:
    lower_slope: np.ndarray
    lower_intercept: np.ndarray
    upper_slope: np.ndarray
    upper_intercept: np.ndarray


def relu_relax(lo, up) -> ReluRelaxation:
    """Linear lower/upper envelopes of ReLU on pre-activation interval [lo, up].

    Unstable neurons get the chord as upper line and slope 1 or 0 as lower line,
    whichever side of the interval is wider.
    """
    lo = np.asarray(lo, dtype=float)
    up = np.asarray(up, dtype=float)
    if np.any(lo > up):
        raise ValueError("relu_relax: lower pre-activation bound exceeds upper")
    active = lo >= 0
    unstable = (lo < 0) & (up > 0)
    denom = np.where(unstable, up - lo, 1.0)
    u_slope = np.where(active, 1.0, np.where(unstable, up / denom, 0.0))
    u_icpt = np.where(unstable, -lo * up / denom, 0.0)
    l_slope = np.where(active, 1.0, np.where(unstable & (up >= -lo), 1.0, 0.0))
    return ReluRelaxation(l_slope, np.zeros_like(lo), u_slope, u_icpt)


def concretize(bounds: AffineBoundPair, box: Box) -> Box:
    """Exact min of the lower function and max of the upper function over ``box``."""
    if box.dim != bounds.n_in:
        raise DimensionError(f"box has dimension {box.dim}, bounds expect {bounds.n_in}")
    lo = bounds.alpha + _pos(bounds.Psi) @ box.lower + _neg(bounds.Psi) @ box.upper
    hi = bounds.beta + _pos(bounds.Phi) @ box.upper + _neg(bounds.Phi) @ box.lower
    return Box(lo, np.maximum(hi, lo))


def compose_bounds(outer: AffineBoundPair, inner: AffineBoundPair) -> AffineBoundPair:
    """Bounds on ``G(z)`` (affine in z) chained with bounds on ``z`` (affine in s)."""
    if outer.n_in != inner.n_out:
        raise DimensionError("outer bound input size does not match inner output size")
    Lp, Ln = _pos(outer.Psi), _neg(outer.Psi)
    Up, Un = _pos(outer.Phi), _neg(outer.Phi)
    Psi = Lp @ inner.Psi + Ln @ inner.Phi
    alpha = outer.alpha + Lp @ inner.alpha + Ln @ inner.beta
    Phi = Up @ inner.Phi + Un @ inner.Psi
    beta = outer.beta + Up @ inner.beta + Un @ inner.alpha
    return AffineBoundPair(Psi, alpha, Phi, beta, inner.input_box)


def compose_linear(bounds: AffineBoundPair, M, c=None) -> AffineBoundPair:
    """Push bounds on ``z`` through the exact linear map ``M z + c``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    c = np.zeros(M.shape[0]) if c is None else np.asarray(c, dtype=float)
    outer = AffineBoundPair(M, c, M, c)
    return compose_bounds(outer, bounds)


def linear_bounds(W, b, box: Box | None = None) -> AffineBoundPair:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    return AffineBoundPair(W, b, W.copy(), np.array(b, dtype=float), box)


def _backsub(net: MlpNetwork, k: int, relax: list[ReluRelaxation]):
    W, b = net.weights, net.biases
    Lam, lam_off = W[k].copy(), b[k].copy()
    Om, om_off = W[k].copy(), b[k].copy()
    for j in range(k - 1, -1, -1):
        r = relax[j]
        Lp, Ln = _pos(Lam), _neg(Lam)
        lam_off = lam_off + Lp @ r.lower_intercept + Ln @ r.upper_intercept
        Lam = Lp * r.lower_slope + Ln * r.upper_slope
        Op, On = _pos(Om), _neg(Om)
        om_off = om_off + Op @ r.upper_intercept + On @ r.lower_intercept
        Om = Op * r.upper_slope + On * r.lower_slope
        lam_off = lam_off + Lam @ b[j]
        Lam = Lam @ W[j]
        om_off = om_off + Om @ b[j]
        Om = Om @ W[j]
    return AffineBoundPair(Lam, lam_off, Om, om_off)


def bound_network(net: MlpNetwork, input_box: Box, return_relaxations: bool = False):
    """Affine bounds of a ReLU MLP over ``input_box`` by backward substitution.

    Pre-activation intervals of every hidden layer come from a full
    back-substitution to the input, concretised over the box.
    """
    if net.activation != "relu" and len(net.weights) > 1:
        raise UnsupportedActivation(f"cannot relax activation {net.activation!r}; only ReLU is supported")
    if input_box.dim != net.input_dim:
        raise DimensionError(f"input box has dimension {input_box.dim}, network expects {net.input_dim}")
    if not (np.all(np.isfinite(input_box.lower)) and np.all(np.isfinite(input_box.upper))):
        raise ValueError("input box must be finite")
    relax: list[ReluRelaxation] = []
    for k in range(len(net.weights) - 1):
        pre = concretize(_backsub(net, k, relax), input_box)
        relax.append(relu_relax(pre.lower, pre.upper))
    out = _backsub(net, len(net.weights) - 1, relax)
    out.input_box = input_box
    return (out, relax) if return_relaxations else out


# ---------------------------------------------------------------------------
# reach tubes


@dataclass
class ReachTube:
    lower: np.ndarray  # (T+1, n)
    upper: np.ndarray
    kind: str = "KRS"
    provenance: dict = field(default_factory=dict)
    latent: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.kind not in ("KRS", "CKRS"):
            raise ValueError("kind must be KRS or CKRS")
        if self.lower.shape != self.upper.shape or self.lower.ndim != 2:
            raise DimensionError("tube bounds must share a (T+1, n) shape")
        if np.any(self.lower > self.upper):
            raise ValueError("tube has a box with lower > upper")

    @property
    def T(self) -> int:
        return self.lower.shape[0] - 1

    @property
    def n(self) -> int:
        return self.lower.shape[1]

    @property
    def boxes(self) -> list[Box]:
        return [Box(lo, hi) for lo, hi in zip(self.lower, self.upper)]

    def contains(self, states, atol: float = 0.0) -> np.ndarray:
        """Per trajectory: is every state inside its box? ``states`` is (..., T+1, n)."""
        s = np.asarray(states, dtype=float)
        inside = (s >= self.lower - atol) & (s <= self.upper + atol)
        return np.all(inside, axis=(-2, -1))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "n": self.n,
            "boxes": [{"lower": lo.tolist(), "upper": hi.tolist()} for lo, hi in zip(self.lower, self.upper)],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d) -> "ReachTube":
        lo = np.array([b["lower"] for b in d["boxes"]], dtype=float)
        hi = np.array([b["upper"] for b in d["boxes"]], dtype=float)
        return cls(lo, hi, d["kind"], d.get("provenance", {}))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "ReachTube":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{side}{j}" for j in range(self.n) for side in ("lower", "upper")])
            for t in range(self.T + 1):
                row = [t]
                for j in range(self.n):
                    row += [repr(float(self.lower[t, j])), repr(float(self.upper[t, j]))]
                w.writerow(row)


def closed_loop_maps(model: KoopmanModel, plan: ReferencePlan, gains: GainSchedule):
    """Per-step closed-loop matrices and offsets: z_{t+1} = A_t z_t + c_t."""
    A = model.K_A[None] - np.einsum("lm,tmk->tlk", model.K_B, gains.gains)
    c = (plan.u_ref + np.einsum("tmk,tk->tm", gains.gains, plan.z_ref[:-1])) @ model.K_B.T
    return A, c


def compute_krs(model: KoopmanModel, plan: ReferencePlan, gains: GainSchedule, X0: Box,
                keep_latent: bool = False) -> ReachTube:
    """Boxes containing every decoded lifted closed-loop trajectory from ``X0``.

    The encoder is relaxed once over X0. The latent recursion is linear, so
    z_t = P_t z_0 + d_t is carried exactly and composed with the encoder bounds.
    The decoder is relaxed separately at each step over the concretised latent box.
    """
    if X0.dim != model.n:
        raise DimensionError(f"initial set has dimension {X0.dim}, model state dimension is {model.n}")
    if gains.horizon != plan.horizon or gains.gains.shape[1:] != (model.m, model.l):
        raise DimensionError("gain schedule does not match the plan/model")
    enc = model.encoder_network()
    dec = model.decoder_network()
    z0_bounds = bound_network(enc, X0)
    A, c = closed_loop_maps(model, plan, gains)
    T = plan.horizon
    lower = np.empty((T + 1, model.n))
    upper = np.empty((T + 1, model.n))
    lower[0], upper[0] = X0.lower, X0.upper
    latent = [concretize(z0_bounds, X0)] if keep_latent else None
    P = np.eye(model.l)
    d = np.zeros(model.l)
    for t in range(T):
        P = A[t] @ P
        d = A[t] @ d + c[t]
        zt = compose_linear(z0_bounds, P, d)
        zbox = concretize(zt, X0)
        dec_bounds = bound_network(dec, zbox)
        via_x0 = concretize(compose_bounds(dec_bounds, zt), X0)
        direct = concretize(dec_bounds, zbox)
        lower[t + 1] = np.maximum(via_x0.lower, direct.lower)
        upper[t + 1] = np.minimum(via_x0.upper, direct.upper)
        if keep_latent:
            latent.append(zbox)
    prov = {"reference": plan_hash(plan, gains), "model": model.content_hash(),
            "initial_set": X0.to_dict()}
    return ReachTube(lower, upper, "KRS", prov, latent)
