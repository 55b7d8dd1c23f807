"""Split-conformal inflation of Koopman reach tubes.

Each calibration sample pairs the true closed loop with the decoded lifted
closed loop from the same perturbed start. The error trajectory is collapsed to
one score (max over time and dimension of the normalised absolute error). The
(1 - delta) calibration quantile of those scores then scales back into per-time,
per-dimension radii.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boundprop import ReachTube, compute_krs
from .controller import (GainSchedule, ReferencePlan, latent_decoded_states, make_plan,
                         true_closed_loop)
from .dynamics import Box, DimensionError, DynamicsSystem, ReferenceGeneratorConfig, generate_reference
from .koopman import KoopmanModel


@dataclass
class NormalizationWeights:
    lam: np.ndarray  # (T+1, n)
    e_max: np.ndarray
    sigma: float


@dataclass
class ConformalBounds:
    e_bar: np.ndarray  # (T+1, n); +inf when C is infinite
    C: float
    delta: float
    K_cal: int
    M_lambda: int
    sigma: float
    lam: np.ndarray
    mode: str = "per-reference"
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "C": self.C,
            "sigma": self.sigma,
            "lambda": self.lam.tolist(),
            "e_bar": self.e_bar.tolist(),
            "K_cal": self.K_cal,
            "M_lambda": self.M_lambda,
            "mode": self.mode,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d) -> "ConformalBounds":
        return cls(np.asarray(d["e_bar"], dtype=float), float(d["C"]), float(d["delta"]), int(d["K_cal"]),
                   int(d["M_lambda"]), float(d["sigma"]), np.asarray(d["lambda"], dtype=float),
                   d.get("mode", "per-reference"), d.get("config_hash", ""))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "ConformalBounds":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _finite_or_inf(e: np.ndarray) -> np.ndarray:
    # a diverged rollout gets an infinite error rather than poisoning maxima with NaN
    return np.where(np.isfinite(e), e, np.inf)


def paired_errors(system: DynamicsSystem, model: KoopmanModel, plan: ReferencePlan,
                  gains: GainSchedule, x0) -> np.ndarray:
    """Signed errors true minus decoded-latent, shape (B, T+1, n)."""
    with np.errstate(over="ignore", invalid="ignore"):
        x_true, _ = true_closed_loop(system, model, plan, gains, x0)
        x_hat = latent_decoded_states(model, plan, gains, x0)
        return _finite_or_inf(x_true - x_hat)


def sample_initial_states(x0_ref, eps, count: int, rng: np.random.Generator) -> np.ndarray:
    return Box.ball(x0_ref, eps).sample(rng, count)


def collect_errors(system, model, source, gains, count: int, eps, rng: np.random.Generator) -> np.ndarray:
    """``count`` error trajectories. ``source`` is either a fixed ReferencePlan
    (per-reference mode) or a ReferenceGeneratorConfig, in which case every
    sample draws a fresh reference first (offline-global mode)."""
    if count < 1:
        raise ValueError("need at least one calibration sample")
    if isinstance(source, ReferencePlan):
        x0 = sample_initial_states(source.x_ref.states[0], eps, count, rng)
        return paired_errors(system, model, source, gains, x0)
    if not isinstance(source, ReferenceGeneratorConfig):
        raise TypeError("source must be a ReferencePlan or a ReferenceGeneratorConfig")
    out = []
    for seed in rng.integers(0, 2**31 - 1, size=count):
        plan = make_plan(model, generate_reference(system, source.with_seed(int(seed))))
        x0 = sample_initial_states(plan.x_ref.states[0], eps, 1, rng)
        out.append(paired_errors(system, model, plan, gains, x0)[0])
    return np.stack(out)


def collect_calibration(system, model, source, gains, K_cal: int, M_lambda: int, eps, seed: int):
    """Disjoint calibration (D_E) and normalisation (D_N) error sets drawn with
    independent child seeds of ``seed``."""
    if K_cal < 1 or M_lambda < 1:
        raise ValueError("K_cal and M_lambda must be >= 1")
    rng_e, rng_n = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    D_E = collect_errors(system, model, source, gains, K_cal, eps, rng_e)
    D_N = collect_errors(system, model, source, gains, M_lambda, eps, rng_n)
    return D_E, D_N


def normalization_weights(D_N, sigma: float = 1e-3) -> NormalizationWeights:
    D_N = np.asarray(D_N, dtype=float)
    if D_N.ndim != 3 or len(D_N) == 0:
        raise ValueError("normalisation set must be a non-empty (M, T+1, n) array")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    e_max = np.max(np.abs(D_N), axis=0)
    return NormalizationWeights(1.0 / (e_max + sigma), e_max, sigma)


def nonconformity_scores(D_E, lam) -> np.ndarray:
    D_E = np.asarray(D_E, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if D_E.shape[1:] != lam.shape:
        raise DimensionError(f"error trajectories {D_E.shape[1:]} do not match weights {lam.shape}")
    return np.max(lam * np.abs(D_E), axis=(1, 2))


def conformal_quantile(scores, delta: float) -> float:
    """p-th smallest score with p = ceil((K+1)(1-delta)); +inf when p > K."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    s = np.sort(np.asarray(scores, dtype=float).reshape(-1))
    if s.size == 0:
        raise ValueError("no calibration scores")
    p = math.ceil((s.size + 1) * (1.0 - delta))
    if p > s.size:
        return math.inf
    return float(s[p - 1])


def error_bounds(C: float, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if C < 0:
        raise ValueError("quantile threshold must be nonnegative")
    if math.isinf(C):
        return np.full(lam.shape, math.inf)
    return C / lam


def calibrate(D_E, D_N, delta: float, sigma: float = 1e-3, mode: str = "per-reference",
              config_hash: str = "") -> ConformalBounds:
    w = normalization_weights(D_N, sigma)
    C = conformal_quantile(nonconformity_scores(D_E, w.lam), delta)
    return ConformalBounds(error_bounds(C, w.lam), C, delta, len(D_E), len(D_N), sigma, w.lam, mode, config_hash)


def inflate(krs: ReachTube, e_bar, bounds: ConformalBounds | None = None) -> ReachTube:
    """Minkowski sum of each KRS box with the box of radii ``e_bar[t]``."""
    if krs.kind != "KRS":
        raise ValueError("can only inflate a KRS")
    e_bar = np.asarray(e_bar, dtype=float)
    if e_bar.shape != krs.lower.shape:
        raise DimensionError(f"error bounds {e_bar.shape} do not match tube {krs.lower.shape}")
    if np.any(e_bar < 0):
        raise ValueError("error bounds must be nonnegative")
    prov = dict(krs.provenance)
    prov["unbounded"] = bool(np.any(np.isinf(e_bar)))
    if bounds is not None:
        prov.update(delta=bounds.delta, C=bounds.C, K_cal=bounds.K_cal, M_lambda=bounds.M_lambda,
                    mode=bounds.mode, config_hash=bounds.config_hash)
    return ReachTube(krs.lower - e_bar, krs.upper + e_bar, "CKRS", prov)


def coverage_counts(system, model, plan, gains, tube: ReachTube, N_test: int, eps, seed: int):
    """(contained, N_test) for fresh true closed-loop rollouts from B_eps(x0_ref)."""
    if N_test < 1:
        raise ValueError("N_test must be >= 1")
    rng = np.random.default_rng(seed)
    x0 = sample_initial_states(plan.x_ref.states[0], eps, N_test, rng)
    with np.errstate(over="ignore", invalid="ignore"):
        states, _ = true_closed_loop(system, model, plan, gains, x0)
    return int(np.sum(tube.contains(states))), N_test


def empirical_coverage(system, model, plan, gains, tube: ReachTube, N_test: int, eps, seed: int) -> float:
    k, n = coverage_counts(system, model, plan, gains, tube, N_test, eps, seed)
    return k / n


def offline_reference_coverage(system, model, gen_cfg: ReferenceGeneratorConfig, gains, bounds: ConformalBounds,
                               eps, seeds, N_test: int):
    """Per fresh reference: KRS over B_eps(x0_ref), inflate with the global bounds,
    then measure coverage. Returns a list of (coverage, krs_seconds)."""
    out = []
    for s in seeds:
        plan = make_plan(model, generate_reference(system, gen_cfg.with_seed(int(s))))
        t0 = time.perf_counter()
        krs = compute_krs(model, plan, gains, Box.ball(plan.x_ref.states[0], eps))
        elapsed = time.perf_counter() - t0
        ckrs = inflate(krs, bounds.e_bar, bounds)
        out.append((empirical_coverage(system, model, plan, gains, ckrs, N_test, eps, int(s) + 1), elapsed))
    return out


def beta_posterior(successes: int, trials: int) -> tuple[float, float]:
    """Mode and variance of Beta(successes+1, failures+1) (uniform prior).

    The mode is ``successes / trials``; with no trials it is undefined (nan).
    """
    if not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials")
    a, b = successes + 1.0, trials - successes + 1.0
    var = a * b / ((a + b) ** 2 * (a + b + 1.0))
    mode = successes / trials if trials > 0 else math.nan
    return mode, var
