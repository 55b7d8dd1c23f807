"""Experiment configuration and the end-to-end CKRS pipeline.

Log-volume convention (repo-specific, not comparable to published absolutes):
``avg_log_volume = mean_t sum_j ln(upper[t, j] - lower[t, j])`` with widths
floored at 1e-12.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import conformal
from .boundprop import ReachTube, compute_krs
from .controller import GainSchedule, LqrWeights, ReferencePlan, make_plan, riccati_gains
from .dynamics import (Box, DynamicsSystem, ReferenceGeneratorConfig, Trajectory, default_reference_config,
                       generate_dataset, generate_reference, make_system)
from .koopman import KoopmanModel, TrainingConfig, train

log = logging.getLogger(__name__)

LATENT_DEFAULTS = {"unicycle": 10, "planar_quad": 24, "quad3d": 24}
MODES = ("per-reference", "offline-global")
WIDTH_FLOOR = 1e-12
LOG_VOLUME_NOTE = "repo convention: mean over t of sum_j ln(width); not comparable to published absolutes"


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    system: str = "unicycle"
    horizon: int = 100
    delta: float = 0.1
    eps: float = 0.05
    latent_dim: int | None = None
    hidden: tuple = (128, 128, 128)
    activation: str = "relu"
    n_train: int = 200
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 3e-3
    lambda1: float = 1.0
    lambda2: float = 1.0
    multistep_horizon: int = 10
    weight_decay: float = 1e-5
    lqr_q: float = 1.0
    lqr_r: float = 0.1
    K_cal: int = 100
    M_lambda: int | None = None
    N_test: int = 200
    sigma: float = 1e-3
    seed: int = 0
    calibration_mode: str = "per-reference"
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.latent_dim is None:
            self.latent_dim = LATENT_DEFAULTS.get(self.system, 10)
        if self.M_lambda is None:
            self.M_lambda = max(self.K_cal // 2, 1)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.system not in LATENT_DEFAULTS:
            problems.append(f"unknown system {self.system!r}")
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if not 0 < self.delta < 1:
            problems.append("delta must lie in (0, 1)")
        if not self.eps > 0:
            problems.append("eps must be positive")
        if self.K_cal < 1 or self.M_lambda < 1 or self.N_test < 1 or self.n_train < 1:
            problems.append("K_cal, M_lambda, N_test and n_train must be >= 1")
        if self.multistep_horizon > self.horizon:
            problems.append("multistep_horizon cannot exceed the horizon")
        if self.calibration_mode not in MODES:
            problems.append(f"calibration_mode must be one of {MODES}")
        if not self.sigma > 0 or self.lqr_q <= 0 or self.lqr_r <= 0:
            problems.append("sigma, lqr_q and lqr_r must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(self.lambda1, self.lambda2, self.multistep_horizon, self.epochs, self.batch_size,
                              self.learning_rate, 0.9, self.weight_decay, self.latent_dim, self.hidden,
                              self.activation, seed=self.seed)

    def seeds(self) -> dict:
        names = ("data", "reference", "calibration", "test")
        vals = np.random.SeedSequence(self.seed).generate_state(len(names))
        return {k: int(v) for k, v in zip(names, vals)}

    def reference_config(self, seed: int | None = None) -> ReferenceGeneratorConfig:
        s = self.seeds()["reference"] if seed is None else seed
        return default_reference_config(self.system, self.horizon, s, eps=self.eps)

    def lqr_weights(self, l: int, m: int) -> LqrWeights:
        return LqrWeights.default(l, m, self.lqr_q, self.lqr_r)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def load_config(path, **overrides) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if "seed" not in d and os.environ.get("KRO_SEED"):
        try:
            d["seed"] = int(os.environ["KRO_SEED"])
        except ValueError:
            raise ConfigError("KRO_SEED must be an integer") from None
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# metrics


def avg_log_volume(tube: ReachTube) -> float:
    """Mean over timesteps of the summed log box widths; +inf if any box is unbounded."""
    widths = tube.upper - tube.lower
    if not np.all(np.isfinite(widths)):
        return math.inf
    return float(np.mean(np.sum(np.log(np.maximum(widths, WIDTH_FLOOR)), axis=1)))


@dataclass
class RunReport:
    timings: dict
    avg_log_volume: dict
    coverage: dict
    beta_posterior: dict
    C: float
    unbounded: bool
    artifacts: dict
    config_hash: str
    log_volume_note: str = LOG_VOLUME_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "RunReport":
        return cls(**d)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load_json(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# stages


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except (PipelineError, ConfigError):
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def build_system(cfg: ExperimentConfig) -> DynamicsSystem:
    return make_system(cfg.system)


def train_model(cfg: ExperimentConfig, system: DynamicsSystem | None = None) -> KoopmanModel:
    system = system or build_system(cfg)
    gen = cfg.reference_config(cfg.seeds()["data"])
    data = generate_dataset(system, gen, cfg.n_train)
    model = train(data, cfg.training_config())
    model.metadata["experiment_config_hash"] = cfg.config_hash()
    return model


def reference_plan(cfg: ExperimentConfig, system, model: KoopmanModel, ref: Trajectory | None = None):
    """Encode the reference, solve for the feedforward and compute the LQR gains."""
    if ref is None:
        ref = generate_reference(system, cfg.reference_config())
    plan = make_plan(model, ref)
    gains = riccati_gains(model.K_A, model.K_B, cfg.lqr_weights(model.l, model.m), plan.horizon)
    return plan, gains


def calibration_source(cfg: ExperimentConfig, plan: ReferencePlan):
    if cfg.calibration_mode == "per-reference":
        return plan
    return cfg.reference_config(cfg.seeds()["calibration"] + 1)


def calibrate_bounds(cfg: ExperimentConfig, system, model, plan, gains) -> conformal.ConformalBounds:
    D_E, D_N = conformal.collect_calibration(system, model, calibration_source(cfg, plan), gains,
                                             cfg.K_cal, cfg.M_lambda, cfg.eps, cfg.seeds()["calibration"])
    bounds = conformal.calibrate(D_E, D_N, cfg.delta, cfg.sigma, cfg.calibration_mode, cfg.config_hash())
    if math.isinf(bounds.C):
        log.warning("K_cal=%d is too small for delta=%g: conformal bounds are unbounded", cfg.K_cal, cfg.delta)
    return bounds


def initial_set(cfg: ExperimentConfig, plan: ReferencePlan) -> Box:
    return Box.ball(plan.x_ref.states[0], cfg.eps)


def run_pipeline(cfg: ExperimentConfig, model: KoopmanModel | None = None, plots: bool = True) -> RunReport:
    """Train (if needed), calibrate, bound, inflate, verify and write all artifacts."""
    from .plots import emit_plots

    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    with stage("setup"):
        system = build_system(cfg)
    model_path = out / "model.json"
    if model is None:
        if model_path.exists():
            with stage("load-model"):
                model = KoopmanModel.load(model_path)
        else:
            with stage("train"):
                model = train_model(cfg, system)
    with stage("save-model"):
        model.save(model_path)

    t_start = time.perf_counter()
    with stage("plan"):
        plan, gains = reference_plan(cfg, system, model)
    t_plan = time.perf_counter()
    with stage("calibrate"):
        bounds = calibrate_bounds(cfg, system, model, plan, gains)
    t_cp = time.perf_counter()
    with stage("reach"):
        krs = compute_krs(model, plan, gains, initial_set(cfg, plan))
    t_krs = time.perf_counter()
    with stage("inflate"):
        ckrs = conformal.inflate(krs, bounds.e_bar, bounds)
    t_end = time.perf_counter()
    timings = {
        "plan": t_plan - t_start,
        "cp": t_cp - t_plan,
        "krs": t_krs - t_cp,
        "inflate": t_end - t_krs,
    }
    timings["total"] = timings["plan"] + timings["cp"] + timings["krs"] + timings["inflate"]

    with stage("verify"):
        test_seed = cfg.seeds()["test"]
        k_ck, n = conformal.coverage_counts(system, model, plan, gains, ckrs, cfg.N_test, cfg.eps, test_seed)
        k_kr, _ = conformal.coverage_counts(system, model, plan, gains, krs, cfg.N_test, cfg.eps, test_seed)
        mode, var = conformal.beta_posterior(k_ck, n)

    with stage("write"):
        arts = write_artifacts(out, cfg, model, plan, gains, bounds, krs, ckrs)
        arts["report"] = str(out / "report.json")
        if plots:
            rng = np.random.default_rng(cfg.seeds()["test"])
            x0 = conformal.sample_initial_states(plan.x_ref.states[0], cfg.eps, 10, rng)
            from .controller import true_closed_loop

            rollouts, _ = true_closed_loop(system, model, plan, gains, x0)
            arts["plots"] = [str(p) for p in emit_plots([krs, ckrs], plan.x_ref.states, rollouts, out / "plots",
                                                             dt=system.dt)]
        report = RunReport(
            timings=timings,
            avg_log_volume={"krs": avg_log_volume(krs), "ckrs": avg_log_volume(ckrs)},
            coverage={"ckrs": k_ck / n, "krs": k_kr / n, "n_test": n, "target": 1 - cfg.delta},
            beta_posterior={"mode": mode, "variance": var, "successes": k_ck, "trials": n},
            C=bounds.C,
            unbounded=bool(math.isinf(bounds.C)),
            artifacts=arts,
            config_hash=cfg.config_hash(),
        )
        report.save_json(out / "report.json")
    return report


def write_artifacts(out: Path, cfg, model, plan, gains, bounds, krs, ckrs) -> dict:
    from .controller import save_plan

    paths = {
        "model": out / "model.json",
        "reference": out / "reference.json",
        "plan": out / "plan.json",
        "bounds": out / "bounds.json",
        "krs": out / "krs.json",
        "ckrs": out / "ckrs.json",
    }
    plan.x_ref.save_json(paths["reference"])
    plan.x_ref.save_csv(out / "reference.csv")
    save_plan(paths["plan"], plan, gains, model)
    if bounds is not None:
        bounds.save_json(paths["bounds"])
    krs.save_json(paths["krs"])
    krs.save_csv(out / "krs.csv")
    if ckrs is not None:
        ckrs.save_json(paths["ckrs"])
        ckrs.save_csv(out / "ckrs.csv")
    return {k: str(v) for k, v in paths.items()}
