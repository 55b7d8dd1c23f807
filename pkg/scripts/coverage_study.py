"""Repeat calibrate/test over many seeds with one trained model and summarise coverage.

Trains (or loads) the model once, then for each seed draws a new reference,
calibrates, inflates the KRS and measures coverage on fresh rollouts. Writes
per-seed rows plus the mean, the standard error and the Beta posterior of the
pooled containment counts.

    python scripts/coverage_study.py configs/unicycle.json --repeats 20
"""
import argparse
import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from koopreach import conformal
from koopreach.boundprop import compute_krs
from koopreach.experiment import (avg_log_volume, build_system, calibrate_bounds, initial_set, load_config,
                                  reference_plan, train_model)
from koopreach.koopman import KoopmanModel

log = logging.getLogger("coverage_study")


@dataclass
class StudyConfig:
    config: str
    repeats: int = 20
    first_seed: int = 1000
    delta: float | None = None


def run(study: StudyConfig) -> dict:
    base = load_config(study.config, delta=study.delta)
    base.out.mkdir(parents=True, exist_ok=True)
    model_path = base.out / "model.json"
    if model_path.exists():
        model = KoopmanModel.load(model_path)
    else:
        model = train_model(base)
        model.save(model_path)
    rows, k_total, n_total = [], 0, 0
    for i in range(study.repeats):
        cfg = replace(base, seed=study.first_seed + i)
        system = build_system(cfg)
        plan, gains = reference_plan(cfg, system, model)
        bounds = calibrate_bounds(cfg, system, model, plan, gains)
        krs = compute_krs(model, plan, gains, initial_set(cfg, plan))
        ckrs = conformal.inflate(krs, bounds.e_bar, bounds)
        k, n = conformal.coverage_counts(system, model, plan, gains, ckrs, cfg.N_test, cfg.eps, cfg.seeds()["test"])
        rows.append({"seed": cfg.seed, "coverage": k / n, "C": bounds.C,
                     "log_volume_krs": avg_log_volume(krs), "log_volume_ckrs": avg_log_volume(ckrs)})
        k_total, n_total = k_total + k, n_total + n
        log.info("seed %d: coverage %.3f, C %.4g", cfg.seed, k / n, bounds.C)
    covs = np.array([r["coverage"] for r in rows])
    se = float(covs.std(ddof=1) / math.sqrt(len(covs))) if len(covs) > 1 else 0.0
    mode, var = conformal.beta_posterior(k_total, n_total)
    return {"target": 1 - base.delta, "mean_coverage": float(covs.mean()), "standard_error": se,
            "threshold": 1 - base.delta - 2 * se, "beta_mode": mode, "beta_variance": var, "runs": rows}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--first-seed", type=int, default=1000)
    parser.add_argument("--delta", type=float)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    study = StudyConfig(args.config, args.repeats, args.first_seed, args.delta)
    summary = run(study)
    path = load_config(args.config).out / "coverage_study.json"
    path.write_text(json.dumps(summary, indent=2))
    print(f"mean coverage {summary['mean_coverage']:.4f} (SE {summary['standard_error']:.4f}), "
          f"target {summary['target']:.2f}; written to {path}")


if __name__ == "__main__":
    main()
