"""Calibrate once over randomly drawn references, then reuse the bounds on fresh ones.

    python scripts/offline_reuse.py configs/planar_quad.json --references 4
"""
import argparse
import json
import logging
from dataclasses import dataclass, replace

from koopreach import conformal
from koopreach.experiment import build_system, calibrate_bounds, load_config, reference_plan, train_model
from koopreach.koopman import KoopmanModel


@dataclass
class ReuseConfig:
    config: str
    references: int = 4
    first_reference_seed: int = 7001


def run(job: ReuseConfig) -> dict:
    cfg = replace(load_config(job.config), calibration_mode="offline-global")
    cfg.out.mkdir(parents=True, exist_ok=True)
    model_path = cfg.out / "model.json"
    if model_path.exists():
        model = KoopmanModel.load(model_path)
    else:
        model = train_model(cfg)
        model.save(model_path)
    system = build_system(cfg)
    plan, gains = reference_plan(cfg, system, model)
    bounds = calibrate_bounds(cfg, system, model, plan, gains)
    seeds = range(job.first_reference_seed, job.first_reference_seed + job.references)
    results = conformal.offline_reference_coverage(system, model, cfg.reference_config(), gains, bounds, cfg.eps,
                                                   seeds, cfg.N_test)
    rows = [{"reference_seed": s, "coverage": c, "krs_seconds": t} for s, (c, t) in zip(seeds, results)]
    return {"C": bounds.C, "target": 1 - cfg.delta,
            "mean_coverage": sum(r["coverage"] for r in rows) / len(rows), "references": rows}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--references", type=int, default=4)
    parser.add_argument("--first-reference-seed", type=int, default=7001)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    summary = run(ReuseConfig(args.config, args.references, args.first_reference_seed))
    path = load_config(args.config).out / "offline_reuse.json"
    path.write_text(json.dumps(summary, indent=2))
    for r in summary["references"]:
        print(f"reference {r['reference_seed']}: coverage {r['coverage']:.3f}, KRS {r['krs_seconds']:.3f} s")
    print(f"mean coverage {summary['mean_coverage']:.4f} (target {summary['target']:.2f}); written to {path}")


if __name__ == "__main__":
    main()
