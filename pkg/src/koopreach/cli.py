"""Command line entry point: ``koopreach {train,calibrate,reach,verify,report}``.

Every subcommand reads an experiment config (JSON) and writes its artifacts to
the config's output directory. Exit codes: 0 success, 1 invalid input, 2
runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import conformal
from .boundprop import ReachTube, compute_krs
from .controller import load_plan, save_plan
from .experiment import (ConfigError, ExperimentConfig, PipelineError, avg_log_volume, build_system,
                         calibrate_bounds, initial_set, load_config, reference_plan, run_pipeline, stage,
                         train_model)
from .koopman import KoopmanModel

log = logging.getLogger("koopreach")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koopreach", description="Conformalized Koopman reachable sets.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "fit the Koopman autoencoder and write model.json",
        "calibrate": "build the reference plan and the conformal error bounds",
        "reach": "compute the KRS (and the CKRS when bounds exist)",
        "verify": "estimate CKRS coverage on fresh true-system rollouts",
        "report": "run the whole pipeline and write report.json plus SVG plots",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", "-c", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--delta", type=float, help="override the miscoverage level")
        p.add_argument("--horizon", type=int, help="override the horizon T")
        p.add_argument("--out", help="override the output directory")
    return parser


def _model(cfg: ExperimentConfig) -> KoopmanModel:
    path = cfg.out / "model.json"
    if not path.is_file():
        raise ConfigError(f"model file not found: {path} (run `koopreach train` first)")
    return KoopmanModel.load(path)


def _plan(cfg, system, model):
    path = cfg.out / "plan.json"
    if path.is_file():
        plan, gains = load_plan(path, model)
        if plan.horizon == cfg.horizon:
            return plan, gains
        log.info("%s has horizon %d, config asks for %d; rebuilding", path, plan.horizon, cfg.horizon)
    plan, gains = reference_plan(cfg, system, model)
    save_plan(path, plan, gains, model)
    plan.x_ref.save_json(cfg.out / "reference.json")
    plan.x_ref.save_csv(cfg.out / "reference.csv")
    return plan, gains


def cmd_train(cfg: ExperimentConfig) -> None:
    with stage("train"):
        model = train_model(cfg)
    path = cfg.out / "model.json"
    model.save(path)
    print(f"model written to {path} (final loss {model.metadata['final_loss']:.6g})")


def cmd_calibrate(cfg: ExperimentConfig) -> None:
    model = _model(cfg)
    system = build_system(cfg)
    with stage("plan"):
        plan, gains = _plan(cfg, system, model)
    with stage("calibrate"):
        bounds = calibrate_bounds(cfg, system, model, plan, gains)
    bounds.save_json(cfg.out / "bounds.json")
    if math.isinf(bounds.C):
        print(f"warning: K_cal={cfg.K_cal} is too small for delta={cfg.delta}; the CKRS is unbounded",
              file=sys.stderr)
    print(f"C = {bounds.C:.6g} (mode {bounds.mode}); bounds written to {cfg.out / 'bounds.json'}")


def cmd_reach(cfg: ExperimentConfig) -> None:
    model = _model(cfg)
    system = build_system(cfg)
    with stage("plan"):
        plan, gains = _plan(cfg, system, model)
    with stage("reach"):
        krs = compute_krs(model, plan, gains, initial_set(cfg, plan))
    krs.save_json(cfg.out / "krs.json")
    krs.save_csv(cfg.out / "krs.csv")
    print(f"KRS avg log-volume {avg_log_volume(krs):.6g} written to {cfg.out / 'krs.json'}")
    bounds_path = cfg.out / "bounds.json"
    if not bounds_path.is_file():
        print("no bounds.json found; run `koopreach calibrate` to also produce the CKRS")
        return
    bounds = conformal.ConformalBounds.load_json(bounds_path)
    if bounds.config_hash != cfg.config_hash():
        raise ConfigError(f"{bounds_path} was calibrated for a different config; rerun `koopreach calibrate`")
    ckrs = conformal.inflate(krs, bounds.e_bar, bounds)
    ckrs.save_json(cfg.out / "ckrs.json")
    ckrs.save_csv(cfg.out / "ckrs.csv")
    if ckrs.provenance["unbounded"]:
        print("warning: conformal bounds are infinite; the CKRS is unbounded", file=sys.stderr)
    print(f"CKRS avg log-volume {avg_log_volume(ckrs):.6g} written to {cfg.out / 'ckrs.json'}")


def cmd_verify(cfg: ExperimentConfig) -> None:
    model = _model(cfg)
    system = build_system(cfg)
    tube_path = cfg.out / "ckrs.json"
    if not tube_path.is_file():
        raise ConfigError(f"tube file not found: {tube_path} (run `koopreach reach` after calibrating)")
    ckrs = ReachTube.load_json(tube_path)
    with stage("plan"):
        plan, gains = _plan(cfg, system, model)
    if ckrs.T != plan.horizon:
        raise ConfigError(f"{tube_path} has horizon {ckrs.T} but the plan has {plan.horizon}")
    with stage("verify"):
        k, n = conformal.coverage_counts(system, model, plan, gains, ckrs, cfg.N_test, cfg.eps, cfg.seeds()["test"])
    mode, var = conformal.beta_posterior(k, n)
    cov, target = k / n, 1.0 - cfg.delta
    meets = cov >= target
    result = {"coverage": cov, "contained": k, "n_test": n, "target": target, "meets_target": meets,
              "beta_mode": mode, "beta_variance": var}
    (cfg.out / "verify.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(f"coverage {cov:.4f} ({k}/{n}); target 1-delta = {target:.4f}: {'MEETS' if meets else 'BELOW'}")


def cmd_report(cfg: ExperimentConfig) -> None:
    report = run_pipeline(cfg)
    t = report.timings
    print(f"CP time {t['cp']:.3f} s, KRS time {t['krs']:.3f} s, total {t['total']:.3f} s")
    print(f"avg log-volume KRS {report.avg_log_volume['krs']:.4f}, CKRS {report.avg_log_volume['ckrs']:.4f}")
    print(f"coverage CKRS {report.coverage['ckrs']:.4f}, KRS {report.coverage['krs']:.4f}")
    if report.unbounded:
        print("warning: conformal bounds are infinite; the CKRS is unbounded", file=sys.stderr)
    print(f"report written to {report.artifacts['report']}")


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "reach": cmd_reach, "verify": cmd_verify,
            "report": cmd_report}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, seed=args.seed, delta=args.delta, horizon=args.horizon, output_dir=args.out)
        cfg.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is still a runtime failure, not a crash
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


cli = main

if __name__ == "__main__":
    sys.exit(main())
