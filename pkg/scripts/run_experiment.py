"""Run the full pipeline for one config file and print the report summary.

    python scripts/run_experiment.py configs/unicycle.json [--seed 1] [--out runs/x]
"""
import argparse
import json
import logging

from koopreach.experiment import load_config, run_pipeline


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    report = run_pipeline(cfg)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "artifacts"}, indent=2))


if __name__ == "__main__":
    main()
