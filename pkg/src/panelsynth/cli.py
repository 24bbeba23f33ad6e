"""Command-line entry point: ``panelsynth {run,validate,simulate}``."""

import argparse
import logging
import os
import sys

import yaml

from panelsynth import pipeline
from panelsynth.dgp import SPARSE_DEFAULTS, DgpConfig, simulate_panel
from panelsynth.errors import ConfigError, PanelSynthError

logger = logging.getLogger("panelsynth")


def build_parser():
    parser = argparse.ArgumentParser(prog="panelsynth", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the configured stage chain")
    run.add_argument("config", help="pipeline YAML config")
    run.add_argument("--seed", type=int, help="override the root seed")
    run.add_argument("--out", help="override the output directory")
    run.add_argument("--stages", help="comma-separated stage list, e.g. ingest,match,estimate")

    val = sub.add_parser("validate", help="check a config and its input panel without running")
    val.add_argument("config")
    val.add_argument("--stages", help="comma-separated stage list to validate")

    sim = sub.add_parser("simulate", help="draw a panel from the ground-truth simulator")
    sim.add_argument("config", help="dgp YAML config (keys of DgpConfig; 'sparse: true' starts from the sparse defaults)")
    sim.add_argument("--seed", type=int, help="override the dgp seed")
    sim.add_argument("--out", default="simulated", help="output directory (default: %(default)s)")
    return parser


def _stages(text):
    if text is None:
        return None
    return [s.strip() for s in text.split(",") if s.strip()]


def _load_dgp(path, seed):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read dgp config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"dgp config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("dgp config must be a mapping")
    raw = dict(raw)
    params = dict(SPARSE_DEFAULTS) if raw.pop("sparse", False) else {}
    params.update(raw)
    if seed is not None:
        params["seed"] = seed
    try:
        return DgpConfig.from_dict(params)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_run(args):
    config = pipeline.load_config(args.config, seed=args.seed, output_dir=args.out, stages=_stages(args.stages))
    outcome = pipeline.run_pipeline(config)
    if outcome.error is not None:
        print(f"error: {outcome.error}", file=sys.stderr)
    else:
        print(f"completed {', '.join(outcome.manifest['stages_completed'])}; manifest at "
              f"{os.path.join(config.output_dir, 'manifest.json')}")
    return outcome.status


def cmd_validate(args):
    config = pipeline.load_config(args.config, stages=_stages(args.stages))
    panel = pipeline.validate_config(config)
    print(f"ok: {panel.n_units} units, {len(panel.data)} rows, stages {', '.join(config.stages)}")
    return pipeline.EXIT_OK


def cmd_simulate(args):
    cfg = _load_dgp(args.config, args.seed)
    panel, truth = simulate_panel(cfg)
    os.makedirs(args.out, exist_ok=True)
    panel.to_csv(os.path.join(args.out, "panel.csv"))
    truth.to_json(os.path.join(args.out, "ground_truth.json"))
    with open(os.path.join(args.out, "schema.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(panel.schema.to_dict(), fh, sort_keys=False)
    print(f"wrote {panel.n_units} units to {args.out}")
    return pipeline.EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "simulate": cmd_simulate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PanelSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
