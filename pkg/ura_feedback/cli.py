"""
Command-line front end: resolve an experiment configuration from presets, a YAML file
and overrides, run it (optionally as a sweep or a target-PUPE search) and write the
result files.
"""
import argparse
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from ura_feedback.config import ConfigError, get_config
from ura_feedback.harness import (
    find_min_ebn0,
    genie_feedback_mode,
    run_experiment,
    sweep_parameter,
    with_updates,
)
from ura_feedback.models import ExperimentConfig, RunManifest
from ura_feedback.results import write_results
from ura_feedback.tx_chain import ResourceLimitError
from ura_feedback.utils import GracefulShutdown, Timer, format_duration, setup_logging

logger = logging.getLogger(__name__)

RANGE_ERRORS = {"greater_than", "greater_than_equal", "less_than", "less_than_equal"}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="URA threshold-feedback Monte-Carlo simulator")
    parser.add_argument("--config", help="YAML file of experiment keys (may name a preset)")
    parser.add_argument("--preset", help="Named preset from the presets file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one experiment key (repeatable)")
    parser.add_argument("--sweep", metavar="KEY=V1,V2,...", help="Run one experiment per value of KEY")
    parser.add_argument("--target-pupe", type=float,
                        help="Search the payload Eb/N0 that reaches this overall PUPE")
    parser.add_argument("--seed", type=int, help="Global seed (overrides the config)")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--jobs", type=int, help="Parallel trial workers")
    parser.add_argument("--genie-feedback", action="store_true", default=None,
                        help="Error-free feedback reception")
    return parser.parse_args(argv)


def _field_range(key: str) -> str:
    field = ExperimentConfig.model_fields.get(key)
    if field is None:
        return "n/a"
    low = high = None
    low_open = high_open = False
    for constraint in field.metadata:
        if getattr(constraint, "ge", None) is not None:
            low = constraint.ge
        if getattr(constraint, "gt", None) is not None:
            low, low_open = constraint.gt, True
        if getattr(constraint, "le", None) is not None:
            high = constraint.le
        if getattr(constraint, "lt", None) is not None:
            high, high_open = constraint.lt, True
    left = "(" if low_open or low is None else "["
    right = ")" if high_open or high is None else "]"
    return f"{left}{'-inf' if low is None else low}, {'inf' if high is None else high}{right}"


def _describe(error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        key = str(item["loc"][0]) if item["loc"] else "config"
        if item["type"] == "extra_forbidden":
            messages.append(f"unknown key '{key}'")
        elif item["type"] == "missing":
            messages.append(f"missing required key '{key}'")
        elif item["type"] in RANGE_ERRORS:
            messages.append(f"{key}: {item['msg']} (accepted range {_field_range(key)})")
        else:
            messages.append(f"{key}: {item['msg']}")
    return "; ".join(messages)


def required_keys() -> List[str]:
    return [name for name, f in ExperimentConfig.model_fields.items() if f.is_required()]


def parse_override(item: str) -> Tuple[str, Any]:
    """'key=value' with the value parsed as a YAML scalar."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} must have the form key=value")
    return key.strip(), yaml.safe_load(raw)


def parse_sweep(spec: str) -> Tuple[str, List[Any]]:
    key, sep, raw = spec.partition("=")
    if not sep or not key.strip() or not raw.strip():
        raise ConfigError(f"sweep {spec!r} must have the form key=v1,v2,...")
    key = key.strip()
    if key not in ExperimentConfig.model_fields:
        raise ConfigError(f"unknown sweep key '{key}'")
    return key, [yaml.safe_load(v) for v in raw.split(",")]


def parse_config(path: Optional[str] = None, presets_path: Optional[str] = None,
                 overrides: Sequence[str] = (), preset: Optional[str] = None) -> ExperimentConfig:
    """
    Resolve preset -> file -> overrides into a validated ExperimentConfig. Every failure
    is a ConfigError naming the key involved.
    """
    file_data: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found at: {path}")
        try:
            with open(path, "r") as f:
                file_data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Error parsing YAML config {path}: {e}") from e
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path} must contain a mapping of experiment keys")

    preset = preset or file_data.pop("preset", None)
    file_data.pop("preset", None)
    if not file_data and preset is None and not overrides:
        raise ConfigError(f"empty configuration; required keys: {', '.join(required_keys())}")

    merged: Dict[str, Any] = {}
    if preset is not None:
        presets = get_config().load_presets(presets_path)
        if preset not in presets:
            raise ConfigError(f"unknown preset '{preset}'; available: {', '.join(sorted(presets))}")
        merged.update(presets[preset] or {})
        merged.setdefault("name", preset)
    merged.update(file_data)
    for item in overrides:
        key, value = parse_override(item)
        merged[key] = value

    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def resolve(manifest: RunManifest) -> ExperimentConfig:
    cfg = parse_config(manifest.config_path, overrides=manifest.overrides, preset=manifest.preset)
    cfg = with_updates(cfg, seed=manifest.seed)
    if manifest.genie_feedback is not None:
        cfg = genie_feedback_mode(cfg, manifest.genie_feedback)
    return cfg


def run(manifest: RunManifest) -> int:
    """Run what the manifest describes and write results.csv, summary.json and config.yaml."""
    try:
        cfg = resolve(manifest)
        with Timer(f"run {manifest.name}") as timer:
            with GracefulShutdown() as shutdown:
                if manifest.sweep:
                    key, values = parse_sweep(manifest.sweep)
                    results = sweep_parameter(cfg, key, values, manifest.jobs, shutdown)
                else:
                    results = [run_experiment(cfg, manifest.jobs)]

            if manifest.target_search:
                for result in results:
                    result.summary["target_search"] = find_min_ebn0(result.config, manifest.jobs).to_dict()

        if not results:
            logger.error("No experiment finished; nothing to write")
            return 1
        rows = pd.concat([r.rows for r in results], ignore_index=True)
        if len(results) == 1:
            summary = results[0].summary
        else:
            summary = {"seed": cfg.seed, "points": [r.summary for r in results]}
        write_results(manifest.output_dir, rows, summary, [r.config for r in results])
        logger.info(f"Run {manifest.name} completed in {format_duration(timer.duration)}")
        return 0
    except (ConfigError, ResourceLimitError) as e:
        logger.error(f"Configuration error: {e}")
        return 1
    except Exception as e:
        logger.error(f"Run {manifest.name} failed: {e}")
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = parse_args(argv)
    try:
        config = get_config()
    except ConfigError as e:
        setup_logging()
        logger.error(str(e))
        return 1
    setup_logging(config.logging.level, config.logging.file)

    overrides = list(args.overrides)
    if args.target_pupe is not None:
        overrides.append(f"target_pupe={args.target_pupe}")
    try:
        cfg = parse_config(args.config, overrides=overrides, preset=args.preset)
        manifest = RunManifest(
            name=cfg.name,
            output_dir=args.out or os.path.join(config.runner.output_dir, cfg.name),
            seed=cfg.seed if args.seed is None else args.seed,
            jobs=args.jobs or config.runner.jobs,
            config_path=args.config,
            preset=args.preset,
            overrides=overrides,
            sweep=args.sweep,
            target_search=args.target_pupe is not None,
            genie_feedback=args.genie_feedback,
        )
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return 1
    return run(manifest)
