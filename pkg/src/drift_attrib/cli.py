"""Command-line entry point: trace, score, exposure, regress, synth, and
validate subcommands, all driven by one TOML run config."""

from __future__ import annotations

import logging
import os
import sys

import click

from . import pipeline
from .config import load_config

logger = logging.getLogger(__name__)


def _setup_logging():
    level = os.environ.get("DRIFT_ATTRIB_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="drift-attrib %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


_GLOBAL_OPTIONS = [
    click.option("--config", "config_path", required=True,
                 type=click.Path(exists=True, dir_okay=False),
                 help="TOML run config."),
    click.option("--out", "out_dir", default=None,
                 type=click.Path(file_okay=False), help="Output directory."),
    click.option("--workers", default=None, type=int,
                 help="Trace worker count."),
    click.option("--seed", default=None, type=int, help="Generator seed."),
    click.option("--check", is_flag=True, help="Run invariant checks."),
    click.option("--dry-run", is_flag=True,
                 help="Validate the config and print the plan; write nothing."),
    click.option("--advect-metric", default=None,
                 type=click.Choice(["faithful", "spherical"])),
]


def _with_global_options(fn):
    for opt in reversed(_GLOBAL_OPTIONS):
        fn = opt(fn)
    return fn


def _load(config_path, out_dir, workers, seed, advect_metric):
    try:
        return load_config(config_path, out_dir=out_dir, workers=workers,
                           seed=seed, advect_metric=advect_metric)
    except Exception as exc:
        raise click.ClickException(f"config error: {exc}") from exc


def _plan(cfg, step: str) -> str:
    return (
        f"plan step={step} out={cfg.out_dir} workers={cfg.workers} "
        f"seed={cfg.seed} grid={cfg.grid.nlat}x{cfg.grid.nlon} "
        f"period={cfg.period_start}..{cfg.period_end} "
        f"metric={cfg.advect_metric}"
    )


def _run(step, runner, config_path, out_dir, workers, seed, check,
         dry_run, advect_metric, checker=None):
    _setup_logging()
    cfg = _load(config_path, out_dir, workers, seed, advect_metric)
    click.echo(_plan(cfg, step))
    if dry_run:
        return
    try:
        paths = runner(cfg)
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    for path in paths:
        click.echo(f"wrote {path}")
    if check and checker is not None:
        failures = checker(cfg)
        for failure in failures:
            click.echo(f"check failed: {failure}", err=True)
        if failures:
            raise click.ClickException("invariant checks failed")


@click.group()
@click.version_option()
def main():
    """Ocean-current transport scoring and exposure attribution pipeline."""


@main.command()
@_with_global_options
def trace(config_path, out_dir, workers, seed, check, dry_run, advect_metric):
    """Write diagnostic streamlines and score heatmaps."""
    _run("trace", pipeline.run_trace_cmd, config_path, out_dir, workers,
         seed, check, dry_run, advect_metric)


@main.command()
@_with_global_options
def score(config_path, out_dir, workers, seed, check, dry_run, advect_metric):
    """Trace all senders and days; write the monthly score matrices."""
    _run("score", pipeline.run_score, config_path, out_dir, workers, seed,
         check, dry_run, advect_metric, checker=pipeline.check_scores)


@main.command()
@_with_global_options
def exposure(config_path, out_dir, workers, seed, check, dry_run, advect_metric):
    """Assemble the birth exposure panel and the exclusion report."""
    _run("exposure", pipeline.run_exposure, config_path, out_dir, workers,
         seed, check, dry_run, advect_metric)


@main.command()
@_with_global_options
def regress(config_path, out_dir, workers, seed, check, dry_run, advect_metric):
    """Run the configured regression specs against the panel."""
    _run("regress", pipeline.run_regress, config_path, out_dir, workers,
         seed, check, dry_run, advect_metric)


@main.command()
@_with_global_options
def synth(config_path, out_dir, workers, seed, check, dry_run, advect_metric):
    """Generate a synthetic dataset bundle with a truth sidecar."""
    _run("synth", pipeline.run_synth, config_path, out_dir, workers, seed,
         check, dry_run, advect_metric)


@main.command()
@_with_global_options
def validate(config_path, out_dir, workers, seed, check, dry_run, advect_metric):
    """Parse the config, check referenced files, and print the plan."""
    _setup_logging()
    cfg = _load(config_path, out_dir, workers, seed, advect_metric)
    missing = []
    for key in ("currents", "concentration", "births", "mask", "trade", "panel"):
        path = cfg.path(key)
        if path is not None and not path.exists():
            missing.append(f"{key}: {path}")
    click.echo(_plan(cfg, "validate"))
    if missing:
        for entry in missing:
            click.echo(f"missing input {entry}", err=True)
        raise click.ClickException("referenced files are missing")
    click.echo("config ok")


if __name__ == "__main__":
    main()
