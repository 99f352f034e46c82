"""Command-line entry point: ``progrecal <stage> [options]``.

Every option can also be set through an environment variable named
``PROGRECAL_<OPTION>`` (for example ``PROGRECAL_SEED=3``); explicit flags win.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import harness
from .errors import ProgrecalError

ENV_PREFIX = "PROGRECAL"


def _options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), envvar=f"{ENV_PREFIX}_CONFIG", help="YAML or JSON experiment config."),
        click.option("--seed", type=int, envvar=f"{ENV_PREFIX}_SEED", help="Master seed (overrides the config)."),
        click.option("--out", type=click.Path(file_okay=False), envvar=f"{ENV_PREFIX}_OUT", default="runs", show_default=True, help="Output root."),
        click.option("--task", type=click.Choice(["chest", "knee"]), envvar=f"{ENV_PREFIX}_TASK", help="Task analog."),
        click.option("--lambda", "lam", type=float, envvar=f"{ENV_PREFIX}_LAMBDA", help="Alignment loss weight."),
        click.option("--folds", type=int, envvar=f"{ENV_PREFIX}_FOLDS", help="Cross-validation folds (1 = fixed split)."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def build_config(config_path, seed, task, lam, folds) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(config_path) if config_path else harness.ExperimentConfig(task=task or "chest")
    changes = {}
    if task is not None:
        changes["task"] = task
    if seed is not None:
        changes["seed"] = seed
    if lam is not None:
        changes["recal.lam"] = lam
    if folds is not None:
        changes["folds"] = folds
    return cfg.replace(**changes) if changes else cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Temporal-recalibration experiments on synthetic progression data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


def _stage(name, fn):
    @cli.command(name)
    @_options
    def command(config_path, seed, out, task, lam, folds):
        cfg = build_config(config_path, seed, task, lam, folds)
        path = fn(cfg, out)
        click.echo(f"{name}: wrote {path}")

    command.__doc__ = f"Run the `{name}` stage."
    return command


_stage("simulate", harness.simulate)
_stage("pretrain-snapshot", harness.pretrain_snapshot)
_stage("pretrain-temporal", harness.pretrain_temporal)
_stage("finetune", harness.finetune_stage)


@cli.command()
@_options
@click.option("--untrained", is_flag=True, help="Score a freshly initialised model (needs only `simulate`).")
def evaluate(config_path, seed, out, task, lam, folds, untrained):
    """Score finetuned models on held-out data and write results.json."""
    cfg = build_config(config_path, seed, task, lam, folds)
    results = harness.evaluate_stage(cfg, out, untrained=untrained)
    if untrained:
        click.echo(json.dumps(results["reports"]["untrained"]["metrics"], indent=2, sort_keys=True))
    else:
        click.echo(json.dumps(results["summary"], indent=2, sort_keys=True))


@cli.command()
@_options
def run(config_path, seed, out, task, lam, folds):
    """Run every stage, including the lambda=0 baseline."""
    cfg = build_config(config_path, seed, task, lam, folds)
    results = harness.run_full_pipeline(cfg, out)
    click.echo(json.dumps(results["summary"], indent=2, sort_keys=True))


@cli.command()
@_options
@click.option("--axis", type=click.Choice(sorted(harness.ABLATION_AXES)), required=True, envvar=f"{ENV_PREFIX}_AXIS")
def ablate(config_path, seed, out, task, lam, folds, axis):
    """Run every setting of one ablation axis with shared seeds."""
    cfg = build_config(config_path, seed, task, lam, folds)
    summary = harness.ablate(cfg, axis, out)
    click.echo(summary["table"])


@cli.command()
@click.option("--seed", type=int, default=0, envvar=f"{ENV_PREFIX}_SEED")
@click.option("--tol", type=float, default=1e-4, show_default=True)
def gradcheck(seed, tol):
    """Finite-difference check of every differentiable op and composed loss."""
    from .gradcheck import standard_suite

    results = standard_suite(seed)
    width = max(len(k) for k in results)
    for name, err in results.items():
        click.echo(f"{name:<{width}}  {err:.3e}  {'ok' if err < tol else 'FAIL'}")
    worst = max(results.values())
    click.echo(f"max relative error {worst:.3e} (tolerance {tol:g})")
    if worst >= tol:
        raise SystemExit(1)


@cli.command("show-config")
@_options
@click.option("--schema", is_flag=True, help="Print the JSON schema instead.")
def show_config(config_path, seed, out, task, lam, folds, schema):
    """Print the resolved config as YAML (or its JSON schema)."""
    if schema:
        click.echo(json.dumps(harness.config_schema(), indent=2))
        return
    cfg = build_config(config_path, seed, task, lam, folds)
    click.echo(cfg.to_yaml(), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ProgrecalError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
