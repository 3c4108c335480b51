"""Command-line entry points.

Every pipeline verb takes one experiment config (TOML or JSON) plus the
common overrides and runs the pipeline through its stage, reusing any
artifacts already present under the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import sys

import click

from .defenses import AugmentationPolicy
from .errors import ConfigError, DataError
from .experiment import compare_runs, load_config, run_experiment


def _overrides(seed, out, profile, device):
    kv = {"seed": seed, "output_dir": out, "profile": profile, "device": device}
    return {k: v for k, v in kv.items() if v is not None}


def _common(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="experiment config (TOML or JSON)")(fn)
    fn = click.option("--seed", type=int, default=None, help="override experiment seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None, help="override output directory")(fn)
    fn = click.option("--profile", type=str, default=None, help="override dataset profile")(fn)
    fn = click.option("--device", type=str, default=None, help="auto|cpu|accelerator index")(fn)
    return fn


@click.group()
def cli():
    """Clean-label backdoor experiments with image-specific triggers."""


def _run_stage(config_path, stage, seed, out, profile, device, mutate=None):
    cfg = load_config(config_path, **_overrides(seed, out, profile, device))
    if mutate:
        mutate(cfg)
    manifest = run_experiment(cfg, through=stage)
    click.echo(f"run {manifest.config_hash}: {manifest.status} "
               f"(stages: {', '.join(manifest.stages_completed)})")
    for name, path in sorted(manifest.artifacts.items()):
        click.echo(f"  {name}: {path}")


@cli.command("train-generator")
@_common
def train_generator_cmd(config_path, seed, out, profile, device):
    """Train the image-specific trigger generator for this config."""
    _run_stage(config_path, "train-generator", seed, out, profile, device)


@cli.command("poison")
@_common
def poison_cmd(config_path, seed, out, profile, device):
    """Build the clean-label poisoned retraining set and its audit."""
    _run_stage(config_path, "poison", seed, out, profile, device)


@cli.command("implant")
@_common
def implant_cmd(config_path, seed, out, profile, device):
    """Fine-tune the victim on the poisoned set to implant the backdoor."""
    _run_stage(config_path, "implant", seed, out, profile, device)


@cli.command("evaluate")
@_common
def evaluate_cmd(config_path, seed, out, profile, device):
    """Run the attack end to end and emit the metrics report."""
    _run_stage(config_path, "evaluate", seed, out, profile, device)


@cli.group()
def defend():
    """Defense evaluations against the configured attack."""


@defend.command("strip")
@_common
def defend_strip_cmd(config_path, seed, out, profile, device):
    """Entropy-based input screening of triggered vs. clean inputs."""
    _run_stage(config_path, "defend-strip", seed, out, profile, device)


@defend.command("augment")
@_common
def defend_augment_cmd(config_path, seed, out, profile, device):
    """Retrain with data augmentation and evaluate the surviving attack."""

    def enable_augmentation(cfg):
        if cfg.implant_cfg.augmentation is None:
            cfg.implant_cfg.augmentation = AugmentationPolicy()

    _run_stage(config_path, "evaluate", seed, out, profile, device,
               mutate=enable_augmentation)


@cli.command("run")
@_common
def run_cmd(config_path, seed, out, profile, device):
    """Full pipeline: generator (if needed), poison, implant, evaluate,
    plus any defenses configured."""
    _run_stage(config_path, "all", seed, out, profile, device)


@cli.command("compare")
@click.argument("manifests", nargs=-1, required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(), help="comparison output directory")
def compare_cmd(manifests, out):
    """Merge completed run manifests into a comparison table and plots."""
    rows = compare_runs(list(manifests), out)
    click.echo(f"compared {len(rows)} runs -> {out}/comparison.csv")


@cli.command("fetch")
@click.option("--profile", required=True, type=str)
@click.option("--dest", required=True, type=click.Path())
@click.option("--archive", type=click.Path(), default=None,
              help="use a local archive instead of downloading")
@click.option("--sha256", type=str, default=None, help="override checksum")
def fetch_cmd(profile, dest, archive, sha256):
    """Download (or ingest) a dataset archive, verify it and lay out the tree."""
    from .fetch import fetch_dataset

    fetch_dataset(profile, dest, archive_path=archive, sha256=sha256)
    click.echo(f"dataset {profile} ready under {dest}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.Abort:
        sys.exit(4)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)
    except Exception as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(4)
    sys.exit(0)


if __name__ == "__main__":
    main()
