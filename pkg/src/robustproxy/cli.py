"""Command-line interface: one verb per pipeline stage plus ``run`` for the
whole thing and ``report`` for regenerating reports from a finished run."""

import os
import sys

import click

from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .pipeline import STAGES, Pipeline


def _load(config_path, seed, out):
    if config_path:
        cfg = load_config(config_path)
    else:
        cfg = ExperimentConfig()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      help="YAML experiment config")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the root seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="override the output directory")(fn)
    fn = click.option("--resume/--no-resume", default=True,
                      help="reuse cached stage outputs")(fn)
    return fn


@click.group()
def main():
    """Robust-channel distillation, class-wise robust perturbations, and
    robust proxy fine-tuning at desk scale."""


def _run_until(stage, config_path, seed, out, resume):
    try:
        cfg = _load(config_path, seed, out)
        pipe = Pipeline(cfg, resume=resume)
        ran = pipe.run(until=stage)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    for name, executed in ran.items():
        click.echo(f"{name}: {'ran' if executed else 'cached'}")
    click.echo(f"artifacts under {pipe.root}")


def _make_stage_command(stage):
    @main.command(name={"proxies": "proxies", "crp": "crp"}.get(stage, stage),
                  help=f"run the pipeline up to and including '{stage}'")
    @_common
    def cmd(config_path, seed, out, resume, _stage=stage):
        _run_until(_stage, config_path, seed, out, resume)
    return cmd


for _s in ("distill", "crp", "proxies", "pretrain", "finetune", "attack",
           "analyze"):
    _make_stage_command(_s)


@main.command(help="run every stage and produce the final report")
@_common
def run(config_path, seed, out, resume):
    _run_until("report", config_path, seed, out, resume)


@main.command(help="regenerate the report from a finished run directory")
@click.argument("run_dir", type=click.Path(exists=True))
@_common
def report(run_dir, config_path, seed, out, resume):
    from .report import generate_report
    cfg = _load(config_path, seed, out or run_dir)
    stage_root = os.path.join(run_dir, "stages")
    if not os.path.isdir(stage_root):
        stage_root = run_dir
    report_dir = os.path.join(stage_root, "report")
    os.makedirs(report_dir, exist_ok=True)
    verdicts = generate_report(cfg, stage_root, report_dir)
    failed = [f"{c}:{name}" for c, checks in verdicts.items()
              for name, ok in checks.items() if not ok]
    click.echo(f"report written to {report_dir}")
    if failed:
        click.echo(f"sanity FAIL: {', '.join(failed)}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
