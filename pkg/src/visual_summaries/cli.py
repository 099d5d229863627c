"""Command line interface: ``vissum <stage> --config run.yaml``."""
from __future__ import annotations

import json
import logging
import sys
import click

from . import desk
from .evaluation import ARCHITECTURE_SUMMARY_COUNTS, summary_stats, write_stats_csv
from .pipeline import STAGES, ConfigError, StageError, load_config, run

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 2, 3

def _run_options(f):
    f = click.option("--config", "config", type=click.Path(dir_okay=False), help="Run configuration (YAML).")(f)
    f = click.option("--classes", default=None, help="Comma-separated class list (overrides config).")(f)
    f = click.option("--workers", type=int, default=None, help="Worker threads.")(f)
    f = click.option("--seed", type=int, default=None, help="Random seed.")(f)
    f = click.option("--cache", default=None, type=click.Path(file_okay=False), help="Artifact directory.")(f)
    f = click.option("--force", is_flag=True, help="Recompute even when artifacts exist.")(f)
    return f


def _execute(stage, config, classes, workers, seed, cache, force):
    try:
        cfg = load_config(config, classes=classes, workers=workers, seed=seed, cache=cache)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        manifest = run(stage, cfg, force=force)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except StageError as e:
        click.echo(f"stage failed: {e}", err=True)
        sys.exit(EXIT_STAGE)
    for name, entry in manifest["stages"].items():
        click.echo(f"{name:<10} {entry['status']:<6} items={len(entry['items'])} failures={len(entry['failures'])}")
    click.echo(f"manifest: {cfg.cache / f'manifest-{stage}.json'}")
    sys.exit(EXIT_OK)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Crisp saliency masks and visual summaries of a classifier's classes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


def _stage_command(stage):
    @_run_options
    def cmd(config, classes, workers, seed, cache, force):
        _execute(stage, config, classes, workers, seed, cache, force)

    cmd.__doc__ = "Run every stage in order." if stage == "all" else f"Run the {stage} stage."
    return main.command(name=stage)(cmd)


for _s in STAGES + ("all",):
    _stage_command(_s)


@main.command(name="run")
@click.option("--stage", type=click.Choice(STAGES + ("all",)), default="all", show_default=True)
@_run_options
def run_cmd(stage, config, classes, workers, seed, cache, force):
    """Run one stage (or all) selected by --stage."""
    _execute(stage, config, classes, workers, seed, cache, force)


@main.command(name="make-corpus")
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--per-class", default=30, show_default=True)
@click.option("--eval-per-class", default=20, show_default=True)
@click.option("--classes", default="alpha,beta", show_default=True)
@click.option("--seed", default=0, show_default=True)
def make_corpus(out, per_class, eval_per_class, classes, seed):
    """Write a synthetic part corpus, an evaluation split and a run config."""
    names = [c for c in classes.split(",") if c]
    try:
        desk.write_run_directory(out, per_class, eval_per_class, names, seed)
    except KeyError as e:
        raise click.BadParameter(str(e), param_hint="--classes") from None
    click.echo(f"corpus written to {out}")


@main.command(name="stats")
@click.argument("table", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV output.")
def stats_cmd(table, out):
    """Mean summary count vs accuracy and their rank correlation.

    TABLE is a JSON list of {"model", "counts", "accuracy"}; without it the
    published architecture comparison is used.
    """
    if table:
        with open(table) as fh:
            entries = [(d["model"], d["counts"], d["accuracy"]) for d in json.load(fh)]
    else:
        entries = ARCHITECTURE_SUMMARY_COUNTS
    res = summary_stats(entries)
    for model, count, acc in res.rows:
        click.echo(f"{model:<12} {count:>6g} {acc:>6g}")
    flag = " (degenerate)" if res.degenerate else ""
    click.echo(f"spearman {res.spearman:.4f}{flag}")
    if out:
        write_stats_csv(out, res)


if __name__ == "__main__":
    main()
