"""Command-line front end: train-float, quantize, retrain, sweep, report."""

from __future__ import annotations

import sys

import click

from . import harness, qat
from .nn import save_checkpoint


def _load_config(path) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.from_file(path)


@click.group()
def main():
    """Fixed-point weight quantization experiments."""


def _fail(e: Exception):
    click.echo(f"error: {type(e).__name__}: {e}", err=True)
    sys.exit(1)


@main.command("train-float")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--deterministic/--no-deterministic", default=True)
def train_float_cmd(config_path, seed, out_dir, deterministic):
    """Train the floating-point baseline network."""
    try:
        cfg = _load_config(config_path)
        cfg.deterministic = harness.deterministic_mode(deterministic)
        out = out_dir or cfg.output_dir
        ckpt, record = harness.train_float(cfg, seed)
        path = harness.float_checkpoint_path(out, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, ckpt)
        harness._write_record(path.parent / "float" / f"float_s{seed}", record)
        click.echo(f"float test {record.metric_name}: {record.final_test_metric}")
        click.echo(f"checkpoint: {path}")
    except Exception as e:
        _fail(e)


@main.command("quantize")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--bits", default=2, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--deterministic/--no-deterministic", default=True)
def quantize_cmd(config_path, bits, seed, out_dir, deterministic):
    """Direct quantization of the float checkpoint, no retraining."""
    try:
        cfg = _load_config(config_path)
        cfg.deterministic = harness.deterministic_mode(deterministic)
        out = out_dir or cfg.output_dir
        record = harness.run_cell(cfg, {"bits": bits, "schedule": "direct"}, seed, out)
        click.echo(f"direct {bits}-bit test {record.metric_name}: {record.final_test_metric}")
    except Exception as e:
        _fail(e)


@main.command("retrain")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--bits", default=2, type=int)
@click.option("--schedule", default="adaptive",
              help="direct | conventional | adaptive | adaptive_fixK | gradual:S-E:N")
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--deterministic/--no-deterministic", default=True)
def retrain_cmd(config_path, bits, schedule, seed, out_dir, deterministic):
    """Retrain one (bits, schedule) cell from the float checkpoint."""
    try:
        cfg = _load_config(config_path)
        cfg.deterministic = harness.deterministic_mode(deterministic)
        out = out_dir or cfg.output_dir
        qat.parse_schedule(schedule)  # validate early
        record = harness.run_cell(cfg, {"bits": bits, "schedule": schedule}, seed, out)
        click.echo(f"{schedule} {bits}-bit test {record.metric_name}: {record.final_test_metric}")
    except Exception as e:
        _fail(e)


@main.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--deterministic/--no-deterministic", default=True)
def sweep_cmd(config_path, out_dir, deterministic):
    """Run every configured (bits, schedule, seed) cell and report."""
    try:
        cfg = _load_config(config_path)
        cfg.deterministic = harness.deterministic_mode(deterministic)
        out = out_dir or cfg.output_dir
        records = harness.sweep(cfg, out)
        harness.report(out)
        click.echo(f"{len(records)} runs completed; results in {out}")
    except Exception as e:
        _fail(e)


@main.command("report")
@click.option("--results", "results_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
def report_cmd(results_dir, out_dir):
    """Consolidate run records into results/summary/trajectory files."""
    try:
        summary = harness.report(results_dir, out_dir)
        for key, stats in summary.items():
            click.echo(f"{key}: mean={stats['mean']:.4f}")
    except Exception as e:
        _fail(e)


if __name__ == "__main__":
    main()
