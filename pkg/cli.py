# cli.py

from pathlib import Path
from typing import List, Optional

import typer

from errors import LevyLiborError
from experiment import bench_paths, bench_tenor, load_config, run_experiment
from monitor import log

app = typer.Typer(
    help="Monte Carlo caplet pricing in the Levy LIBOR model: scheme and drift-mode experiments, timing benchmarks.",
    no_args_is_help=True,
    add_completion=False,
)

CONFIG_ARG = typer.Argument(..., help="Experiment JSON document")
OUT_DIR_OPT = typer.Option(None, "--out-dir", help="Override output.directory")
SEED_OPT = typer.Option(None, "--seed", help="Override sim.seed")


def parse_int_list(text: str, option: str) -> List[int]:
    try:
        values = [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError:
        raise typer.BadParameter(f"{option} expects a comma separated list of integers, got '{text}'")
    if not values:
        raise typer.BadParameter(f"{option} needs at least one value")
    return values


def _fail(e: LevyLiborError):
    log("cli", f"{type(e).__name__}: {e}")
    raise typer.Exit(code=e.exit_code)


@app.command()
def run(
    config: Path = CONFIG_ARG,
    out_dir: Optional[Path] = OUT_DIR_OPT,
    seed: Optional[int] = SEED_OPT,
):
    """Price the caplet grid for every run pair and write diff tables against the base run."""
    try:
        cfg = load_config(config, seed=seed, out_dir=out_dir)
        report = run_experiment(cfg)
    except LevyLiborError as e:
        _fail(e)
    for path in report.files:
        typer.echo(str(path))
    typer.echo(str(report.manifest_path))


@app.command("bench-paths")
def bench_paths_cmd(
    config: Path = CONFIG_ARG,
    counts: str = typer.Option("2000,4000,8000,16000", "--counts", help="Comma separated path counts"),
    repeats: int = typer.Option(3, "--repeats", min=1, help="Timed runs per point (best is kept)"),
    out_dir: Optional[Path] = OUT_DIR_OPT,
    seed: Optional[int] = SEED_OPT,
):
    """Time the Picard and Full schemes (second-order drift) against the number of paths."""
    values = parse_int_list(counts, "--counts")
    try:
        cfg = load_config(config, seed=seed, out_dir=out_dir)
        report = bench_paths(cfg, values, repeats)
    except LevyLiborError as e:
        _fail(e)
    typer.echo(str(report.csv_path))
    typer.echo(str(report.summary_path))


@app.command("bench-tenor")
def bench_tenor_cmd(
    config: Path = CONFIG_ARG,
    sizes: str = typer.Option("5,9,13", "--sizes", help="Comma separated numbers of rates N"),
    kernel_paths: int = typer.Option(256, "--kernel-paths", min=1, help="States per timed drift call"),
    repeats: int = typer.Option(3, "--repeats", min=1, help="Timed runs per point (best is kept)"),
    out_dir: Optional[Path] = OUT_DIR_OPT,
    seed: Optional[int] = SEED_OPT,
):
    """Time the exact and second-order drift kernels against the number of rates on synthetic tenors."""
    values = parse_int_list(sizes, "--sizes")
    try:
        cfg = load_config(config, seed=seed, out_dir=out_dir)
        report = bench_tenor(cfg, values, repeats, kernel_paths=kernel_paths)
    except LevyLiborError as e:
        _fail(e)
    typer.echo(str(report.csv_path))
    typer.echo(str(report.summary_path))
