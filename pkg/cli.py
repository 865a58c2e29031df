import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table
from typer.main import get_command

from backend import settings
from backend.core.codec import decode_stream, encode_frames
from backend.core.dataset import FeatureScaler, generate_cohort
from backend.core.errors import DataError, HeadTrackError, NumericError
from backend.core.experiment import run_lopo, windows_for
from backend.core.kinematics import Skeleton, generate_cloud
from backend.core.report import JOINT_COLUMNS, emit_report, load_report, report_table
from backend.core.rotations import smooth_ground_truth
from backend.core.storage import (
    import_ground_truth,
    load_cohort,
    read_impedance_csv,
    read_pose_csv,
    save_cohort,
    write_impedance_csv,
    write_pose_csv,
)
from backend.core.training import evaluate, load_model, save_model, train as train_model
from backend.core.transformer import PoseTransformer
from backend.models import AppConfig

logger = logging.getLogger(__name__)
console = Console()

app = typer.Typer(
    help="Head and jaw pose from 4-channel bio-impedance: data, training and evaluation.",
    no_args_is_help=True,
    add_completion=False,
)

SeedOption = typer.Option(None, "--seed", help="Seed for every random source (defaults to HEADTRACK_SEED)")
ConfigOption = typer.Option(None, "--config", help="YAML config file (defaults to HEADTRACK_CONFIG)")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _config(config: Optional[Path], seed: Optional[int]) -> AppConfig:
    from main import configure_logging

    configure_logging()
    cfg = settings.load_app_config(config)
    return cfg.with_seed(settings.seed if seed is None else seed)


def _data_dir(data: Optional[Path]) -> Path:
    return data or settings.data_dir


@app.command()
def gen(
    out: Optional[Path] = typer.Option(None, "--out", help="Cohort directory (defaults to HEADTRACK_DATA_DIR)"),
    persons: Optional[List[int]] = typer.Option(None, "--person", help="Person ids to generate (repeatable)"),
    minutes: Optional[float] = typer.Option(None, "--minutes", min=0.0, help="Session length override"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Generate a synthetic cohort: one session directory per person."""
    cfg = _config(config, seed)
    synth = cfg.synth
    if persons:
        unknown = set(persons) - set(synth.persons)
        if unknown:
            raise DataError(f"No ranges configured for persons {sorted(unknown)}")
        synth = synth.model_copy(update={"persons": {p: synth.persons[p] for p in persons}})
    if minutes is not None:
        synth = synth.model_copy(update={"duration_frames": max(1, int(round(minutes * 60 * synth.fps)))})

    root = save_cohort(_data_dir(out), generate_cohort(synth, cfg.limits), cfg.fingerprint())
    console.print(f"[green]Wrote {len(synth.persons)} sessions to {root}[/green]")


@app.command()
def smooth(
    source: Path = typer.Argument(..., help="Pose track file (frame + 9 angle columns)"),
    output: Optional[Path] = typer.Argument(None, help="Smoothed pose track file"),
    person: Optional[int] = typer.Option(None, "--person", help="Import into this person's session directory"),
    data: Optional[Path] = typer.Option(None, "--data", help="Cohort directory for --person"),
    sigma: Optional[float] = typer.Option(None, "--sigma", min=0.0, help="Gaussian bandwidth in frames"),
    half_window: Optional[int] = typer.Option(None, "--half-window", min=0, help="Half window K in frames"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Smooth a ground-truth pose track, or import it smoothed into a session."""
    cfg = _config(config, seed)
    params = cfg.smoothing.model_copy(
        update={k: v for k, v in {"sigma": sigma, "half_window": half_window}.items() if v is not None}
    )
    if person is not None:
        target = import_ground_truth(_data_dir(data), person, source, params)
    elif output is not None:
        target = write_pose_csv(output, smooth_ground_truth(read_pose_csv(source), params))
    else:
        raise click.UsageError("Give an OUTPUT file or --person")
    console.print(f"[green]Smoothed track written to {target}[/green]")


@app.command()
def encode(
    source: Path = typer.Argument(..., help="Impedance CSV (timestamp, mag1, phase1, ...)"),
    output: Path = typer.Argument(..., help="Binary frame stream"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Encode an impedance CSV into concatenated wire frames."""
    _config(config, seed)
    timestamps, features = read_impedance_csv(source)
    output.write_bytes(encode_frames(timestamps, features))
    console.print(f"Encoded {len(timestamps)} frames to {output}")


@app.command()
def decode(
    source: Path = typer.Argument(..., help="Binary frame stream"),
    output: Path = typer.Argument(..., help="Impedance CSV"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Decode a wire-frame stream into an impedance CSV."""
    _config(config, seed)
    if not source.is_file():
        raise DataError(f"Frame stream not found: {source}")
    timestamps, features = decode_stream(source.read_bytes())
    write_impedance_csv(output, timestamps, features)
    console.print(f"Decoded {len(timestamps)} frames to {output}")


@app.command()
def train(
    out: Path = typer.Option(Path("model.imph"), "--out", help="Checkpoint file"),
    data: Optional[Path] = typer.Option(None, "--data", help="Cohort directory"),
    exclude: Optional[List[int]] = typer.Option(None, "--exclude", help="Person ids kept out of training"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Train one model on every non-excluded person and save a checkpoint."""
    cfg = _config(config, seed)
    cohort = load_cohort(_data_dir(data))
    ids = [p for p in cohort if p not in set(exclude or [])]
    if not ids:
        raise DataError("No persons left to train on")

    val_id = ids[-1] if cfg.train.patience and len(ids) > 1 else None
    train_ids = [p for p in ids if p != val_id]
    x, y = windows_for(cohort, train_ids, cfg)
    scaler = FeatureScaler.fit(x)
    validation = None
    if val_id is not None:
        x_val, y_val = windows_for(cohort, [val_id], cfg)
        validation = (scaler.transform(x_val), y_val)

    model = PoseTransformer(cfg.model)
    result = train_model(model, scaler.transform(x), y, cfg.train, cfg.limits, validation)
    save_model(out, model, scaler)
    last = result.history[-1]
    console.print(
        f"[green]Trained {len(result.history)} epochs (best {result.best_epoch}), "
        f"final loss {last.loss:.5f}; checkpoint {out}[/green]"
    )


@app.command("eval")
def evaluate_checkpoint(
    checkpoint: Path = typer.Argument(..., help="Checkpoint written by train"),
    data: Optional[Path] = typer.Option(None, "--data", help="Cohort directory"),
    persons: Optional[List[int]] = typer.Option(None, "--person", help="Persons to evaluate (default: all)"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Score a checkpoint with per-joint MPJPE and MPVE."""
    cfg = _config(config, seed)
    model, scaler = load_model(checkpoint)
    cohort = load_cohort(_data_dir(data))
    skeleton = Skeleton.from_config(cfg.skeleton)
    cloud = generate_cloud(cfg.cloud, skeleton)

    table = Table(title=f"Evaluation of {checkpoint.name} (mm)")
    table.add_column("Person")
    for joint in JOINT_COLUMNS:
        table.add_column(f"{joint} MPJPE", justify="right")
        table.add_column(f"{joint} MPVE", justify="right")

    run_cfg = cfg.model_copy(update={"model": model.config})
    for pid in persons or list(cohort):
        if pid not in cohort:
            raise DataError(f"Person {pid} is not in the cohort")
        x, y = windows_for(cohort, [pid], run_cfg)
        mpjpe, mpve = evaluate(model, scaler.transform(x), y, skeleton, cloud)
        cells = []
        for joint in ("neck", "head", "jaw", "avg"):
            cells += [f"{getattr(mpjpe, joint):.1f}", f"{getattr(mpve, joint):.1f}"]
        table.add_row(str(pid), *cells)
    console.print(table)


@app.command()
def lopo(
    out: Path = typer.Option(Path("reports/lopo"), "--out", help="Report path stem"),
    data: Optional[Path] = typer.Option(None, "--data", help="Cohort directory (synthesised if omitted)"),
    workers: int = typer.Option(1, "--workers", min=1, help="Folds trained in parallel"),
    ablation: bool = typer.Option(True, "--ablation/--no-ablation", help="Also train the MSE-only variant"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Run leave-one-person-out cross-validation and write the report."""
    cfg = _config(config, seed)
    cohort = load_cohort(data) if data is not None else generate_cohort(cfg.synth, cfg.limits)
    report = run_lopo(cfg, cohort, workers=workers, ablation=ablation)

    written = emit_report(report, out.with_suffix(".csv"), "both")
    json_path = out.with_suffix(".json")
    json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    _print_report(report)
    console.print(f"Report written to {', '.join(str(p) for p in written + [json_path])}")


@app.command()
def report(
    source: Path = typer.Argument(..., help="Report JSON written by lopo"),
    out: Optional[Path] = typer.Option(None, "--out", help="Re-emit to this file"),
    fmt: Optional[str] = typer.Option(None, "--format", help="csv, yaml or both"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Show a saved report and optionally re-emit it."""
    _config(config, seed)
    loaded = load_report(source)
    _print_report(loaded)
    if out is not None:
        for path in emit_report(loaded, out, fmt):
            console.print(f"Wrote {path}")


@app.command()
def serve(
    host: str = typer.Option("127.0.0.1", "--host"),
    port: int = typer.Option(8000, "--port"),
    seed: Optional[int] = SeedOption,
    config: Optional[Path] = ConfigOption,
):
    """Start the HTTP API."""
    import uvicorn

    _config(config, seed)
    uvicorn.run("main:app", host=host, port=port)


def _print_report(loaded) -> None:
    frame = report_table(loaded)
    table = Table(title=f"LOPO report (mm), fingerprint {loaded.fingerprint}, seed {loaded.seed}")
    for column in frame.columns:
        table.add_column(column, justify="left" if column == "Row" else "right")
    for _, row in frame.iterrows():
        table.add_row(row["Row"], *(f"{row[c]:.1f}" for c in frame.columns[1:]))
    console.print(table)

    if loaded.comparisons:
        comparison = Table(title="Average MPJPE per predictor (mm)")
        comparison.add_column("Predictor")
        comparison.add_column("Average", justify="right")
        for row in loaded.comparisons:
            comparison.add_row(row.label, f"{row.average_mpjpe:.1f}")
        console.print(comparison)

    composed = loaded.composed
    console.print(
        f"{composed.label}: reference {composed.reference_mm:.1f} mm, measured "
        f"{composed.measured_mm:.1f} mm, composed {composed.composed_mm:.1f} mm"
    )


def run(argv: Optional[List[str]] = None) -> int:
    """
    Run the CLI and map failures to exit codes: 1 usage, 2 data, 3 numeric.
    """
    try:
        result = get_command(app).main(args=argv, prog_name="headtrack", standalone_mode=False)
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        console.print(f"[red]Numeric failure: {e}[/red]")
        return EXIT_NUMERIC
    except (HeadTrackError, ValidationError, FileNotFoundError, ValueError) as e:
        logger.error(f"Data error: {e}")
        console.print(f"[red]Error: {e}[/red]")
        return EXIT_DATA
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(run())
