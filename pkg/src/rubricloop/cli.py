from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import polars as pl
import typer
from rich.console import Console
from rich.table import Table

from . import __version__
from .config import RunConfig, load_settings_with_env, parse_override
from .datasets import load_dataset, partitions, write_dataset, write_graded_records
from .embeddings import HashingEmbedder, embedder_from_settings
from .errors import ConfigError, RubricLoopError
from .gateway import Gateway
from .grader import Grader, GraderConfig
from .logging_config import setup_logging
from .models import Dataset, RoundRecord, RubricCandidate, mode_label
from .orchestrator import infer, run_optimization
from .run_store import RunStore
from .testbed import available_scenarios, load_scenario

# Human-readable output goes to stderr; stdout carries JSON / CSV only.
console = Console(stderr=True)
app = typer.Typer(
    help="rubricloop - confusion-aware rubric optimization for LLM graders",
    no_args_is_help=True,
    epilog="""
Examples:

  Offline closed loop on the bundled scenario:
    $ rubricloop optimize --scenario falcon --seed 7 --out runs/falcon

  Optimize a rubric on your own labeled data:
    $ rubricloop optimize --config run.yaml --dataset answers.jsonl --rubric rubric.txt

  Score a rubric on a labeled set, or grade an unlabeled one:
    $ rubricloop evaluate --rubric best.txt --dataset test.jsonl
    $ rubricloop grade --rubric best.txt --dataset new.jsonl

  Look at a finished run:
    $ rubricloop inspect runs/falcon --csv > trajectory.csv
""",
)


# ---------- Helper Functions ----------


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map library errors onto exit codes: 2 for configuration, 1 for everything else."""
    try:
        yield
    except ConfigError as exc:
        console.print(f"Error: {exc}", style="red", markup=False)
        raise typer.Exit(code=2)
    except RubricLoopError as exc:
        console.print(f"Error: {exc}", style="red", markup=False)
        raise typer.Exit(code=1)


def _emit(payload: Dict[str, Any]) -> None:
    typer.echo(json.dumps(payload, sort_keys=True))


def _load_config(
    ctx: typer.Context, config: Optional[Path], sets: List[str], extra: Dict[str, Any]
) -> RunConfig:
    overrides: Dict[str, Any] = dict(parse_override(item) for item in sets)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    env_file = (ctx.obj or {}).get("env_file")
    return load_settings_with_env(config, env_file, overrides)


def _environment(
    cfg: RunConfig, dataset_path: Optional[Path]
) -> Tuple[Dataset, Gateway, Optional[str]]:
    """Dataset, gateway and default rubric for either a scenario or real data."""
    if cfg.scenario:
        scenario, gateway = load_scenario(cfg.scenario, cfg.provider)
        dataset = load_dataset(dataset_path, scenario.num_classes) if dataset_path else scenario.dataset()
        return dataset, gateway, scenario.rubric
    if dataset_path is None:
        raise ConfigError("--dataset is required unless a scenario is selected")
    return load_dataset(dataset_path), Gateway.from_settings(cfg.provider), None


def _rubric(path: Path) -> RubricCandidate:
    return RubricCandidate.root(path.read_text(encoding="utf-8"), candidate_id=path.stem)


def _round_table(records: List[RoundRecord]) -> Table:
    table = Table(title="Rounds")
    for column in ("Round", "Accuracy", "Kappa", "Top mode", "Patches", "Pool", "Leading", "Val kappa"):
        table.add_column(column, justify="right" if column not in ("Top mode", "Leading") else "left")
    for record in records:
        best = record.best_report
        table.add_row(
            str(record.round),
            f"{best.accuracy:.3f}",
            f"{best.kappa:.3f}",
            mode_label(record.modes[0].key) if record.modes else "-",
            str(len(record.patches) + (1 if record.consolidated else 0)),
            str(len(record.pool_scores)),
            record.leading_kind.value,
            f"{record.validation.kappa:.3f}" if record.validation else "-",
        )
    return table


# ---------- Commands ----------


@app.callback()
def main(
    ctx: typer.Context,
    env_file: Optional[Path] = typer.Option(
        None, "--env-file", help="Optional .env file to load (explicit only)."
    ),
    log_level: str = typer.Option("INFO", "--log-level", help="Logging level"),
) -> None:
    """Initialize shared context."""
    setup_logging(log_level)
    ctx.obj = {"env_file": env_file}


@app.command()
def optimize(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(
        None, "--config", exists=True, dir_okay=False, help="YAML run configuration."
    ),
    dataset: Optional[Path] = typer.Option(
        None, "--dataset", exists=True, dir_okay=False, help="Labeled NDJSON or CSV dataset."
    ),
    rubric: Optional[Path] = typer.Option(
        None, "--rubric", exists=True, dir_okay=False, help="Initial rubric text file."
    ),
    scenario: Optional[str] = typer.Option(None, "--scenario", help="Packaged offline scenario."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for splits and sampling."),
    sets: List[str] = typer.Option([], "--set", help="Config override key=value (repeatable)."),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory."),
    baseline: bool = typer.Option(False, "--baseline", help="Use aggregate feedback instead of per-mode."),
    resume_at: Optional[int] = typer.Option(
        None, "--resume-at", min=1, help="Reload rounds before this one from --out and continue."
    ),
) -> None:
    """Optimize a rubric and write the run directory."""
    with _exit_codes():
        cfg = _load_config(
            ctx,
            config,
            sets,
            {
                "seed": seed,
                "scenario": scenario,
                "run_dir": str(out) if out else None,
                "baseline_mode": True if baseline else None,
            },
        )
        data, gateway, default_rubric = _environment(cfg, dataset)
        text = rubric.read_text(encoding="utf-8") if rubric else cfg.rubric_text() or default_rubric
        store = RunStore(cfg.run_dir)
        result = run_optimization(
            cfg,
            data,
            gateway,
            embedder=HashingEmbedder() if cfg.scenario else embedder_from_settings(cfg.provider),
            store=store,
            resume_at=resume_at,
            initial_rubric=text,
        )

    if result.rounds:
        console.print(_round_table(result.rounds))
    val = result.val_report
    if val is not None:
        console.print(f"Validation: accuracy {val.accuracy:.3f}, kappa {val.kappa:.3f}")
    if result.test_report is not None:
        console.print(f"Final test accuracy: {result.test_report.accuracy:.2f}")
    best_path = store.prompts_dir / f"{result.best_prompt.id}.txt"
    console.print(f"Best prompt: {best_path}")
    _emit(
        {
            "run_dir": str(store.root),
            "best_id": result.best_prompt.id,
            "best_prompt": str(best_path),
            "best_kind": result.best_prompt.kind.value,
            "rounds": len(result.rounds),
            "stopped_early": result.stopped_early,
            "val": val.model_dump() if val else None,
            "test": result.test_report.model_dump() if result.test_report else None,
            "calls": result.ledger.total_calls,
            "cost_usd": result.ledger.cost_usd,
        }
    )


@app.command()
def evaluate(
    ctx: typer.Context,
    rubric: Path = typer.Option(..., "--rubric", exists=True, dir_okay=False, help="Rubric text file."),
    dataset: Optional[Path] = typer.Option(
        None, "--dataset", exists=True, dir_okay=False, help="Labeled NDJSON or CSV dataset."
    ),
    config: Optional[Path] = typer.Option(None, "--config", exists=True, dir_okay=False),
    scenario: Optional[str] = typer.Option(None, "--scenario", help="Grade with a packaged scenario."),
    sets: List[str] = typer.Option([], "--set", help="Config override key=value (repeatable)."),
    out: Path = typer.Option(Path("graded.jsonl"), "--out", help="Per-item records (NDJSON)."),
) -> None:
    """Accuracy, kappa, n and parse failures of a rubric on a labeled set (JSON on stdout)."""
    with _exit_codes():
        cfg = _load_config(ctx, config, sets, {"scenario": scenario})
        data, gateway, _ = _environment(cfg, dataset)
        if not data.labeled:
            raise ConfigError("Dataset has unlabeled items; use `rubricloop grade` for predictions only")
        grader = Grader(
            gateway,
            GraderConfig(num_classes=data.scale.num_classes, probability_mode=cfg.probability_mode),
        )
        result = infer(grader, _rubric(rubric), data.items)
        write_graded_records(out, result.graded)
    if result.report is None:
        raise typer.Exit(code=1)
    console.print(
        f"accuracy {result.report.accuracy:.3f}  kappa {result.report.kappa:.3f}  "
        f"n {result.report.n}  parse failures {result.report.parse_failures}"
    )
    _emit(result.report.model_dump())


@app.command()
def grade(
    ctx: typer.Context,
    rubric: Path = typer.Option(..., "--rubric", exists=True, dir_okay=False, help="Rubric text file."),
    dataset: Optional[Path] = typer.Option(
        None, "--dataset", exists=True, dir_okay=False, help="NDJSON or CSV dataset; labels optional."
    ),
    config: Optional[Path] = typer.Option(None, "--config", exists=True, dir_okay=False),
    scenario: Optional[str] = typer.Option(None, "--scenario", help="Grade with a packaged scenario."),
    sets: List[str] = typer.Option([], "--set", help="Config override key=value (repeatable)."),
) -> None:
    """Grade every item; one JSON prediction per line on stdout."""
    with _exit_codes():
        cfg = _load_config(ctx, config, sets, {"scenario": scenario})
        data, gateway, _ = _environment(cfg, dataset)
        grader = Grader(
            gateway,
            GraderConfig(num_classes=data.scale.num_classes, probability_mode=cfg.probability_mode),
        )
        graded, failures = grader.grade_batch(_rubric(rubric), data.items)
    for item in graded:
        typer.echo(item.model_dump_json())
    console.print(f"Graded {len(graded)} items, {len(failures)} failures")


@app.command()
def split(
    ctx: typer.Context,
    dataset: Path = typer.Option(..., "--dataset", exists=True, dir_okay=False),
    out: Path = typer.Option(Path("splits"), "--out", help="Directory for train/val/test files."),
    config: Optional[Path] = typer.Option(None, "--config", exists=True, dir_okay=False),
    seed: Optional[int] = typer.Option(None, "--seed"),
    sets: List[str] = typer.Option([], "--set", help="Config override key=value (repeatable)."),
) -> None:
    """Write train/val/test NDJSON files using the configured ratios and seed."""
    with _exit_codes():
        cfg = _load_config(ctx, config, sets, {"seed": seed})
        data = load_dataset(dataset)
        parts = partitions(data, cfg.split_ratios, cfg.seed)
        sizes = {
            name: write_dataset(out / f"{name}.jsonl", part)
            for name, part in zip(("train", "val", "test"), parts)
        }
    console.print(f"Wrote {sizes['train']}/{sizes['val']}/{sizes['test']} items to {out}")
    _emit({"out": str(out), **sizes})


def _trajectory(records: List[RoundRecord]) -> pl.DataFrame:
    rows = [
        {
            "round": r.round,
            "accuracy": r.best_report.accuracy,
            "kappa": r.best_report.kappa,
            "val_accuracy": r.validation.accuracy if r.validation else None,
            "val_kappa": r.validation.kappa if r.validation else None,
            "dominant_mode": mode_label(r.modes[0].key) if r.modes else "",
            "candidate_type": r.leading_kind.value,
        }
        for r in records
    ]
    schema = {
        "round": pl.Int64,
        "accuracy": pl.Float64,
        "kappa": pl.Float64,
        "val_accuracy": pl.Float64,
        "val_kappa": pl.Float64,
        "dominant_mode": pl.Utf8,
        "candidate_type": pl.Utf8,
    }
    return pl.DataFrame(rows, schema=schema)


def _matrix_table(record: RoundRecord) -> Table:
    k = record.matrix.scale.num_classes
    top = (record.modes[0].true_class, record.modes[0].predicted_class) if record.modes else None
    table = Table(title=f"Round {record.round} (true \\ predicted)")
    table.add_column("")
    for j in range(k):
        table.add_column(str(j), justify="right")
    for i, row in enumerate(record.matrix.counts):
        cells = []
        for j, count in enumerate(row):
            if (i, j) == top:
                cells.append(f"[bold red]{count}[/bold red]")
            elif i == j:
                cells.append(f"[green]{count}[/green]")
            else:
                cells.append(str(count))
        table.add_row(str(i), *cells)
    return table


@app.command()
def inspect(
    run_dir: Path = typer.Argument(..., help="Run directory written by `optimize`."),
    csv: bool = typer.Option(False, "--csv", help="Print the trajectory as CSV on stdout."),
) -> None:
    """Per-round confusion matrices and patches, or the trajectory as CSV."""
    with _exit_codes():
        store = RunStore(run_dir)
        records = store.load_rounds()
        result = store.load_result()
    if csv:
        typer.echo(_trajectory(records).write_csv(), nl=False)
        return

    if not records:
        console.print("Round 0: no optimization rounds; the initial rubric was kept.")
        if result.initial_report is not None:
            console.print(
                f"Initial validation accuracy {result.initial_report.accuracy:.3f}, "
                f"kappa {result.initial_report.kappa:.3f}"
            )
    for record in records:
        console.print(_matrix_table(record))
        modes = ", ".join(f"{m.label}: {m.count} ({m.share * 100:.1f}%)" for m in record.modes)
        console.print(f"Modes: {modes or 'none'}", markup=False)
        for patch in record.patches + ([record.consolidated] if record.consolidated else []):
            console.print(f"Patch {mode_label(patch.mode)}:", style="bold", markup=False)
            for rule in patch.rules:
                console.print(f"  - {rule}", markup=False)
    console.print(f"Best prompt: {result.best_prompt.id} ({result.best_prompt.kind.value})")


@app.command()
def scenarios() -> None:
    """List the packaged offline scenarios (one JSON object per line)."""
    with _exit_codes():
        table = Table(title="Scenarios")
        for column in ("Name", "Classes", "Items", "Rule keys"):
            table.add_column(column)
        for name in available_scenarios():
            scenario, _ = load_scenario(name)
            items = sum(kind.count for kind in scenario.kinds.values())
            table.add_row(name, str(scenario.num_classes), str(items), ", ".join(scenario.rule_keys))
            _emit(
                {
                    "name": name,
                    "num_classes": scenario.num_classes,
                    "items": items,
                    "rule_keys": scenario.rule_keys,
                    "description": scenario.description,
                }
            )
    console.print(table)


@app.command()
def version() -> None:
    """Print the package version."""
    typer.echo(__version__)


def run() -> None:
    app()


if __name__ == "__main__":
    run()
