"""Main CLI interface using Typer"""

import io
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .config import RunConfig, config
from .domain.errors import ConfigError, TbEvalError
from .domain.models import PanelSpec, ValidationReport
from .domain.services import MATCH_MODES, EvaluationService, format_p, format_percent
from .simulators.synth_oracle import calibrate_type1, generate_panel
from .tools.file_repos import save_cohort
from .tools.logs import configure_logging

app = typer.Typer(
    name="tbeval",
    help="TB screening evaluation - chest X-ray model versus radiologist panels",
    add_completion=False,
)
console = Console()

# Global options, filled by the callback
state: Dict[str, Any] = {}

Column = Tuple[str, str, Callable[[Any], str]]


def _plain(value: Any) -> str:
    if value is None or value == "":
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _auc(value: Any) -> str:
    return "-" if value is None else f"{value:.3f}"


def _pct(value: Any) -> str:
    return "-" if value is None else format_percent(value)


def _p(value: Any) -> str:
    return format_p(value) if isinstance(value, float) else _plain(value)


def _money(value: Any) -> str:
    return "-" if value is None else f"${value:,.2f}"


@app.callback()
def main(
    config_file: Annotated[Optional[Path], typer.Option("--config", help="Run configuration YAML")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Output directory for the report bundle")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", help="Master seed for bootstrap and simulation")] = None,
    include_excluded: Annotated[
        bool, typer.Option("--include-excluded-readers", help="Keep excluded readers in reader-panel analyses")
    ] = False,
) -> None:
    """TB screening evaluation: ROC, operating points, MRMC tests, subgroups and cost"""
    configure_logging(config.log_level)
    state.clear()
    state.update(config_file=config_file, out=out, seed=seed, include_excluded=include_excluded)


@contextmanager
def _errors() -> Iterator[None]:
    """Map domain failures to exit codes: 2 for configuration, 1 for data and I/O"""
    try:
        yield
    except typer.Exit:
        raise
    except (ConfigError, ValidationError) as e:
        console.print(f"[red]Configuration error: {escape(str(e))}[/red]")
        _debug()
        raise typer.Exit(2)
    except (TbEvalError, OSError) as e:
        console.print(f"[red]Error: {escape(str(e))}[/red]")
        _debug()
        raise typer.Exit(1)


def _debug() -> None:
    if config.debug:
        console.print(f"[dim]Debug: {escape(traceback.format_exc())}[/dim]")


def _run_config() -> RunConfig:
    return config.load_run_config(state.get("config_file"))


def _service() -> EvaluationService:
    run = _run_config()
    out_dir = state.get("out") or run.out_dir or config.out_dir
    seed = state.get("seed")
    if seed is None:
        seed = run.seed if run.seed is not None else config.seed
    return EvaluationService(run, out_dir, seed, include_excluded=state.get("include_excluded", False))


def _table(target: Console, title: str, rows: Sequence[Dict[str, Any]], columns: Sequence[Column]) -> None:
    if not rows:
        target.print(f"[yellow]{title}: no rows[/yellow]")
        return
    table = Table(title=title)
    for _, header, _ in columns:
        table.add_column(header)
    for row in rows:
        table.add_row(*(fmt(row.get(key)) for key, _, fmt in columns))
    target.print(table)


def _show_validation(target: Console, report: ValidationReport) -> None:
    table = Table(title="Cohort")
    table.add_column("Dataset", style="cyan")
    table.add_column("Cases", justify="right")
    table.add_column("TB+", justify="right")
    table.add_column("TB-", justify="right")
    for name, counts in report.per_dataset.items():
        table.add_row(name, str(counts.n_cases), str(counts.n_positive), str(counts.n_negative))
    table.add_row("all", str(report.n_cases), str(report.n_positive), str(report.n_negative), style="bold")
    target.print(table)
    target.print(
        f"Readers: {report.n_readers} ({report.n_excluded_readers} excluded), reads: {report.n_reads}"
    )
    missing = {k: v for k, v in report.missing.items() if v > 0}
    if missing:
        target.print("Missing: " + ", ".join(f"{k} {format_percent(v)}" for k, v in sorted(missing.items())))
    if report.violations:
        target.print(f"[red]{len(report.violations)} violation(s):[/red]")
        for problem in report.violations:
            target.print(f"[red]  - {escape(problem)}[/red]")
    else:
        target.print("[green]No violations[/green]")


def _show_evaluation(target: Console, result: Dict[str, Any]) -> None:
    _table(target, "ROC", result["roc"], [
        ("scope", "Scope", _plain),
        ("n_cases", "Cases", _plain),
        ("n_positive", "TB+", _plain),
        ("auc", "AUC", _auc),
        ("auc_lower", "Lower", _auc),
        ("auc_upper", "Upper", _auc),
        ("partial_auc", "Partial AUC", _auc),
    ])
    _table(target, "Operating points", result["operating_points"], [
        ("scope", "Scope", _plain),
        ("operating_point", "Point", _plain),
        ("threshold", "Threshold", _plain),
        ("sensitivity", "Sensitivity", _pct),
        ("sensitivity_lower", "Lower", _pct),
        ("sensitivity_upper", "Upper", _pct),
        ("specificity", "Specificity", _pct),
        ("specificity_lower", "Lower", _pct),
        ("specificity_upper", "Upper", _pct),
    ])
    _table(target, "Model versus radiologists", result["noninferiority"], [
        ("scope", "Scope", _plain),
        ("reader_cohort", "Readers", _plain),
        ("operating_point", "Point", _plain),
        ("endpoint", "Endpoint", _plain),
        ("algorithm", "Model", _pct),
        ("readers_mean", "Readers", _pct),
        ("delta", "Difference", _pct),
        ("p_noninferiority", "P noninferiority", _p),
        ("p_superiority", "P superiority", _p),
        ("flags", "Flags", _plain),
    ])
    _table(target, "Reader panels", result["reader_panel"], [
        ("scope", "Scope", _plain),
        ("reader_cohort", "Readers", _plain),
        ("metric", "Metric", _plain),
        ("n_readers", "N", _plain),
        ("mean", "Mean", _pct),
        ("median", "Median", _pct),
        ("q1", "Q1", _pct),
        ("q3", "Q3", _pct),
        ("minimum", "Min", _pct),
        ("maximum", "Max", _pct),
        ("n_below_curve", "Below ROC", _plain),
    ])
    _table(target, "Reader cohort comparison", result["reader_cohort_comparison"], [
        ("scope", "Scope", _plain),
        ("endpoint", "Endpoint", _plain),
        ("group_a", "Group A", _plain),
        ("group_b", "Group B", _plain),
        ("difference", "Difference", _pct),
        ("lower", "Lower", _pct),
        ("upper", "Upper", _pct),
    ])
    for row in result["excluded_readers"]:
        target.print(
            f"[yellow]Excluded outlier reader {row['reader_id']} ({row['reader_cohort']}): "
            f"positive rate {format_percent(row['positive_rate'])}[/yellow]"
        )
    outcome = result["primary_outcome"]
    if outcome is not None:
        labels = ", ".join(f"{k}: {v}" for k, v in sorted(outcome.labels.items()))
        target.print(f"[bold]Primary analysis[/bold] (alpha {outcome.alpha_primary}): {labels}")


def _show_match(target: Console, mode: str, rows: List[Dict[str, Any]]) -> None:
    if mode == "per-reader":
        _table(target, "Per-reader matching", rows, [
            ("scope", "Scope", _plain),
            ("reader_id", "Reader", _plain),
            ("match_on", "Matched", _plain),
            ("threshold", "Threshold", _plain),
            ("compared_endpoint", "Compared", _plain),
            ("delta", "Difference", _pct),
            ("p_wald_noninferiority", "P noninferiority", _p),
            ("p_mcnemar", "P McNemar", _p),
        ])
        return
    _table(target, f"Matched operating points ({mode})", rows, [
        ("scope", "Scope", _plain),
        ("reader_cohort", "Readers", _plain),
        ("match_on", "Matched", _plain),
        ("target", "Target", _pct),
        ("threshold", "Threshold", _plain),
        ("sensitivity", "Sensitivity", _pct),
        ("specificity", "Specificity", _pct),
        ("reader_sensitivity", "Reader sens", _pct),
        ("reader_specificity", "Reader spec", _pct),
    ])


STRATUM_COLUMNS: List[Column] = [
    ("n_cases", "Cases", _plain),
    ("n_positive", "TB+", _plain),
    ("auc", "AUC", _auc),
    ("sensitivity", "Sensitivity", _pct),
    ("reader_sensitivity", "Reader sens", _pct),
    ("specificity", "Specificity", _pct),
    ("reader_specificity", "Reader spec", _pct),
    ("note", "Note", _plain),
]


def _show_subgroups(target: Console, result: Dict[str, Any]) -> None:
    _table(target, "Subgroups", result["subgroups"], [("stratum", "Stratum", _plain), *STRATUM_COLUMNS])
    _table(target, "Technical issues", result["technical_issues"], [("group", "Readers flagging", _plain), *STRATUM_COLUMNS])
    _table(target, "Abnormality", result["abnormality"], [
        ("mode", "Mode", _plain),
        ("k_of_3", "k of 3", _plain),
        ("n_cases", "Cases", _plain),
        ("n_positive", "Positive", _plain),
        ("auc", "AUC", _auc),
        ("auc_lower", "Lower", _auc),
        ("auc_upper", "Upper", _auc),
    ])


def _show_dist_shift(target: Console, result: Dict[str, Any]) -> None:
    _table(target, "Score distributions", result["summary"], [
        ("dataset", "Dataset", _plain),
        ("slice", "Slice", _plain),
        ("n", "N", _plain),
        ("mean", "Mean", _plain),
        ("sd", "SD", _plain),
    ])
    columns: List[Column] = [("dataset", "Dataset", _plain)]
    columns += [(name, name, _p) for name in result["datasets"][:-1]]
    for slice_name, matrix in result["matrices"].items():
        _table(target, f"KS p-values ({slice_name})", matrix[1:], columns)


def _show_cost(target: Console, result: Dict[str, Any]) -> None:
    _table(target, "Cost per TB case detected", result["sweep"], [
        ("scenario", "Scenario", _plain),
        ("p", "Prevalence", _pct),
        ("rate", "Triage positive", _pct),
        ("cost_per_patient", "Per patient", _money),
        ("cost_per_case", "Per case", _money),
        ("naat_only_cost_per_case", "NAAT only", _money),
        ("savings", "Savings", _pct),
    ])


@app.command("validate")
def validate_cmd() -> None:
    """Load the cohort and check referential and hygiene invariants"""
    with _errors():
        service = _service()
        report = service.validate()
        service.finalize()
        _show_validation(console, report)
        if not report.is_valid:
            raise typer.Exit(1)


@app.command()
def evaluate() -> None:
    """ROC, operating points and MRMC comparisons per dataset and combined"""
    with _errors():
        service = _service()
        result = service.evaluate()
        service.finalize()
        _show_evaluation(console, result)
        console.print(f"[green]Bundle written to {service.bundle.out_dir}[/green]")


@app.command()
def match(
    mode: Annotated[str, typer.Option("--mode", help=f"One of: {', '.join(MATCH_MODES)}")],
    target: Annotated[Optional[float], typer.Option("--target", help="Target for who-sens / who-spec")] = None,
    match_on: Annotated[
        Optional[str], typer.Option("--match-on", help="sensitivity or specificity (default both)")
    ] = None,
) -> None:
    """Operating points matched to WHO targets, the mean reader or each reader"""
    with _errors():
        if mode not in MATCH_MODES:
            raise ConfigError(f"unknown match mode {mode!r}; choose from {', '.join(MATCH_MODES)}")
        service = _service()
        rows = service.match(mode, target, match_on)
        service.finalize()
        _show_match(console, mode, rows)


@app.command()
def subgroup() -> None:
    """Stratified, technical-issue and abnormality analyses"""
    with _errors():
        service = _service()
        result = service.subgroup()
        service.finalize()
        _show_subgroups(console, result)


@app.command("dist-shift")
def dist_shift() -> None:
    """Pairwise KS tests of model scores across datasets"""
    with _errors():
        service = _service()
        result = service.dist_shift()
        service.finalize()
        _show_dist_shift(console, result)


@app.command()
def cost() -> None:
    """Cost per TB case detected across prevalence"""
    with _errors():
        service = _service()
        result = service.cost()
        service.finalize()
        _show_cost(console, result)


@app.command()
def report() -> None:
    """Run every analysis and write the full bundle with report.txt"""
    with _errors():
        service = _service()
        recorder = Console(record=True, width=120, file=io.StringIO(), color_system=None)

        console.print("[blue]Validating cohort...[/blue]")
        validation = service.validate()
        _show_validation(recorder, validation)
        if not validation.is_valid:
            console.print("[red]Cohort has violations; run 'tbeval validate' for details[/red]")
            raise typer.Exit(1)

        console.print("[blue]Evaluating...[/blue]")
        evaluation = service.evaluate()
        _show_evaluation(recorder, evaluation)
        for mode in MATCH_MODES:
            _show_match(recorder, mode, service.match(mode))
        console.print("[blue]Subgroups and distribution shift...[/blue]")
        _show_subgroups(recorder, service.subgroup())
        _show_dist_shift(recorder, service.dist_shift())
        _show_cost(recorder, service.cost())

        service.bundle.write_text("report.txt", recorder.export_text())
        service.finalize()
        outcome = evaluation["primary_outcome"]
        if outcome is not None:
            labels = ", ".join(f"{k}: {v}" for k, v in sorted(outcome.labels.items()))
            console.print(f"[bold]Primary analysis:[/bold] {labels}")
        console.print(f"[green]Report written to {service.bundle.out_dir / 'report.txt'}[/green]")


# Synthetic data commands
simulate_app = typer.Typer(name="simulate", help="Synthetic reader-panel cohorts")
app.add_typer(simulate_app)


def _panel_spec(
    n_pos: int,
    n_neg: int,
    readers: int,
    reader_sens: float,
    reader_spec: float,
    algo_sens: float,
    algo_spec: float,
    reader_spread: float,
    difficulty: float,
    seed: int,
    **extra: Any,
) -> PanelSpec:
    return PanelSpec(
        n_pos=n_pos,
        n_neg=n_neg,
        n_readers=readers,
        reader_sens=reader_sens,
        reader_spec=reader_spec,
        algo_sens=algo_sens,
        algo_spec=algo_spec,
        reader_sens_spread=reader_spread,
        case_difficulty_spread=difficulty,
        seed=seed,
        **extra,
    )


@simulate_app.command("cohort")
def simulate_cohort(
    dest: Annotated[Path, typer.Option("--dest", help="Directory for cases.csv, reads.csv, readers.csv")],
    n_pos: Annotated[int, typer.Option("--n-pos")] = 100,
    n_neg: Annotated[int, typer.Option("--n-neg")] = 400,
    readers: Annotated[int, typer.Option("--readers")] = 9,
    reader_sens: Annotated[float, typer.Option("--reader-sens")] = 0.75,
    reader_spec: Annotated[float, typer.Option("--reader-spec")] = 0.80,
    algo_sens: Annotated[float, typer.Option("--algo-sens")] = 0.85,
    algo_spec: Annotated[float, typer.Option("--algo-spec")] = 0.80,
    reader_spread: Annotated[float, typer.Option("--reader-spread")] = 0.0,
    difficulty: Annotated[float, typer.Option("--difficulty", help="Case difficulty spread (probit scale)")] = 0.5,
    dataset: Annotated[str, typer.Option("--dataset")] = "synthetic",
    cohort_tag: Annotated[str, typer.Option("--cohort-tag")] = "india_based",
    technical_issue_rate: Annotated[float, typer.Option("--technical-issue-rate")] = 0.0,
) -> None:
    """Write a synthetic cohort in the regular CSV schemas"""
    with _errors():
        seed = state.get("seed") if state.get("seed") is not None else config.seed
        spec = _panel_spec(
            n_pos, n_neg, readers, reader_sens, reader_spec, algo_sens, algo_spec, reader_spread, difficulty, seed,
            dataset=dataset,
            reader_cohort_tag=cohort_tag,
            technical_issue_rate=technical_issue_rate,
        )
        paths = save_cohort(generate_panel(spec), dest)
        console.print(f"[green]Synthetic cohort written ({n_pos + n_neg} cases, {readers} readers):[/green]")
        for path in paths:
            console.print(f"  - {path}")


@simulate_app.command("calibrate")
def simulate_calibrate(
    trials: Annotated[int, typer.Option("--trials")] = 1000,
    n_pos: Annotated[int, typer.Option("--n-pos")] = 500,
    n_neg: Annotated[int, typer.Option("--n-neg")] = 500,
    readers: Annotated[int, typer.Option("--readers")] = 9,
    reader_sens: Annotated[float, typer.Option("--reader-sens")] = 0.80,
    reader_spec: Annotated[float, typer.Option("--reader-spec")] = 0.80,
    algo_sens: Annotated[float, typer.Option("--algo-sens")] = 0.70,
    algo_spec: Annotated[float, typer.Option("--algo-spec")] = 0.80,
    reader_spread: Annotated[float, typer.Option("--reader-spread")] = 0.0,
    difficulty: Annotated[float, typer.Option("--difficulty")] = 0.5,
    alpha: Annotated[float, typer.Option("--alpha")] = 0.025,
    margin: Annotated[float, typer.Option("--margin")] = 0.10,
    endpoint: Annotated[str, typer.Option("--endpoint")] = "sensitivity",
) -> None:
    """Monte-Carlo rejection rate of the MRMC noninferiority test"""
    with _errors():
        if endpoint not in ("sensitivity", "specificity"):
            raise ConfigError(f"--endpoint must be sensitivity or specificity, got {endpoint!r}")
        seed = state.get("seed") if state.get("seed") is not None else config.seed
        spec = _panel_spec(
            n_pos, n_neg, readers, reader_sens, reader_spec, algo_sens, algo_spec, reader_spread, difficulty, seed
        )
        result = calibrate_type1(spec, trials, alpha=alpha, margin=margin, endpoint=endpoint, master_seed=seed)
        console.print(
            f"Rejection rate: [bold]{result.rejection_rate:.4f}[/bold] "
            f"({result.rejections}/{result.n_trials}, alpha {alpha}, margin {margin})"
        )


if __name__ == "__main__":
    app()
