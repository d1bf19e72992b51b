import logging
import pandas as pd
from pathlib import Path
from typing import Dict, List, Tuple
from src.commands import CommandContext, CommandRouter
from src.commands.forecasting import write_trajectory
from src.services.evalkit import MetricSeries, default_regions, summarize_series
from src.services.opsloop import (
    EXPERIMENT_DDNET,
    EXPERIMENT_PREDNET,
    CycleSettings,
    run_operational,
    run_prednet_only,
)
from src.services.reporting import (
    REGION_COLUMNS,
    comparison_summary,
    emit_report,
    timing_summary,
    write_summary,
    write_table,
)
from src.services.verification import run_verification
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

router = CommandRouter()

DAYS_PER_MONTH = 30


def _summary_line(command: str, summary: Dict) -> str:
    aod = summary["variables"].get("aod550", {})
    pm = summary["variables"].get("pm25", {})
    if not aod:
        return f"{command}: no shared ddnet/prednet series to compare"
    parts = [f"AOD RMSE {aod['ddnet_rmse_mean']:.5f} vs {aod['prednet_rmse_mean']:.5f}"]
    if aod["rmse_ratio"] is not None:
        parts.append(f"ratio {aod['rmse_ratio']:.3f}")
    if aod["win_rate"] is not None:
        parts.append(f"AOD win rate {aod['win_rate']:.1%}")
    if pm:
        parts.append(f"PM2.5 RMSE {pm['ddnet_rmse_mean']:.4f} vs {pm['prednet_rmse_mean']:.4f}")
    return f"{command}: " + ", ".join(parts)


@router.command("evaluate", help="Run D-DNet and the PredNet-only baseline and compare them")
def evaluate(ctx: CommandContext) -> str:
    cfg = ctx.cfg
    reader = ctx.open_dataset()
    ev = cfg.evaluation
    settings = CycleSettings.from_experiment(cfg)
    regions = default_regions(*reader.shape, rows=ev.region_rows, cols=ev.region_cols)
    forecaster = ctx.load_forecaster()

    ddnet = run_operational(forecaster, ctx.load_assimilator(), reader, settings, cfg.assimilation, regions)
    baseline = run_prednet_only(forecaster, reader, settings, regions)
    write_trajectory(ctx, ddnet)
    write_trajectory(ctx, baseline)

    series = ddnet.all_series() + baseline.all_series()
    emit_report(ctx.run_dir, series,
                {ddnet.experiment: ddnet.regional.summary(), baseline.experiment: baseline.regional.summary()},
                cap_points=ev.cap_points)
    ctx.artifacts.append(write_table(summarize_series(series), ctx.run_dir / "series_summary.csv"))
    summary = comparison_summary(series, window=DAYS_PER_MONTH * cfg.time_grid.steps_per_day)
    summary["skipped_da_times"] = ddnet.skipped_da
    ctx.artifacts.append(write_summary(ctx.run_dir / "summary.json", summary))
    ctx.log("comparison", **summary["variables"].get("aod550", {}))
    timing = timing_summary(ddnet.timings, cfg.time_grid.steps_per_day)
    ctx.log("timing", **timing)
    if timing["seconds_per_5_days"] is not None:
        logger.info(
            f"D-DNet cycle cost: {timing['seconds_per_5_days']:.2f}s per 5 forecast days over {timing['cycles']} cycles"
        )
    return _summary_line("evaluate", summary)


def _load_run(run_dir: Path) -> Tuple[List[MetricSeries], Dict[str, pd.DataFrame]]:
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise ConfigurationError(f"{metrics_path} not found", key_path="--input")
    frame = pd.read_csv(metrics_path)
    series = MetricSeries.from_frame(frame) if not frame.empty else []
    regional = {}
    for experiment in sorted({s.experiment for s in series}):
        path = run_dir / experiment / "regions.csv"
        if path.is_file():
            regional[experiment] = pd.read_csv(path)[REGION_COLUMNS]
    return series, regional


@router.command(
    "report",
    help="Rebuild tables, charts and the comparison summary from earlier run directories",
    arguments=[(("--input",), {"nargs": "+", "required": True, "metavar": "RUN_DIR", "help": "run directories holding metrics.csv"})],
)
def report(ctx: CommandContext) -> str:
    series: List[MetricSeries] = []
    regional: Dict[str, pd.DataFrame] = {}
    for run_dir in ctx.args.input:
        found, tables = _load_run(Path(run_dir))
        known = {(s.experiment, s.variable) for s in series}
        series.extend(s for s in found if (s.experiment, s.variable) not in known)
        for experiment, table in tables.items():
            regional.setdefault(experiment, table)
    written = emit_report(ctx.run_dir, series, regional, cap_points=ctx.cfg.evaluation.cap_points)
    experiments = {s.experiment for s in series}
    if {EXPERIMENT_DDNET, EXPERIMENT_PREDNET} <= experiments:
        summary = comparison_summary(series, window=DAYS_PER_MONTH * ctx.cfg.time_grid.steps_per_day)
        written.append(write_summary(ctx.run_dir / "summary.json", summary))
        return _summary_line("report", summary)
    if not series:
        logger.warning("The input run directories hold no metric records; wrote header-only tables")
    return f"report: {len(series)} series from {len(ctx.args.input)} run directories, {len(written)} files"


@router.command("verify", help="Check reference parameter counts and gradients")
def verify(ctx: CommandContext) -> str:
    architecture, gradients = run_verification(seed=0)
    ctx.artifacts.append(write_table(architecture, ctx.run_dir / "architecture.csv"))
    ctx.artifacts.append(write_table(gradients, ctx.run_dir / "grad_check.csv"))
    totals = architecture[architecture["item"].isin(["total", "trainable", "non_trainable"])]
    counts = {(r.network, r.item): r.actual for r in totals.itertuples()}
    worst = float(gradients["max_rel_error"].max())
    ctx.log("verified", max_rel_error=worst)
    return (
        f"verify: prednet total={counts[('prednet', 'total')]:,} trainable={counts[('prednet', 'trainable')]:,} "
        f"non_trainable={counts[('prednet', 'non_trainable')]:,}; danet total={counts[('danet', 'total')]:,} "
        f"trainable={counts[('danet', 'trainable')]:,} non_trainable={counts[('danet', 'non_trainable')]:,}; "
        f"grad_check max_rel={worst:.2e}"
    )
