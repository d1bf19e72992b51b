"""CSV tables, SVG charts and JSON summaries for evaluation runs."""
import json
import logging
import math
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union
from src.models.enums import CapDirection
from src.services import evalkit
from src.services.evalkit import MetricSeries

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
METRICS_COLUMNS = ["experiment", "variable", "time_index", "rmse", "r"]
CAP_COLUMNS = ["variable", "metric", "threshold", "percent"]
REGION_COLUMNS = ["region", "variable", "rmse", "r"]

# fixed ids and no timestamp keep SVG output byte-identical across runs
matplotlib.rcParams["svg.hashsalt"] = "ddnet"
matplotlib.rcParams["svg.fonttype"] = "none"


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def save_figure(fig: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def cap_table(series: Sequence[MetricSeries], points: Optional[int] = 200) -> pd.DataFrame:
    """CAP profiles of RMSE (at or below threshold) and R (above threshold) per variable"""
    rows = []
    for s in series:
        for metric, values, direction in (
            ("rmse", s.rmse_values, CapDirection.BELOW),
            ("r", s.r_values, CapDirection.ABOVE),
        ):
            if not values:
                continue
            thresholds = evalkit.cap_thresholds(values, points)
            for threshold, percent in zip(thresholds, evalkit.cap_profile(values, thresholds, direction)):
                rows.append({"variable": s.variable, "metric": metric, "threshold": threshold, "percent": percent})
    return pd.DataFrame(rows, columns=CAP_COLUMNS)


def metrics_table(series: Sequence[MetricSeries]) -> pd.DataFrame:
    frames = [s.to_frame() for s in series if len(s)]
    if not frames:
        return pd.DataFrame(columns=METRICS_COLUMNS)
    return pd.concat(frames, ignore_index=True)[METRICS_COLUMNS]


def rmse_chart(series: Sequence[MetricSeries], variable: str) -> Figure:
    fig, ax = plt.subplots(1, 1, figsize=(8, 3.5), constrained_layout=True)
    for s in series:
        if s.variable == variable and len(s):
            ax.plot(s.time_indices, s.rmse_values, label=s.experiment, linewidth=1.0)
    ax.set_xlabel("time index")
    ax.set_ylabel(f"{variable} RMSE")
    ax.legend(loc="upper left")
    ax.grid(alpha=0.3)
    return fig


def cap_chart(table: pd.DataFrame, metric: str) -> Figure:
    """One CAP curve per variable; the plotted points are exactly the table rows"""
    fig, ax = plt.subplots(1, 1, figsize=(5, 4), constrained_layout=True)
    for variable, group in table[table["metric"] == metric].groupby("variable", sort=True):
        ax.plot(group["threshold"].to_numpy(), group["percent"].to_numpy(), label=variable)
    ax.set_xlabel(f"{metric} threshold")
    ax.set_ylabel("percent of instances")
    ax.set_ylim(0, 100)
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    return fig


def leadtime_chart(leadtime: pd.DataFrame, dt_hours: float = 3.0) -> Figure:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
    for variable, group in leadtime.groupby("variable", sort=True):
        hours = group["lead"].to_numpy() * dt_hours
        axes[0].plot(hours, group["rmse_mean"].to_numpy(), label=variable)
        axes[1].plot(hours, group["r_mean"].to_numpy(), label=variable)
    axes[0].set_ylabel("RMSE")
    axes[1].set_ylabel("R")
    for ax in axes:
        ax.set_xlabel("lead (hours)")
        ax.legend(loc="best")
        ax.grid(alpha=0.3)
    return fig


def correlation_heatmap(matrix: pd.DataFrame) -> Figure:
    fig, ax = plt.subplots(1, 1, figsize=(6, 5), constrained_layout=True)
    image = ax.imshow(matrix.to_numpy(dtype=float), vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(len(matrix.columns)), list(matrix.columns), rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.index)), list(matrix.index))
    for i in range(len(matrix.index)):
        for j in range(len(matrix.columns)):
            value = matrix.iat[i, j]
            ax.text(j, i, "n/a" if pd.isna(value) else f"{value:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(image, ax=ax, shrink=0.8)
    return fig


def da_eval_chart(evaluation: pd.DataFrame) -> Figure:
    fig, ax = plt.subplots(1, 1, figsize=(8, 3.5), constrained_layout=True)
    ax.plot(evaluation["time_index"], evaluation["rmse_forecast"], label="forecast", linewidth=1.0)
    ax.plot(evaluation["time_index"], evaluation["rmse_analysis"], label="analysis", linewidth=1.0)
    ax.set_xlabel("time index")
    ax.set_ylabel("AOD550 RMSE")
    ax.legend(loc="upper left")
    ax.grid(alpha=0.3)
    return fig


def emit_report(
    out_dir: Union[str, Path],
    series: Sequence[MetricSeries],
    regional: Optional[Mapping[str, pd.DataFrame]] = None,
    cap_points: Optional[int] = 200,
    charts: bool = True,
) -> List[Path]:
    """
    Write metrics.csv at the root and cap.csv / regions.csv per experiment, plus SVG charts.

    Args:
        out_dir: report directory, created if needed
        series: per-instance metric series of every experiment
        regional: per-experiment regional summary tables (region, variable, rmse, r)
        cap_points: evenly spaced CAP thresholds; None uses the exact series values
        charts: also render SVG charts when there is data to plot

    Returns:
        Paths of every file written
    """
    out_dir = Path(out_dir)
    regional = dict(regional or {})
    written = [write_table(metrics_table(series), out_dir / "metrics.csv")]

    experiments = sorted({s.experiment for s in series} | set(regional))
    for experiment in experiments:
        members = sorted((s for s in series if s.experiment == experiment), key=lambda s: s.variable)
        table = cap_table(members, cap_points)
        written.append(write_table(table, out_dir / experiment / "cap.csv"))
        region_frame = regional.get(experiment, pd.DataFrame(columns=REGION_COLUMNS))
        written.append(write_table(region_frame[REGION_COLUMNS], out_dir / experiment / "regions.csv"))
        if charts and not table.empty:
            for metric in sorted(table["metric"].unique()):
                written.append(save_figure(cap_chart(table, metric), out_dir / experiment / f"cap_{metric}.svg"))

    if charts:
        for variable in sorted({s.variable for s in series if len(s)}):
            written.append(save_figure(rmse_chart(series, variable), out_dir / f"rmse_{variable}.svg"))
    logger.info(f"Report written to {out_dir}: {len(written)} files")
    return written


def _clean(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_summary(path: Union[str, Path], summary: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(dict(summary)), indent=2, sort_keys=True) + "\n")
    return path


def _find(series: Sequence[MetricSeries], experiment: str, variable: str) -> Optional[MetricSeries]:
    for s in series:
        if s.experiment == experiment and s.variable == variable:
            return s
    return None


def comparison_summary(
    series: Sequence[MetricSeries],
    candidate: str = "ddnet",
    baseline: str = "prednet",
    window: int = 240,
) -> Dict[str, Any]:
    """
    Headline comparison of two experiments.

    ``window`` is the length (in steps) of the first and final windows of the bounded-series
    check; a synthetic month at 3-hourly steps is 240.
    """
    summary: Dict[str, Any] = {"candidate": candidate, "baseline": baseline, "variables": {}}
    for variable in ("pm25", "aod550"):
        ours, theirs = _find(series, candidate, variable), _find(series, baseline, variable)
        if ours is None or theirs is None or not len(ours) or not len(theirs):
            continue
        ours_mean, theirs_mean = ours.mean_rmse(), theirs.mean_rmse()
        ok, final_max, first_median = evalkit.bounded_series(ours.rmse_values, window)
        base_first, base_last = evalkit.quarter_means(theirs.rmse_values)
        summary["variables"][variable] = {
            f"{candidate}_rmse_mean": ours_mean,
            f"{baseline}_rmse_mean": theirs_mean,
            "rmse_ratio": ours_mean / theirs_mean if theirs_mean > 0 else None,
            "win_rate": evalkit.win_rate(ours, theirs),
            f"{candidate}_bounded": ok,
            f"{candidate}_final_window_max": final_max,
            f"{candidate}_first_window_median": first_median,
            f"{baseline}_first_quarter_mean": base_first,
            f"{baseline}_final_quarter_mean": base_last,
            "r_undefined": {candidate: len(ours) - len(ours.r_values), baseline: len(theirs) - len(theirs.r_values)},
        }
    return summary


def timing_summary(timings: pd.DataFrame, steps_per_day: int = 8) -> Dict[str, Any]:
    """Wall-clock cost of the cycle for the console and the ledger; never part of summary.json"""
    if timings.empty:
        return {"cycles": 0, "total_seconds": 0.0, "seconds_per_5_days": None}
    total = float(timings["seconds"].sum())
    steps = int(timings["last_step"].max() - timings["first_step"].min() + 1)
    return {
        "cycles": int(len(timings)),
        "total_seconds": total,
        "seconds_per_5_days": total / steps * 5 * steps_per_day,
    }
