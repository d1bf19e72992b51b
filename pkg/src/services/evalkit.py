"""Verification metrics: RMSE, Pearson R, CAP profiles, correlation matrices and regional scores."""
import logging
import math
import numpy as np
import pandas as pd
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from src.models.enums import CapDirection
from src.models.fields import GridField
from src.utils.errors import InsufficientDataError, ShapeMismatchError

logger = logging.getLogger(__name__)

ArrayLike = Union[GridField, np.ndarray, Sequence[float]]


def _values(x: ArrayLike) -> np.ndarray:
    if isinstance(x, GridField):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _pair(truth: ArrayLike, pred: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _values(truth), _values(pred)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"truth {a.shape} and prediction {b.shape} differ in shape")
    if a.size == 0:
        raise InsufficientDataError("metrics need at least one cell")
    return a, b


def rmse(truth: ArrayLike, pred: ArrayLike) -> float:
    a, b = _pair(truth, pred)
    return math.sqrt(float(np.mean((a - b) ** 2)))


def corrcoef(truth: ArrayLike, pred: ArrayLike) -> Optional[float]:
    """Pearson R, or None when either field is constant"""
    a, b = _pair(truth, pred)
    da, db = a - a.mean(), b - b.mean()
    denominator = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denominator == 0.0:
        return None
    return max(-1.0, min(1.0, float(np.sum(da * db)) / denominator))


def cap_thresholds(series: Sequence[float], points: Optional[int] = None) -> List[float]:
    """Sorted unique values of the series, or ``points`` evenly spaced values over its range"""
    values = np.asarray(list(series), dtype=np.float64)
    if values.size == 0:
        raise InsufficientDataError("CAP thresholds need a non-empty series")
    if points is None:
        return np.unique(values).tolist()
    return np.linspace(values.min(), values.max(), points).tolist()


def cap_profile(
    series: Sequence[float],
    thresholds: Optional[Sequence[float]] = None,
    direction: CapDirection = CapDirection.BELOW,
) -> List[float]:
    """Percentage of instances at or below (``below``) or strictly above (``above``) each threshold"""
    values = np.asarray(list(series), dtype=np.float64)
    if values.size == 0:
        raise InsufficientDataError("CAP profile of an empty series")
    if thresholds is None:
        thresholds = cap_thresholds(values)
    below = CapDirection(direction) is CapDirection.BELOW
    profile = []
    for threshold in thresholds:
        hits = np.sum(values <= threshold) if below else np.sum(values > threshold)
        profile.append(100.0 * float(hits) / values.size)
    return profile


def correlation_matrix(channels: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """Pairwise Pearson R over all cells and times; undefined entries are NaN"""
    names = list(channels)
    stacks = [np.asarray(channels[n], dtype=np.float64) for n in names]
    if len({s.shape for s in stacks}) > 1:
        raise ShapeMismatchError(f"channel stacks differ in shape: {[s.shape for s in stacks]}")
    matrix = np.full((len(names), len(names)), np.nan)
    for i in range(len(names)):
        for j in range(i, len(names)):
            r = corrcoef(stacks[i].ravel(), stacks[j].ravel())
            if r is not None:
                matrix[i, j] = matrix[j, i] = r
    undefined = [n for i, n in enumerate(names) if np.isnan(matrix[i, i])]
    if undefined:
        logger.warning(f"Constant channels have undefined correlations: {undefined}")
    return pd.DataFrame(matrix, index=names, columns=names)


@dataclass(frozen=True)
class Region:
    name: str
    row_start: int
    row_stop: int
    col_start: int
    col_stop: int

    @property
    def cells(self) -> int:
        return (self.row_stop - self.row_start) * (self.col_stop - self.col_start)

    def select(self, values: np.ndarray) -> np.ndarray:
        return values[self.row_start:self.row_stop, self.col_start:self.col_stop]


@dataclass
class RegionSet:
    height: int
    width: int
    regions: List[Region] = field(default_factory=list)

    def __post_init__(self):
        for region in self.regions:
            if region.cells <= 0:
                raise ShapeMismatchError(f"region '{region.name}' is empty")
            if region.row_start < 0 or region.col_start < 0 or region.row_stop > self.height or region.col_stop > self.width:
                raise ShapeMismatchError(f"region '{region.name}' lies outside the {self.height}x{self.width} grid")

    def __iter__(self):
        return iter(self.regions)

    def __len__(self) -> int:
        return len(self.regions)


def default_regions(height: int, width: int, rows: int = 2, cols: int = 4) -> RegionSet:
    """Equal boxes; with two latitude bands they are named SHem/NHem (row index grows northward)"""
    row_edges = np.linspace(0, height, rows + 1).round().astype(int)
    col_edges = np.linspace(0, width, cols + 1).round().astype(int)
    band_names = ["SHem", "NHem"] if rows == 2 else [f"band{i + 1}" for i in range(rows)]
    regions = [
        Region(f"{band_names[i]}-Q{j + 1}", int(row_edges[i]), int(row_edges[i + 1]), int(col_edges[j]), int(col_edges[j + 1]))
        for i in range(rows)
        for j in range(cols)
    ]
    return RegionSet(height, width, regions)


def regional_eval(truth: ArrayLike, pred: ArrayLike, regions: RegionSet) -> pd.DataFrame:
    """RMSE and R restricted to each region; columns region, cells, rmse, r"""
    a, b = _pair(truth, pred)
    if a.shape != (regions.height, regions.width):
        raise ShapeMismatchError(f"field {a.shape} does not match region grid {(regions.height, regions.width)}")
    rows = []
    for region in regions:
        ta, pb = region.select(a), region.select(b)
        rows.append({"region": region.name, "cells": region.cells, "rmse": rmse(ta, pb), "r": corrcoef(ta, pb)})
    return pd.DataFrame(rows, columns=["region", "cells", "rmse", "r"])


@dataclass
class MetricRecord:
    time_index: int
    rmse: float
    r: Optional[float]


@dataclass
class MetricSeries:
    """Per-instance (time_index, RMSE, R) records of one experiment and variable"""
    experiment: str
    variable: str
    records: List[MetricRecord] = field(default_factory=list)

    def add(self, time_index: int, truth: ArrayLike, pred: ArrayLike) -> MetricRecord:
        record = MetricRecord(time_index, rmse(truth, pred), corrcoef(truth, pred))
        self.records.append(record)
        return record

    def __len__(self) -> int:
        return len(self.records)

    @property
    def time_indices(self) -> List[int]:
        return [r.time_index for r in self.records]

    @property
    def rmse_values(self) -> List[float]:
        return [r.rmse for r in self.records]

    @property
    def r_values(self) -> List[float]:
        """Defined R values only"""
        return [r.r for r in self.records if r.r is not None]

    def mean_rmse(self) -> float:
        if not self.records:
            raise InsufficientDataError(f"{self.experiment}/{self.variable} has no records")
        return float(np.mean(self.rmse_values))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(self.experiment, self.variable, r.time_index, r.rmse, r.r) for r in self.records],
            columns=["experiment", "variable", "time_index", "rmse", "r"],
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> List["MetricSeries"]:
        series = []
        for (experiment, variable), group in frame.groupby(["experiment", "variable"], sort=False):
            records = [
                MetricRecord(int(row.time_index), float(row.rmse), None if pd.isna(row.r) else float(row.r))
                for row in group.sort_values("time_index").itertuples()
            ]
            series.append(cls(str(experiment), str(variable), records))
        return series


class RegionalSeries:
    """Per-step regional scores accumulated over a run, averaged on demand"""

    def __init__(self, regions: RegionSet):
        self.regions = regions
        self._rows: List[Dict] = []

    def add(self, variable: str, truth: ArrayLike, pred: ArrayLike) -> None:
        table = regional_eval(truth, pred, self.regions)
        for row in table.itertuples():
            self._rows.append({"region": row.region, "variable": variable, "rmse": row.rmse, "r": row.r})

    def summary(self) -> pd.DataFrame:
        """Mean RMSE and mean defined R per (region, variable), regions in declaration order"""
        columns = ["region", "variable", "rmse", "r"]
        if not self._rows:
            return pd.DataFrame(columns=columns)
        frame = pd.DataFrame(self._rows)
        frame["r"] = pd.to_numeric(frame["r"], errors="coerce")
        order = {region.name: i for i, region in enumerate(self.regions)}
        summary = frame.groupby(["region", "variable"], sort=False).agg(rmse=("rmse", "mean"), r=("r", "mean")).reset_index()
        summary["_order"] = summary["region"].map(order)
        return summary.sort_values(["_order", "variable"], kind="stable")[columns].reset_index(drop=True)


def win_rate(candidate: MetricSeries, baseline: MetricSeries) -> Optional[float]:
    """Fraction of shared time indices where the candidate RMSE is strictly lower"""
    base = {r.time_index: r.rmse for r in baseline.records}
    shared = [(r.rmse, base[r.time_index]) for r in candidate.records if r.time_index in base]
    if not shared:
        return None
    return sum(1 for a, b in shared if a < b) / len(shared)


def quarter_means(values: Sequence[float]) -> Tuple[float, float]:
    """Mean of the first and of the final quarter of a series"""
    values = np.asarray(list(values), dtype=np.float64)
    quarter = max(values.size // 4, 1)
    if values.size == 0:
        raise InsufficientDataError("empty series")
    return float(values[:quarter].mean()), float(values[-quarter:].mean())


def bounded_series(values: Sequence[float], window: int, factor: float = 2.0) -> Tuple[bool, float, float]:
    """(max of the final window <= factor * median of the first window, that max, that median)"""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise InsufficientDataError("empty series")
    window = max(min(window, values.size), 1)
    first_median = float(np.median(values[:window]))
    final_max = float(values[-window:].max())
    return final_max <= factor * first_median, final_max, first_median


def smoothed_non_decreasing(values: Sequence[float], window: int = 8, tolerance: float = 0.0) -> bool:
    """Whether consecutive non-overlapping window means never drop by more than ``tolerance``"""
    values = np.asarray(list(values), dtype=np.float64)
    means = [values[i:i + window].mean() for i in range(0, values.size - window + 1, window)]
    return all(b >= a - tolerance for a, b in zip(means, means[1:]))


def summarize_series(series: Iterable[MetricSeries]) -> pd.DataFrame:
    rows = []
    for s in series:
        r_values = s.r_values
        rows.append({
            "experiment": s.experiment,
            "variable": s.variable,
            "n": len(s),
            "rmse_mean": s.mean_rmse() if len(s) else np.nan,
            "r_mean": float(np.mean(r_values)) if r_values else np.nan,
            "r_undefined": len(s) - len(r_values),
        })
    return pd.DataFrame(rows, columns=["experiment", "variable", "n", "rmse_mean", "r_mean", "r_undefined"])


def dataset_correlation(reader, start: int, stop: int, stride: int = 1) -> pd.DataFrame:
    """Correlation matrix of every state and aux channel over [start, stop), sampled every ``stride`` steps"""
    times = list(range(start, stop, max(stride, 1)))
    if not times:
        raise InsufficientDataError(f"no time steps in [{start}, {stop})")
    names = list(reader.manifest.state_channels) + list(reader.manifest.aux_channels)
    stacks = np.empty((len(names), len(times)) + tuple(reader.shape))
    for i, t in enumerate(times):
        stacks[:, i] = np.concatenate([reader.state_array(t), reader.aux_array(t)])
    return correlation_matrix(dict(zip(names, stacks)))
