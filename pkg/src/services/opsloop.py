"""
Operational forecasting cycle.

Starting from the truth AOD at the cycle start, PredNet steps forward one time step at a time.
Every ``interval`` steps the observations at that time are screened, DANet estimates the AOD
forecast error, and the analysis AOD replaces the forecast as the next initial condition.
PM2.5 is never assimilated directly; it follows from the next forecast step.

Truth is read only to score each step, and by the explicitly labelled oracle assimilator.
"""
import logging
import time
import numpy as np
import pandas as pd
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple
from src.data.field_io import DatasetReader
from src.models.fields import AuxiliaryFrame, ErrorField, GridField, ObservationSet, StateSnapshot
from src.models.schemas import AssimilationPolicy, ExperimentConfig
from src.services.assimilator import analysis_update, preprocess_observations
from src.services.evalkit import MetricSeries, RegionalSeries, RegionSet, default_regions
from src.services.forecaster import Forecaster, prednet_input_array
from src.utils.errors import InsufficientDataError

logger = logging.getLogger(__name__)

EXPERIMENT_DDNET = "ddnet"
EXPERIMENT_ANALYSIS = "ddnet_analysis"
EXPERIMENT_PREDNET = "prednet"


class ErrorEstimator(Protocol):
    def estimate_error(self, aod_forecast: GridField, obs: ObservationSet) -> ErrorField:
        ...


@dataclass
class CycleSettings:
    start: int
    horizon: int
    interval: int
    emit_cadence: int = 8

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"DA interval must be >= 1, got {self.interval}")
        if self.horizon < self.interval:
            raise ValueError(f"horizon {self.horizon} is shorter than one DA interval {self.interval}")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "CycleSettings":
        return cls(cfg.cycle_start, cfg.cycle_horizon, cfg.cycle_interval, cfg.cycle.emit_cadence)


@dataclass
class OperationalResult:
    experiment: str
    series: Dict[str, MetricSeries] = field(default_factory=dict)
    regional: Optional[RegionalSeries] = None
    forecasts: List[Tuple[GridField, GridField]] = field(default_factory=list)
    analyses: Dict[int, GridField] = field(default_factory=dict)
    snapshots: List[StateSnapshot] = field(default_factory=list)
    timings: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["cycle", "first_step", "last_step", "seconds"]))
    skipped_da: List[int] = field(default_factory=list)

    def metric(self, experiment: str, variable: str) -> MetricSeries:
        return self.series[f"{experiment}/{variable}"]

    def all_series(self) -> List[MetricSeries]:
        return list(self.series.values())


def _new_series(result: OperationalResult, experiment: str) -> None:
    for variable in ("pm25", "aod550"):
        result.series[f"{experiment}/{variable}"] = MetricSeries(experiment, variable)


def _assimilate(
    assimilator: ErrorEstimator,
    forecast_aod: GridField,
    reader: DatasetReader,
    t: int,
    policy: AssimilationPolicy,
) -> Optional[GridField]:
    raw = reader.observation(t)
    if raw is None:
        raise InsufficientDataError(
            f"no observation file at DA time {t}; the cycle start or DA interval is off the observation cadence"
        )
    obs = preprocess_observations(raw, policy)
    if obs.is_empty:
        logger.warning(f"All observations rejected at DA time {t}; DA step skipped")
        return None
    return analysis_update(forecast_aod, assimilator.estimate_error(forecast_aod, obs))


def _run_cycle(
    forecaster: Forecaster,
    assimilator: Optional[ErrorEstimator],
    reader: DatasetReader,
    settings: CycleSettings,
    policy: AssimilationPolicy,
    regions: Optional[RegionSet],
    experiment: str,
) -> OperationalResult:
    start, horizon, k = settings.start, settings.horizon, settings.interval
    if start + horizon >= reader.manifest.t_end:
        raise InsufficientDataError(
            f"cycle [{start}, {start + horizon}] runs past the dataset end {reader.manifest.t_end}"
        )
    if regions is None:
        regions = default_regions(*reader.shape)

    result = OperationalResult(experiment=experiment, regional=RegionalSeries(regions))
    _new_series(result, experiment)
    if assimilator is not None:
        result.series[f"{EXPERIMENT_ANALYSIS}/aod550"] = MetricSeries(EXPERIMENT_ANALYSIS, "aod550")

    aod = reader.state(start).aod550
    history: List[np.ndarray] = []
    timing_rows = []
    cycle_started = time.perf_counter()

    for step in range(1, horizon + 1):
        t = start + step
        aux: AuxiliaryFrame = reader.aux(t)
        pm, forecast_aod = forecaster.forecast_step(aod, aux, history)
        if forecaster.sequence_length > 1:
            history = (history + [prednet_input_array(aod.values, aux.stack())])[-(forecaster.sequence_length - 1):]
        result.forecasts.append((pm, forecast_aod))

        truth = reader.state(t)
        result.series[f"{experiment}/pm25"].add(t, truth.pm25, pm)
        result.series[f"{experiment}/aod550"].add(t, truth.aod550, forecast_aod)
        result.regional.add("pm25", truth.pm25, pm)
        result.regional.add("aod550", truth.aod550, forecast_aod)

        aod = forecast_aod
        if step % k == 0:
            if assimilator is not None:
                analysis = _assimilate(assimilator, forecast_aod, reader, t, policy)
                if analysis is None:
                    result.skipped_da.append(t)
                else:
                    result.analyses[t] = analysis
                    result.series[f"{EXPERIMENT_ANALYSIS}/aod550"].add(t, truth.aod550, analysis)
                    aod = analysis
            elapsed = time.perf_counter() - cycle_started
            timing_rows.append({"cycle": step // k, "first_step": t - k + 1, "last_step": t, "seconds": elapsed})
            logger.info(f"{experiment} cycle {step // k} ending t={t}: {elapsed:.3f}s")
            cycle_started = time.perf_counter()

        if settings.emit_cadence and step % settings.emit_cadence == 0:
            result.snapshots.append(StateSnapshot(time_index=t, pm25=pm, aod550=aod))

    result.timings = pd.DataFrame(timing_rows, columns=["cycle", "first_step", "last_step", "seconds"])
    aod_series = result.series[f"{experiment}/aod550"]
    logger.info(
        f"{experiment}: {horizon} steps from t={start}, {len(result.analyses)} analyses, "
        f"{len(result.skipped_da)} skipped DA steps, mean AOD RMSE {aod_series.mean_rmse():.5f}"
    )
    return result


def run_operational(
    forecaster: Forecaster,
    assimilator: ErrorEstimator,
    reader: DatasetReader,
    settings: CycleSettings,
    policy: AssimilationPolicy,
    regions: Optional[RegionSet] = None,
) -> OperationalResult:
    """
    The full D-DNet cycle: forecast, screen observations, estimate the error, analyse, reinitialize.

    Args:
        forecaster: trained PredNet
        assimilator: trained DANet, or a stand-in exposing ``estimate_error``
        reader: dataset holding the operational segment
        settings: start, horizon, DA interval, snapshot cadence
        policy: observation screening rules
        regions: boxes for regional scores; defaults to a 2x4 grid

    Returns:
        Metric series ``ddnet`` (every forecast step) and ``ddnet_analysis`` (DA times),
        trajectory, analyses, snapshots and per-cycle timings
    """
    if settings.start < reader.manifest.t2:
        raise InsufficientDataError(f"operational cycle starts at {settings.start}, before t2={reader.manifest.t2}")
    return _run_cycle(forecaster, assimilator, reader, settings, policy, regions, EXPERIMENT_DDNET)


def run_prednet_only(
    forecaster: Forecaster,
    reader: DatasetReader,
    settings: CycleSettings,
    regions: Optional[RegionSet] = None,
) -> OperationalResult:
    """One uninterrupted rollout over the horizon from the same initial condition."""
    return _run_cycle(forecaster, None, reader, settings, AssimilationPolicy(), regions, EXPERIMENT_PREDNET)
