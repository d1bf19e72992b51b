"""Learned data assimilation: observation screening, DANet training set and training,
forecast-error estimation and the analysis update.

DANet input channels: normalized AOD forecast and the observation-minus-forecast
discrepancy (zero at unobserved cells), both scaled by PredNet's AOD statistics.
Its single output is the AOD forecast error, truth - forecast.
"""
import logging
import numpy as np
import pandas as pd
import torch
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple
from src.data.field_io import DatasetReader
from src.models.enums import NormMode, Units
from src.models.fields import AuxiliaryFrame, DAPair, ErrorField, GridField, ObservationSet
from src.models.schemas import AssimilationPolicy, NetworkSpec, TrainConfig
from src.services import evalkit
from src.services.netblocks import DDNetwork, build_danet
from src.services.training import TrainingResult, fit
from src.utils.errors import InsufficientDataError, ShapeMismatchError

logger = logging.getLogger(__name__)


class RolloutModel(Protocol):
    def rollout(self, initial_aod: GridField, aux_series: Sequence[AuxiliaryFrame], n_steps: int) -> List[Tuple[GridField, GridField]]:
        ...


def preprocess_observations(raw: ObservationSet, policy: AssimilationPolicy) -> ObservationSet:
    """
    Screen observations before assimilation.

    A cell is dropped when its value lies more than ``outlier_sigma`` standard deviations
    from the mean of all observed cells, or exceeds the physical cap ``aod_cap``. Survivors
    are clipped at 0. The result may be empty, which callers treat as "skip DA".
    """
    if raw.is_empty:
        return raw
    observed = raw.observed_values()
    mean, std = float(observed.mean()), float(observed.std())
    z = np.abs(observed - mean) / std if std > 0.0 else np.zeros_like(observed)
    rejected = (z > policy.outlier_sigma) | (observed > policy.aod_cap)

    mask = raw.mask.copy()
    mask[raw.mask] = ~rejected
    if rejected.any():
        logger.debug(f"Screened {int(rejected.sum())} of {observed.size} observations at t={raw.time_index}")
    values = np.clip(np.where(mask, raw.values.values, 0.0), 0.0, None)
    return ObservationSet.build(raw.time_index, values, mask)


def discrepancy(aod_forecast: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """obs - forecast on observed cells, exactly 0 elsewhere"""
    return np.where(obs.mask, obs.values.values - aod_forecast, 0.0)


def build_da_training_set(
    forecaster: RolloutModel,
    reader: DatasetReader,
    start: int,
    stop: int,
    policy: AssimilationPolicy,
    interval: int,
) -> List[DAPair]:
    """
    DA pairs for every observation time in [start, stop).

    For each DA time t and each lead n in ``policy.lead_cycles`` the forecaster rolls out
    n*interval steps from the truth AOD at t - n*interval. Times without usable
    observations are skipped.

    Returns:
        Pairs ordered by (time_index, lead)
    """
    pairs: List[DAPair] = []
    t0 = reader.manifest.t0
    for t in range(start, stop):
        if (t - t0) % interval:
            continue
        raw = reader.observation(t)
        if raw is None:
            logger.warning(f"No observations stored for DA time {t}; pair skipped")
            continue
        obs = preprocess_observations(raw, policy)
        if obs.is_empty:
            logger.warning(f"All observations rejected at DA time {t}; pair skipped")
            continue
        truth = reader.state(t).aod550.values
        for n in policy.lead_cycles:
            lead = n * interval
            origin = t - lead
            if origin < t0:
                continue
            rollout = forecaster.rollout(reader.state(origin).aod550, reader.aux_series(origin + 1, t + 1), lead)
            forecast = rollout[-1][1].values
            pairs.append(DAPair(
                time_index=t,
                lead_steps=lead,
                inputs=np.stack([forecast, discrepancy(forecast, obs)]),
                label=(truth - forecast)[None],
                mask=obs.mask,
            ))
    logger.info(f"Built {len(pairs)} DA pairs over [{start}, {stop})")
    return pairs


class DASamples:
    def __init__(self, pairs: Sequence[DAPair], aod_mean: float, aod_std: float):
        self.pairs = list(pairs)
        self.aod_mean = aod_mean
        self.aod_std = aod_std

    def __len__(self) -> int:
        return len(self.pairs)

    def __call__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        pair = self.pairs[index]
        inputs = danet_input(pair.inputs[0], pair.inputs[1], self.aod_mean, self.aod_std)
        return torch.from_numpy(inputs[None]), torch.from_numpy(pair.label / self.aod_std)


def danet_input(aod_forecast: np.ndarray, discrepancy_values: np.ndarray, aod_mean: float, aod_std: float) -> np.ndarray:
    return np.stack([(aod_forecast - aod_mean) / aod_std, discrepancy_values / aod_std])


class Assimilator:
    """DANet with the AOD normalization it was trained under"""

    def __init__(self, network: DDNetwork, aod_mean: float, aod_std: float):
        if aod_std <= 0:
            raise ValueError(f"AOD std must be positive, got {aod_std}")
        self.network = network
        self.aod_mean = aod_mean
        self.aod_std = aod_std

    def metadata(self) -> Dict[str, Any]:
        return {"aod_mean": self.aod_mean, "aod_std": self.aod_std}

    @classmethod
    def from_metadata(cls, network: DDNetwork, metadata: Dict[str, Any]) -> "Assimilator":
        return cls(network, float(metadata["aod_mean"]), float(metadata["aod_std"]))

    def estimate_error(self, aod_forecast: GridField, obs: ObservationSet) -> ErrorField:
        """Forecast error over the full grid, unobserved cells included"""
        if aod_forecast.shape != obs.values.shape:
            raise ShapeMismatchError(f"forecast grid {aod_forecast.shape} differs from observation grid {obs.values.shape}")
        inputs = danet_input(aod_forecast.values, discrepancy(aod_forecast.values, obs), self.aod_mean, self.aod_std)
        with torch.no_grad():
            out = self.network(torch.from_numpy(inputs[None]).to(self.network.dtype), NormMode.INFER)[-1, 0]
        values = out.detach().cpu().numpy().astype(np.float64) * self.aod_std
        return ErrorField(time_index=obs.time_index, channel="aod550", values=values)


class TruthOracleAssimilator:
    """Upper-bound stand-in for DANet: returns the exact error from the truth it is given"""

    def __init__(self, truth_aod: Callable[[int], GridField]):
        self.truth_aod = truth_aod

    def estimate_error(self, aod_forecast: GridField, obs: ObservationSet) -> ErrorField:
        truth = self.truth_aod(obs.time_index)
        return ErrorField(time_index=obs.time_index, channel="aod550", values=truth.values - aod_forecast.values)


def estimate_error(assimilator: Assimilator, aod_forecast: GridField, obs: ObservationSet) -> ErrorField:
    return assimilator.estimate_error(aod_forecast, obs)


def analysis_update(aod_forecast: GridField, error: ErrorField) -> GridField:
    """analysis = forecast + estimated error, clipped at 0"""
    if aod_forecast.shape != error.values.shape:
        raise ShapeMismatchError(f"forecast grid {aod_forecast.shape} differs from error grid {error.values.shape}")
    return aod_forecast.with_values(np.clip(aod_forecast.values + error.values, 0.0, None))


@dataclass
class TrainedDANet:
    assimilator: Assimilator
    training: TrainingResult


def train_danet(
    pairs: Sequence[DAPair],
    spec: NetworkSpec,
    cfg: TrainConfig,
    aod_mean: float,
    aod_std: float,
) -> TrainedDANet:
    """
    Fit DANet on DA pairs; the trailing ``validation_fraction`` of pairs is held out.

    Args:
        pairs: chronological DA pairs
        spec: DANet architecture (2 -> 1 channels)
        cfg: training configuration
        aod_mean, aod_std: PredNet's AOD input statistics

    Returns:
        Assimilator holding the best-validation weights, and the training log
    """
    if not pairs:
        raise InsufficientDataError("DANet training needs at least one DA pair")
    samples = DASamples(pairs, aod_mean, aod_std)
    network = build_danet(spec, seed=cfg.seed, precision=cfg.precision)
    result = fit(network, samples, len(samples), cfg, label="danet")
    return TrainedDANet(Assimilator(result.network, aod_mean, aod_std), result)


def evaluate_assimilation(assimilator, pairs: Sequence[DAPair]) -> pd.DataFrame:
    """Raw forecast vs analysis skill per DA pair; columns follow da_eval.csv"""
    rows = []
    for pair in pairs:
        forecast = GridField(values=pair.inputs[0], units=Units.DIMENSIONLESS)
        truth = pair.inputs[0] + pair.label[0]
        obs = ObservationSet.build(pair.time_index, pair.inputs[0] + pair.inputs[1], pair.mask)
        analysis = analysis_update(forecast, assimilator.estimate_error(forecast, obs))
        rows.append({
            "time_index": pair.time_index,
            "rmse_forecast": evalkit.rmse(truth, forecast),
            "rmse_analysis": evalkit.rmse(truth, analysis),
            "r_forecast": evalkit.corrcoef(truth, forecast),
            "r_analysis": evalkit.corrcoef(truth, analysis),
        })
    return pd.DataFrame(rows, columns=["time_index", "rmse_forecast", "rmse_analysis", "r_forecast", "r_analysis"])


def improvement_fraction(evaluation: pd.DataFrame) -> Optional[float]:
    if evaluation.empty:
        return None
    return float((evaluation["rmse_analysis"] < evaluation["rmse_forecast"]).mean())
