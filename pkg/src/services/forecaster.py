"""PredNet training, single-step forecasts, autoregressive rollouts and forecast errors.

A PredNet sample maps ``[aod_t, aux_{t+1}]`` (8 channels) to ``[pm25_{t+1}, aod_{t+1}]``.
PM2.5 is output-only: rollouts feed the forecast AOD back, never the PM2.5.
"""
import logging
import numpy as np
import pandas as pd
import torch
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple
from src.data.field_io import DatasetReader
from src.models.enums import NormMode, Units
from src.models.fields import AuxiliaryFrame, ErrorField, GridField, StateSnapshot
from src.models.schemas import PREDNET_INPUTS, PREDNET_OUTPUTS, STATE_CHANNELS, NetworkSpec, TimeGrid, TrainConfig
from src.services import evalkit
from src.services.netblocks import DDNetwork, build_prednet
from src.services.training import TrainingResult, fit
from src.utils.errors import InsufficientDataError, ShapeMismatchError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class NormalizationStats:
    """Per-channel z-score statistics"""
    names: List[str]
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None, None] + self.mean[:, None, None]

    def channel(self, name: str) -> Tuple[float, float]:
        i = self.names.index(name)
        return float(self.mean[i]), float(self.std[i])

    def to_dict(self) -> Dict[str, Any]:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationStats":
        return cls(list(data["names"]), np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))

    @classmethod
    def from_moments(cls, names: Sequence[str], total: np.ndarray, total_sq: np.ndarray, count: int) -> "NormalizationStats":
        mean = total / count
        std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))
        # constant channels normalize to zero instead of blowing up
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(list(names), mean, std)


def prednet_input_array(aod: np.ndarray, aux_next: np.ndarray) -> np.ndarray:
    """[8, H, W] raw input: aod_t stacked over the 7 auxiliary channels of t+1"""
    return np.concatenate([aod[None], aux_next], axis=0)


def compute_normalization(reader: DatasetReader, start: int, stop: int) -> Tuple[NormalizationStats, NormalizationStats]:
    """Input and output statistics from pairs (t, t+1) with both ends inside [start, stop)"""
    if stop - start < 2:
        raise InsufficientDataError(f"segment [{start}, {stop}) holds fewer than 2 steps")
    n_in, n_out = len(PREDNET_INPUTS), len(PREDNET_OUTPUTS)
    in_sum, in_sq = np.zeros(n_in), np.zeros(n_in)
    out_sum, out_sq = np.zeros(n_out), np.zeros(n_out)
    cells = 0
    for t in range(start, stop - 1):
        x = prednet_input_array(reader.state_array(t)[1], reader.aux_array(t + 1))
        y = reader.state_array(t + 1)
        in_sum += x.sum(axis=(1, 2))
        in_sq += (x ** 2).sum(axis=(1, 2))
        out_sum += y.sum(axis=(1, 2))
        out_sq += (y ** 2).sum(axis=(1, 2))
        cells += x.shape[1] * x.shape[2]
    return (
        NormalizationStats.from_moments(PREDNET_INPUTS, in_sum, in_sq, cells),
        NormalizationStats.from_moments(PREDNET_OUTPUTS, out_sum, out_sq, cells),
    )


class PredNetSamples:
    """Lazy (input window, target) pairs over a dataset segment"""

    def __init__(
        self,
        reader: DatasetReader,
        start: int,
        stop: int,
        input_stats: NormalizationStats,
        output_stats: NormalizationStats,
        sequence_length: int = 1,
        stride: int = 1,
    ):
        self.reader = reader
        self.input_stats = input_stats
        self.output_stats = output_stats
        self.sequence_length = sequence_length
        # t is the last input frame; its target t+1 must stay inside the segment
        self.times = list(range(start + sequence_length - 1, stop - 1, stride))

    def __len__(self) -> int:
        return len(self.times)

    def __call__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        t = self.times[index]
        frames = []
        for j in range(t - self.sequence_length + 1, t + 1):
            raw = prednet_input_array(self.reader.state_array(j)[1], self.reader.aux_array(j + 1))
            frames.append(self.input_stats.normalize(raw))
        target = self.output_stats.normalize(self.reader.state_array(t + 1))
        return torch.from_numpy(np.stack(frames)), torch.from_numpy(target)


@dataclass
class TrainedPredNet:
    forecaster: "Forecaster"
    training: TrainingResult


class Forecaster:
    """PredNet wrapped with its normalization statistics"""

    def __init__(self, network: DDNetwork, input_stats: NormalizationStats, output_stats: NormalizationStats):
        if input_stats.names != list(PREDNET_INPUTS) or output_stats.names != list(PREDNET_OUTPUTS):
            raise ShapeMismatchError("normalization statistics do not match the PredNet channel layout")
        self.network = network
        self.input_stats = input_stats
        self.output_stats = output_stats

    @property
    def sequence_length(self) -> int:
        return self.network.spec.sequence_length

    def metadata(self) -> Dict[str, Any]:
        return {"input_stats": self.input_stats.to_dict(), "output_stats": self.output_stats.to_dict()}

    @classmethod
    def from_metadata(cls, network: DDNetwork, metadata: Dict[str, Any]) -> "Forecaster":
        return cls(
            network,
            NormalizationStats.from_dict(metadata["input_stats"]),
            NormalizationStats.from_dict(metadata["output_stats"]),
        )

    def _predict(self, window: Sequence[np.ndarray]) -> Tuple[GridField, GridField]:
        inputs = torch.from_numpy(np.stack([self.input_stats.normalize(x) for x in window]))
        with torch.no_grad():
            out = self.network(inputs.to(self.network.dtype), NormMode.INFER)[-1]
        values = self.output_stats.denormalize(out.detach().cpu().numpy().astype(np.float64))
        values = np.clip(values, 0.0, None)
        return GridField(values=values[0], units=Units.UG_M3), GridField(values=values[1], units=Units.DIMENSIONLESS)

    def forecast_step(
        self,
        state_aod: GridField,
        aux_next: AuxiliaryFrame,
        context: Optional[Sequence[np.ndarray]] = None,
    ) -> Tuple[GridField, GridField]:
        """
        One PredNet step: (aod_t, aux_{t+1}) -> (pm25_{t+1}, aod_{t+1}).

        Args:
            state_aod: current AOD550 field
            aux_next: auxiliary frame of the target time
            context: earlier raw input frames for sequence lengths above 1 (oldest first);
                missing frames are filled by repeating the oldest available frame

        Returns:
            (pm25, aod550) forecasts, both clipped at 0
        """
        if state_aod.shape != aux_next.t2m.shape:
            raise ShapeMismatchError(f"AOD grid {state_aod.shape} differs from aux grid {aux_next.t2m.shape}")
        frame = prednet_input_array(state_aod.values, aux_next.stack())
        window = list(context or [])[-(self.sequence_length - 1):] if self.sequence_length > 1 else []
        window.append(frame)
        while len(window) < self.sequence_length:
            window.insert(0, window[0])
        return self._predict(window)

    def rollout(
        self,
        initial_aod: GridField,
        aux_series: Sequence[AuxiliaryFrame],
        n_steps: int,
        context: Optional[Sequence[np.ndarray]] = None,
    ) -> List[Tuple[GridField, GridField]]:
        """Feed each forecast AOD into the next step; aux_series[i] drives step i+1"""
        if len(aux_series) < n_steps:
            raise InsufficientDataError(f"rollout of {n_steps} steps needs {n_steps} aux frames, got {len(aux_series)}")
        history = list(context or [])
        aod = initial_aod
        outputs = []
        for aux in aux_series[:n_steps]:
            pm, aod_next = self.forecast_step(aod, aux, history)
            history.append(prednet_input_array(aod.values, aux.stack()))
            history = history[-max(self.sequence_length - 1, 0):] if self.sequence_length > 1 else []
            outputs.append((pm, aod_next))
            aod = aod_next
        return outputs


def forecast_step(forecaster: Forecaster, state_aod: GridField, aux_next: AuxiliaryFrame) -> Tuple[GridField, GridField]:
    return forecaster.forecast_step(state_aod, aux_next)


def forecast_rollout(
    forecaster: Forecaster,
    initial_aod: GridField,
    aux_series: Sequence[AuxiliaryFrame],
    n_steps: int,
) -> List[Tuple[GridField, GridField]]:
    return forecaster.rollout(initial_aod, aux_series, n_steps)


def forecast_error(truth: StateSnapshot, forecast: Tuple[GridField, GridField]) -> Tuple[ErrorField, ErrorField]:
    """truth - forecast per channel, in float64 so forecast + error reproduces truth"""
    pm, aod = forecast
    if truth.pm25.shape != pm.shape or truth.aod550.shape != aod.shape:
        raise ShapeMismatchError(f"truth grid {truth.pm25.shape} differs from forecast grid {pm.shape}")
    errors = []
    for name, truth_field, forecast_field in zip(STATE_CHANNELS, (truth.pm25, truth.aod550), (pm, aod)):
        values = np.asarray(truth_field.values, dtype=np.float64) - np.asarray(forecast_field.values, dtype=np.float64)
        errors.append(ErrorField(time_index=truth.time_index, channel=name, values=values))
    return errors[0], errors[1]


def train_prednet(
    reader: DatasetReader,
    spec: NetworkSpec,
    cfg: TrainConfig,
    time_grid: TimeGrid,
) -> TrainedPredNet:
    """
    Fit PredNet on the [T0, T1) segment.

    Args:
        reader: dataset
        spec: PredNet architecture (8 -> 2 channels)
        cfg: training configuration; its seed drives initialization and shuffling
        time_grid: segment boundaries

    Returns:
        Forecaster holding the best-validation weights, and the training log
    """
    start, stop = time_grid.t0, time_grid.t1
    if stop > reader.manifest.t_end:
        raise InsufficientDataError(f"training segment ends at {stop}, dataset ends at {reader.manifest.t_end}")
    input_stats, output_stats = compute_normalization(reader, start, stop)
    samples = PredNetSamples(reader, start, stop, input_stats, output_stats, spec.sequence_length, cfg.sample_stride)
    if len(samples) == 0:
        raise InsufficientDataError(f"segment [{start}, {stop}) yields no PredNet samples for L={spec.sequence_length}")
    network = build_prednet(spec, seed=cfg.seed, precision=cfg.precision)
    result = fit(network, samples, len(samples), cfg, label="prednet")
    return TrainedPredNet(Forecaster(result.network, input_stats, output_stats), result)


def evaluate_lead_times(
    forecaster: Forecaster,
    reader: DatasetReader,
    start: int,
    stop: int,
    n_start_times: int,
    lead_steps: int,
    seed: int,
) -> pd.DataFrame:
    """
    Lead-time skill from rollouts launched at random start times in [start, stop - lead_steps).

    Returns:
        One row per (variable, lead): rmse_mean, rmse_std, r_mean, r_std, n
    """
    last_start = stop - lead_steps
    if last_start <= start:
        raise InsufficientDataError(f"segment [{start}, {stop}) is shorter than the {lead_steps}-step lead")
    rng = np.random.default_rng(seed)
    candidates = np.arange(start, last_start)
    n = min(n_start_times, candidates.size)
    starts = np.sort(rng.choice(candidates, size=n, replace=False))

    rmse = {name: np.full((n, lead_steps), np.nan) for name in STATE_CHANNELS}
    corr = {name: np.full((n, lead_steps), np.nan) for name in STATE_CHANNELS}
    for row, t in enumerate(starts.tolist()):
        rollout = forecaster.rollout(reader.state(t).aod550, reader.aux_series(t + 1, t + 1 + lead_steps), lead_steps)
        for lead, (pm, aod) in enumerate(rollout):
            truth = reader.state(t + 1 + lead)
            for name, truth_field, pred in zip(STATE_CHANNELS, (truth.pm25, truth.aod550), (pm, aod)):
                rmse[name][row, lead] = evalkit.rmse(truth_field, pred)
                r = evalkit.corrcoef(truth_field, pred)
                if r is not None:
                    corr[name][row, lead] = r
    logger.info(f"Evaluated {n} rollouts of {lead_steps} steps from [{start}, {last_start})")

    rows = []
    for name in STATE_CHANNELS:
        for lead in range(lead_steps):
            r_values = corr[name][:, lead]
            defined = r_values[~np.isnan(r_values)]
            rows.append({
                "variable": name,
                "lead": lead + 1,
                "rmse_mean": float(np.mean(rmse[name][:, lead])),
                "rmse_std": float(np.std(rmse[name][:, lead])),
                "r_mean": float(np.mean(defined)) if defined.size else np.nan,
                "r_std": float(np.std(defined)) if defined.size else np.nan,
                "n": int(n),
            })
    return pd.DataFrame(rows, columns=["variable", "lead", "rmse_mean", "rmse_std", "r_mean", "r_std", "n"])
