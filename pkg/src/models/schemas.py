from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional
from src.utils.errors import ConfigurationError
from .enums import Precision

# Channel layouts: 8 PredNet inputs, 2 outputs, 2 DANet inputs, 1 output
STATE_CHANNELS = ("pm25", "aod550")
AUX_CHANNELS = ("t2m", "u10", "v10", "humidity", "geopotential", "bc_emis", "oc_emis")
PREDNET_INPUTS = ("aod550",) + AUX_CHANNELS
PREDNET_OUTPUTS = STATE_CHANNELS
DANET_INPUTS = ("aod_forecast", "discrepancy")
DANET_OUTPUTS = ("aod_error",)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EmissionSource(StrictModel):
    """Anthropogenic point-like source; position given as grid fractions so presets fit any grid"""
    row_frac: float = Field(ge=0.0, lt=1.0)
    col_frac: float = Field(ge=0.0, lt=1.0)
    radius_cells: float = Field(default=1.5, gt=0.0)
    # total concentration mass added per synthetic month; 1 value (flat) or 12 (one per month)
    monthly_totals: List[float] = Field(default_factory=lambda: [50000.0])
    bc_fraction: float = Field(default=0.3, ge=0.0, le=1.0)

    @field_validator("monthly_totals")
    @classmethod
    def _twelve_or_one(cls, value: List[float]) -> List[float]:
        if len(value) not in (1, 12):
            raise ValueError("monthly_totals needs 1 or 12 entries")
        if any(v < 0 for v in value):
            raise ValueError("monthly_totals must be non-negative")
        return value


class CoarseSource(StrictModel):
    """Wind-driven coarse-aerosol source; never exposed through the auxiliary channels"""
    row_frac: float = Field(ge=0.0, lt=1.0)
    col_frac: float = Field(ge=0.0, lt=1.0)
    radius_cells: float = Field(default=2.5, gt=0.0)
    strength: float = Field(default=3.0, ge=0.0)


def _seasonal(base: float, phase: int) -> List[float]:
    profile = [1.3, 1.2, 1.1, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 1.0, 1.1, 1.2]
    return [round(base * profile[(m + phase) % 12], 3) for m in range(12)]


def _default_sources() -> List[EmissionSource]:
    return [
        EmissionSource(row_frac=0.70, col_frac=0.15, monthly_totals=_seasonal(60000.0, 0), bc_fraction=0.35),
        EmissionSource(row_frac=0.62, col_frac=0.45, monthly_totals=_seasonal(50000.0, 0), bc_fraction=0.25),
        EmissionSource(row_frac=0.75, col_frac=0.74, monthly_totals=_seasonal(70000.0, 1), bc_fraction=0.40),
        EmissionSource(row_frac=0.30, col_frac=0.30, monthly_totals=_seasonal(30000.0, 6), bc_fraction=0.20),
        EmissionSource(row_frac=0.38, col_frac=0.82, monthly_totals=_seasonal(40000.0, 6), bc_fraction=0.30),
        EmissionSource(row_frac=0.52, col_frac=0.62, monthly_totals=[35000.0], bc_fraction=0.30),
    ]


def _default_coarse_sources() -> List[CoarseSource]:
    return [
        CoarseSource(row_frac=0.56, col_frac=0.30, strength=3.0),
        CoarseSource(row_frac=0.45, col_frac=0.05, strength=2.0),
        CoarseSource(row_frac=0.20, col_frac=0.58, strength=2.5),
    ]


class WorldConfig(StrictModel):
    height: int = Field(default=32, ge=2)
    width: int = Field(default=64, ge=2)
    cell_size_km: float = Field(default=100.0, gt=0.0)
    substeps: int = Field(default=3, ge=1)
    cfl_limit: float = Field(default=0.9, gt=0.0, le=1.0)
    periodic_ns: bool = False  # reflective north/south walls unless set

    # wind: zonal jet plus travelling divergence-free eddies
    jet_speed: float = 6.0
    wind_amplitude: float = Field(default=8.0, ge=0.0)
    rotation_period_hours: float = Field(default=240.0, gt=0.0)

    diffusion_m2_s: float = Field(default=5.0e4, ge=0.0)
    deposition_per_hour: float = Field(default=0.01, ge=0.0)
    bc_weight: float = Field(default=1.0, ge=0.0)
    oc_weight: float = Field(default=1.0, ge=0.0)
    sources: List[EmissionSource] = Field(default_factory=_default_sources)
    diurnal_amplitude: float = Field(default=0.4, ge=0.0, lt=1.0)
    weekend_factor: float = Field(default=0.8, gt=0.0)

    coarse_sources: List[CoarseSource] = Field(default_factory=_default_coarse_sources)
    coarse_deposition_per_hour: float = Field(default=0.03, ge=0.0)
    coarse_threshold_speed: float = Field(default=4.0, ge=0.0)
    coarse_reference_speed: float = Field(default=6.0, gt=0.0)

    # AOD coupling: aod = alpha*pm*(1 + w_h*hn) + coarse_weight*coarse + noise
    aod_alpha: float = Field(default=0.01, ge=0.0)
    humidity_weight: float = Field(default=0.3, ge=0.0)
    humidity_reference: float = 0.6
    humidity_scale: float = Field(default=0.3, gt=0.0)
    coupling_noise: float = Field(default=0.1, ge=0.0)
    coarse_aod_weight: float = Field(default=0.01, ge=0.0)
    target_correlation: Optional[float] = Field(default=0.6, gt=0.0, lt=1.0)

    # satellite-style observations
    swath_fraction: float = Field(default=0.4, gt=0.0, le=1.0)
    swath_tilt: float = 0.5
    swath_drift: float = 0.381966
    cloud_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    obs_noise: float = Field(default=0.02, ge=0.0)

    burn_in_steps: int = Field(default=2880, ge=0)
    variance_floor: float = Field(default=1e-3, ge=0.0)
    seed: int = 2019


class TimeGrid(StrictModel):
    dt_hours: float = Field(default=3.0, gt=0.0)
    t0: int = 0
    t1: int = 5760  # 2 synthetic years of 3-hourly steps
    t2: int = 6720  # + 4 months for DANet training
    t_end: int = 7680  # + 4 months of operational forecasting
    da_interval: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _ordered(self) -> "TimeGrid":
        if not (self.t0 < self.t1 < self.t2 < self.t_end):
            raise ValueError("time indices must satisfy t0 < t1 < t2 < t_end")
        if (self.t1 - self.t0) % self.da_interval or (self.t2 - self.t0) % self.da_interval:
            raise ValueError("t1 - t0 and t2 - t0 must be multiples of da_interval")
        if not (24.0 / self.dt_hours).is_integer():
            raise ValueError("dt_hours must divide 24")
        return self

    @property
    def steps_per_day(self) -> int:
        return int(24.0 / self.dt_hours)

    def is_da_time(self, time_index: int) -> bool:
        return (time_index - self.t0) % self.da_interval == 0


class NetworkSpec(StrictModel):
    name: str
    in_channels: int = Field(ge=1)
    hidden_channels: int = Field(ge=1)
    kernel_sizes: List[int] = Field(min_length=1)
    out_channels: int = Field(ge=1)
    head_kernel: int = 3
    batchnorm: bool = True
    bn_momentum: float = Field(default=0.99, ge=0.0, lt=1.0)
    bn_eps: float = Field(default=1e-3, gt=0.0)
    sequence_length: int = Field(default=1, ge=1)

    @field_validator("kernel_sizes")
    @classmethod
    def _odd_kernels(cls, value: List[int]) -> List[int]:
        if any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError("ConvLSTM kernel sizes must be odd and positive")
        return value

    @field_validator("head_kernel")
    @classmethod
    def _odd_head(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError("head kernel must be odd and positive")
        return value

    @classmethod
    def reference_prednet(cls) -> "NetworkSpec":
        return cls(name="prednet", in_channels=8, hidden_channels=64,
                   kernel_sizes=[7, 5, 3, 1], out_channels=2)

    @classmethod
    def reference_danet(cls) -> "NetworkSpec":
        return cls(name="danet", in_channels=2, hidden_channels=64,
                   kernel_sizes=[5, 3, 1], out_channels=1)

    @classmethod
    def desk_prednet(cls, hidden: int = 8) -> "NetworkSpec":
        return cls(name="prednet", in_channels=8, hidden_channels=hidden,
                   kernel_sizes=[7, 5, 3, 1], out_channels=2)

    @classmethod
    def desk_danet(cls, hidden: int = 8) -> "NetworkSpec":
        return cls(name="danet", in_channels=2, hidden_channels=hidden,
                   kernel_sizes=[5, 3, 1], out_channels=1)


class TrainConfig(StrictModel):
    epochs: int = Field(default=5, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = 7
    patience: int = Field(default=3, ge=1)
    precision: Precision = Precision.FLOAT32
    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    sample_stride: int = Field(default=1, ge=1)


class AssimilationPolicy(StrictModel):
    outlier_sigma: float = Field(default=4.0, gt=0.0)
    aod_cap: float = Field(default=5.0, gt=0.0)
    lead_cycles: List[int] = Field(default_factory=lambda: [1], min_length=1)

    @field_validator("lead_cycles")
    @classmethod
    def _positive(cls, value: List[int]) -> List[int]:
        if any(n < 1 for n in value):
            raise ValueError("lead_cycles entries must be >= 1")
        return sorted(set(value))


class CycleConfig(StrictModel):
    da_interval: Optional[int] = Field(default=None, ge=1)  # None: use the time grid's k
    horizon: Optional[int] = Field(default=None, ge=1)  # None: run to the end of the dataset
    start_index: Optional[int] = None  # None: T2
    emit_cadence: int = Field(default=8, ge=0)  # 0 disables trajectory snapshots


class EvaluationConfig(StrictModel):
    n_start_times: int = Field(default=100, ge=1)
    lead_steps: int = Field(default=40, ge=1)
    report_leads: List[int] = Field(default_factory=lambda: [8, 40])
    cap_points: int = Field(default=200, ge=2)
    region_rows: int = Field(default=2, ge=1)
    region_cols: int = Field(default=4, ge=1)
    seed: int = 11


class PathsConfig(StrictModel):
    dataset_dir: str = "data/desk"
    prednet_checkpoint: str = "checkpoints/prednet.ddnt"
    danet_checkpoint: str = "checkpoints/danet.ddnt"
    run_root: Optional[str] = None  # None: settings.run_root


class ExperimentConfig(StrictModel):
    name: str = "ddnet-desk"
    world: WorldConfig = Field(default_factory=WorldConfig)
    time_grid: TimeGrid = Field(default_factory=TimeGrid)
    prednet: NetworkSpec = Field(default_factory=NetworkSpec.desk_prednet)
    danet: NetworkSpec = Field(default_factory=NetworkSpec.desk_danet)
    prednet_training: TrainConfig = Field(default_factory=TrainConfig)
    danet_training: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=20, seed=13, patience=5))
    assimilation: AssimilationPolicy = Field(default_factory=AssimilationPolicy)
    cycle: CycleConfig = Field(default_factory=CycleConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if (self.prednet.in_channels, self.prednet.out_channels) != (len(PREDNET_INPUTS), len(PREDNET_OUTPUTS)):
            raise ValueError("prednet must map 8 input channels to 2 outputs")
        if (self.danet.in_channels, self.danet.out_channels) != (len(DANET_INPUTS), len(DANET_OUTPUTS)):
            raise ValueError("danet must map 2 input channels to 1 output")
        start, grid = self.cycle_start, self.time_grid
        if start < grid.t2:
            raise ConfigurationError("operational cycle must start at or after t2", key_path="cycle.start_index")
        if (start - grid.t0) % grid.da_interval:
            raise ConfigurationError(
                f"cycle start {start} is off the observation cadence (t - t0) % {grid.da_interval} == 0",
                key_path="cycle.start_index",
            )
        if self.cycle_interval % grid.da_interval:
            raise ConfigurationError(
                f"DA interval {self.cycle_interval} is not a multiple of the observation interval {grid.da_interval}",
                key_path="cycle.da_interval",
            )
        if start + self.cycle_horizon >= grid.t_end:
            raise ConfigurationError("cycle horizon runs past the last dataset step t_end - 1", key_path="cycle.horizon")
        if self.cycle_horizon < self.cycle_interval:
            raise ConfigurationError("cycle horizon must be at least one DA interval", key_path="cycle.horizon")
        return self

    @property
    def cycle_start(self) -> int:
        return self.cycle.start_index if self.cycle.start_index is not None else self.time_grid.t2

    @property
    def cycle_horizon(self) -> int:
        if self.cycle.horizon is not None:
            return self.cycle.horizon
        # the dataset holds steps [t0, t_end)
        return self.time_grid.t_end - 1 - self.cycle_start

    @property
    def cycle_interval(self) -> int:
        return self.cycle.da_interval or self.time_grid.da_interval
