"""Gridded field containers passed between the world, the networks and the metrics."""
import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from typing import Dict, List, Optional
from .enums import Units
from .schemas import AUX_CHANNELS

# value stored at unobserved cells; never read as data
OBS_SENTINEL = -9999.0

AUX_UNITS = {
    "t2m": Units.KELVIN,
    "u10": Units.M_S,
    "v10": Units.M_S,
    "humidity": Units.FRACTION,
    "geopotential": Units.M2_S2,
    "bc_emis": Units.EMISSION_RATE,
    "oc_emis": Units.EMISSION_RATE,
}


class FieldModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class GridField(FieldModel):
    values: np.ndarray
    units: Units = Units.DIMENSIONLESS

    @model_validator(mode="after")
    def _two_dimensional(self) -> "GridField":
        if self.values.ndim != 2:
            raise ValueError(f"GridField needs a 2-D array, got shape {self.values.shape}")
        return self

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int, units: Units = Units.DIMENSIONLESS) -> "GridField":
        return cls(values=np.zeros((height, width)), units=units)

    def with_values(self, values: np.ndarray) -> "GridField":
        return GridField(values=values, units=self.units)


class StateSnapshot(FieldModel):
    """Model state at one time: PM2.5 and AOD550.

    ``coarse`` is the synthetic world's hidden coarse-aerosol tracer. It only exists on
    truth states during generation and is never written to datasets.
    """
    time_index: int
    pm25: GridField
    aod550: GridField
    coarse: Optional[GridField] = None

    @model_validator(mode="after")
    def _same_grid(self) -> "StateSnapshot":
        if self.pm25.shape != self.aod550.shape:
            raise ValueError("pm25 and aod550 must share the grid")
        if self.coarse is not None and self.coarse.shape != self.pm25.shape:
            raise ValueError("coarse tracer must share the grid")
        for name in ("pm25", "aod550", "coarse"):
            grid = getattr(self, name)
            if grid is not None and np.any(grid.values < 0.0):
                raise ValueError(f"{name} concentrations must be non-negative")
        return self


class AuxiliaryFrame(FieldModel):
    time_index: int
    t2m: GridField
    u10: GridField
    v10: GridField
    humidity: GridField
    geopotential: GridField
    bc_emis: GridField
    oc_emis: GridField

    @model_validator(mode="after")
    def _same_grid(self) -> "AuxiliaryFrame":
        shapes = {getattr(self, name).shape for name in AUX_CHANNELS}
        if len(shapes) != 1:
            raise ValueError(f"auxiliary channels disagree on grid shape: {sorted(shapes)}")
        return self

    def channels(self) -> List[GridField]:
        return [getattr(self, name) for name in AUX_CHANNELS]

    def stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.channels()])

    @classmethod
    def from_stack(cls, time_index: int, array: np.ndarray) -> "AuxiliaryFrame":
        if array.shape[0] != len(AUX_CHANNELS):
            raise ValueError(f"expected {len(AUX_CHANNELS)} auxiliary channels, got {array.shape[0]}")
        fields: Dict[str, GridField] = {
            name: GridField(values=array[i], units=AUX_UNITS[name])
            for i, name in enumerate(AUX_CHANNELS)
        }
        return cls(time_index=time_index, **fields)


class ObservationSet(FieldModel):
    time_index: int
    values: GridField
    mask: np.ndarray  # True = observed

    @model_validator(mode="after")
    def _sentinel_outside_mask(self) -> "ObservationSet":
        if self.mask.shape != self.values.shape or self.mask.dtype != bool:
            raise ValueError("mask must be a boolean array on the observation grid")
        if not np.all(self.values.values[~self.mask] == OBS_SENTINEL):
            raise ValueError("unobserved cells must carry the sentinel value")
        return self

    @classmethod
    def build(cls, time_index: int, values: np.ndarray, mask: np.ndarray) -> "ObservationSet":
        mask = np.asarray(mask, dtype=bool)
        filled = np.where(mask, values, OBS_SENTINEL)
        return cls(time_index=time_index, values=GridField(values=filled, units=Units.DIMENSIONLESS), mask=mask)

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())

    @property
    def observed_fraction(self) -> float:
        return float(self.mask.mean())

    def observed_values(self) -> np.ndarray:
        return self.values.values[self.mask]


class ErrorField(FieldModel):
    """Per-cell forecast error (truth - forecast) of one channel, kept in float64"""
    time_index: int
    channel: str
    values: np.ndarray


class DAPair(FieldModel):
    """One DANet sample: [aod_forecast, masked discrepancy] -> truth - forecast"""
    time_index: int
    lead_steps: int
    inputs: np.ndarray  # [2, H, W]
    label: np.ndarray  # [1, H, W]
    mask: np.ndarray

    @model_validator(mode="after")
    def _discrepancy_zero_off_mask(self) -> "DAPair":
        if self.inputs.shape[0] != 2 or self.label.shape[0] != 1:
            raise ValueError("DAPair needs 2 input channels and 1 label channel")
        if np.any(self.inputs[1][~self.mask] != 0.0):
            raise ValueError("discrepancy channel must be zero at unobserved cells")
        return self
