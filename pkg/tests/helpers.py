from src.data.field_io import DatasetReader
from src.models.schemas import TimeGrid, WorldConfig


def tiny_world(**overrides) -> WorldConfig:
    params = {"height": 8, "width": 16, "burn_in_steps": 40, "seed": 5}
    params.update(overrides)
    return WorldConfig(**params)


def tiny_grid(**overrides) -> TimeGrid:
    params = {"t0": 0, "t1": 48, "t2": 64, "t_end": 112, "da_interval": 4}
    params.update(overrides)
    return TimeGrid(**params)


class TruthForecaster:
    """Stand-in for PredNet that returns the stored truth of the target step"""

    sequence_length = 1

    def __init__(self, reader: DatasetReader):
        self.reader = reader

    def forecast_step(self, state_aod, aux_next, context=None):
        truth = self.reader.state(aux_next.time_index)
        return truth.pm25, truth.aod550

    def rollout(self, initial_aod, aux_series, n_steps, context=None):
        return [self.forecast_step(None, aux) for aux in aux_series[:n_steps]]


class PersistenceForecaster:
    """Carries the AOD field forward unchanged; PM2.5 is a fixed multiple of it"""

    sequence_length = 1

    def __init__(self, pm_per_aod: float = 100.0):
        self.pm_per_aod = pm_per_aod

    def forecast_step(self, state_aod, aux_next, context=None):
        return state_aod.with_values(state_aod.values * self.pm_per_aod), state_aod.with_values(state_aod.values.copy())
