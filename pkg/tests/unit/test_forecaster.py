import numpy as np
import pytest
import torch
from src.models.enums import Units
from src.models.fields import AuxiliaryFrame, GridField, StateSnapshot
from src.models.schemas import PREDNET_INPUTS, PREDNET_OUTPUTS, NetworkSpec, TrainConfig
from src.services.forecaster import (
    Forecaster,
    NormalizationStats,
    PredNetSamples,
    compute_normalization,
    evaluate_lead_times,
    forecast_error,
    forecast_rollout,
    forecast_step,
    train_prednet,
)
from src.services.netblocks import DDNetwork, build_prednet
from src.utils.errors import InsufficientDataError, ShapeMismatchError
from tests.helpers import TruthForecaster, tiny_grid


def _stats(names, mean=0.0, std=1.0):
    n = len(names)
    return NormalizationStats(list(names), np.full(n, mean), np.full(n, std))


def _aux(height, width, time_index=1):
    return AuxiliaryFrame.from_stack(time_index, np.random.default_rng(time_index).normal(size=(7, height, width)))


@pytest.fixture
def small_forecaster():
    network = build_prednet(NetworkSpec.desk_prednet(hidden=4), seed=3)
    return Forecaster(network, _stats(PREDNET_INPUTS), _stats(PREDNET_OUTPUTS, mean=0.5, std=2.0))


def test_normalization_uses_training_segment_only(tiny_reader):
    input_stats, output_stats = compute_normalization(tiny_reader, 0, 48)
    assert input_stats.names == list(PREDNET_INPUTS)
    assert output_stats.names == list(PREDNET_OUTPUTS)
    assert np.all(input_stats.std > 0.0)
    expected = np.mean([tiny_reader.state_array(t)[0].mean() for t in range(1, 48)])
    assert output_stats.mean[0] == pytest.approx(expected)


def test_normalization_needs_two_steps(tiny_reader):
    with pytest.raises(InsufficientDataError):
        compute_normalization(tiny_reader, 5, 6)


def test_sample_windows_stay_inside_segment(tiny_reader):
    input_stats, output_stats = compute_normalization(tiny_reader, 0, 48)
    single = PredNetSamples(tiny_reader, 0, 48, input_stats, output_stats)
    assert len(single) == 47
    triple = PredNetSamples(tiny_reader, 0, 48, input_stats, output_stats, sequence_length=3, stride=2)
    assert triple.times[0] == 2 and triple.times[-1] <= 46
    inputs, target = triple(0)
    assert inputs.shape == (3, 8, 8, 16)
    assert target.shape == (2, 8, 16)


def test_zero_weight_network_outputs_channel_means():
    network = DDNetwork(NetworkSpec.desk_prednet(hidden=4))
    forecaster = Forecaster(network, _stats(PREDNET_INPUTS), _stats(PREDNET_OUTPUTS, mean=0.7, std=3.0))
    aux = _aux(4, 6)
    pm, aod = forecaster.forecast_step(GridField(values=np.ones((4, 6))), aux)
    assert np.allclose(pm.values, 0.7)
    assert np.allclose(aod.values, 0.7)


def test_negative_means_are_clipped_to_zero():
    network = DDNetwork(NetworkSpec.desk_prednet(hidden=4))
    forecaster = Forecaster(network, _stats(PREDNET_INPUTS), _stats(PREDNET_OUTPUTS, mean=-1.0))
    pm, aod = forecaster.forecast_step(GridField(values=np.ones((4, 6))), _aux(4, 6))
    assert np.all(pm.values == 0.0) and np.all(aod.values == 0.0)


def test_forecast_step_is_deterministic(small_forecaster):
    aod = GridField(values=np.random.default_rng(0).uniform(size=(4, 6)))
    first = small_forecaster.forecast_step(aod, _aux(4, 6))
    second = small_forecaster.forecast_step(aod, _aux(4, 6))
    assert np.array_equal(first[1].values, second[1].values)
    assert first[0].units is Units.UG_M3


def test_forecast_step_rejects_grid_mismatch(small_forecaster):
    with pytest.raises(ShapeMismatchError):
        small_forecaster.forecast_step(GridField(values=np.ones((5, 6))), _aux(4, 6))


def test_rollout_feeds_forecast_aod_back(small_forecaster):
    aod = GridField(values=np.random.default_rng(0).uniform(size=(4, 6)))
    series = [_aux(4, 6, t) for t in range(1, 4)]
    rollout = small_forecaster.rollout(aod, series, 3)
    assert len(rollout) == 3
    _, first_aod = small_forecaster.forecast_step(aod, series[0])
    _, second_aod = small_forecaster.forecast_step(first_aod, series[1])
    assert np.array_equal(rollout[0][1].values, first_aod.values)
    assert np.array_equal(rollout[1][1].values, second_aod.values)


def test_module_level_entry_points_delegate(small_forecaster):
    aod = GridField(values=np.random.default_rng(1).uniform(size=(4, 6)))
    series = [_aux(4, 6, t) for t in range(1, 3)]
    pm, aod_next = forecast_step(small_forecaster, aod, series[0])
    rollout = forecast_rollout(small_forecaster, aod, series, 2)
    assert np.array_equal(rollout[0][0].values, pm.values)
    assert np.array_equal(rollout[0][1].values, aod_next.values)


def test_rollout_needs_enough_aux_frames(small_forecaster):
    with pytest.raises(InsufficientDataError):
        small_forecaster.rollout(GridField(values=np.ones((4, 6))), [_aux(4, 6)], 2)


def test_longer_sequences_pad_missing_context():
    spec = NetworkSpec.desk_prednet(hidden=4).model_copy(update={"sequence_length": 3})
    forecaster = Forecaster(build_prednet(spec, seed=1), _stats(PREDNET_INPUTS), _stats(PREDNET_OUTPUTS))
    pm, aod = forecaster.forecast_step(GridField(values=np.ones((4, 6))), _aux(4, 6))
    assert pm.shape == aod.shape == (4, 6)


def test_metadata_restores_statistics(small_forecaster):
    restored = Forecaster.from_metadata(small_forecaster.network, small_forecaster.metadata())
    assert restored.output_stats.channel("aod550") == (0.5, 2.0)


def test_statistics_must_match_channel_layout():
    with pytest.raises(ShapeMismatchError):
        Forecaster(DDNetwork(NetworkSpec.desk_prednet(hidden=4)), _stats(PREDNET_OUTPUTS), _stats(PREDNET_OUTPUTS))


def test_forecast_error_reproduces_truth():
    truth = StateSnapshot(
        time_index=3,
        pm25=GridField(values=np.full((2, 2), 3.0)),
        aod550=GridField(values=np.array([[0.125, 0.25], [0.375, 0.5]])),
    )
    forecast = (GridField(values=np.ones((2, 2))), GridField(values=np.full((2, 2), 0.25)))
    pm_error, aod_error = forecast_error(truth, forecast)
    assert np.all(pm_error.values == 2.0)
    assert np.array_equal(forecast[1].values + aod_error.values, truth.aod550.values)
    assert aod_error.channel == "aod550"


def test_forecast_error_of_perfect_forecast_is_zero():
    field = GridField(values=np.arange(4.0).reshape(2, 2))
    truth = StateSnapshot(time_index=0, pm25=field, aod550=field)
    for error in forecast_error(truth, (field, field)):
        assert np.all(error.values == 0.0)


def test_lead_time_table_of_perfect_forecaster(tiny_reader):
    table = evaluate_lead_times(TruthForecaster(tiny_reader), tiny_reader, 64, 112, 5, 8, seed=0)
    assert sorted(table["lead"].unique()) == list(range(1, 9))
    assert set(table["variable"]) == {"pm25", "aod550"}
    assert np.allclose(table["rmse_mean"], 0.0)
    assert np.allclose(table["r_mean"], 1.0)
    assert (table["n"] == 5).all()


def test_lead_time_needs_room_for_the_lead(tiny_reader):
    with pytest.raises(InsufficientDataError):
        evaluate_lead_times(TruthForecaster(tiny_reader), tiny_reader, 100, 108, 5, 8, seed=0)


def test_training_is_deterministic(tiny_reader):
    spec = NetworkSpec.desk_prednet(hidden=2)
    cfg = TrainConfig(epochs=1, sample_stride=12, seed=4)
    first = train_prednet(tiny_reader, spec, cfg, tiny_grid())
    second = train_prednet(tiny_reader, spec, cfg, tiny_grid())
    assert len(first.training.log) == 1
    weights_a = first.forecaster.network.state_dict()
    weights_b = second.forecaster.network.state_dict()
    assert all(torch.equal(weights_a[name], weights_b[name]) for name in weights_a)
