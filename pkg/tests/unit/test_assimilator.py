import numpy as np
import pandas as pd
import pytest
import torch
from src.models.fields import DAPair, ErrorField, GridField, ObservationSet
from src.models.schemas import AssimilationPolicy, NetworkSpec, TrainConfig
from src.services.assimilator import (
    Assimilator,
    DASamples,
    TruthOracleAssimilator,
    analysis_update,
    build_da_training_set,
    discrepancy,
    estimate_error,
    evaluate_assimilation,
    improvement_fraction,
    preprocess_observations,
    train_danet,
)
from src.services.netblocks import DDNetwork
from src.utils.errors import InsufficientDataError, ShapeMismatchError
from tests.helpers import TruthForecaster


def _obs(values, mask=None, time_index=8):
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.shape, dtype=bool) if mask is None else mask
    return ObservationSet.build(time_index, values, mask)


def _error(values, time_index=8):
    return ErrorField(time_index=time_index, channel="aod550", values=np.asarray(values, dtype=np.float64))


def test_clean_observations_pass_unchanged():
    raw = _obs([[0.2, 0.3, 0.25], [0.4, 0.35, 0.3]])
    screened = preprocess_observations(raw, AssimilationPolicy())
    assert np.array_equal(screened.mask, raw.mask)
    assert np.array_equal(screened.values.values, raw.values.values)


def test_heavy_tailed_outliers_fall_to_the_physical_cap():
    policy = AssimilationPolicy()
    # z-scores of 2.0 and 3.0 stay under 4 sigma; the absolute cap removes them
    few = preprocess_observations(_obs([[1.0, 1.0, 1.0, 1.0, 100.0]]), policy)
    assert few.mask.tolist() == [[True, True, True, True, False]]
    many = preprocess_observations(_obs([[1.0] * 9 + [50.0]]), policy)
    assert not many.mask[0, 9] and many.mask[0, :9].all()


def test_z_rule_rejects_isolated_spike():
    values = np.zeros((10, 10))
    values[3, 7] = 4.0
    screened = preprocess_observations(_obs(values), AssimilationPolicy(aod_cap=10.0))
    assert not screened.mask[3, 7]
    assert screened.mask.sum() == 99


def test_fully_masked_input_stays_empty():
    raw = _obs(np.ones((2, 2)), mask=np.zeros((2, 2), dtype=bool))
    assert preprocess_observations(raw, AssimilationPolicy()).is_empty


def test_discrepancy_is_zero_off_mask():
    mask = np.array([[True, False], [False, True]])
    obs = _obs([[0.5, 9.0], [9.0, 0.1]], mask=mask)
    d = discrepancy(np.full((2, 2), 0.2), obs)
    assert d.tolist() == pytest.approx([[0.3, 0.0], [0.0, -0.1]])


def test_perfect_forecaster_gives_zero_labels(tiny_reader):
    policy = AssimilationPolicy(lead_cycles=[1, 2])
    pairs = build_da_training_set(TruthForecaster(tiny_reader), tiny_reader, 48, 64, policy, interval=4)
    assert [(p.time_index, p.lead_steps) for p in pairs] == [
        (48, 4), (48, 8), (52, 4), (52, 8), (56, 4), (56, 8), (60, 4), (60, 8),
    ]
    for pair in pairs:
        assert np.all(pair.label == 0.0)
        assert np.all(pair.inputs[1][~pair.mask] == 0.0)


def test_pairs_only_at_observation_times(tiny_reader):
    pairs = build_da_training_set(TruthForecaster(tiny_reader), tiny_reader, 49, 60, AssimilationPolicy(), interval=4)
    assert [p.time_index for p in pairs] == [52, 56]


def test_noiseless_observation_of_the_forecast_has_zero_discrepancy():
    forecast = np.random.default_rng(2).uniform(size=(4, 4))
    mask = np.random.default_rng(3).random((4, 4)) < 0.5
    assert np.all(discrepancy(forecast, _obs(forecast, mask=mask)) == 0.0)


def test_zero_weight_danet_estimates_zero_error_everywhere():
    assimilator = Assimilator(DDNetwork(NetworkSpec.desk_danet(hidden=4)), aod_mean=0.3, aod_std=0.2)
    mask = np.zeros((4, 6), dtype=bool)
    mask[0, 0] = True
    error = estimate_error(assimilator, GridField(values=np.full((4, 6), 0.3)), _obs(np.full((4, 6), 0.5), mask=mask))
    assert error.values.shape == (4, 6)
    assert np.all(error.values == 0.0)
    assert error.channel == "aod550"


def test_assimilator_rejects_grid_mismatch():
    assimilator = Assimilator(DDNetwork(NetworkSpec.desk_danet(hidden=4)), 0.3, 0.2)
    with pytest.raises(ShapeMismatchError):
        assimilator.estimate_error(GridField(values=np.ones((3, 3))), _obs(np.ones((4, 4))))


def test_assimilator_metadata_roundtrip():
    network = DDNetwork(NetworkSpec.desk_danet(hidden=4))
    restored = Assimilator.from_metadata(network, Assimilator(network, 0.3, 0.2).metadata())
    assert (restored.aod_mean, restored.aod_std) == (0.3, 0.2)
    with pytest.raises(ValueError):
        Assimilator(network, 0.3, 0.0)


def test_analysis_update_adds_the_error():
    forecast = GridField(values=np.ones((2, 3)))
    assert np.array_equal(analysis_update(forecast, _error(np.zeros((2, 3)))).values, forecast.values)
    assert np.allclose(analysis_update(forecast, _error(np.full((2, 3), 0.5))).values, 1.5)


def test_analysis_update_clips_negative_cells():
    forecast = GridField(values=np.array([[0.2, 0.8]]))
    analysis = analysis_update(forecast, _error([[-0.5, -0.25]]))
    assert analysis.values.tolist() == pytest.approx([[0.0, 0.55]])


def test_analysis_update_rejects_grid_mismatch():
    with pytest.raises(ShapeMismatchError):
        analysis_update(GridField(values=np.ones((2, 2))), _error(np.ones((2, 3))))


def test_oracle_analysis_equals_truth():
    truth = np.random.default_rng(4).uniform(0.1, 1.0, size=(4, 4))
    oracle = TruthOracleAssimilator(lambda t: GridField(values=truth))
    forecast = GridField(values=np.full((4, 4), 0.5))
    analysis = analysis_update(forecast, oracle.estimate_error(forecast, _obs(truth)))
    assert np.allclose(analysis.values, truth, atol=1e-15)


def _synthetic_pairs(n=4, shape=(4, 6)):
    rng = np.random.default_rng(5)
    pairs = []
    for i in range(n):
        forecast = rng.uniform(0.2, 0.6, size=shape)
        label = rng.normal(0.0, 0.05, size=shape)[None]
        mask = rng.random(shape) < 0.4
        disc = np.where(mask, forecast + label[0] - forecast, 0.0)
        pairs.append(DAPair(time_index=4 * i, lead_steps=4, inputs=np.stack([forecast, disc]), label=label, mask=mask))
    return pairs


def test_samples_are_scaled_by_aod_statistics():
    pairs = _synthetic_pairs(1)
    inputs, target = DASamples(pairs, aod_mean=0.4, aod_std=0.1)(0)
    assert inputs.shape == (1, 2, 4, 6)
    assert torch.allclose(inputs[0, 0], torch.from_numpy((pairs[0].inputs[0] - 0.4) / 0.1))
    assert torch.allclose(target, torch.from_numpy(pairs[0].label / 0.1))


def test_oracle_improves_every_pair():
    pairs = _synthetic_pairs()
    truth = {p.time_index: GridField(values=np.clip(p.inputs[0] + p.label[0], 0.0, None)) for p in pairs}
    evaluation = evaluate_assimilation(TruthOracleAssimilator(truth.__getitem__), pairs)
    assert list(evaluation.columns) == ["time_index", "rmse_forecast", "rmse_analysis", "r_forecast", "r_analysis"]
    assert np.allclose(evaluation["rmse_analysis"], 0.0)
    assert improvement_fraction(evaluation) == 1.0


def test_improvement_fraction_of_nothing_is_undefined():
    assert improvement_fraction(pd.DataFrame(columns=["rmse_forecast", "rmse_analysis"])) is None


def test_training_without_pairs_raises():
    with pytest.raises(InsufficientDataError):
        train_danet([], NetworkSpec.desk_danet(hidden=4), TrainConfig(), 0.3, 0.1)


def test_danet_training_is_deterministic():
    pairs = _synthetic_pairs()
    cfg = TrainConfig(epochs=2, seed=13)
    first = train_danet(pairs, NetworkSpec.desk_danet(hidden=2), cfg, 0.4, 0.1)
    second = train_danet(pairs, NetworkSpec.desk_danet(hidden=2), cfg, 0.4, 0.1)
    assert len(first.training.log) == 2
    a, b = first.assimilator.network.state_dict(), second.assimilator.network.state_dict()
    assert all(torch.equal(a[name], b[name]) for name in a)
    assert (first.assimilator.aod_mean, first.assimilator.aod_std) == (0.4, 0.1)
