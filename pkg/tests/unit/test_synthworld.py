import itertools
import math
import numpy as np
import pytest
from src.models.enums import Units
from src.models.fields import OBS_SENTINEL, AuxiliaryFrame, GridField, StateSnapshot
from src.models.schemas import AUX_CHANNELS, WorldConfig
from src.services.synthworld import (
    CouplingMoments,
    SyntheticWorld,
    aod_from_pm,
    calibrate_coarse_weight,
    check_stability,
    disaggregate_emissions,
    footprint,
    iterate_world,
    simulate_observations,
    step_dynamics,
    steps_per_month,
    swath_mask,
    temporal_profile,
    transport,
    world_rng,
)
from src.utils.errors import StabilityError
from tests.helpers import tiny_grid, tiny_world


def _random_field(seed, shape=(8, 16)):
    return np.random.default_rng(seed).uniform(0.0, 10.0, size=shape)


@pytest.mark.parametrize("periodic_ns", [True, False])
def test_transport_conserves_mass(periodic_ns):
    cfg = tiny_world(periodic_ns=periodic_ns)
    q = _random_field(1)
    u = np.full(q.shape, 4.0)
    v = np.random.default_rng(2).uniform(-3.0, 3.0, size=q.shape)
    out = transport(q, u, v, cfg, dt_hours=3.0)
    assert out.sum() == pytest.approx(q.sum(), rel=1e-12)


def test_transport_of_point_mass_stays_non_negative():
    cfg = tiny_world(diffusion_m2_s=0.0)
    q = np.zeros((8, 16))
    q[4, 8] = 100.0
    u = np.full(q.shape, 8.0)
    v = np.full(q.shape, 0.0)
    out = transport(q, u, v, cfg, dt_hours=3.0)
    assert out.min() >= -1e-12
    assert out.max() <= 100.0
    assert out.sum() == pytest.approx(100.0)
    # upwind moves mass east only
    assert out[4, :8].sum() == pytest.approx(0.0)


def test_cfl_violation_raises():
    cfg = tiny_world()
    u = np.full((8, 16), 30.0)  # 30 m/s * 3600 s / 100 km = 1.08
    with pytest.raises(StabilityError):
        check_stability(u, np.zeros_like(u), cfg, dt_hours=3.0)


def test_cfl_within_limit_returns_courant_number():
    cfg = tiny_world()
    u = np.full((8, 16), 10.0)
    assert check_stability(u, np.zeros_like(u), cfg, dt_hours=3.0) == pytest.approx(0.36)


def test_disaggregation_is_proportional():
    assert disaggregate_emissions(100.0, [1.0, 1.0, 2.0], 3) == pytest.approx([25.0, 25.0, 50.0])


def test_disaggregation_rejects_bad_profiles():
    with pytest.raises(ValueError):
        disaggregate_emissions(10.0, [1.0, 1.0], 3)
    with pytest.raises(ValueError):
        disaggregate_emissions(10.0, [0.0, 0.0], 2)
    with pytest.raises(ValueError):
        disaggregate_emissions(10.0, [1.0, -1.0], 2)


def test_temporal_profile_covers_one_month():
    profile = temporal_profile(0, 3.0, tiny_world())
    assert profile.shape == (steps_per_month(3.0),) == (240,)
    assert np.all(profile > 0.0)


def test_footprint_is_normalized():
    weights = footprint(8, 16, 0.5, 0.95, 1.5)
    assert weights.sum() == pytest.approx(1.0)
    # periodic in longitude: the plume wraps onto the first column
    assert weights[:, 0].sum() > weights[:, 8].sum()


def test_aod_without_noise_or_humidity_anomaly_is_linear_in_pm():
    cfg = tiny_world()
    pm = GridField(values=_random_field(3))
    humidity = GridField(values=np.full((8, 16), cfg.humidity_reference))
    aod = aod_from_pm(pm, humidity, cfg)
    assert np.allclose(aod.values, cfg.aod_alpha * pm.values)


def test_swath_mask_covers_configured_fraction_and_moves():
    cfg = WorldConfig(height=32, width=64)
    first = swath_mask(32, 64, 0, cfg)
    assert first.mean() == pytest.approx(cfg.swath_fraction, abs=0.05)
    assert not np.array_equal(first, swath_mask(32, 64, 1, cfg))


def test_observations_carry_sentinel_off_swath():
    cfg = tiny_world(cloud_dropout=0.0, obs_noise=0.0)
    aod = GridField(values=_random_field(4) * 0.1)
    obs = simulate_observations(aod, 8, cfg, world_rng(cfg.seed, 2))
    assert np.array_equal(obs.mask, swath_mask(8, 16, 8, cfg))
    assert np.allclose(obs.values.values[obs.mask], aod.values[obs.mask])
    assert np.all(obs.values.values[~obs.mask] == OBS_SENTINEL)


def test_calibration_without_target_keeps_configured_weight():
    cfg = tiny_world(target_correlation=None, coarse_aod_weight=0.02)
    assert calibrate_coarse_weight(CouplingMoments(), cfg) == 0.02


def test_calibration_reaches_target_correlation():
    cfg = tiny_world(target_correlation=0.5, coupling_noise=0.0)
    rng = np.random.default_rng(9)
    moments = CouplingMoments()
    for _ in range(20):
        pm = rng.uniform(0.0, 10.0, size=(8, 16))
        coarse = rng.uniform(0.0, 10.0, size=(8, 16))
        moments.add(pm, 0.01 * pm, coarse)
    weight = calibrate_coarse_weight(moments, cfg)
    assert weight > 0.0
    assert moments.correlation(weight, 0.0) == pytest.approx(0.5, abs=1e-3)


def test_world_is_deterministic_for_a_seed():
    grid = tiny_grid()
    first = list(itertools.islice(iterate_world(tiny_world(), grid), 6))
    second = list(itertools.islice(iterate_world(tiny_world(), grid), 6))
    for (s1, a1, o1), (s2, a2, o2) in zip(first, second):
        assert np.array_equal(s1.pm25.values, s2.pm25.values)
        assert np.array_equal(s1.aod550.values, s2.aod550.values)
        assert np.array_equal(a1.stack(), a2.stack())
        assert (o1 is None) == (o2 is None)


def test_world_yields_observations_every_k_steps():
    grid = tiny_grid()
    steps = list(itertools.islice(iterate_world(tiny_world(), grid), 9))
    assert [obs is not None for _, _, obs in steps] == [True, False, False, False, True, False, False, False, True]
    assert [state.time_index for state, _, _ in steps] == list(range(9))



def _flat_aux(shape=(8, 16), u=0.0, v=0.0, emission=0.0, time_index=1):
    channels = {
        "t2m": np.full(shape, 288.0),
        "u10": np.full(shape, u),
        "v10": np.full(shape, v),
        "humidity": np.random.default_rng(3).uniform(0.3, 0.9, size=shape),
        "geopotential": np.zeros(shape),
        "bc_emis": np.full(shape, emission),
        "oc_emis": np.full(shape, emission),
    }
    return AuxiliaryFrame.from_stack(time_index, np.stack([channels[name] for name in AUX_CHANNELS]))


def _state(pm, humidity, cfg):
    pm_field = GridField(values=pm, units=Units.UG_M3)
    return StateSnapshot(time_index=0, pm25=pm_field, aod550=aod_from_pm(pm_field, humidity, cfg))


def test_still_world_without_sources_or_sinks_is_unchanged():
    cfg = tiny_world(diffusion_m2_s=0.0, deposition_per_hour=0.0)
    aux = _flat_aux()
    state = _state(_random_field(5), aux.humidity, cfg)
    stepped = step_dynamics(state, aux, cfg, dt_hours=3.0)
    assert stepped.time_index == 1
    assert np.array_equal(stepped.pm25.values, state.pm25.values)
    assert np.array_equal(stepped.aod550.values, state.aod550.values)


def test_strong_deposition_keeps_concentrations_non_negative():
    cfg = tiny_world(deposition_per_hour=50.0)
    aux = _flat_aux(u=5.0, v=-3.0)
    state = _state(_random_field(6), aux.humidity, cfg)
    stepped = step_dynamics(state, aux, cfg, dt_hours=3.0, rng=np.random.default_rng(0))
    assert stepped.pm25.values.min() >= 0.0
    assert stepped.aod550.values.min() >= 0.0
    assert stepped.pm25.values.sum() < 1e-6 * state.pm25.values.sum()


def test_point_mass_at_unit_courant_moves_one_cell_per_step():
    cfg = tiny_world(cfl_limit=1.0, substeps=1, diffusion_m2_s=0.0)
    q = np.zeros((8, 16))
    q[3, 5] = 1.0
    u = np.full(q.shape, 100_000.0 / 10_800.0)  # one 100 km cell per 3 h step
    v = np.zeros_like(u)
    assert check_stability(u, v, cfg, dt_hours=3.0) == pytest.approx(1.0)
    for step in range(1, 14):
        q = transport(q, u, v, cfg, dt_hours=3.0)
        expected = np.zeros_like(q)
        expected[3, (5 + step) % 16] = 1.0
        assert np.allclose(q, expected, atol=1e-12)


def test_disaggregation_conserves_monthly_total():
    weights = np.random.default_rng(8).uniform(0.0, 3.0, size=720)
    slots = disaggregate_emissions(123_456.789, weights, 720)
    assert len(slots) == 720
    assert math.fsum(slots) == pytest.approx(123_456.789, rel=1e-12)


def test_zero_pm_gives_zero_aod():
    cfg = tiny_world()
    zero = GridField(values=np.zeros((8, 16)))
    humidity = GridField(values=np.random.default_rng(2).uniform(0.2, 1.0, size=(8, 16)))
    assert np.all(aod_from_pm(zero, humidity, cfg).values == 0.0)
    assert np.all(aod_from_pm(zero, humidity, cfg, rng=np.random.default_rng(1)).values == 0.0)


def test_observed_fraction_matches_swath_and_cloud_cover():
    cfg = WorldConfig(height=32, width=64)
    rng = world_rng(cfg.seed, 2)
    aod = GridField(values=np.full((32, 64), 0.3))
    fractions = [simulate_observations(aod, 4 * draw, cfg, rng).mask.mean() for draw in range(100)]
    assert np.mean(fractions) == pytest.approx(cfg.swath_fraction * (1.0 - cfg.cloud_dropout), abs=0.05)


def test_zero_burn_in_still_starts_from_a_forced_state():
    state, _, obs = next(iter(SyntheticWorld(tiny_world(burn_in_steps=0), tiny_grid()).run()))
    assert state.time_index == 0
    assert state.pm25.values.var() > 1e-3
    assert obs is not None
