"""Synthetic aerosol world: truth states, auxiliary drivers and satellite-style observations.

State(t) is produced from state(t-1) with the auxiliary frame of time t. PM2.5 and a hidden
coarse-aerosol tracer are advected (flux-form first-order upwind), diffused, fed by sources
and deposited. AOD550 is diagnosed from both. The calendar uses 30-day months and
12-month years.
"""
import hashlib
import json
import logging
import math
import numpy as np
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union
from src.data.field_io import DatasetManifest, DatasetWriter, dataset_checksum
from src.models.enums import Units
from src.models.fields import AuxiliaryFrame, GridField, ObservationSet, StateSnapshot
from src.models.schemas import AUX_CHANNELS, TimeGrid, WorldConfig
from src.utils.errors import DatasetError, InsufficientDataError, StabilityError

logger = logging.getLogger(__name__)

DAYS_PER_MONTH = 30
MONTHS_PER_YEAR = 12
DIFFUSION_LIMIT = 0.25
GRAVITY = 9.80665

# independent RNG streams per world seed
STREAM_LAYOUT = 0
STREAM_COUPLING = 1
STREAM_OBSERVATIONS = 2


def world_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def config_hash(world: WorldConfig) -> str:
    return hashlib.sha256(json.dumps(world.model_dump(mode="json"), sort_keys=True).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- transport


def _substep_seconds(cfg: WorldConfig, dt_hours: float) -> float:
    return dt_hours * 3600.0 / cfg.substeps


def check_stability(u: np.ndarray, v: np.ndarray, cfg: WorldConfig, dt_hours: float) -> float:
    """Courant number of one substep; raises StabilityError when a bound is violated"""
    dt = _substep_seconds(cfg, dt_hours)
    dx = cfg.cell_size_km * 1000.0
    courant = float(np.max(np.abs(u) + np.abs(v))) * dt / dx
    if courant > cfg.cfl_limit + 1e-12:
        raise StabilityError(
            f"CFL violated: max(|u|+|v|)*dt/dx = {courant:.3f} > {cfg.cfl_limit} "
            f"(dt={dt:.0f}s, dx={dx:.0f}m); raise substeps or reduce wind"
        )
    diffusion = cfg.diffusion_m2_s * dt / dx ** 2
    if diffusion > DIFFUSION_LIMIT:
        raise StabilityError(f"explicit diffusion number {diffusion:.3f} exceeds {DIFFUSION_LIMIT}")
    return courant


def _face_fluxes(q: np.ndarray, u: np.ndarray, v: np.ndarray, kappa: float, dx: float) -> Tuple[np.ndarray, np.ndarray]:
    """Fluxes through the east face (column i+1/2) and north face (row j+1/2) of every cell"""
    q_e = np.roll(q, -1, axis=1)
    u_e = 0.5 * (u + np.roll(u, -1, axis=1))
    flux_x = np.where(u_e > 0.0, u_e * q, u_e * q_e) - kappa * (q_e - q) / dx

    q_n = np.roll(q, -1, axis=0)
    v_n = 0.5 * (v + np.roll(v, -1, axis=0))
    flux_y = np.where(v_n > 0.0, v_n * q, v_n * q_n) - kappa * (q_n - q) / dx
    return flux_x, flux_y


def transport(q: np.ndarray, u: np.ndarray, v: np.ndarray, cfg: WorldConfig, dt_hours: float) -> np.ndarray:
    """Advect and diffuse one tracer over one model step (all substeps).

    East/west boundaries are periodic. North/south walls carry zero flux unless
    ``cfg.periodic_ns`` is set. Row index increases northward.
    """
    dt = _substep_seconds(cfg, dt_hours)
    dx = cfg.cell_size_km * 1000.0
    for _ in range(cfg.substeps):
        flux_x, flux_y = _face_fluxes(q, u, v, cfg.diffusion_m2_s, dx)
        if not cfg.periodic_ns:
            flux_y[-1, :] = 0.0  # face between the last row and the wrap-around row
        q = q - dt / dx * (flux_x - np.roll(flux_x, 1, axis=1) + flux_y - np.roll(flux_y, 1, axis=0))
    return q


def step_dynamics(
    state: StateSnapshot,
    aux: AuxiliaryFrame,
    cfg: WorldConfig,
    dt_hours: float = 3.0,
    rng: Optional[np.random.Generator] = None,
    coarse_weight: Optional[float] = None,
) -> StateSnapshot:
    """
    Advance the truth state one step using the auxiliary frame of the target time.

    Args:
        state: state at t-1
        aux: drivers at t (winds, humidity, emission rates)
        cfg: world configuration
        dt_hours: model step
        rng: coupling-noise stream; None gives noise-free AOD
        coarse_weight: AOD weight of the coarse tracer, defaults to cfg.coarse_aod_weight

    Returns:
        State at aux.time_index
    """
    u, v = aux.u10.values, aux.v10.values
    check_stability(u, v, cfg, dt_hours)

    pm = transport(state.pm25.values, u, v, cfg, dt_hours)
    pm = pm + (cfg.bc_weight * aux.bc_emis.values + cfg.oc_weight * aux.oc_emis.values) * dt_hours
    pm = np.clip(pm * math.exp(-cfg.deposition_per_hour * dt_hours), 0.0, None)

    coarse = None
    if state.coarse is not None:
        c = transport(state.coarse.values, u, v, cfg, dt_hours)
        c = c + coarse_emission(u, v, cfg, dt_hours)
        c = np.clip(c * math.exp(-cfg.coarse_deposition_per_hour * dt_hours), 0.0, None)
        coarse = GridField(values=c, units=Units.UG_M3)

    pm_field = GridField(values=pm, units=Units.UG_M3)
    aod = aod_from_pm(pm_field, aux.humidity, cfg, rng, coarse=coarse, coarse_weight=coarse_weight)
    return StateSnapshot(time_index=aux.time_index, pm25=pm_field, aod550=aod, coarse=coarse)


# ---------------------------------------------------------------- AOD coupling


def normalized_humidity(humidity: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    return (humidity - cfg.humidity_reference) / cfg.humidity_scale


def aod_signal(pm25: np.ndarray, humidity: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    return cfg.aod_alpha * pm25 * (1.0 + cfg.humidity_weight * normalized_humidity(humidity, cfg))


def aod_from_pm(
    pm25: GridField,
    humidity: GridField,
    cfg: WorldConfig,
    rng: Optional[np.random.Generator] = None,
    coarse: Optional[GridField] = None,
    coarse_weight: Optional[float] = None,
) -> GridField:
    """aod = alpha*pm*(1 + w_h*hn) + w_c*coarse + noise, clipped at 0.

    The noise is Gaussian with standard deviation ``coupling_noise`` times the spatial
    standard deviation of the noise-free signal in this frame.
    """
    if pm25.shape != humidity.shape:
        raise ValueError(f"pm25 {pm25.shape} and humidity {humidity.shape} grids differ")
    signal = aod_signal(pm25.values, humidity.values, cfg)
    if coarse is not None:
        weight = cfg.coarse_aod_weight if coarse_weight is None else coarse_weight
        signal = signal + weight * coarse.values
    if rng is not None and cfg.coupling_noise > 0.0:
        sigma = cfg.coupling_noise * float(signal.std())
        signal = signal + rng.normal(0.0, 1.0, size=signal.shape) * sigma
    return GridField(values=np.clip(signal, 0.0, None), units=Units.DIMENSIONLESS)


@dataclass
class CouplingMoments:
    """Running sums that determine corr(pm, aod) as a function of the coarse weight"""
    n: int = 0
    frames: int = 0
    sums: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(
        ("p", "a", "c", "pp", "aa", "cc", "pa", "pc", "ac"), 0.0))
    frame_var_a: float = 0.0
    frame_var_c: float = 0.0
    frame_cov_ac: float = 0.0

    def add(self, pm: np.ndarray, signal: np.ndarray, coarse: np.ndarray) -> None:
        vectors = {"p": pm.ravel(), "a": signal.ravel(), "c": coarse.ravel()}
        for key in self.sums:
            if len(key) == 1:
                self.sums[key] += float(vectors[key].sum())
            else:
                self.sums[key] += float(vectors[key[0]] @ vectors[key[1]])
        self.n += vectors["p"].size
        a, c = vectors["a"], vectors["c"]
        self.frames += 1
        self.frame_var_a += float(a.var())
        self.frame_var_c += float(c.var())
        self.frame_cov_ac += float(np.mean((a - a.mean()) * (c - c.mean())))

    def _cov(self, x: str, y: str) -> float:
        key = x + y if x + y in self.sums else y + x
        return self.sums[key] / self.n - (self.sums[x] / self.n) * (self.sums[y] / self.n)

    def correlation(self, weight: float, relative_noise: float) -> float:
        cov_ps = self._cov("p", "a") + weight * self._cov("p", "c")
        var_s = self._cov("a", "a") + 2 * weight * self._cov("a", "c") + weight ** 2 * self._cov("c", "c")
        frame_var = (self.frame_var_a + 2 * weight * self.frame_cov_ac + weight ** 2 * self.frame_var_c) / self.frames
        var_p = self._cov("p", "p")
        denominator = math.sqrt(max(var_p, 0.0) * max(var_s + relative_noise ** 2 * frame_var, 0.0))
        return cov_ps / denominator if denominator > 0 else 0.0


def calibrate_coarse_weight(moments: CouplingMoments, cfg: WorldConfig, iterations: int = 80) -> float:
    """Coarse-tracer AOD weight that brings pooled corr(pm25, aod550) to the target.

    Falls back to ``cfg.coarse_aod_weight`` when the target cannot be bracketed.
    """
    target = cfg.target_correlation
    if target is None or moments.frames == 0:
        return cfg.coarse_aod_weight

    def corr(w: float) -> float:
        return moments.correlation(w, cfg.coupling_noise)

    if corr(0.0) <= target:
        logger.warning(f"Coupling correlation {corr(0.0):.3f} is already below target {target} without coarse aerosol")
        return 0.0
    high = max(cfg.coarse_aod_weight, 1e-6)
    for _ in range(60):
        if corr(high) < target:
            break
        high *= 2.0
    else:
        logger.warning(f"Could not bracket coupling target {target}; keeping coarse weight {cfg.coarse_aod_weight}")
        return cfg.coarse_aod_weight
    low = 0.0
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if corr(mid) > target:
            low = mid
        else:
            high = mid
    weight = 0.5 * (low + high)
    logger.info(f"Calibrated coarse AOD weight {weight:.6g} (expected corr {corr(weight):.3f}, target {target})")
    return weight


# ---------------------------------------------------------------- emissions and calendar


def disaggregate_emissions(monthly_total: float, profile_weights: Sequence[float], slots: int) -> List[float]:
    """Split a monthly total over time slots proportionally to profile weights"""
    weights = np.asarray(profile_weights, dtype=np.float64)
    if weights.shape != (slots,):
        raise ValueError(f"need {slots} profile weights, got {weights.size}")
    if np.any(weights < 0):
        raise ValueError("profile weights must be non-negative")
    total_weight = weights.sum()
    if total_weight <= 0.0:
        raise ValueError("profile weights are all zero")
    return list(monthly_total * weights / total_weight)


def steps_per_month(dt_hours: float) -> int:
    return int(round(DAYS_PER_MONTH * 24.0 / dt_hours))


def temporal_profile(month_index: int, dt_hours: float, cfg: WorldConfig) -> np.ndarray:
    """Diurnal x weekday weights for every step slot of one month"""
    slots = steps_per_month(dt_hours)
    per_day = int(round(24.0 / dt_hours))
    slot = np.arange(slots)
    day = month_index * DAYS_PER_MONTH + slot // per_day
    hour = (slot % per_day) * dt_hours + 0.5 * dt_hours
    diurnal = 1.0 + cfg.diurnal_amplitude * np.sin(2.0 * np.pi * (hour - 6.0) / 24.0)
    weekly = np.where(np.mod(day, 7) >= 5, cfg.weekend_factor, 1.0)
    return diurnal * weekly


def footprint(height: int, width: int, row_frac: float, col_frac: float, radius: float) -> np.ndarray:
    """Gaussian plume footprint, periodic in longitude, normalized to unit sum"""
    rows = np.arange(height)[:, None] + 0.5
    cols = np.arange(width)[None, :] + 0.5
    dy = rows - row_frac * height
    dx = np.abs(cols - col_frac * width)
    dx = np.minimum(dx, width - dx)
    weights = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * radius ** 2))
    return weights / weights.sum()


def coarse_emission(u: np.ndarray, v: np.ndarray, cfg: WorldConfig, dt_hours: float) -> np.ndarray:
    """Wind-lifted coarse aerosol added over one step"""
    height, width = u.shape
    speed = np.hypot(u, v)
    lift = np.clip(speed - cfg.coarse_threshold_speed, 0.0, None) / cfg.coarse_reference_speed
    sources = np.zeros((height, width))
    for source in cfg.coarse_sources:
        shape = footprint(height, width, source.row_frac, source.col_frac, source.radius_cells)
        sources += source.strength * shape / shape.max()
    return sources * lift * dt_hours


# ---------------------------------------------------------------- observations


def swath_mask(height: int, width: int, time_index: int, cfg: WorldConfig) -> np.ndarray:
    """Tilted band covering ``swath_fraction`` of the grid, advancing with time"""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    phase = np.mod(cols / width + cfg.swath_tilt * rows / height + time_index * cfg.swath_drift, 1.0)
    return phase < cfg.swath_fraction


def simulate_observations(
    aod550: GridField,
    time_index: int,
    cfg: WorldConfig,
    rng: np.random.Generator,
) -> ObservationSet:
    mask = swath_mask(aod550.height, aod550.width, time_index, cfg)
    clear = rng.random(aod550.shape) >= cfg.cloud_dropout
    mask = mask & clear
    noisy = aod550.values + rng.normal(0.0, 1.0, size=aod550.shape) * cfg.obs_noise
    return ObservationSet.build(time_index, np.clip(noisy, 0.0, None), mask)


# ---------------------------------------------------------------- world


class SyntheticWorld:
    """Deterministic generator of auxiliary drivers and truth states for one (config, grid)"""

    def __init__(self, cfg: WorldConfig, grid: TimeGrid):
        self.cfg = cfg
        self.grid = grid
        self.height, self.width = cfg.height, cfg.width
        self.coarse_weight = cfg.coarse_aod_weight
        layout = world_rng(cfg.seed, STREAM_LAYOUT)
        self._eddy_phases = layout.uniform(0.0, 2.0 * np.pi, size=2)
        self.geopotential = self._mountains(layout)
        self._rows = (np.arange(self.height)[:, None] + 0.5) / self.height
        self._cols = (np.arange(self.width)[None, :] + 0.5) / self.width
        self._footprints = np.stack([
            footprint(self.height, self.width, s.row_frac, s.col_frac, s.radius_cells) for s in cfg.sources
        ]) if cfg.sources else np.zeros((0, self.height, self.width))
        self._month_cache: Dict[int, np.ndarray] = {}

    def _mountains(self, rng: np.random.Generator) -> np.ndarray:
        rows = np.arange(self.height)[:, None] + 0.5
        cols = np.arange(self.width)[None, :] + 0.5
        relief = np.zeros((self.height, self.width))
        for _ in range(4):
            r0, c0 = rng.uniform(0, self.height), rng.uniform(0, self.width)
            radius = rng.uniform(0.06, 0.15) * self.width
            peak = rng.uniform(500.0, 3000.0)
            dx = np.abs(cols - c0)
            dx = np.minimum(dx, self.width - dx)
            relief += peak * np.exp(-((rows - r0) ** 2 + dx ** 2) / (2.0 * radius ** 2))
        return GRAVITY * relief

    def hours(self, time_index: int) -> float:
        return time_index * self.grid.dt_hours

    def wind(self, time_index: int) -> Tuple[np.ndarray, np.ndarray]:
        """Zonal jet plus two travelling streamfunction eddies (zero normal flow at the walls)"""
        cfg = self.cfg
        y, x = self._rows, self._cols
        u = cfg.jet_speed * np.sin(np.pi * y) * np.ones_like(x)
        v = np.zeros((self.height, self.width))
        omega = 2.0 * np.pi / cfg.rotation_period_hours
        aspect = self.width / self.height
        for n, m in enumerate((2, 3)):
            amplitude = cfg.wind_amplitude / 2.0
            theta = 2.0 * np.pi * m * x - omega * self.hours(time_index) / m + self._eddy_phases[n]
            u = u - amplitude * aspect / (2.0 * m) * np.cos(np.pi * y) * np.sin(theta)
            v = v + amplitude * np.sin(np.pi * y) * np.cos(theta)
        return u, v

    def humidity(self, time_index: int) -> np.ndarray:
        y, x = self._rows, self._cols
        days = self.hours(time_index) / 24.0
        base = 0.55 + 0.2 * np.cos(2.0 * np.pi * (y - 0.5))
        moist = 0.15 * np.sin(2.0 * np.pi * (2.0 * x - days / 9.0)) * np.sin(np.pi * y)
        seasonal = 0.05 * np.sin(2.0 * np.pi * days / (DAYS_PER_MONTH * MONTHS_PER_YEAR))
        return np.clip(base + moist + seasonal, 0.05, 1.0)

    def temperature(self, time_index: int) -> np.ndarray:
        y, x = self._rows, self._cols
        hours = self.hours(time_index)
        days = hours / 24.0
        latitude = 2.0 * y - 1.0
        seasonal = 8.0 * latitude * np.sin(2.0 * np.pi * days / (DAYS_PER_MONTH * MONTHS_PER_YEAR))
        local_hour = np.mod(hours + 24.0 * x, 24.0)
        diurnal = 4.0 * np.cos(2.0 * np.pi * (local_hour - 15.0) / 24.0)
        lapse = 0.0065 * self.geopotential / GRAVITY
        return 300.0 - 35.0 * latitude ** 2 + seasonal + diurnal - lapse

    def _month_amounts(self, month_index: int) -> np.ndarray:
        """[n_sources, steps_per_month] concentration mass released per step"""
        if month_index not in self._month_cache:
            slots = steps_per_month(self.grid.dt_hours)
            profile = temporal_profile(month_index, self.grid.dt_hours, self.cfg)
            rows = []
            for source in self.cfg.sources:
                totals = source.monthly_totals
                total = totals[month_index % MONTHS_PER_YEAR] if len(totals) == MONTHS_PER_YEAR else totals[0]
                rows.append(disaggregate_emissions(total, profile, slots))
            self._month_cache = {month_index: np.asarray(rows).reshape(len(rows), slots)}
        return self._month_cache[month_index]

    def emissions(self, time_index: int) -> Tuple[np.ndarray, np.ndarray]:
        """BC and OC emission rates (per hour) on the grid"""
        if not self.cfg.sources:
            zeros = np.zeros((self.height, self.width))
            return zeros, zeros.copy()
        per_month = steps_per_month(self.grid.dt_hours)
        month, slot = divmod(time_index, per_month)
        amounts = self._month_amounts(month)[:, slot] / self.grid.dt_hours
        bc_frac = np.array([s.bc_fraction for s in self.cfg.sources])
        bc = np.tensordot(amounts * bc_frac, self._footprints, axes=1)
        oc = np.tensordot(amounts * (1.0 - bc_frac), self._footprints, axes=1)
        return bc, oc

    def auxiliary(self, time_index: int) -> AuxiliaryFrame:
        u, v = self.wind(time_index)
        bc, oc = self.emissions(time_index)
        arrays = {
            "t2m": self.temperature(time_index),
            "u10": u,
            "v10": v,
            "humidity": self.humidity(time_index),
            "geopotential": self.geopotential,
            "bc_emis": bc,
            "oc_emis": oc,
        }
        return AuxiliaryFrame.from_stack(time_index, np.stack([arrays[name] for name in AUX_CHANNELS]))

    def initial_state(self, time_index: int) -> StateSnapshot:
        zeros = np.zeros((self.height, self.width))
        return StateSnapshot(
            time_index=time_index,
            pm25=GridField(values=zeros, units=Units.UG_M3),
            aod550=GridField(values=zeros.copy(), units=Units.DIMENSIONLESS),
            coarse=GridField(values=zeros.copy(), units=Units.UG_M3),
        )

    def run(self) -> Iterator[Tuple[StateSnapshot, AuxiliaryFrame, Optional[ObservationSet]]]:
        """Spin up, calibrate the coupling, then yield (state, aux, obs) for t in [t0, t_end)"""
        cfg, grid = self.cfg, self.grid
        coupling_rng = world_rng(cfg.seed, STREAM_COUPLING)
        obs_rng = world_rng(cfg.seed, STREAM_OBSERVATIONS)
        # t0 is always reached through at least one dynamics step
        start = grid.t0 - max(cfg.burn_in_steps, 1)
        state = self.initial_state(start)
        moments = CouplingMoments()
        sample_from = start + cfg.burn_in_steps // 4

        for t in range(start + 1, grid.t0):
            aux = self.auxiliary(t)
            state = step_dynamics(state, aux, cfg, grid.dt_hours, coupling_rng, self.coarse_weight)
            if t >= sample_from and (t - grid.t0) % grid.da_interval == 0:
                signal = aod_signal(state.pm25.values, aux.humidity.values, cfg)
                moments.add(state.pm25.values, signal, state.coarse.values)
        if cfg.burn_in_steps > 0:
            self.coarse_weight = calibrate_coarse_weight(moments, cfg)
            logger.info(f"Burn-in finished after {cfg.burn_in_steps} steps")

        for t in range(grid.t0, grid.t_end):
            aux = self.auxiliary(t)
            state = step_dynamics(state, aux, cfg, grid.dt_hours, coupling_rng, self.coarse_weight)
            self._check_variance(state)
            obs = simulate_observations(state.aod550, t, cfg, obs_rng) if grid.is_da_time(t) else None
            yield state, aux, obs

    def _check_variance(self, state: StateSnapshot) -> None:
        variance = float(state.pm25.values.var())
        if variance < self.cfg.variance_floor:
            raise InsufficientDataError(
                f"PM2.5 spatial variance {variance:.3g} at t={state.time_index} is below the floor "
                f"{self.cfg.variance_floor}; lengthen burn-in or strengthen sources"
            )


def iterate_world(world: WorldConfig, grid: TimeGrid) -> Iterator[Tuple[StateSnapshot, AuxiliaryFrame, Optional[ObservationSet]]]:
    yield from SyntheticWorld(world, grid).run()


def generate_dataset(world: WorldConfig, grid: TimeGrid, out_dir: Union[str, Path]) -> DatasetManifest:
    """
    Generate a dataset directory: per-step state and aux files, observations every k steps
    and a manifest holding the T0/T1/T2 split and the seed.

    Args:
        world: world configuration (seed included)
        grid: time grid
        out_dir: target directory; must not be locked by another writer

    Returns:
        The written manifest
    """
    out_dir = Path(out_dir)
    sim = SyntheticWorld(world, grid)
    try:
        with DatasetWriter(out_dir) as writer:
            for state, aux, obs in sim.run():
                # the hidden tracer never leaves the generator
                writer.write_state(state.model_copy(update={"coarse": None}))
                writer.write_aux(aux)
                if obs is not None:
                    writer.write_obs(obs)
                done = state.time_index - grid.t0 + 1
                if done % 960 == 0:
                    logger.info(f"Generated {done}/{grid.t_end - grid.t0} steps")
            manifest = DatasetManifest(
                height=world.height,
                width=world.width,
                dt_hours=grid.dt_hours,
                t0=grid.t0,
                t1=grid.t1,
                t2=grid.t2,
                t_end=grid.t_end,
                da_interval=grid.da_interval,
                seed=world.seed,
                world_config_hash=config_hash(world),
                coarse_aod_weight=sim.coarse_weight,
                obs_times=writer.obs_times,
            )
            writer.write_manifest(manifest)
    except OSError as e:
        logger.error(f"Dataset generation into {out_dir} failed: {e}", exc_info=True)
        raise DatasetError(f"cannot write dataset to {out_dir}: {e}") from e
    logger.info(f"Dataset written to {out_dir} (checksum {dataset_checksum(out_dir)[:16]})")
    return manifest
