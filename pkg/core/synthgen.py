"""
Synthetic etch dataset generator

Lots of sequentially drifting wafers. Each wafer gets latent factors that
set its 89-point depth profile (mean level, center-edge, ring, asymmetry);
the same factors modulate the temporal shape of the non-setpoint process
parameters and of the OES emission lines, so the profile is recoverable
from the signals. Output uses the wafer directory format plus a
manifest.json of ground truth for tests.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DatasetWriteError
from .logger import get_logger
from .utils import write_json
from .wafer_data import Dataset, SpatialProfile, WaferRun, wafer_dir_for, write_wafer_run

logger = get_logger('synthgen')

RING_RADII = (0.0, 0.25, 0.5, 0.75, 1.0)
RING_COUNTS = (1, 8, 16, 28, 36)
N_LATENT = 4

PARAM_CHANNELS = [
    ('rf_power', 'W'),
    ('sf6_flow', 'sccm'),
    ('c4f8_flow', 'sccm'),
    ('chamber_pressure', 'mTorr'),
    ('he_backside_temp', 'degC'),
    ('bias_voltage', 'V'),
    ('coil_current', 'A'),
    ('reflected_power', 'W'),
    ('throttle_position', '%'),
    ('chuck_temp', 'degC'),
]
# setpoint-controlled; they delimit the active phase and carry no wafer information
SETPOINT_CHANNELS = ('rf_power', 'sf6_flow')


@dataclass
class SynthConfig:
    n_lots: int = 9
    wafers_per_lot: int = 10
    n_pp_raw: int = 10
    n_wl: int = 64
    wl_min_nm: float = 250.0
    wl_max_nm: float = 850.0
    n_lines: int = 8
    line_width_nm: float = 6.0
    t_raw: int = 1200
    ramp_samples: int = 20
    drift_per_wafer: float = 0.5
    lot_spread_um: float = 1.0
    base_depth_um: float = 100.0
    shape_scale: float = 3.5
    profile_noise_um: float = 0.2
    noise_sigma: float = 0.01
    signal_strength: float = 1.0
    seed: int = 0
    flat_param_channels: int = 3
    wafer_radius_mm: float = 75.0
    sample_period_s: float = 0.5

    def validate(self):
        if self.n_lots < 1:
            return False, "synth.n_lots must be >= 1"
        if self.wafers_per_lot < 1:
            return False, "synth.wafers_per_lot must be >= 1"
        if not 0.0 <= self.signal_strength <= 1.0:
            return False, "synth.signal_strength must lie in [0, 1]"
        if self.flat_param_channels < 0:
            return False, "synth.flat_param_channels must be >= 0"
        if self.n_pp_raw < len(SETPOINT_CHANNELS) + self.flat_param_channels:
            return False, "synth.n_pp_raw must leave room for the setpoint and flat channels"
        if self.n_wl < 1 or self.wl_max_nm <= self.wl_min_nm:
            return False, "synth.n_wl must be >= 1 with wl_min_nm < wl_max_nm"
        if self.n_lines < 1 or self.line_width_nm <= 0:
            return False, "synth.n_lines must be >= 1 with a positive line_width_nm"
        if self.ramp_samples < 1 or 2 * self.ramp_samples >= int(round(0.8 * self.t_raw)):
            return False, "synth.ramp_samples must be >= 1 and fit twice inside the active phase"
        if self.noise_sigma < 0 or self.profile_noise_um < 0:
            return False, "synth.noise_sigma must be >= 0"
        if self.wafer_radius_mm <= 0 or self.sample_period_s <= 0:
            return False, "synth.wafer_radius_mm must be > 0"
        return True, None


@dataclass
class LatentFactors:
    """Per-wafer ground truth; profile coefficients are in um."""

    mean_level: float
    center_edge: float
    ring: float
    asymmetry: float
    asymmetry_angle_rad: float
    z: Tuple[float, ...] = ()

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Profiles

def layout_89() -> Tuple[np.ndarray, np.ndarray]:
    """(r, theta) of the 89 measurement sites on the unit disk, ring by ring."""
    r, theta = [], []
    for radius, count in zip(RING_RADII, RING_COUNTS):
        r.extend([radius] * count)
        theta.extend(2.0 * np.pi * np.arange(count) / count)
    return np.asarray(r, dtype=float), np.asarray(theta, dtype=float)


def profile_basis(r: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """
    Columns: center-edge (2r^2 - 1), ring cos(4 pi r), both centered over the
    layout, and the two asymmetry components r cos(theta), r sin(theta).
    """
    center_edge = 2.0 * r ** 2 - 1.0
    ring = np.cos(2.0 * np.pi * 2.0 * r)
    return np.column_stack([
        center_edge - center_edge.mean(),
        ring - ring.mean(),
        r * np.cos(theta),
        r * np.sin(theta),
    ])


def generate_profile(factors: LatentFactors, layout: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                     radius_mm: float = 100.0, noise_um: float = 0.0,
                     rng: Optional[np.random.Generator] = None) -> SpatialProfile:
    r, theta = layout if layout is not None else layout_89()
    basis = profile_basis(r, theta)
    coef = np.array([
        factors.center_edge,
        factors.ring,
        factors.asymmetry * np.cos(factors.asymmetry_angle_rad),
        factors.asymmetry * np.sin(factors.asymmetry_angle_rad),
    ])
    depth = factors.mean_level + basis @ coef
    if noise_um > 0:
        depth = depth + (rng or np.random.default_rng()).normal(0.0, noise_um, size=depth.shape)
    return SpatialProfile(x=radius_mm * r * np.cos(theta), y=radius_mm * r * np.sin(theta), depth=depth)


# ---------------------------------------------------------------------------
# Signals

@dataclass
class _Plant:
    """Dataset-level constants shared by every wafer."""

    param_names: List[str]
    param_units: Dict[str, str]
    flat_indices: List[int]
    flat_values: np.ndarray
    levels: np.ndarray           # (n_pp,)
    idle: np.ndarray             # (n_pp,)
    param_coupling: np.ndarray   # (n_pp, N_LATENT)
    param_mean_gain: np.ndarray  # (n_pp,)
    wavelengths_nm: np.ndarray
    line_centers: np.ndarray
    line_levels: np.ndarray
    line_coupling: np.ndarray    # (n_lines, N_LATENT)
    line_mean_gain: np.ndarray
    phase: Tuple[int, int]


def _param_names(n: int) -> List[Tuple[str, str]]:
    named = PARAM_CHANNELS[:n]
    return named + [(f"aux_{k}", 'a.u.') for k in range(n - len(named))]


def _plant(config: SynthConfig) -> _Plant:
    rng = np.random.default_rng([config.seed])
    channels = _param_names(config.n_pp_raw)
    names = [name for name, _ in channels]
    setpoints = [i for i, name in enumerate(names) if name in SETPOINT_CHANNELS]
    candidates = [i for i in range(len(names)) if i not in setpoints]
    flat = sorted(int(i) for i in rng.choice(candidates, size=config.flat_param_channels, replace=False))

    levels = rng.uniform(50.0, 500.0, size=len(names))
    idle = rng.uniform(0.0, 0.2, size=len(names)) * levels
    idle[setpoints] = 0.0
    coupling = rng.normal(0.0, 1.0, size=(len(names), N_LATENT))
    coupling[setpoints] = 0.0
    mean_gain = rng.normal(0.0, 0.01, size=len(names))
    mean_gain[setpoints] = 0.0

    wavelengths = np.round(np.linspace(config.wl_min_nm, config.wl_max_nm, config.n_wl), 3)
    centers = np.sort(rng.uniform(config.wl_min_nm, config.wl_max_nm, size=config.n_lines))

    t0 = int(round(0.1 * config.t_raw))
    t1 = int(round(0.9 * config.t_raw))
    return _Plant(
        param_names=names,
        param_units=dict(channels),
        flat_indices=flat,
        flat_values=np.round(rng.uniform(1.0, 100.0, size=len(flat)), 3),
        levels=levels,
        idle=idle,
        param_coupling=coupling,
        param_mean_gain=mean_gain,
        wavelengths_nm=wavelengths,
        line_centers=centers,
        line_levels=rng.uniform(200.0, 2000.0, size=config.n_lines),
        line_coupling=rng.normal(0.0, 1.0, size=(config.n_lines, N_LATENT)),
        line_mean_gain=rng.normal(0.0, 0.01, size=config.n_lines),
        phase=(t0, t1),
    )


def _envelope(t_raw: int, phase: Tuple[int, int], ramp: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ramp/plateau pulse over [t0, t1) and the relative phase time u in [0, 1]."""
    t0, t1 = phase
    t = np.arange(t_raw, dtype=float)
    rise = np.clip((t - t0 + 0.5) / ramp, 0.0, 1.0)
    fall = np.clip((t1 - t - 0.5) / ramp, 0.0, 1.0)
    env = np.where((t >= t0) & (t < t1), np.minimum(rise, fall), 0.0)
    u = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
    return env, u


def _modulation(u: np.ndarray) -> np.ndarray:
    """(T, N_LATENT) smooth components sin(pi (k+1) u)."""
    return np.sin(np.pi * np.outer(u, np.arange(1, N_LATENT + 1)))


def generate_signals(factors: LatentFactors, config: SynthConfig, plant: Optional[_Plant] = None,
                     rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    (params (T, n_pp_raw), oes (T, n_wl)) for one wafer.

    Informative channel: idle + env(t) * level * (1 + strength * (g * dmean
    + 0.1 * sum_k A_k z_k h_k(u))) + noise, clipped at zero. Setpoint channels
    carry only the envelope. OES bands are Gaussian lines over the wavelength
    grid, so neighbouring bands are correlated.
    """
    plant = plant or _plant(config)
    rng = rng or np.random.default_rng()
    env, u = _envelope(config.t_raw, plant.phase, config.ramp_samples)
    h = _modulation(u)
    z = np.asarray(factors.z if factors.z else np.zeros(N_LATENT), dtype=float)
    dmean = factors.mean_level - config.base_depth_um
    strength = config.signal_strength

    mod = 1.0 + strength * (plant.param_mean_gain[None, :] * dmean
                            + 0.1 * (h * z[None, :]) @ plant.param_coupling.T)
    params = plant.idle[None, :] + env[:, None] * plant.levels[None, :] * mod
    params = params + rng.normal(0.0, 1.0, size=params.shape) * config.noise_sigma * plant.levels[None, :]
    params = np.maximum(params, 0.0)
    for i, value in zip(plant.flat_indices, plant.flat_values):
        params[:, i] = value

    line_mod = 1.0 + strength * (plant.line_mean_gain[None, :] * dmean
                                 + 0.1 * (h * z[None, :]) @ plant.line_coupling.T)
    lines = env[:, None] * plant.line_levels[None, :] * line_mod            # (T, n_lines)
    profile = np.exp(-0.5 * ((plant.wavelengths_nm[:, None] - plant.line_centers[None, :])
                             / config.line_width_nm) ** 2)                   # (n_wl, n_lines)
    oes = 1.0 + lines @ profile.T
    oes = oes + rng.normal(0.0, 1.0, size=oes.shape) * config.noise_sigma * plant.line_levels.mean()
    oes = np.maximum(oes, 0.0)
    return params, oes


# ---------------------------------------------------------------------------
# Dataset

def lot_id_for(lot_idx: int) -> str:
    return f"L{lot_idx + 1:02d}"


def latent_factors(config: SynthConfig, lot_idx: int, wafer_idx: int,
                   lot_base: float, rng: np.random.Generator) -> LatentFactors:
    """
    Center-edge drifts with wafer order alongside the mean level; the other
    factors are drawn independently per wafer.
    """
    z = rng.normal(0.0, 1.0, size=N_LATENT)
    if config.wafers_per_lot > 1:
        z[0] = 0.5 * z[0] + (2.0 * wafer_idx / (config.wafers_per_lot - 1) - 1.0)
    scale = config.shape_scale
    cx, cy = 0.7 * scale * z[2], 0.7 * scale * z[3]
    return LatentFactors(
        mean_level=lot_base + config.drift_per_wafer * wafer_idx,
        center_edge=scale * z[0],
        ring=0.5 * scale * z[1],
        asymmetry=float(np.hypot(cx, cy)),
        asymmetry_angle_rad=float(np.arctan2(cy, cx)),
        z=tuple(float(v) for v in z),
    )


def _generate_wafer(config: SynthConfig, plant: _Plant, lot_idx: int, wafer_idx: int,
                    lot_base: float) -> Tuple[WaferRun, LatentFactors]:
    rng = np.random.default_rng([config.seed, lot_idx, wafer_idx])
    factors = latent_factors(config, lot_idx, wafer_idx, lot_base, rng)
    profile = generate_profile(factors, radius_mm=config.wafer_radius_mm,
                               noise_um=config.profile_noise_um, rng=rng)
    params, oes = generate_signals(factors, config, plant, rng)
    run = WaferRun(
        lot_id=lot_id_for(lot_idx),
        wafer_index=wafer_idx,
        param_names=tuple(plant.param_names),
        params=params,
        wavelengths_nm=plant.wavelengths_nm,
        oes=oes,
        profile=profile,
        sample_period_s=config.sample_period_s,
        param_units=dict(plant.param_units),
        wafer_radius_mm=config.wafer_radius_mm,
    )
    return run, factors


def generate_runs(config: SynthConfig, jobs: int = 1) -> Tuple[List[WaferRun], dict]:
    """Generate every wafer in memory; returns (runs, ground-truth manifest)."""
    plant = _plant(config)
    lot_bases = [
        config.base_depth_um + float(np.random.default_rng([config.seed, lot_idx]).normal(0.0, config.lot_spread_um))
        for lot_idx in range(config.n_lots)
    ]
    jobs_list = [(lot, wafer) for lot in range(config.n_lots) for wafer in range(config.wafers_per_lot)]

    def _one(item):
        lot, wafer = item
        return _generate_wafer(config, plant, lot, wafer, lot_bases[lot])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one, jobs_list))
    else:
        results = [_one(item) for item in jobs_list]

    manifest = {
        'config': asdict(config),
        'param_names': plant.param_names,
        'flat_param_channels': [plant.param_names[i] for i in plant.flat_indices],
        'setpoint_channels': list(SETPOINT_CHANNELS),
        'active_phase': list(plant.phase),
        'wavelengths_nm': plant.wavelengths_nm,
        'emission_lines_nm': plant.line_centers,
        'wafers': [
            {'lot_id': run.lot_id, 'wafer_index': run.wafer_index, **factors.as_dict()}
            for run, factors in results
        ],
    }
    return [run for run, _ in results], manifest


def generate_dataset(config: SynthConfig, out_root: str, jobs: int = 1) -> Dataset:
    """
    Write n_lots x wafers_per_lot wafer directories plus manifest.json under
    out_root. Byte-identical output for a fixed seed.
    """
    runs, manifest = generate_runs(config, jobs=jobs)
    try:
        os.makedirs(out_root, exist_ok=True)
    except OSError as e:
        raise DatasetWriteError(f"cannot create {out_root}: {e}")

    for run in runs:
        write_wafer_run(run, wafer_dir_for(out_root, run))
    try:
        write_json(os.path.join(out_root, 'manifest.json'), manifest)
    except OSError as e:
        raise DatasetWriteError(f"cannot write manifest: {e}")

    logger.info(f"✓ Generated {len(runs)} wafers in {config.n_lots} lots under {out_root}")
    return Dataset(runs=tuple(runs))
