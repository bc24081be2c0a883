"""
Shared fixtures: a tiny seeded synthetic dataset, desk-scale configs and
factories for hand-built runs, conditioned inputs and profiles.
"""

import numpy as np
import pytest

from core.conditioning import ConditioningConfig, SelectionConfig, normalize_instance
from core.model import ModelConfig
from core.synthgen import SynthConfig, generate_dataset, layout_89
from core.wafer_data import SpatialProfile, WaferRun, load_dataset

TINY_SYNTH = dict(
    n_lots=3,
    wafers_per_lot=4,
    n_pp_raw=6,
    n_wl=16,
    n_lines=4,
    t_raw=200,
    ramp_samples=10,
    flat_param_channels=2,
    seed=7,
)

DESK_MODEL = dict(
    l_p=16,
    s=8,
    d_m=8,
    k_heads=2,
    n_proto=8,
    d_backbone=16,
    d_ff=8,
    n_prefix=2,
    backbone_layers=1,
    backbone_heads=2,
)


def tiny_synth_config(**overrides) -> SynthConfig:
    return SynthConfig(**{**TINY_SYNTH, **overrides})


@pytest.fixture
def synth_config():
    return tiny_synth_config()


@pytest.fixture(scope='session')
def synth_root(tmp_path_factory):
    """Tiny synthetic dataset on disk (3 lots x 4 wafers), generated once."""
    root = tmp_path_factory.mktemp('synth') / 'data'
    generate_dataset(tiny_synth_config(), str(root))
    return str(root)


@pytest.fixture(scope='session')
def synth_dataset(synth_root):
    return load_dataset(synth_root)


@pytest.fixture
def cond_config():
    return ConditioningConfig(selection=SelectionConfig(top_k=4), n_t=64)


@pytest.fixture
def desk_model_config():
    return ModelConfig(**DESK_MODEL)


@pytest.fixture
def make_run():
    """Factory for hand-built WaferRuns with a valid 89-point profile."""

    def _make(params, names=None, oes=None, wavelengths=None, lot_id='L01', wafer_index=0,
              depth=None):
        params = np.asarray(params, dtype=float)
        if params.ndim == 1:
            params = params[:, None]
        names = tuple(names or [f"ch{i}" for i in range(params.shape[1])])
        if oes is None:
            t = np.arange(params.shape[0], dtype=float)
            oes = np.column_stack([1.0 + t, 2.0 + 0.5 * t, np.full_like(t, 3.0)])
        oes = np.asarray(oes, dtype=float)
        if wavelengths is None:
            wavelengths = 300.0 + 20.0 * np.arange(oes.shape[1])
        r, theta = layout_89()
        if depth is None:
            depth = 100.0 + r ** 2
        return WaferRun(
            lot_id=lot_id,
            wafer_index=wafer_index,
            param_names=names,
            params=params,
            wavelengths_nm=np.asarray(wavelengths, dtype=float),
            oes=oes,
            profile=SpatialProfile(x=100.0 * r * np.cos(theta), y=100.0 * r * np.sin(theta),
                                   depth=np.asarray(depth, dtype=float)),
            sample_period_s=0.5,
        )

    return _make


@pytest.fixture
def make_inputs():
    """Factory for seeded conditioned inputs built from random raw signals."""

    def _make(n, n_c, n_t, seed=0):
        rng = np.random.default_rng(seed)
        inputs = []
        for i in range(n):
            raw = rng.normal(50.0, 10.0, size=(n_c, n_t)) + np.linspace(0.0, 5.0 * i, n_t)
            conditioned = normalize_instance(raw)
            conditioned.source = ('L01', i)
            inputs.append(conditioned)
        return inputs

    return _make


@pytest.fixture
def make_profiles():
    """Factory for seeded 89-point profiles around 100 um."""

    def _make(n, seed=0, spread=3.0):
        rng = np.random.default_rng(seed)
        r, theta = layout_89()
        x, y = 100.0 * r * np.cos(theta), 100.0 * r * np.sin(theta)
        return [
            SpatialProfile(x=x, y=y, depth=100.0 + rng.normal(0.0, 1.0) + rng.normal(0.0, spread, size=89))
            for _ in range(n)
        ]

    return _make
