"""Channel selection, phase detection, resampling and instance normalization."""

import dataclasses
import json
import os

import numpy as np
import pytest

from core.conditioning import (
    N_LAGS, PROMPT_DIM, ChannelSelection, SelectionConfig, align_and_resample, condition_runs,
    detect_active_phase, filter_low_variance_params, fit_channel_selection, normalize_instance,
    score_oes_wavelengths, select_topk_nms, top_autocorrelation_lags, write_conditioning_report,
)
from core.errors import (
    GridMismatch, InconsistentChannels, NoActivePhase, PhaseTooShort, UnknownChannel,
)

TRIGGERS = ['rf_power', 'sf6_flow']


def _pulse(n, start, end, ramp=0):
    signal = np.zeros(n)
    signal[start:end] = 1.0
    if ramp:
        signal[start:start + ramp] = np.linspace(0.0, 1.0, ramp)
        signal[end - ramp:end] = np.linspace(1.0, 0.0, ramp)
    return signal


def _trigger_run(make_run, rf, sf6=None, extra=None):
    columns = [rf * 300.0, (rf if sf6 is None else sf6) * 50.0]
    names = list(TRIGGERS)
    if extra is not None:
        columns.append(extra)
        names.append('pressure')
    return make_run(np.column_stack(columns), names=names)


def _selection_for(run, params, wavelengths):
    return ChannelSelection(
        kept_param_indices=list(params),
        kept_wavelength_indices=list(wavelengths),
        scores=np.zeros(len(run.wavelengths_nm)),
        config=SelectionConfig(),
        param_names=run.param_names,
        wavelengths_nm=run.wavelengths_nm,
    )


def greedy_trace_oracle(scores, wavelengths, k, window):
    """Pick the best remaining candidate, then strike everything inside its window."""
    remaining = list(range(len(scores)))
    chosen = []
    while remaining and len(chosen) < k:
        best = max(remaining, key=lambda i: (scores[i], -wavelengths[i]))
        chosen.append(best)
        remaining = [i for i in remaining
                     if i != best and abs(wavelengths[i] - wavelengths[best]) >= window]
    return sorted(chosen)


def interp_oracle(values, positions):
    """Scalar-loop piecewise-linear interpolation on integer knots."""
    out = []
    for p in positions:
        lo = int(np.floor(p))
        if lo >= len(values) - 1:
            out.append(values[-1])
            continue
        frac = p - lo
        out.append(values[lo] * (1.0 - frac) + values[lo + 1] * frac)
    return np.array(out)


class TestFilterLowVarianceParams:
    """Variance-based parameter channel filter."""

    def test_constant_channel_dropped(self, make_run):
        t = np.arange(50.0)
        params = np.column_stack([t, np.full_like(t, 7.0), np.sin(t)])
        runs = [make_run(params), make_run(params * 2.0)]
        assert filter_low_variance_params(runs, 1e-4) == [0, 2]

    def test_eps_zero_keeps_every_varying_channel(self, make_run):
        t = np.arange(50.0)
        params = np.column_stack([t, np.full_like(t, 7.0), 1e-9 * np.sin(t)])
        assert filter_low_variance_params([make_run(params)], 0.0) == [0, 2]

    @pytest.mark.parametrize('level', [0.1, 1.0 / 3.0, 123.456])
    def test_eps_zero_drops_constant_with_round_off(self, make_run, level):
        rng = np.random.default_rng(0)
        params = np.column_stack([rng.normal(0.0, 1.0, 60), np.full(60, level)])
        assert filter_low_variance_params([make_run(params), make_run(params[::-1])], 0.0) == [0]

    def test_matches_independent_std_oracle(self, make_run):
        rng = np.random.default_rng(4)
        runs = [make_run(rng.normal(0.0, 1.0, (40, 5)) * np.array([1.0, 1e-6, 0.3, 1e-3, 0.0]))
                for _ in range(3)]
        eps = 1e-4
        stds = [[float(np.std(run.params[:, i])) for i in range(5)] for run in runs]
        global_max = max(max(row) for row in stds)
        expected = [i for i in range(5) if max(row[i] for row in stds) > eps * global_max]
        assert filter_low_variance_params(runs, eps) == expected

    def test_planted_flat_channels_dropped(self, synth_dataset, synth_root):
        with open(os.path.join(synth_root, 'manifest.json'), 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        kept = filter_low_variance_params(list(synth_dataset.runs), 1e-4)
        names = synth_dataset.runs[0].param_names
        assert [names[i] for i in kept] == [n for n in names if n not in manifest['flat_param_channels']]

    def test_inconsistent_channels(self, make_run):
        t = np.arange(20.0)
        a = make_run(np.column_stack([t, t]), names=['a', 'b'])
        b = make_run(np.column_stack([t, t]), names=['a', 'c'])
        with pytest.raises(InconsistentChannels):
            filter_low_variance_params([a, b], 1e-4)


class TestScoreOesWavelengths:
    """OES variability scoring."""

    def test_matches_brute_force_oracle(self, make_run):
        rng = np.random.default_rng(9)
        runs = [make_run(np.arange(30.0), oes=rng.normal(100.0, rng.uniform(0.1, 5.0, 5), (30, 5)))
                for _ in range(3)]

        s1, s2 = np.zeros(5), np.zeros(5)
        for w in range(5):
            stds, diffs = [], []
            for run in runs:
                series = run.oes[:, w]
                mean = sum(series) / len(series)
                stds.append((sum((v - mean) ** 2 for v in series) / len(series)) ** 0.5)
                diffs.append(sum(abs(series[t + 1] - series[t]) for t in range(len(series) - 1))
                             / (len(series) - 1))
            s1[w] = sorted(stds)[1]
            s2[w] = sorted(diffs)[1]
        expected = ((s1 - s1.min()) / (s1.max() - s1.min()) + (s2 - s2.min()) / (s2.max() - s2.min())) / 2

        np.testing.assert_allclose(score_oes_wavelengths(runs), expected, rtol=0, atol=1e-12)

    def test_constant_wavelength_scores_zero(self, make_run):
        t = np.arange(30.0)
        oes = np.column_stack([np.sin(t), np.full_like(t, 5.0), 3.0 * np.cos(t)])
        scores = score_oes_wavelengths([make_run(t, oes=oes)])
        assert scores[1] == 0.0

    def test_identical_series_score_identically(self, make_run):
        rng = np.random.default_rng(2)
        series = rng.normal(0.0, 1.0, 40)
        oes = np.column_stack([series, rng.normal(0.0, 3.0, 40), series])
        scores = score_oes_wavelengths([make_run(np.arange(40.0), oes=oes)])
        assert scores[0] == scores[2]

    def test_grid_mismatch(self, make_run):
        t = np.arange(10.0)
        a = make_run(t)
        b = make_run(t, wavelengths=[300.0, 320.0, 345.0])
        with pytest.raises(GridMismatch):
            score_oes_wavelengths([a, b])


class TestSelectTopkNms:
    """Greedy top-k with wavelength-axis suppression."""

    def test_adjacent_band_suppressed(self):
        picked = select_topk_nms(np.array([0.9, 0.8, 0.7, 0.6]), np.array([400.0, 401.0, 500.0, 501.0]),
                                 k=2, window_nm=5.0)
        assert picked == [0, 2]

    def test_window_zero_is_plain_top_k(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=20)
        wavelengths = 300.0 + np.arange(20)
        assert select_topk_nms(scores, wavelengths, 6, 0.0) == sorted(np.argsort(-scores)[:6].tolist())

    def test_exhaustion_returns_fewer_than_k(self):
        picked = select_topk_nms(np.array([0.2, 0.9, 0.5]), np.array([400.0, 402.0, 404.0]), k=3,
                                 window_nm=5.0)
        assert picked == [1]

    def test_score_ties_prefer_lower_wavelength(self):
        picked = select_topk_nms(np.array([0.5, 0.5, 0.5]), np.array([400.0, 450.0, 500.0]), k=1,
                                 window_nm=0.0)
        assert picked == [0]

    def test_greedy_trace_oracle_equivalence(self):
        rng = np.random.default_rng(2024)
        for _ in range(500):
            n = int(rng.integers(1, 13))
            wavelengths = np.sort(rng.choice(np.arange(300, 340), size=n, replace=False)).astype(float)
            scores = rng.integers(0, 5, size=n) / 4.0
            k = int(rng.integers(1, n + 2))
            window = float(rng.choice([0.0, 1.0, 2.5, 5.0, 10.0]))

            picked = select_topk_nms(scores, wavelengths, k, window)
            assert picked == greedy_trace_oracle(scores, wavelengths, k, window)
            assert len(picked) <= k
            for i, a in enumerate(picked):
                for b in picked[i + 1:]:
                    assert abs(wavelengths[a] - wavelengths[b]) >= window

    def test_length_mismatch(self):
        with pytest.raises(GridMismatch):
            select_topk_nms(np.zeros(3), np.zeros(4), 1, 0.0)


class TestFitChannelSelection:
    """Dataset-level selection on synthetic runs."""

    def test_selection_is_a_pure_function(self, synth_dataset):
        config = SelectionConfig(top_k=4)
        first = fit_channel_selection(list(synth_dataset.runs), config)
        second = fit_channel_selection(list(synth_dataset.runs), config)
        assert first.kept_param_indices == second.kept_param_indices
        assert first.kept_wavelength_indices == second.kept_wavelength_indices
        assert first.n_c == first.n_pp + first.n_oes
        assert first.n_oes == 4
        assert len(first.channel_labels) == first.n_c


class TestDetectActivePhase:
    """Active-phase detection on the trigger channels."""

    def test_square_pulse(self, make_run):
        run = _trigger_run(make_run, _pulse(1000, 100, 900))
        assert detect_active_phase(run, TRIGGERS) == (100, 900)

    def test_no_activity(self, make_run):
        run = _trigger_run(make_run, np.zeros(1000), sf6=_pulse(1000, 100, 900))
        with pytest.raises(NoActivePhase):
            detect_active_phase(run, TRIGGERS)

    def test_triggers_on_for_whole_run(self, make_run):
        run = _trigger_run(make_run, np.ones(1000))
        assert detect_active_phase(run, TRIGGERS) == (0, 1000)

    def test_constant_trigger_gates_a_pulsed_one(self, make_run):
        run = _trigger_run(make_run, _pulse(1000, 100, 900), sf6=np.ones(1000))
        assert detect_active_phase(run, TRIGGERS) == (100, 900)

    def test_short_dropout_is_bridged(self, make_run):
        clean = _pulse(1000, 100, 900, ramp=20)
        dropped = clean.copy()
        dropped[500:503] = 0.0
        expected = detect_active_phase(_trigger_run(make_run, clean), TRIGGERS)
        assert detect_active_phase(_trigger_run(make_run, dropped), TRIGGERS) == expected

    def test_long_dropout_splits_and_longest_wins(self, make_run):
        rf = _pulse(1000, 100, 900)
        rf[300:320] = 0.0
        assert detect_active_phase(_trigger_run(make_run, rf), TRIGGERS) == (320, 900)

    def test_equal_segments_prefer_earliest(self, make_run):
        rf = _pulse(1000, 100, 200) + _pulse(1000, 500, 600)
        assert detect_active_phase(_trigger_run(make_run, rf), TRIGGERS) == (100, 200)

    def test_phase_requires_every_trigger(self, make_run):
        run = _trigger_run(make_run, _pulse(1000, 100, 900), sf6=_pulse(1000, 300, 950))
        assert detect_active_phase(run, TRIGGERS) == (300, 900)

    @pytest.mark.parametrize('shift', [1, 17, 64])
    def test_translation_equivariance(self, make_run, shift):
        rf = _pulse(1000, 100, 700, ramp=30)
        base = detect_active_phase(_trigger_run(make_run, rf), TRIGGERS)
        shifted = detect_active_phase(_trigger_run(make_run, np.roll(rf, shift)), TRIGGERS)
        assert shifted == (base[0] + shift, base[1] + shift)

    def test_unknown_trigger(self, make_run):
        run = _trigger_run(make_run, _pulse(100, 10, 90))
        with pytest.raises(UnknownChannel):
            detect_active_phase(run, ['rf_power', 'he_flow'])

    def test_planted_phase_recovered(self, synth_dataset, synth_root):
        with open(os.path.join(synth_root, 'manifest.json'), 'r', encoding='utf-8') as f:
            t0, t1 = json.load(f)['active_phase']
        for run in synth_dataset.runs:
            start, end = detect_active_phase(run, TRIGGERS)
            assert abs(start - t0) <= 5
            assert abs(end - t1) <= 5


class TestAlignAndResample:
    """Phase-window alignment and linear resampling."""

    @pytest.mark.parametrize('n_t', [2, 7, 64, 333, 1000])
    def test_affine_signal_stays_affine(self, make_run, n_t):
        t = np.arange(500.0)
        run = make_run(np.column_stack([3.0 + 0.25 * t, 10.0 - 0.01 * t]))
        raw = align_and_resample(run, _selection_for(run, [0, 1], []), (40, 460), n_t)
        grid = np.linspace(40.0, 459.0, n_t)
        expected = np.vstack([3.0 + 0.25 * grid, 10.0 - 0.01 * grid])
        assert np.max(np.abs(raw - expected)) <= 1e-12 * np.max(np.abs(expected))

    def test_identity_when_length_matches(self, make_run):
        rng = np.random.default_rng(1)
        run = make_run(rng.normal(0.0, 1.0, (200, 2)))
        raw = align_and_resample(run, _selection_for(run, [0, 1], []), (50, 150), 100)
        np.testing.assert_allclose(raw, run.params[50:150].T, rtol=0, atol=1e-12)

    def test_endpoints_preserved_exactly(self, make_run):
        rng = np.random.default_rng(3)
        run = make_run(rng.normal(0.0, 1.0, (300, 1)))
        raw = align_and_resample(run, _selection_for(run, [0], []), (17, 283), 91)
        assert raw[0, 0] == run.params[17, 0]
        assert raw[0, -1] == run.params[282, 0]

    def test_sine_matches_interpolation_oracle(self, make_run):
        t = np.arange(800.0)
        run = make_run(np.sin(t / 13.0))
        raw = align_and_resample(run, _selection_for(run, [0], []), (100, 700), 6000)
        positions = np.linspace(100.0, 699.0, 6000)
        np.testing.assert_allclose(raw[0], interp_oracle(run.params[:, 0], positions), rtol=0, atol=1e-9)

    def test_params_then_oes_rows(self, make_run):
        run = make_run(np.column_stack([np.arange(100.0), -np.arange(100.0)]))
        raw = align_and_resample(run, _selection_for(run, [1], [0, 2]), (10, 90), 80)
        assert raw.shape == (3, 80)
        np.testing.assert_allclose(raw[0], run.params[10:90, 1], atol=1e-12)
        np.testing.assert_allclose(raw[1], run.oes[10:90, 0], atol=1e-12)
        np.testing.assert_allclose(raw[2], run.oes[10:90, 2], atol=1e-12)

    def test_oes_on_its_own_time_axis(self, make_run):
        t_pp = np.arange(101.0)
        t_oes = np.linspace(0.0, 100.0, 401)
        run = make_run(t_pp, oes=np.column_stack([5.0 + 2.0 * t_oes]), wavelengths=[400.0])
        raw = align_and_resample(run, _selection_for(run, [0], [0]), (20, 81), 31)
        grid = np.linspace(20.0, 80.0, 31)
        np.testing.assert_allclose(raw[1], 5.0 + 2.0 * grid, rtol=1e-12)

    def test_oes_mapped_through_physical_time(self, make_run):
        params = np.arange(100.0)
        oes_time = 0.25 * np.arange(300.0)
        run = dataclasses.replace(
            make_run(params, oes=np.column_stack([5.0 + 2.0 * oes_time]), wavelengths=[400.0]),
            sample_period_s=1.0, oes_sample_period_s=0.25,
        )
        raw = align_and_resample(run, _selection_for(run, [0], [0]), (40, 60), 39)
        seconds = np.linspace(40.0, 59.0, 39)
        np.testing.assert_allclose(raw[0], seconds, rtol=1e-12)
        np.testing.assert_allclose(raw[1], 5.0 + 2.0 * seconds, rtol=1e-12)

    def test_equal_lengths_at_different_rates(self, make_run):
        oes_time = 1.0 * np.arange(200.0)
        run = dataclasses.replace(
            make_run(np.arange(200.0), oes=np.column_stack([oes_time ** 2]), wavelengths=[400.0]),
            sample_period_s=0.5, oes_sample_period_s=1.0,
        )
        raw = align_and_resample(run, _selection_for(run, [0], [0]), (20, 101), 81)
        seconds = 0.5 * np.linspace(20.0, 100.0, 81)
        expected = np.interp(seconds, oes_time, oes_time ** 2)
        np.testing.assert_allclose(raw[1], expected, rtol=1e-12)

    def test_phase_too_short(self, make_run):
        run = make_run(np.arange(50.0))
        with pytest.raises(PhaseTooShort):
            align_and_resample(run, _selection_for(run, [0], []), (5, 6), 10)


class TestNormalizeInstance:
    """Per-wafer, per-channel normalization and prompt statistics."""

    def test_constant_channel_is_zero_with_floored_std(self):
        raw = np.vstack([np.full(64, 3.7), np.linspace(0.0, 1.0, 64)])
        conditioned = normalize_instance(raw, std_floor=1e-8)
        assert np.all(conditioned.matrix[0] == 0.0)
        assert conditioned.stats.std[0] == 1e-8
        assert conditioned.stats.mean[0] == 3.7

    def test_rows_have_zero_mean_unit_std(self):
        raw = np.random.default_rng(5).normal(0.0, 1.0, (6, 256)) * np.arange(1, 7)[:, None] + 40.0
        z = normalize_instance(raw).matrix
        assert np.max(np.abs(z.mean(axis=1))) <= 1e-6
        assert np.max(np.abs(z.std(axis=1) - 1.0)) <= 1e-6
        assert np.all(np.isfinite(z))

    def test_trend_sign(self):
        t = np.arange(100.0)
        stats = normalize_instance(np.vstack([t, -t, np.ones_like(t)])).stats
        assert stats.trend.tolist() == [1.0, -1.0, 0.0]

    def test_statistics_recorded(self):
        raw = np.random.default_rng(6).normal(5.0, 2.0, (3, 50))
        stats = normalize_instance(raw).stats
        np.testing.assert_allclose(stats.min, raw.min(axis=1))
        np.testing.assert_allclose(stats.max, raw.max(axis=1))
        np.testing.assert_allclose(stats.median, np.median(raw, axis=1))
        assert stats.lags.shape == (3, N_LAGS)
        assert stats.prompt_matrix().shape == (3, PROMPT_DIM)

    def test_periodic_signal_top_lag_is_half_period(self):
        t = np.arange(64.0)
        lags = top_autocorrelation_lags(np.sin(2 * np.pi * t / 8.0)[None, :])
        assert lags[0, 0] == 4
        assert np.all((lags >= 1) & (lags <= 32))


class TestConditionRuns:
    """Per-wafer driver and report."""

    def test_synthetic_runs_condition_cleanly(self, synth_dataset, cond_config):
        runs = list(synth_dataset.runs)
        selection = fit_channel_selection(runs, cond_config.selection)
        result = condition_runs(runs, selection, cond_config)

        assert len(result.inputs) == len(runs)
        assert not result.exclusions
        for run, conditioned in zip(result.runs, result.inputs):
            assert conditioned.source == run.key
            assert conditioned.matrix.shape == (selection.n_c, cond_config.n_t)
            assert np.all(np.isfinite(conditioned.matrix))
            varying = conditioned.stats.std > cond_config.std_floor
            assert np.max(np.abs(conditioned.matrix.mean(axis=1))) <= 1e-6
            assert np.max(np.abs(conditioned.matrix[varying].std(axis=1) - 1.0)) <= 1e-6

    def test_dead_wafer_is_excluded_in_order(self, synth_dataset, cond_config, make_run):
        runs = list(synth_dataset.runs[:3])
        selection = fit_channel_selection(runs, cond_config.selection)
        template = runs[1]
        dead = make_run(np.zeros_like(template.params), names=template.param_names, oes=template.oes,
                        wavelengths=template.wavelengths_nm, lot_id='L09', wafer_index=0)
        result = condition_runs([runs[0], dead, runs[2]], selection, cond_config, jobs=2)

        assert [r.key for r in result.runs] == [runs[0].key, runs[2].key]
        assert len(result.exclusions) == 1
        assert result.exclusions[0].reason == 'NoActivePhase'

    def test_report(self, synth_dataset, cond_config, tmp_path):
        runs = list(synth_dataset.runs)
        selection = fit_channel_selection(runs, cond_config.selection)
        result = condition_runs(runs, selection, cond_config)
        path = str(tmp_path / 'conditioning_report.json')
        write_conditioning_report(result, path)

        with open(path, 'r', encoding='utf-8') as f:
            report = json.load(f)
        assert report['channels'] == selection.channel_labels
        assert len(report['phases']) == len(runs)
        assert report['selection']['kept_wavelength_indices'] == selection.kept_wavelength_indices
        assert report['exclusions'] == []
