"""Wafer directory format, dataset loading and lot-wise folds."""

import os
import shutil

import numpy as np
import pandas as pd
import pytest

from core.errors import (
    ConfigError, EmptyDataset, MalformedRow, MissingFile, NonFiniteValue, ProfileCountMismatch,
    TooFewLots,
)
from core.synthgen import generate_runs
from core.wafer_data import (
    N_POINTS, Dataset, SpatialProfile, load_dataset, load_wafer_run, runs_for_lots,
    split_lotwise_kfold, wafer_dir_for, write_wafer_run,
)

from conftest import tiny_synth_config


@pytest.fixture
def wafer_dir(tmp_path):
    runs, _ = generate_runs(tiny_synth_config(n_lots=1, wafers_per_lot=2))
    path = str(tmp_path / 'L01' / '1')
    write_wafer_run(runs[1], path)
    return path, runs[1]


def _rewrite_line(path, line_no, text):
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    lines[line_no] = text
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')


def _lots_dataset(make_run, n_lots, wafers=2):
    runs = [
        make_run(np.arange(20.0), lot_id=f"L{lot:02d}", wafer_index=w)
        for lot in range(n_lots) for w in range(wafers)
    ]
    return Dataset(runs=tuple(runs))


class TestSpatialProfile:
    """In-memory profile invariants."""

    def test_rejects_wrong_point_count(self):
        with pytest.raises(ProfileCountMismatch):
            SpatialProfile(x=np.zeros(88), y=np.zeros(88), depth=np.zeros(88))

    def test_rejects_non_finite_depth(self):
        depth = np.zeros(N_POINTS)
        depth[3] = np.inf
        with pytest.raises(NonFiniteValue):
            SpatialProfile(x=np.zeros(N_POINTS), y=np.zeros(N_POINTS), depth=depth)

    def test_shape_plus_mean_reconstructs_depth(self):
        depth = np.random.default_rng(0).normal(100.0, 3.0, N_POINTS)
        profile = SpatialProfile(x=np.zeros(N_POINTS), y=np.zeros(N_POINTS), depth=depth)
        assert abs(profile.shape.mean()) < 1e-12
        np.testing.assert_allclose(profile.shape + profile.mean, depth, rtol=0, atol=1e-12)


class TestLoadWaferRun:
    """Loading and validating one wafer directory."""

    def test_round_trip_of_written_wafer(self, wafer_dir):
        path, run = wafer_dir
        loaded = load_wafer_run(path)

        assert loaded.lot_id == run.lot_id
        assert loaded.wafer_index == run.wafer_index
        assert loaded.param_names == run.param_names
        assert loaded.param_units == run.param_units
        assert loaded.sample_period_s == run.sample_period_s
        assert loaded.wafer_radius_mm == run.wafer_radius_mm
        np.testing.assert_array_equal(loaded.wavelengths_nm, run.wavelengths_nm)
        np.testing.assert_allclose(loaded.params, run.params, rtol=1e-12, atol=0)
        np.testing.assert_allclose(loaded.oes, run.oes, rtol=1e-12, atol=0)
        np.testing.assert_allclose(loaded.profile.depth, run.profile.depth, rtol=1e-12, atol=0)
        np.testing.assert_allclose(loaded.profile.x, run.profile.x, rtol=1e-12, atol=1e-12)

    def test_rewrite_of_loaded_wafer_is_byte_identical(self, wafer_dir, tmp_path):
        path, _ = wafer_dir
        again = str(tmp_path / 'again')
        write_wafer_run(load_wafer_run(path), again)
        for name in ('meta.json', 'params.csv', 'oes.csv', 'profile.csv'):
            with open(os.path.join(path, name), 'rb') as a, open(os.path.join(again, name), 'rb') as b:
                assert a.read() == b.read(), name

    def test_profile_with_88_rows(self, wafer_dir):
        path, _ = wafer_dir
        profile_csv = os.path.join(path, 'profile.csv')
        pd.read_csv(profile_csv).iloc[:88].to_csv(profile_csv, index=False)
        with pytest.raises(ProfileCountMismatch):
            load_wafer_run(path)

    def test_nan_cell_in_oes(self, wafer_dir):
        path, _ = wafer_dir
        oes_csv = os.path.join(path, 'oes.csv')
        with open(oes_csv, 'r', encoding='utf-8') as f:
            line = f.read().splitlines()[5]
        cells = line.split(',')
        cells[2] = 'nan'
        _rewrite_line(oes_csv, 5, ','.join(cells))
        with pytest.raises(NonFiniteValue):
            load_wafer_run(path)

    @pytest.mark.parametrize('name', ['meta.json', 'params.csv', 'oes.csv', 'profile.csv'])
    def test_missing_file(self, wafer_dir, name):
        path, _ = wafer_dir
        os.remove(os.path.join(path, name))
        with pytest.raises(MissingFile):
            load_wafer_run(path)

    def test_row_with_extra_field(self, wafer_dir):
        path, _ = wafer_dir
        params_csv = os.path.join(path, 'params.csv')
        with open(params_csv, 'r', encoding='utf-8') as f:
            line = f.read().splitlines()[3]
        _rewrite_line(params_csv, 3, line + ',1.0')
        with pytest.raises(MalformedRow):
            load_wafer_run(path)

    def test_row_with_missing_field(self, wafer_dir):
        path, _ = wafer_dir
        params_csv = os.path.join(path, 'params.csv')
        with open(params_csv, 'r', encoding='utf-8') as f:
            line = f.read().splitlines()[3]
        _rewrite_line(params_csv, 3, line.rsplit(',', 1)[0])
        with pytest.raises(MalformedRow):
            load_wafer_run(path)

    def test_non_numeric_cell(self, wafer_dir):
        path, _ = wafer_dir
        profile_csv = os.path.join(path, 'profile.csv')
        _rewrite_line(profile_csv, 10, '1.0,abc,100.0')
        with pytest.raises(MalformedRow):
            load_wafer_run(path)

    def test_decreasing_wavelength_header(self, wafer_dir):
        path, _ = wafer_dir
        oes_csv = os.path.join(path, 'oes.csv')
        with open(oes_csv, 'r', encoding='utf-8') as f:
            header = f.read().splitlines()[0].split(',')
        _rewrite_line(oes_csv, 0, ','.join(reversed(header)))
        with pytest.raises(MalformedRow):
            load_wafer_run(path)

    def test_point_outside_wafer(self, wafer_dir):
        path, run = wafer_dir
        _rewrite_line(os.path.join(path, 'profile.csv'), 1, f"{2 * run.wafer_radius_mm},0.0,100.0")
        with pytest.raises(MalformedRow):
            load_wafer_run(path)


class TestLoadDataset:
    """Loading a dataset root with exclusions."""

    def test_loads_every_generated_wafer(self, synth_dataset):
        assert len(synth_dataset) == 12
        assert synth_dataset.lot_ids == ['L01', 'L02', 'L03']
        assert all(len(runs) == 4 for runs in synth_dataset.lots.values())
        assert synth_dataset.exclusions == ()

    def test_missing_profile_is_excluded(self, synth_root, tmp_path):
        root = str(tmp_path / 'data')
        shutil.copytree(synth_root, root)
        os.remove(os.path.join(root, 'L02', '3', 'profile.csv'))

        ds = load_dataset(root)
        assert len(ds) == 11
        assert len(ds.exclusions) == 1
        exclusion = ds.exclusions[0]
        assert (exclusion.lot_id, exclusion.wafer, exclusion.reason) == ('L02', '3', 'MissingFile')

    def test_removing_files_never_adds_runs(self, synth_root, tmp_path):
        root = str(tmp_path / 'data')
        shutil.copytree(synth_root, root)
        counts = [len(load_dataset(root))]
        for lot, wafer, name in [('L01', '0', 'oes.csv'), ('L01', '0', 'params.csv'),
                                 ('L03', '2', 'meta.json')]:
            os.remove(os.path.join(root, lot, wafer, name))
            counts.append(len(load_dataset(root)))
        assert counts == sorted(counts, reverse=True)

    def test_parallel_load_keeps_directory_order(self, synth_root):
        serial = load_dataset(synth_root, jobs=1)
        parallel = load_dataset(synth_root, jobs=4)
        assert [r.key for r in serial.runs] == [r.key for r in parallel.runs]

    def test_empty_root(self, tmp_path):
        with pytest.raises(EmptyDataset):
            load_dataset(str(tmp_path))

    def test_missing_root(self, tmp_path):
        with pytest.raises(MissingFile):
            load_dataset(str(tmp_path / 'absent'))

    def test_wafer_dir_for(self, synth_dataset, synth_root):
        run = synth_dataset.runs[0]
        assert wafer_dir_for(synth_root, run) == os.path.join(synth_root, run.lot_id, str(run.wafer_index))


class TestSplitLotwiseKfold:
    """Lot-wise fold assignment."""

    def test_ten_lots_ten_folds_tests_one_lot_each(self, make_run):
        ds = _lots_dataset(make_run, 10)
        folds = split_lotwise_kfold(ds, 10, seed=0)
        assert len(folds) == 10
        assert all(len(f.test_lot_ids) == 1 for f in folds)

    @pytest.mark.parametrize('k', [2, 3, 4, 7])
    def test_folds_partition_lots(self, make_run, k):
        ds = _lots_dataset(make_run, 10)
        folds = split_lotwise_kfold(ds, k, seed=3)
        tested = [lot for f in folds for lot in f.test_lot_ids]
        assert sorted(tested) == ds.lot_ids
        for fold in folds:
            assert not fold.train_lot_ids & fold.test_lot_ids
            assert fold.train_lot_ids | fold.test_lot_ids == set(ds.lot_ids)

    def test_lot_travels_together(self, make_run):
        ds = _lots_dataset(make_run, 5, wafers=3)
        for fold in split_lotwise_kfold(ds, 5, seed=1):
            test_runs = runs_for_lots(ds, fold.test_lot_ids)
            assert len(test_runs) == 3
            assert [r.wafer_index for r in test_runs] == [0, 1, 2]

    def test_deterministic_for_seed(self, make_run):
        ds = _lots_dataset(make_run, 10)
        assert split_lotwise_kfold(ds, 5, seed=11) == split_lotwise_kfold(ds, 5, seed=11)

    def test_too_few_lots(self, make_run):
        with pytest.raises(TooFewLots):
            split_lotwise_kfold(_lots_dataset(make_run, 9), 10, seed=0)

    def test_k_below_two(self, make_run):
        with pytest.raises(ConfigError) as excinfo:
            split_lotwise_kfold(_lots_dataset(make_run, 4), 1, seed=0)
        assert excinfo.value.field == 'cv.k'
