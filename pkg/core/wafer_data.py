"""
On-disk wafer dataset format, loading/validation and lot-wise fold splits

Layout: <root>/<lot_id>/<wafer_index>/ with meta.json, params.csv, oes.csv
and profile.csv.
"""

import os
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (
    DatasetWriteError, EmptyDataset, EtchProfilerError, MalformedRow, MissingFile,
    NonFiniteValue, ProfileCountMismatch, TooFewLots, ConfigError,
)
from .logger import get_logger

logger = get_logger('wafer_data')

N_POINTS = 89
PROFILE_COLUMNS = ['x_mm', 'y_mm', 'depth_um']
WAFER_FILES = ('meta.json', 'params.csv', 'oes.csv', 'profile.csv')
DEFAULT_WAFER_RADIUS_MM = 100.0


@dataclass(frozen=True, eq=False)
class SpatialProfile:
    """89-point etch depth measurement (mm, mm, micrometers)."""

    x: np.ndarray
    y: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        for name in ('x', 'y', 'depth'):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (N_POINTS,):
                raise ProfileCountMismatch(
                    f"profile {name} has {arr.size} points, expected {N_POINTS}"
                )
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"profile {name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def mean(self) -> float:
        return float(np.mean(self.depth))

    @property
    def shape(self) -> np.ndarray:
        """Zero-mean spatial residual."""
        return self.depth - self.mean


@dataclass(frozen=True, eq=False)
class WaferRun:
    """One wafer's in-situ signals plus its measured profile."""

    lot_id: str
    wafer_index: int
    param_names: Tuple[str, ...]
    params: np.ndarray              # (T_raw, N_pp_raw)
    wavelengths_nm: np.ndarray      # (N_wl,), strictly increasing
    oes: np.ndarray                 # (T_oes, N_wl)
    profile: SpatialProfile
    sample_period_s: float
    oes_sample_period_s: Optional[float] = None
    param_units: Dict[str, str] = field(default_factory=dict)
    wafer_radius_mm: float = DEFAULT_WAFER_RADIUS_MM

    @property
    def key(self) -> Tuple[str, int]:
        return self.lot_id, self.wafer_index

    @property
    def n_samples(self) -> int:
        return self.params.shape[0]

    def channel_index(self, name: str) -> int:
        return self.param_names.index(name)


@dataclass(frozen=True)
class ExclusionRecord:
    """A wafer directory (or conditioned run) that was left out, and why."""

    lot_id: str
    wafer: str
    reason: str
    error: str

    def as_dict(self) -> dict:
        return {'lot_id': self.lot_id, 'wafer': self.wafer,
                'reason': self.reason, 'error': self.error}


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of validated wafer runs."""

    runs: Tuple[WaferRun, ...]
    exclusions: Tuple[ExclusionRecord, ...] = ()

    @property
    def lots(self) -> Dict[str, List[WaferRun]]:
        grouped: Dict[str, List[WaferRun]] = {}
        for run in self.runs:
            grouped.setdefault(run.lot_id, []).append(run)
        return {lot: sorted(runs, key=lambda r: r.wafer_index)
                for lot, runs in sorted(grouped.items())}

    @property
    def lot_ids(self) -> List[str]:
        return sorted({run.lot_id for run in self.runs})

    def __len__(self) -> int:
        return len(self.runs)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_lot_ids: frozenset
    test_lot_ids: frozenset


# ---------------------------------------------------------------------------
# Reading

def _read_numeric_csv(path: str) -> Tuple[List[str], np.ndarray]:
    """
    Read a header + numeric-rows CSV file.

    Returns:
        tuple: (header names, float matrix)
    """
    if not os.path.isfile(path):
        raise MissingFile(f"missing file: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise MalformedRow(f"{path}: empty file")
    except pd.errors.ParserError as e:
        raise MalformedRow(f"{path}: {e}")

    # All rows carrying one extra field turn the first column into an index
    if not isinstance(frame.index, pd.RangeIndex):
        raise MalformedRow(f"{path}: data rows have more fields than the header")

    # Short rows are padded with NaN by the parser
    short = frame.isna().any(axis=1)
    if short.any():
        line = int(np.flatnonzero(short.to_numpy())[0]) + 2
        raise MalformedRow(f"{path}: line {line} has fewer fields than the header")

    # astype(float) parses with correct rounding, so written values reload bit-exact
    try:
        matrix = frame.apply(lambda col: col.str.strip()).astype(float).to_numpy()
    except (ValueError, TypeError) as e:
        raise MalformedRow(f"{path}: non-numeric cell ({e})")

    if matrix.size and not np.all(np.isfinite(matrix)):
        row, col = np.argwhere(~np.isfinite(matrix))[0]
        raise NonFiniteValue(f"{path}: non-finite value at line {row + 2}, column '{frame.columns[col]}'")

    return [str(c).strip() for c in frame.columns], matrix


def load_wafer_run(wafer_dir: str) -> WaferRun:
    """
    Load and validate one wafer directory.

    Args:
        wafer_dir: Directory containing meta.json, params.csv, oes.csv and profile.csv

    Returns:
        WaferRun with units and labels preserved
    """
    meta_path = os.path.join(wafer_dir, 'meta.json')
    if not os.path.isfile(meta_path):
        raise MissingFile(f"missing file: {meta_path}")
    with open(meta_path, 'r', encoding='utf-8') as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise MalformedRow(f"{meta_path}: {e}")
    for key in ('lot_id', 'wafer_index', 'sample_period_s'):
        if key not in meta:
            raise MalformedRow(f"{meta_path}: missing key '{key}'")

    param_names, params = _read_numeric_csv(os.path.join(wafer_dir, 'params.csv'))
    wl_labels, oes = _read_numeric_csv(os.path.join(wafer_dir, 'oes.csv'))
    profile_header, profile = _read_numeric_csv(os.path.join(wafer_dir, 'profile.csv'))

    try:
        wavelengths = np.array([float(w) for w in wl_labels])
    except ValueError:
        raise MalformedRow(f"{wafer_dir}/oes.csv: wavelength header must be numeric")
    if wavelengths.size > 1 and not np.all(np.diff(wavelengths) > 0):
        raise MalformedRow(f"{wafer_dir}/oes.csv: wavelength labels must be strictly increasing")

    if params.shape[0] == 0 or params.shape[1] == 0 or oes.shape[0] == 0 or oes.shape[1] == 0:
        raise MalformedRow(f"{wafer_dir}: empty signal matrix")

    if profile_header != PROFILE_COLUMNS:
        raise MalformedRow(f"{wafer_dir}/profile.csv: header must be {','.join(PROFILE_COLUMNS)}")
    if profile.shape[0] != N_POINTS:
        raise ProfileCountMismatch(
            f"{wafer_dir}/profile.csv: {profile.shape[0]} rows, expected {N_POINTS}"
        )

    radius = float(meta.get('wafer_radius_mm', DEFAULT_WAFER_RADIUS_MM))
    spatial = SpatialProfile(x=profile[:, 0], y=profile[:, 1], depth=profile[:, 2])
    r = np.hypot(spatial.x, spatial.y)
    if np.any(r > radius * (1 + 1e-9)):
        raise MalformedRow(f"{wafer_dir}/profile.csv: point outside wafer radius {radius} mm")

    oes_period = meta.get('oes_sample_period_s')
    return WaferRun(
        lot_id=str(meta['lot_id']),
        wafer_index=int(meta['wafer_index']),
        param_names=tuple(param_names),
        params=params,
        wavelengths_nm=wavelengths,
        oes=oes,
        profile=spatial,
        sample_period_s=float(meta['sample_period_s']),
        oes_sample_period_s=float(oes_period) if oes_period is not None else None,
        param_units=dict(meta.get('param_units', {})),
        wafer_radius_mm=radius,
    )


def _wafer_dirs(root: str) -> List[Tuple[str, str, str]]:
    """(lot_id, wafer dir name, path) for every wafer directory under root, sorted."""
    found = []
    for lot in sorted(os.listdir(root)):
        lot_path = os.path.join(root, lot)
        if not os.path.isdir(lot_path):
            continue
        wafers = [w for w in os.listdir(lot_path) if os.path.isdir(os.path.join(lot_path, w))]
        wafers.sort(key=lambda w: (0, int(w)) if w.isdigit() else (1, w))
        found.extend((lot, w, os.path.join(lot_path, w)) for w in wafers)
    return found


def load_dataset(root: str, jobs: int = 1) -> Dataset:
    """
    Load every wafer directory under root, excluding incomplete runs.

    Args:
        root: Dataset root (lot subdirectories containing wafer subdirectories)
        jobs: Number of loader threads; results are merged in directory order

    Returns:
        Dataset with the exclusion report attached
    """
    if not os.path.isdir(root):
        raise MissingFile(f"dataset root does not exist: {root}")

    entries = _wafer_dirs(root)

    def _load(entry):
        lot, wafer, path = entry
        try:
            return load_wafer_run(path), None
        except EtchProfilerError as e:
            return None, ExclusionRecord(lot, wafer, type(e).__name__, str(e))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_load, entries))
    else:
        results = [_load(entry) for entry in entries]

    runs = tuple(run for run, _ in results if run is not None)
    exclusions = tuple(exc for _, exc in results if exc is not None)
    for exc in exclusions:
        logger.warning(f"⚠ Excluded {exc.lot_id}/{exc.wafer}: {exc.reason} ({exc.error})")

    if not runs:
        raise EmptyDataset(f"no valid wafer runs under {root}")

    logger.info(f"✓ Loaded {len(runs)} wafer runs from {len({r.lot_id for r in runs})} lots "
                f"({len(exclusions)} excluded)")
    return Dataset(runs=runs, exclusions=exclusions)


# ---------------------------------------------------------------------------
# Writing

def _frame_to_csv(frame: pd.DataFrame, path: str):
    # repr-style floats round-trip exactly
    frame.to_csv(path, index=False, lineterminator='\n')


def write_wafer_run(run: WaferRun, wafer_dir: str):
    """Write a WaferRun in the on-disk wafer directory format."""
    try:
        os.makedirs(wafer_dir, exist_ok=True)
        meta = {
            'lot_id': run.lot_id,
            'wafer_index': run.wafer_index,
            'sample_period_s': run.sample_period_s,
            'wafer_radius_mm': run.wafer_radius_mm,
        }
        if run.oes_sample_period_s is not None:
            meta['oes_sample_period_s'] = run.oes_sample_period_s
        if run.param_units:
            meta['param_units'] = dict(run.param_units)
        with open(os.path.join(wafer_dir, 'meta.json'), 'w', encoding='utf-8') as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write('\n')

        _frame_to_csv(pd.DataFrame(run.params, columns=list(run.param_names)),
                      os.path.join(wafer_dir, 'params.csv'))
        _frame_to_csv(pd.DataFrame(run.oes, columns=[repr(float(w)) for w in run.wavelengths_nm]),
                      os.path.join(wafer_dir, 'oes.csv'))
        _frame_to_csv(pd.DataFrame({'x_mm': run.profile.x, 'y_mm': run.profile.y,
                                    'depth_um': run.profile.depth}),
                      os.path.join(wafer_dir, 'profile.csv'))
    except OSError as e:
        raise DatasetWriteError(f"cannot write {wafer_dir}: {e}")


def wafer_dir_for(root: str, run: WaferRun) -> str:
    return os.path.join(root, run.lot_id, str(run.wafer_index))


# ---------------------------------------------------------------------------
# Folds

def split_lotwise_kfold(ds: Dataset, k: int, seed: int) -> List[FoldSplit]:
    """
    Lot-wise k-fold split: lots sorted by id, shuffled with the seeded
    generator and dealt round-robin into k folds.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}", field='cv.k')
    lot_ids = ds.lot_ids
    if k > len(lot_ids):
        raise TooFewLots(f"cannot make {k} lot-wise folds from {len(lot_ids)} lots")

    rng = np.random.default_rng(seed)
    order = [lot_ids[i] for i in rng.permutation(len(lot_ids))]
    buckets: List[List[str]] = [[] for _ in range(k)]
    for i, lot in enumerate(order):
        buckets[i % k].append(lot)

    all_lots = frozenset(lot_ids)
    return [
        FoldSplit(fold_index=i, train_lot_ids=all_lots - frozenset(test), test_lot_ids=frozenset(test))
        for i, test in enumerate(buckets)
    ]


def runs_for_lots(ds: Dataset, lot_ids: Sequence[str]) -> List[WaferRun]:
    """Runs of the given lots in (lot_id, wafer_index) order."""
    wanted = set(lot_ids)
    return sorted((r for r in ds.runs if r.lot_id in wanted), key=lambda r: r.key)
