"""
Dataset conditioning: channel selection, active-phase detection, alignment,
resampling and per-wafer instance normalization

Conditioning is two-phase: dataset-level channel selection is fitted first
(fit_channel_selection), then every wafer is conditioned independently
(condition_run / condition_runs).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigError, EtchProfilerError, GridMismatch, InconsistentChannels, NoActivePhase,
    PhaseTooShort, UnknownChannel,
)
from .logger import get_logger
from .utils import write_json
from .wafer_data import ExclusionRecord, WaferRun

logger = get_logger('conditioning')

N_LAGS = 5
PROMPT_DIM = 6 + N_LAGS


@dataclass
class SelectionConfig:
    variance_epsilon: float = 1e-4
    top_k: int = 8
    nms_window_nm: float = 10.0

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.variance_epsilon < 0:
            return False, "conditioning.selection.variance_epsilon must be >= 0"
        if self.top_k < 1:
            return False, "conditioning.selection.top_k must be >= 1"
        if self.nms_window_nm < 0:
            return False, "conditioning.selection.nms_window_nm must be >= 0"
        return True, None


@dataclass
class ConditioningConfig:
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    trigger_channels: List[str] = field(default_factory=lambda: ['rf_power', 'sf6_flow'])
    activity_fraction: float = 0.1
    max_gap: int = 5
    n_t: int = 256
    std_floor: float = 1e-8

    def validate(self) -> Tuple[bool, Optional[str]]:
        ok, msg = self.selection.validate()
        if not ok:
            return ok, msg
        if not self.trigger_channels:
            return False, "conditioning.trigger_channels must not be empty"
        if not 0 < self.activity_fraction < 1:
            return False, "conditioning.activity_fraction must be in (0, 1)"
        if self.max_gap < 0:
            return False, "conditioning.max_gap must be >= 0"
        if self.n_t < 2:
            return False, "conditioning.n_t must be >= 2"
        if self.std_floor <= 0:
            return False, "conditioning.std_floor must be > 0"
        return True, None


@dataclass
class ChannelSelection:
    """Channels kept by the dataset-level selection step."""

    kept_param_indices: List[int]
    kept_wavelength_indices: List[int]
    scores: np.ndarray
    config: SelectionConfig
    param_names: Tuple[str, ...] = ()
    wavelengths_nm: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_pp(self) -> int:
        return len(self.kept_param_indices)

    @property
    def n_oes(self) -> int:
        return len(self.kept_wavelength_indices)

    @property
    def n_c(self) -> int:
        return self.n_pp + self.n_oes

    @property
    def channel_labels(self) -> List[str]:
        labels = [self.param_names[i] for i in self.kept_param_indices]
        labels += [f"oes_{self.wavelengths_nm[i]:g}nm" for i in self.kept_wavelength_indices]
        return labels

    def as_dict(self) -> dict:
        return {
            'kept_param_indices': list(map(int, self.kept_param_indices)),
            'kept_param_names': [self.param_names[i] for i in self.kept_param_indices],
            'kept_wavelength_indices': list(map(int, self.kept_wavelength_indices)),
            'kept_wavelengths_nm': [float(self.wavelengths_nm[i]) for i in self.kept_wavelength_indices],
            'scores': [float(s) for s in self.scores],
            'config': asdict(self.config),
        }


@dataclass
class NormStats:
    """Per-channel normalization and prompt statistics."""

    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    median: np.ndarray
    trend: np.ndarray          # sign of least-squares slope, in {-1, 0, 1}
    lags: np.ndarray           # (N_c, 5) top autocorrelation lags
    n_t: int

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]

    def prompt_vector(self, channel: int) -> np.ndarray:
        """
        Fixed-size numeric summary of one channel fed to the prefix map.
        Level statistics are signed-log compressed; lags are scaled by N_T.
        """
        def slog(v):
            return np.sign(v) * np.log1p(np.abs(v))

        level = np.array([self.mean[channel], self.std[channel], self.min[channel],
                          self.max[channel], self.median[channel]])
        return np.concatenate([slog(level), [self.trend[channel]],
                               self.lags[channel] / float(self.n_t)])

    def prompt_matrix(self) -> np.ndarray:
        return np.stack([self.prompt_vector(i) for i in range(self.n_channels)])


@dataclass
class ConditionedInput:
    matrix: np.ndarray                 # (N_c, N_T), normalized
    stats: NormStats
    phase: Tuple[int, int] = (0, 0)
    source: Tuple[str, int] = ('', -1)


# ---------------------------------------------------------------------------
# Channel selection

def filter_low_variance_params(runs: Sequence[WaferRun], eps: float) -> List[int]:
    """
    Keep parameter channel i iff max over wafers of std_t(channel i) exceeds
    eps times the largest per-wafer std of any channel.
    """
    if not runs:
        raise ConfigError("channel selection needs at least one run", field='runs')
    names = runs[0].param_names
    for run in runs[1:]:
        if run.param_names != names:
            raise InconsistentChannels(
                f"{run.lot_id}/{run.wafer_index}: parameter channels differ from "
                f"{runs[0].lot_id}/{runs[0].wafer_index}"
            )

    # exactly constant columns get std 0; np.std leaves round-off on them
    stds = np.stack([np.where(np.ptp(run.params, axis=0) == 0, 0.0, np.std(run.params, axis=0))
                     for run in runs])
    per_channel = stds.max(axis=0)
    threshold = eps * stds.max()
    kept = [i for i in range(len(names)) if per_channel[i] > threshold]
    logger.debug(f"variance filter kept {len(kept)}/{len(names)} parameter channels")
    return kept


def oes_variability_stats(runs: Sequence[WaferRun]) -> Tuple[np.ndarray, np.ndarray]:
    """Wafer-median temporal std and mean absolute first difference per wavelength."""
    if not runs:
        raise ConfigError("wavelength scoring needs at least one run", field='runs')
    grid = runs[0].wavelengths_nm
    for run in runs[1:]:
        if not np.array_equal(run.wavelengths_nm, grid):
            raise GridMismatch(f"{run.lot_id}/{run.wafer_index}: wavelength grid differs")

    s1 = np.median(np.stack([np.std(run.oes, axis=0) for run in runs]), axis=0)
    s2 = np.median(np.stack([np.mean(np.abs(np.diff(run.oes, axis=0)), axis=0)
                             if run.oes.shape[0] > 1 else np.zeros(run.oes.shape[1])
                             for run in runs]), axis=0)
    return s1, s2


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def score_oes_wavelengths(runs: Sequence[WaferRun]) -> np.ndarray:
    """Average of the min-max normalized variability statistics, per wavelength."""
    s1, s2 = oes_variability_stats(runs)
    return (_minmax(s1) + _minmax(s2)) / 2.0


def select_topk_nms(scores: np.ndarray, wavelengths_nm: np.ndarray, k: int,
                    window_nm: float) -> List[int]:
    """
    Greedy top-k with non-maximum suppression along the wavelength axis.

    Candidates are visited by descending score (ties: lower wavelength first);
    a candidate closer than window_nm to an already selected wavelength is
    suppressed. Returns ascending indices, possibly fewer than k.
    """
    scores = np.asarray(scores, dtype=float)
    wavelengths_nm = np.asarray(wavelengths_nm, dtype=float)
    if scores.shape != wavelengths_nm.shape:
        raise GridMismatch("scores and wavelengths must have the same length")

    order = np.lexsort((wavelengths_nm, -scores))
    selected: List[int] = []
    for idx in order:
        if len(selected) >= k:
            break
        if all(abs(wavelengths_nm[idx] - wavelengths_nm[s]) >= window_nm for s in selected):
            selected.append(int(idx))
    return sorted(selected)


def fit_channel_selection(runs: Sequence[WaferRun], config: SelectionConfig) -> ChannelSelection:
    """Dataset-level selection; fit on training runs only."""
    kept_params = filter_low_variance_params(runs, config.variance_epsilon)
    scores = score_oes_wavelengths(runs)
    kept_wl = select_topk_nms(scores, runs[0].wavelengths_nm, config.top_k, config.nms_window_nm)
    selection = ChannelSelection(
        kept_param_indices=kept_params,
        kept_wavelength_indices=kept_wl,
        scores=scores,
        config=config,
        param_names=tuple(runs[0].param_names),
        wavelengths_nm=np.array(runs[0].wavelengths_nm),
    )
    logger.info(f"✓ Channel selection: {selection.n_pp} parameter + {selection.n_oes} OES "
                f"= {selection.n_c} channels")
    return selection


# ---------------------------------------------------------------------------
# Phase detection and resampling

def _active_segments(active: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Start (inclusive) and end (exclusive) indices of True runs."""
    padded = np.concatenate([[0], active.astype(np.int8), [0]])
    edges = np.diff(padded)
    return np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)


def detect_active_phase(run: WaferRun, trigger_channels: Sequence[str],
                        activity_fraction: float = 0.1, max_gap: int = 5) -> Tuple[int, int]:
    """
    Locate the active etching phase from trigger channels.

    A trigger channel is active where its baseline-subtracted value exceeds
    activity_fraction of its maximum. A trigger held at one nonzero level for
    the whole record is active throughout; one held at zero never is.
    The phase is the longest interval where all triggers are active,
    after bridging gaps of at most max_gap samples; ties go to the earliest
    start.

    Returns:
        tuple: (t_start, t_end) with t_end exclusive
    """
    active = np.ones(run.n_samples, dtype=bool)
    for name in trigger_channels:
        if name not in run.param_names:
            raise UnknownChannel(f"trigger channel '{name}' not in {run.lot_id}/{run.wafer_index}")
        signal = run.params[:, run.channel_index(name)]
        if signal.max() == signal.min():
            active &= signal != 0
            continue
        signal = signal - signal.min()
        active &= signal > activity_fraction * signal.max()

    starts, ends = _active_segments(active)
    if starts.size == 0:
        raise NoActivePhase(f"{run.lot_id}/{run.wafer_index}: no sample passes the activity threshold")

    merged: List[List[int]] = [[int(starts[0]), int(ends[0])]]
    for s, e in zip(starts[1:], ends[1:]):
        if s - merged[-1][1] <= max_gap:
            merged[-1][1] = int(e)
        else:
            merged.append([int(s), int(e)])

    best = max(merged, key=lambda seg: (seg[1] - seg[0], -seg[0]))
    return best[0], best[1]


def _resample_rows(signal: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Piecewise-linear resampling of each column of signal onto fractional indices."""
    if signal.shape[1] == 0:
        return np.zeros((0, grid.size))
    axis = np.arange(signal.shape[0], dtype=float)
    return np.stack([np.interp(grid, axis, signal[:, j]) for j in range(signal.shape[1])])


def align_and_resample(run: WaferRun, selection: ChannelSelection, phase: Tuple[int, int],
                       n_t: int) -> np.ndarray:
    """
    Stack selected parameter rows then selected OES rows, each linearly
    interpolated onto n_t equispaced points spanning the phase window
    (first and last phase samples preserved exactly).
    """
    t_start, t_end = phase
    if t_end - t_start < 2:
        raise PhaseTooShort(f"{run.lot_id}/{run.wafer_index}: phase {phase} shorter than 2 samples")
    if n_t < 2:
        raise PhaseTooShort(f"n_t must be >= 2, got {n_t}")
    if tuple(run.param_names) != tuple(selection.param_names):
        raise InconsistentChannels(f"{run.lot_id}/{run.wafer_index}: parameter channels differ from selection")
    if not np.array_equal(run.wavelengths_nm, selection.wavelengths_nm):
        raise GridMismatch(f"{run.lot_id}/{run.wafer_index}: wavelength grid differs from selection")

    grid = np.linspace(t_start, t_end - 1, n_t)
    # Exact endpoints, free of linspace round-off
    grid[0], grid[-1] = t_start, t_end - 1

    params = _resample_rows(run.params[:, selection.kept_param_indices], grid)

    t_pp, t_oes = run.params.shape[0], run.oes.shape[0]
    if run.oes_sample_period_s is not None:
        # Both clocks start at t = 0; phase samples map through physical time
        oes_grid = grid * (run.sample_period_s / run.oes_sample_period_s)
        if oes_grid[-1] > t_oes - 1:
            logger.warning(f"⚠ {run.lot_id}/{run.wafer_index}: phase ends at "
                           f"{(t_end - 1) * run.sample_period_s:.3f} s, after the last OES sample; "
                           f"OES held at its final value")
    elif t_oes == t_pp:
        oes_grid = grid
    else:
        # No OES clock: both records span the same process duration
        oes_grid = grid * (t_oes - 1) / (t_pp - 1)
    oes = _resample_rows(run.oes[:, selection.kept_wavelength_indices], oes_grid)
    return np.vstack([params, oes])


# ---------------------------------------------------------------------------
# Normalization

def top_autocorrelation_lags(z: np.ndarray, n_lags: int = N_LAGS) -> np.ndarray:
    """
    Top lags (1..N/2) by absolute linear autocorrelation of each row of z,
    computed through a zero-padded FFT. Ties go to the smaller lag; rows too
    short for n_lags candidates are padded with zeros.
    """
    n = z.shape[-1]
    spectrum = np.fft.rfft(z, n=2 * n, axis=-1)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n=2 * n, axis=-1)[..., :n]
    max_lag = n // 2
    lags = np.zeros((z.shape[0], n_lags))
    if max_lag < 1:
        return lags
    for row in range(z.shape[0]):
        zero_lag = acov[row, 0]
        acf = acov[row, 1:max_lag + 1] / zero_lag if zero_lag > 0 else np.zeros(max_lag)
        order = np.argsort(-np.abs(np.round(acf, 12)), kind='stable')[:n_lags]
        lags[row, :order.size] = order + 1
    return lags


def normalize_instance(raw: np.ndarray, std_floor: float = 1e-8) -> ConditionedInput:
    """
    Per-channel instance normalization over the whole phase window. The
    statistics are kept for the prompt prefix; nothing downstream inverts them.
    """
    raw = np.asarray(raw, dtype=float)
    mean = raw.mean(axis=1)
    constant = raw.max(axis=1) == raw.min(axis=1)
    mean[constant] = raw[constant, 0]
    std = np.maximum(raw.std(axis=1), std_floor)
    z = (raw - mean[:, None]) / std[:, None]

    t = np.arange(raw.shape[1], dtype=float)
    tc = t - t.mean()
    slope = (raw - mean[:, None]) @ tc / np.dot(tc, tc)
    trend = np.sign(np.where(np.abs(slope) * raw.shape[1] > std_floor, slope, 0.0))

    stats = NormStats(
        mean=mean, std=std, min=raw.min(axis=1), max=raw.max(axis=1),
        median=np.median(raw, axis=1), trend=trend,
        lags=top_autocorrelation_lags(z), n_t=raw.shape[1],
    )
    return ConditionedInput(matrix=z, stats=stats)


# ---------------------------------------------------------------------------
# Per-wafer driver

def condition_run(run: WaferRun, selection: ChannelSelection,
                  config: ConditioningConfig) -> ConditionedInput:
    phase = detect_active_phase(run, config.trigger_channels,
                                config.activity_fraction, config.max_gap)
    raw = align_and_resample(run, selection, phase, config.n_t)
    conditioned = normalize_instance(raw, config.std_floor)
    conditioned.phase = phase
    conditioned.source = run.key
    return conditioned


@dataclass
class ConditioningResult:
    selection: ChannelSelection
    inputs: List[ConditionedInput]
    runs: List[WaferRun]
    exclusions: List[ExclusionRecord]

    @property
    def phases(self) -> Dict[str, Tuple[int, int]]:
        return {f"{c.source[0]}/{c.source[1]}": c.phase for c in self.inputs}


def condition_runs(runs: Sequence[WaferRun], selection: ChannelSelection,
                   config: ConditioningConfig, jobs: int = 1) -> ConditioningResult:
    """
    Condition every run with a fitted selection. Runs whose phase cannot be
    found are excluded; results keep the input order.
    """
    def _one(run):
        try:
            return condition_run(run, selection, config), None
        except EtchProfilerError as e:
            return None, ExclusionRecord(run.lot_id, str(run.wafer_index), type(e).__name__, str(e))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one, runs))
    else:
        results = [_one(run) for run in runs]

    inputs, kept_runs, exclusions = [], [], []
    for run, (conditioned, exclusion) in zip(runs, results):
        if exclusion is not None:
            logger.warning(f"⚠ Excluded {exclusion.lot_id}/{exclusion.wafer}: {exclusion.reason}")
            exclusions.append(exclusion)
        else:
            inputs.append(conditioned)
            kept_runs.append(run)
    return ConditioningResult(selection=selection, inputs=inputs, runs=kept_runs,
                              exclusions=exclusions)


def write_conditioning_report(result: ConditioningResult, path: str,
                              extra_exclusions: Sequence[ExclusionRecord] = ()):
    report = {
        'selection': result.selection.as_dict(),
        'channels': result.selection.channel_labels,
        'phases': {key: list(map(int, phase)) for key, phase in result.phases.items()},
        'exclusions': [e.as_dict() for e in list(extra_exclusions) + result.exclusions],
    }
    write_json(path, report)
