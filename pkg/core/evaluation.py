"""
Evaluation metrics, the Global Mean Baseline and the lot-wise
cross-validation driver
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .conditioning import ConditioningConfig, condition_runs, fit_channel_selection
from .errors import EmptyTrainSet, LengthMismatch
from .logger import get_logger
from .model import ModelConfig, Prediction, predict
from .training import TrainConfig, TrainingHistory, decompose_target, fit
from .utils import ensure_dir, format_mean_std
from .wafer_data import (
    N_POINTS, Dataset, ExclusionRecord, FoldSplit, SpatialProfile, WaferRun, runs_for_lots,
    split_lotwise_kfold,
)

logger = get_logger('evaluation')

METRIC_NAMES = ('shape_mse', 'mean_mse', 'etch_mae')
METRIC_LABELS = {'shape_mse': 'MSE (shape)', 'mean_mse': 'MSE (mean)', 'etch_mae': 'MAE (etch)'}


@dataclass
class CvConfig:
    k: int = 9
    jobs: int = 1
    lambda_grid: List[float] = field(default_factory=list)
    write_predictions: bool = True

    def validate(self):
        if self.k < 2:
            return False, "cv.k must be >= 2"
        if self.jobs < 1:
            return False, "cv.jobs must be >= 1"
        if any(lam < 0 for lam in self.lambda_grid):
            return False, "cv.lambda_grid values must be >= 0"
        return True, None


@dataclass
class MetricSet:
    """
    shape_mse: mean over wafers of the per-point mean squared shape error (um^2)
    mean_mse: mean over wafers of the squared mean error (um^2)
    etch_mae: mean absolute depth error over all points and wafers (um)
    """

    shape_mse: float
    mean_mse: float
    etch_mae: float

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def metrics(preds: Sequence[Prediction], targets: Sequence[SpatialProfile]) -> MetricSet:
    if len(preds) != len(targets):
        raise LengthMismatch(f"{len(preds)} predictions for {len(targets)} targets")
    if not targets:
        raise LengthMismatch("no wafers to score")

    shape_hat = np.stack([np.asarray(p.shape, dtype=float) for p in preds])
    mean_hat = np.array([p.mean for p in preds], dtype=float)
    if shape_hat.shape[1] != N_POINTS:
        raise LengthMismatch(f"predictions have {shape_hat.shape[1]} points, expected {N_POINTS}")

    parts = [decompose_target(t) for t in targets]
    s = np.stack([p[0] for p in parts])
    m = np.array([p[1] for p in parts])
    depth = np.stack([t.depth for t in targets])
    depth_hat = shape_hat + mean_hat[:, None]

    return MetricSet(
        shape_mse=float(np.mean(np.mean((shape_hat - s) ** 2, axis=1))),
        mean_mse=float(np.mean((mean_hat - m) ** 2)),
        etch_mae=float(np.mean(np.abs(depth_hat - depth))),
    )


class GlobalMeanBaseline:
    """Predicts a flat profile at the training-set grand-mean depth for every wafer."""

    def __init__(self, grand_mean: float):
        self.grand_mean = float(grand_mean)

    def predict_one(self) -> Prediction:
        shape = np.zeros(N_POINTS)
        return Prediction(shape=shape, mean=self.grand_mean, depth=shape + self.grand_mean)

    def predict(self, n: int) -> List[Prediction]:
        return [self.predict_one() for _ in range(n)]


def global_mean_baseline(train_targets: Sequence[SpatialProfile]) -> GlobalMeanBaseline:
    if not train_targets:
        raise EmptyTrainSet("global mean baseline needs at least one training profile")
    return GlobalMeanBaseline(float(np.mean(np.stack([t.depth for t in train_targets]))))


# ---------------------------------------------------------------------------
# Reports

@dataclass
class CvReport:
    name: str
    per_fold: List[MetricSet]

    @property
    def aggregate(self) -> Dict[str, Dict[str, float]]:
        """Per-metric mean and population std over folds."""
        frame = pd.DataFrame([m.as_dict() for m in self.per_fold], columns=list(METRIC_NAMES))
        return {name: {'mean': float(frame[name].mean()), 'std': float(frame[name].std(ddof=0))}
                for name in METRIC_NAMES}

    def as_dict(self) -> dict:
        return {'name': self.name,
                'per_fold': [m.as_dict() for m in self.per_fold],
                'aggregate': self.aggregate}

    @classmethod
    def from_dict(cls, payload: dict) -> 'CvReport':
        return cls(name=payload['name'],
                   per_fold=[MetricSet(**{k: float(v) for k, v in m.items()}) for m in payload['per_fold']])


def format_cv_table(reports: Sequence[CvReport], digits: int = 2) -> str:
    """Rows in the '(mean ± std)' style, one per report."""
    width = max([len(r.name) for r in reports] + [10])
    header = f"{'':<{width}}  " + "  ".join(f"{METRIC_LABELS[n]:>16}" for n in METRIC_NAMES)
    lines = [header, '-' * len(header)]
    for report in reports:
        agg = report.aggregate
        cells = "  ".join(f"{format_mean_std(agg[n]['mean'], agg[n]['std'], digits):>16}"
                          for n in METRIC_NAMES)
        lines.append(f"{report.name:<{width}}  {cells}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Cross-validation

@dataclass
class FoldResult:
    split: FoldSplit
    model_metrics: Optional[MetricSet]
    baseline_metrics: Optional[MetricSet]
    lam: float
    n_channels: int
    history: TrainingHistory
    test_runs: List[WaferRun]
    predictions: List[Prediction]
    exclusions: List[ExclusionRecord]
    lambda_scores: Dict[float, float] = field(default_factory=dict)

    @property
    def scored(self) -> bool:
        return self.model_metrics is not None

    def as_dict(self) -> dict:
        return {
            'fold_index': self.split.fold_index,
            'train_lots': sorted(self.split.train_lot_ids),
            'test_lots': sorted(self.split.test_lot_ids),
            'n_test_wafers': len(self.test_runs),
            'n_channels': self.n_channels,
            'lambda': self.lam,
            'lambda_scores': {str(k): v for k, v in self.lambda_scores.items()},
            'final_train_loss': self.history.totals('train')[-1] if self.history.records else None,
            'model': self.model_metrics.as_dict() if self.scored else None,
            'baseline': self.baseline_metrics.as_dict() if self.scored else None,
            'exclusions': [e.as_dict() for e in self.exclusions],
        }


@dataclass
class CvResult:
    model: CvReport
    baseline: CvReport
    folds: List[FoldResult]


def _train_and_predict(train_runs: Sequence[WaferRun], test_runs: Sequence[WaferRun],
                       cond_config: ConditioningConfig, model_config: ModelConfig,
                       train_config: TrainConfig):
    """Fit selection on train runs only, condition both sides, train and predict."""
    selection = fit_channel_selection(train_runs, cond_config.selection)
    train_cond = condition_runs(train_runs, selection, cond_config)
    test_cond = condition_runs(test_runs, selection, cond_config)
    if not train_cond.inputs:
        raise EmptyTrainSet("every training wafer was excluded during conditioning")
    samples = list(zip(train_cond.inputs, [r.profile for r in train_cond.runs]))
    model, history = fit(samples, train_config, model_config)
    preds = predict(model, test_cond.inputs) if test_cond.inputs else []
    return selection, train_cond, test_cond, history, preds


def _select_lambda(train_runs: Sequence[WaferRun], grid: Sequence[float], fold_index: int,
                   seed: int, cond_config: ConditioningConfig, model_config: ModelConfig,
                   train_config: TrainConfig) -> Tuple[float, Dict[float, float]]:
    """Hold out one training lot and keep the lambda with the lowest validation etch MAE."""
    lots = sorted({r.lot_id for r in train_runs})
    if len(lots) < 2:
        logger.warning("⚠ lambda sweep needs two training lots; using the configured lambda")
        return train_config.lam, {}
    rng = np.random.default_rng([seed, fold_index])
    val_lot = lots[int(rng.integers(len(lots)))]
    inner = [r for r in train_runs if r.lot_id != val_lot]
    val = [r for r in train_runs if r.lot_id == val_lot]

    scores: Dict[float, float] = {}
    for lam in sorted(grid):
        _, _, val_cond, _, preds = _train_and_predict(inner, val, cond_config, model_config,
                                                      replace(train_config, lam=lam))
        if not preds:
            continue
        scores[lam] = metrics(preds, [r.profile for r in val_cond.runs]).etch_mae
    if not scores:
        return train_config.lam, {}
    best = min(scores, key=lambda lam: (scores[lam], lam))
    logger.info(f"  fold {fold_index}: lambda {best} selected on validation lot {val_lot}")
    return best, scores


def run_fold(ds: Dataset, split: FoldSplit, cond_config: ConditioningConfig,
             model_config: ModelConfig, train_config: TrainConfig,
             lambda_grid: Sequence[float] = (), seed: int = 0) -> FoldResult:
    train_runs = runs_for_lots(ds, split.train_lot_ids)
    test_runs = runs_for_lots(ds, split.test_lot_ids)

    lam, lambda_scores = train_config.lam, {}
    if lambda_grid:
        lam, lambda_scores = _select_lambda(train_runs, lambda_grid, split.fold_index, seed,
                                            cond_config, model_config, train_config)

    selection, train_cond, test_cond, history, preds = _train_and_predict(
        train_runs, test_runs, cond_config, model_config, replace(train_config, lam=lam)
    )
    targets = [r.profile for r in test_cond.runs]
    baseline = global_mean_baseline([r.profile for r in train_cond.runs])

    if not targets:
        logger.warning(f"⚠ Fold {split.fold_index}: every test wafer was excluded; "
                       f"fold left out of the aggregates")

    result = FoldResult(
        split=split,
        model_metrics=metrics(preds, targets) if targets else None,
        baseline_metrics=metrics(baseline.predict(len(targets)), targets) if targets else None,
        lam=lam,
        n_channels=selection.n_c,
        history=history,
        test_runs=list(test_cond.runs),
        predictions=preds,
        exclusions=train_cond.exclusions + test_cond.exclusions,
        lambda_scores=lambda_scores,
    )
    if result.scored:
        logger.info(f"✓ Fold {split.fold_index}: test lots {sorted(split.test_lot_ids)} "
                    f"shape MSE {result.model_metrics.shape_mse:.3f} "
                    f"(baseline {result.baseline_metrics.shape_mse:.3f})")
    return result


def run_cv(ds: Dataset, cv_config: CvConfig, model_config: ModelConfig,
           train_config: TrainConfig, cond_config: ConditioningConfig, seed: int = 0,
           progress_callback: Optional[Callable] = None) -> CvResult:
    """
    Lot-wise k-fold cross-validation of the model and the Global Mean
    Baseline. Conditioning is refit on the training lots of every fold.
    Folds may run concurrently; results are merged in fold order.
    """
    splits = split_lotwise_kfold(ds, cv_config.k, seed)

    def _one(split: FoldSplit) -> FoldResult:
        result = run_fold(ds, split, cond_config, model_config, train_config,
                          cv_config.lambda_grid, seed)
        if progress_callback:
            progress_callback('fold', current=split.fold_index + 1, total=len(splits),
                              metrics=result.model_metrics)
        return result

    if cv_config.jobs > 1:
        with ThreadPoolExecutor(max_workers=cv_config.jobs) as pool:
            folds = list(pool.map(_one, splits))
    else:
        folds = [_one(split) for split in splits]

    scored = [f for f in folds if f.scored]
    if not scored:
        raise LengthMismatch("no fold had a test wafer left to score")
    return CvResult(
        model=CvReport('Reprogrammed model', [f.model_metrics for f in scored]),
        baseline=CvReport('Global Mean Baseline', [f.baseline_metrics for f in scored]),
        folds=folds,
    )


def run_baseline_cv(ds: Dataset, k: int, seed: int = 0) -> CvReport:
    """Global Mean Baseline alone over the same lot-wise folds, on every loaded wafer."""
    per_fold = []
    for split in split_lotwise_kfold(ds, k, seed):
        train = [r.profile for r in runs_for_lots(ds, split.train_lot_ids)]
        test = [r.profile for r in runs_for_lots(ds, split.test_lot_ids)]
        per_fold.append(metrics(global_mean_baseline(train).predict(len(test)), test))
    return CvReport('Global Mean Baseline', per_fold)


def write_predictions(result: CvResult, out_dir: str) -> int:
    """Write predictions/<lot>/<wafer>.csv (x, y, true and predicted depth) per test wafer."""
    count = 0
    for fold in result.folds:
        for run, pred in zip(fold.test_runs, fold.predictions):
            lot_dir = ensure_dir(os.path.join(out_dir, run.lot_id))
            pd.DataFrame({
                'x_mm': run.profile.x, 'y_mm': run.profile.y,
                'depth_true': run.profile.depth, 'depth_pred': pred.depth,
            }).to_csv(os.path.join(lot_dir, f"{run.wafer_index}.csv"), index=False, lineterminator='\n')
            count += 1
    return count


def cv_report_payload(result: CvResult) -> dict:
    return {
        'folds': [f.as_dict() for f in result.folds],
        'model': result.model.as_dict(),
        'baseline': result.baseline.as_dict(),
    }
