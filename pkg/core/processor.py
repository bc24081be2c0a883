"""
Main processing orchestration for pipeline commands
"""

import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .conditioning import ConditioningResult, condition_runs, fit_channel_selection, write_conditioning_report
from .config import Config
from .errors import EmptyTrainSet, EtchProfilerError
from .evaluation import (
    CvReport, CvResult, METRIC_NAMES, cv_report_payload, format_cv_table, run_baseline_cv, run_cv,
    write_predictions,
)
from .model import PROMPT_TEMPLATE, ReprogrammedRegressor, init_model, save_checkpoint
from .synthgen import generate_dataset, generate_runs
from .training import GradCheckReport, TrainingHistory, fit, grad_check
from .utils import describe_version, directory_checksum, ensure_dir, read_json, utc_now, write_json
from .wafer_data import Dataset, load_dataset

MANIFEST_FILE = 'run_manifest.json'


@dataclass
class RunManifest:
    """Provenance record written once per artifact-producing command."""

    command: str
    config: dict
    seed: int
    version: str
    started_at: str
    finished_at: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            'command': self.command,
            'config': self.config,
            'seed': self.seed,
            'version': self.version,
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'outputs': self.outputs,
            **self.extra,
        }

    def write(self, out_dir: str) -> str:
        self.finished_at = utc_now()
        return write_json(os.path.join(out_dir, MANIFEST_FILE), self.as_dict())


class PipelineProcessor:
    """Runs pipeline commands against one Config and records their artifacts."""

    def __init__(self, config: Config):
        self.config = config

        # Statistics
        self.loaded_count = 0
        self.excluded_count = 0
        self.folds_completed = 0
        self.outputs: Dict[str, str] = {}

        # Progress callback (optional, for front-end integration)
        self.progress_callback: Optional[Callable] = None

    def set_progress_callback(self, callback: Callable):
        """Set a callback function for progress updates."""
        self.progress_callback = callback

    def _notify_progress(self, event: str, **kwargs):
        """Notify progress via callback if set."""
        if self.progress_callback:
            self.progress_callback(event, **kwargs)

    def _banner(self, title: str):
        print("\n" + "=" * 60)
        print(title)
        print("=" * 60)

    def _start(self, command: str, **extra) -> RunManifest:
        self.outputs = {}
        self._notify_progress('started', command=command)
        return RunManifest(
            command=command,
            config=self.config.snapshot(),
            seed=self.config.seed,
            version=describe_version(),
            started_at=utc_now(),
            extra=extra,
        )

    def _finish(self, manifest: RunManifest, out_dir: str):
        manifest.outputs = dict(self.outputs)
        manifest.write(out_dir)
        self._notify_progress('finished', command=manifest.command, outputs=manifest.outputs)

    def _output(self, name: str, path: str) -> str:
        self.outputs[name] = path
        return path

    def _load(self, data_root: str) -> Dataset:
        ds = load_dataset(data_root, jobs=self.config.jobs)
        self.loaded_count = len(ds)
        self.excluded_count = len(ds.exclusions)
        print(f"✓ Loaded {len(ds)} wafers from {len(ds.lot_ids)} lots ({self.excluded_count} excluded)")
        return ds

    # -- commands ------------------------------------------------------------

    def generate(self, out_dir: str) -> Dataset:
        """Write a synthetic dataset and its ground-truth manifest."""
        self.config.require_valid()
        manifest = self._start('gen')
        self._banner("Generating synthetic dataset...")
        synth = self.config.synth
        ds = generate_dataset(synth, out_dir, jobs=self.config.jobs)
        self._output('dataset', out_dir)
        self._output('ground_truth', os.path.join(out_dir, 'manifest.json'))
        manifest.extra['dataset_checksum'] = directory_checksum(out_dir, exclude=(MANIFEST_FILE,))
        self._finish(manifest, out_dir)

        print(f"✓ {synth.n_lots} lots x {synth.wafers_per_lot} wafers written to {out_dir}")
        print(f"  Checksum: {manifest.extra['dataset_checksum']}")
        return ds

    def condition(self, data_root: str, out_dir: str) -> ConditioningResult:
        """Fit channel selection on every loaded wafer and condition them all."""
        self.config.require_valid()
        manifest = self._start('condition', data_root=data_root)
        ds = self._load(data_root)

        self._banner("Conditioning...")
        cond = self.config.conditioning
        selection = fit_channel_selection(ds.runs, cond.selection)
        result = condition_runs(ds.runs, selection, cond, jobs=self.config.jobs)
        self.excluded_count += len(result.exclusions)

        ensure_dir(out_dir)
        write_conditioning_report(result, self._output('conditioning_report',
                                                       os.path.join(out_dir, 'conditioning_report.json')),
                                  extra_exclusions=ds.exclusions)
        self._finish(manifest, out_dir)

        print(f"✓ Channels kept: {selection.n_pp} process parameters, {selection.n_oes} OES wavelengths")
        print(f"  {', '.join(selection.channel_labels)}")
        self._print_summary(len(result.inputs))
        return result

    def train(self, data_root: str, out_dir: str) -> Tuple[ReprogrammedRegressor, TrainingHistory]:
        """Fit on every lot; writes a checkpoint, history.csv and the conditioning report."""
        self.config.require_valid()
        manifest = self._start('train', data_root=data_root)
        ds = self._load(data_root)
        cond = self.config.conditioning

        selection = fit_channel_selection(ds.runs, cond.selection)
        result = condition_runs(ds.runs, selection, cond, jobs=self.config.jobs)
        if not result.inputs:
            raise EmptyTrainSet("every wafer was excluded during conditioning")
        self.excluded_count += len(result.exclusions)

        self._banner(f"Training on {len(result.inputs)} wafers, {selection.n_c} channels...")
        samples = list(zip(result.inputs, [r.profile for r in result.runs]))
        model, history = fit(samples, self.config.train, self.config.model,
                             progress_callback=self._epoch_progress)

        ensure_dir(out_dir)
        save_checkpoint(model, self._output('checkpoint', os.path.join(out_dir, 'model.pt')))
        history.write_csv(self._output('history', os.path.join(out_dir, 'history.csv')))
        write_conditioning_report(result, self._output('conditioning_report',
                                                       os.path.join(out_dir, 'conditioning_report.json')),
                                  extra_exclusions=ds.exclusions)
        manifest.extra['prompt'] = PROMPT_TEMPLATE.format(n_c=selection.n_c, n_t=cond.n_t)
        manifest.extra['history_checksum'] = history.checksum()
        self._finish(manifest, out_dir)

        totals = history.totals('train')
        if totals:
            print(f"✓ Training loss {totals[0]:.4f} -> {totals[-1]:.4f} over {len(totals)} epochs")
        self._print_summary(len(result.inputs))
        return model, history

    def _epoch_progress(self, event: str, **kwargs):
        epoch, total = kwargs.get('epoch'), kwargs.get('total')
        if epoch == 1 or epoch == total or (total and epoch % max(1, total // 10) == 0):
            print(f"  [{epoch}/{total}] loss {kwargs.get('loss', float('nan')):.4f}")
        self._notify_progress(event, **kwargs)

    def cross_validate(self, data_root: str, out_dir: str) -> CvResult:
        """Lot-wise k-fold CV of the model and the Global Mean Baseline."""
        self.config.require_valid()
        manifest = self._start('cv', data_root=data_root)
        ds = self._load(data_root)
        cv = replace(self.config.cv, jobs=max(self.config.cv.jobs, self.config.jobs))

        self._banner(f"Lot-wise {cv.k}-fold cross-validation...")
        self.folds_completed = 0

        def _fold_done(event, **kwargs):
            self.folds_completed += 1
            m = kwargs['metrics']
            if m is None:
                print(f"  ⚠ [{kwargs['current']}/{kwargs['total']}] no test wafers left to score")
            else:
                print(f"  [{kwargs['current']}/{kwargs['total']}] shape MSE {m.shape_mse:.3f}  "
                      f"mean MSE {m.mean_mse:.3f}  MAE {m.etch_mae:.3f}")
            self._notify_progress(event, **kwargs)

        result = run_cv(ds, cv, self.config.model, self.config.train, self.config.conditioning,
                        seed=self.config.seed, progress_callback=_fold_done)

        ensure_dir(out_dir)
        payload = cv_report_payload(result)
        payload.update({'config': self.config.snapshot(), 'seed': self.config.seed,
                        'version': manifest.version, 'dataset': data_root})
        write_json(self._output('cv_report', os.path.join(out_dir, 'cv_report.json')), payload)

        frames = []
        for fold in result.folds:
            frame = fold.history.to_frame()
            frame.insert(0, 'fold', fold.split.fold_index)
            frames.append(frame)
        if frames:
            pd.concat(frames, ignore_index=True).to_csv(
                self._output('history', os.path.join(out_dir, 'history.csv')),
                index=False, lineterminator='\n')
        if cv.write_predictions:
            written = write_predictions(result, self._output('predictions', os.path.join(out_dir, 'predictions')))
            print(f"✓ Wrote {written} prediction files")

        manifest.extra['lambda_per_fold'] = [f.lam for f in result.folds]
        self._finish(manifest, out_dir)

        self._banner("CROSS-VALIDATION RESULTS (mean ± std across folds)")
        print(format_cv_table([result.model, result.baseline]))
        self._print_summary(sum(len(f.test_runs) for f in result.folds))
        return result

    def baseline(self, data_root: str, out_dir: str) -> CvReport:
        """Global Mean Baseline alone over the lot-wise folds."""
        self.config.require_valid()
        manifest = self._start('baseline', data_root=data_root)
        ds = self._load(data_root)

        report = run_baseline_cv(ds, self.config.cv.k, seed=self.config.seed)
        ensure_dir(out_dir)
        write_json(self._output('baseline_report', os.path.join(out_dir, 'baseline_report.json')),
                   {'baseline': report.as_dict(), 'seed': self.config.seed, 'version': manifest.version})
        self._finish(manifest, out_dir)

        self._banner("GLOBAL MEAN BASELINE (mean ± std across folds)")
        print(format_cv_table([report]))
        return report

    def gradcheck(self, n_coords: int = 200, h: float = 1e-5, tol: float = 1e-4,
                  corrupt_gradient: bool = False, out_dir: Optional[str] = None) -> GradCheckReport:
        """
        Finite-difference check of a fresh seeded model on one synthetic wafer.
        corrupt_gradient perturbs the analytic gradients so the check must fail.
        """
        self.config.require_valid()
        manifest = self._start('gradcheck', n_coords=n_coords, h=h, tol=tol)
        self._banner("Gradient check (central differences, float64)...")

        synth = replace(self.config.synth, n_lots=1, wafers_per_lot=1)
        runs, _ = generate_runs(synth)
        cond = self.config.conditioning
        selection = fit_channel_selection(runs, cond.selection)
        result = condition_runs(runs, selection, cond)
        if not result.inputs:
            raise EmptyTrainSet("the synthetic gradient-check wafer was excluded during conditioning")

        inputs, targets = result.inputs, [r.profile for r in result.runs]
        mean_prior = float(np.mean(targets[0].depth))
        model = init_model(self.config.model, selection.n_c, cond.n_t, mean_prior=mean_prior)

        hook = _corrupting_hook if corrupt_gradient else None
        report = grad_check(model, inputs, targets, self.config.train.lam, h=h, n_coords=n_coords,
                            seed=self.config.seed, grad_hook=hook)

        for tensor in report.tensors:
            mark = '✓' if tensor.max_rel_error <= tol else '✗'
            print(f"  {mark} {tensor.name:<40} {len(tensor.coords):>5} coords  "
                  f"max rel error {tensor.max_rel_error:.2e}")
        passed = report.passed(tol)
        print(f"\n{'✓ PASSED' if passed else '✗ FAILED'}: max relative error "
              f"{report.max_rel_error:.2e} (tolerance {tol:.0e})")

        if out_dir:
            write_json(self._output('gradcheck_report', os.path.join(out_dir, 'gradcheck_report.json')),
                       {**report.as_dict(), 'tolerance': tol, 'passed': passed})
            manifest.extra['passed'] = passed
            self._finish(manifest, out_dir)
        return report

    def report(self, report_path: str, tol: float = 1e-12) -> Tuple[List[CvReport], bool]:
        """Re-print a cv_report.json table and check that its aggregates recompute."""
        try:
            payload = read_json(report_path)
        except (OSError, ValueError) as e:
            raise EtchProfilerError(f"cannot read report {report_path}: {e}")

        reports, consistent = [], True
        for key in ('model', 'baseline'):
            if key not in payload:
                continue
            report = CvReport.from_dict(payload[key])
            stored = payload[key].get('aggregate', {})
            for name in METRIC_NAMES:
                for stat in ('mean', 'std'):
                    recorded = stored.get(name, {}).get(stat)
                    recomputed = report.aggregate[name][stat]
                    if recorded is None or abs(recorded - recomputed) > tol * max(1.0, abs(recomputed)):
                        consistent = False
                        print(f"✗ {report.name}: {name} {stat} recorded {recorded} != recomputed {recomputed}")
            reports.append(report)

        if not reports:
            raise EtchProfilerError(f"{report_path} holds no model or baseline report")
        self._banner(f"{os.path.basename(report_path)} (mean ± std across folds)")
        print(format_cv_table(reports))
        print(f"\n{'✓' if consistent else '✗'} Aggregates "
              f"{'match' if consistent else 'do not match'} the per-fold metrics")
        return reports, consistent

    def _print_summary(self, n_used: int):
        """Print processing summary."""
        self._banner("PROCESS COMPLETE")
        print(f"Wafers loaded: {self.loaded_count}")
        print(f"  ✓ Used: {n_used}")
        print(f"  ✗ Excluded: {self.excluded_count}")
        for name, path in self.outputs.items():
            print(f"  {name}: {path}")
        print("=" * 60)


def _corrupting_hook(name: str, grad):
    return grad * 1.01 + 1e-3
