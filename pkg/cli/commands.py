"""
Command-line front-end for the pipeline
"""

import argparse
import os
import sys
import traceback
from typing import Callable, Dict, List, Optional

from core.config import Config
from core.errors import EtchProfilerError
from core.logger import PipelineLogger, get_logger
from core.processor import PipelineProcessor

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

logger = get_logger('cli')


class EtchProfilerCli:
    """Batch front-end: one registered handler per subcommand."""

    def __init__(self, config: Optional[Config] = None):
        self.config = config
        self.processor: Optional[PipelineProcessor] = None
        self.handlers: Dict[str, Callable[[argparse.Namespace], int]] = {}
        self.parser = argparse.ArgumentParser(
            prog='etch_profiler',
            description='Etch depth profile prediction from in-situ process signals',
        )
        self.subparsers = self.parser.add_subparsers(dest='command', metavar='COMMAND')
        self.subparsers.required = True

        # Register handlers
        self._register_handlers()

    def command(self, name: str, help_text: str, default_section: Optional[str] = None,
                data_root: bool = False):
        """Decorator registering a handler and its subparser with the common flags."""
        sub = self.subparsers.add_parser(name, help=help_text, description=help_text)
        if data_root:
            sub.add_argument('data_root', help='dataset root (<root>/<lot>/<wafer>/)')
        sub.add_argument('--config', help='JSON config file')
        sub.add_argument('--seed', type=int, help='seed for generation, init, shuffling and folds')
        sub.add_argument('--out', help='output directory')
        sub.add_argument('--jobs', type=int, help='worker threads (merge order stays deterministic)')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.FIELD=VALUE',
                         help='override one config field; may be repeated')
        sub.add_argument('--verbose', action='store_true', help='show per-epoch losses')
        sub.add_argument('--log-file', help='also log to this file')
        sub.set_defaults(default_section=default_section)

        def register(handler):
            self.handlers[name] = handler
            handler.parser = sub
            return handler
        return register

    def _register_handlers(self):
        """Register subcommand handlers."""

        @self.command('gen', 'Generate a synthetic dataset', default_section='synth')
        def gen_command(args) -> int:
            out = args.out or os.path.join(self.config.output_dir, 'data')
            self.processor.generate(out)
            return EXIT_OK

        @self.command('condition', 'Select channels and condition every wafer', data_root=True)
        def condition_command(args) -> int:
            self.processor.condition(args.data_root, self._out(args, 'condition'))
            return EXIT_OK

        @self.command('train', 'Train on every lot and write a checkpoint', data_root=True)
        def train_command(args) -> int:
            self.processor.train(args.data_root, self._out(args, 'train'))
            return EXIT_OK

        train_command.parser.add_argument('--lambda', dest='lam', type=float, help='mean-loss weight')
        train_command.parser.add_argument('--epochs', type=int, help='training epochs')

        @self.command('cv', 'Lot-wise k-fold cross-validation of model and baseline', data_root=True)
        def cv_command(args) -> int:
            self.processor.cross_validate(args.data_root, self._out(args, 'cv'))
            return EXIT_OK

        cv_command.parser.add_argument('--k', type=int, help='number of lot-wise folds')
        cv_command.parser.add_argument('--lambda', dest='lam', type=float, help='mean-loss weight')
        cv_command.parser.add_argument('--lambda-grid', type=float, nargs='+',
                                       help='select lambda per fold on a held-out training lot')
        cv_command.parser.add_argument('--epochs', type=int, help='training epochs')
        cv_command.parser.add_argument('--no-predictions', action='store_true',
                                       help='skip predictions/<lot>/<wafer>.csv')

        @self.command('baseline', 'Global Mean Baseline over the lot-wise folds', data_root=True)
        def baseline_command(args) -> int:
            self.processor.baseline(args.data_root, self._out(args, 'baseline'))
            return EXIT_OK

        baseline_command.parser.add_argument('--k', type=int, help='number of lot-wise folds')

        @self.command('gradcheck', 'Finite-difference gradient check of a fresh model')
        def gradcheck_command(args) -> int:
            report = self.processor.gradcheck(n_coords=args.coords, h=args.h, tol=args.tol,
                                              corrupt_gradient=args.corrupt_gradient,
                                              out_dir=args.out)
            return EXIT_OK if report.passed(args.tol) else EXIT_FAILED

        gradcheck_command.parser.add_argument('--coords', type=int, default=200,
                                              help='coordinates sampled per trainable tensor')
        gradcheck_command.parser.add_argument('--h', type=float, default=1e-5, help='central-difference step')
        gradcheck_command.parser.add_argument('--tol', type=float, default=1e-4,
                                              help='maximum relative error')
        gradcheck_command.parser.add_argument('--lambda', dest='lam', type=float, help='mean-loss weight')
        gradcheck_command.parser.add_argument('--corrupt-gradient', action='store_true',
                                              help=argparse.SUPPRESS)

        @self.command('report', 'Re-print a cv_report.json table and verify its aggregates')
        def report_command(args) -> int:
            _, consistent = self.processor.report(args.report)
            return EXIT_OK if consistent else EXIT_FAILED

        report_command.parser.add_argument('report', help='path to cv_report.json')

    def _out(self, args, command: str) -> str:
        return args.out or os.path.join(self.config.output_dir, command)

    def _configure(self, args):
        """Defaults <- environment <- config file <- --set overrides <- explicit flags."""
        self.config = self.config or Config()
        if args.config:
            self.config.load_from_file(args.config, default_section=args.default_section)
        self.config.apply_overrides(args.overrides)

        flags = {}
        if args.seed is not None:
            flags['seed'] = args.seed
        if args.jobs is not None:
            flags['jobs'] = args.jobs
        train = {k: v for k, v in (('lambda', getattr(args, 'lam', None)),
                                   ('epochs', getattr(args, 'epochs', None))) if v is not None}
        if train:
            flags['train'] = train
        cv = {}
        if getattr(args, 'k', None) is not None:
            cv['k'] = args.k
        if getattr(args, 'lambda_grid', None):
            cv['lambda_grid'] = args.lambda_grid
        if getattr(args, 'no_predictions', False):
            cv['write_predictions'] = False
        if cv:
            flags['cv'] = cv
        self.config.apply(flags)

        PipelineLogger(log_file=args.log_file or self.config.log_file,
                       enable_file_logging=self.config.log_to_file, verbose=args.verbose)
        self.processor = PipelineProcessor(self.config)
        self.processor.set_progress_callback(self._progress_callback)

    def _progress_callback(self, event: str, **kwargs):
        """Progress callback for processor updates."""
        details = {k: v for k, v in kwargs.items() if k not in ('metrics', 'outputs')}
        logger.debug(f"[{event}] {details}")

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Parse argv, run the command and return its exit code."""
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE

        try:
            self._configure(args)
            return self.handlers[args.command](args)
        except EtchProfilerError as e:
            field = getattr(e, 'field', None)
            print(f"\n✗ {type(e).__name__}: {e}" + (f" [{field}]" if field else ''), file=sys.stderr)
            return e.exit_code
        except KeyboardInterrupt:
            print("\n\n⚠ Interrupted by user", file=sys.stderr)
            return EXIT_FAILED
        except Exception as e:
            print(f"\n✗ Fatal error: {str(e)}", file=sys.stderr)
            traceback.print_exc()
            return EXIT_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    return EtchProfilerCli().run(argv)
