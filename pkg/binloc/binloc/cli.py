"""Command-line entry point: simulate, features, train, localize, evaluate, sweep, oracle-check, dataset pack"""

import argparse
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

from rich.console import Console
from rich.table import Table

from . import __version__
from .benchmark import (BenchmarkRunner, load_simulation, simulate, subset_training, sweep, train_model,
                        write_simulation)
from .config import MIXTURES, RunConfig, UsageError
from .dataset import load_test_set, pack
from .evaluation import TdoaRegressor
from .gllim import GllimModel, TrainingSet
from .posterior import localize, oracle_check
from .report import generate_html_report, timing_path, write_csv, write_json, write_meta
from .spectro import extract, noise_floor_epsilon, read_bnsp, stft, write_bnsp
from .utils.audio import read_stereo
from .utils.logger import set_level, setup_logger

logger = setup_logger(__name__)
console = Console()

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() owns the exit codes"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


# argument groups


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--seed', type=int, help='Root random seed (BINLOC_SEED overrides)')
    parser.add_argument('--threads', type=int, help='Worker threads (default: available CPUs)')
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')


def _add_stft(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('short-time Fourier transform')
    group.add_argument('--sample-rate', type=int, help='Sample rate in Hz (default 16000)')
    group.add_argument('--window-len', type=int, help='Hann window length in samples (default 1024)')
    group.add_argument('--hop', type=int, help='Frame hop in samples (default 128)')
    group.add_argument('--cue', choices=['ilpd', 'ild', 'ipd'], help='Binaural cues (default ilpd)')


def _add_acoustics(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('acoustic space')
    group.add_argument('--fov-az', type=float, help='Azimuth field of view in degrees (default 28)')
    group.add_argument('--fov-el', type=float, help='Elevation field of view in degrees (default 21)')
    group.add_argument('--grid-az', type=int, help='Training azimuths (default 24)')
    group.add_argument('--grid-el', type=int, help='Training elevations (default 18)')
    group.add_argument('--smoothness-order', type=int, help='Filter bank expansion order (default 3)')
    group.add_argument('--bank-seed', type=int, help='Filter bank seed (default 0)')
    group.add_argument('--dump-dense', action='store_true', help='Also write the dense filter tables')


def _add_data(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('datasets')
    group.add_argument('--num-sources', type=int, help='Simultaneous sources M, 1 or 2 (default 1)')
    group.add_argument('--train-frames', type=int, help='Frames per training recording (default 125)')
    group.add_argument('--num-pairs', type=int, help='Two-source training pairs (default 20000)')
    group.add_argument('--test-az', type=int, help='Off-grid test azimuths for M=1 (default 12)')
    group.add_argument('--test-el', type=int, help='Off-grid test elevations for M=1 (default 9)')
    group.add_argument('--num-test', type=int, help='Two-source test items (default 200)')
    group.add_argument('--mixture', choices=sorted(MIXTURES), help='Two-source mixture kind')
    group.add_argument('--occupancy', type=float, help='Sparse source occupancy in (0, 1] (default 0.3)')
    group.add_argument('--duration', type=float, help='Test item duration in seconds (default 1)')
    group.add_argument('--noise-std', type=float, help='Additive noise std (default 0)')
    group.add_argument('--epsilon-factor', type=float, help='Activity threshold factor (default 1)')
    group.add_argument('--per-frequency', action='store_true', help='Per-frequency activity threshold')
    group.add_argument('--min-sep', type=float, help='Minimum pair separation in degrees (default 1.5)')
    group.add_argument('--max-sep', type=float, help='Maximum per-axis pair separation (default 20)')
    group.add_argument('--gain-db', type=float, help='Second-source gain jitter in dB (default 0.5)')


def _add_model(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('model')
    group.add_argument('--K', type=int, help='Mixture components (default 32 for M=1, 100 for M=2)')
    group.add_argument('--fast', action='store_true', help='K=20 for M=2')
    group.add_argument('--prior-mode', choices=['free', 'fixed'], help='Mixture weights (default free)')
    group.add_argument('--max-iter', type=int, help='EM iterations (default 200)')
    group.add_argument('--rel-tol', type=float, help='Relative log-likelihood tolerance (default 1e-6)')


def _add_evaluation(parser: argparse.ArgumentParser, baseline: bool = True) -> None:
    group = parser.add_argument_group('evaluation')
    group.add_argument('--threshold', type=float, help='Outlier threshold in degrees (default 5 for M=1, 15 for M=2)')
    group.add_argument('--no-mask', dest='use_activity', action='store_false',
                       help='Use every spectrogram entry, ignoring the activity matrix')
    if baseline:
        group.add_argument('--no-baseline', dest='baseline', action='store_false', help='Skip the PHAT baseline')
        group.add_argument('--max-lag', type=float, help='PHAT search range in samples')


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage"""
    parser = _Parser(
        prog='binloc',
        description='Supervised binaural co-localization of one or two sound sources',
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text, argument_default=argparse.SUPPRESS)
        _add_common(sub)
        return sub

    sim = command('simulate', 'Generate a filter bank, training set, test set and PHAT calibration')
    sim.add_argument('--out', type=Path, required=True, help='Output directory')
    _add_stft(sim)
    _add_acoustics(sim)
    _add_data(sim)
    sim.add_argument('--no-baseline', dest='baseline', action='store_false', help='Skip PHAT calibration')
    sim.add_argument('--max-lag', type=float, help='PHAT search range in samples')

    feat = command('features', 'Convert a stereo WAV or raw float32 recording to a binaural spectrogram')
    feat.add_argument('input', type=Path, help='Stereo .wav, or raw float32 with a .json sidecar')
    feat.add_argument('--out', type=Path, required=True, help='Output .bnsp file')
    feat.add_argument('--noise', type=Path, help='Noise-only recording used to calibrate the activity threshold')
    feat.add_argument('--epsilon', type=float, help='Explicit activity power threshold')
    feat.add_argument('--epsilon-factor', type=float, help='Noise floor multiplier (default 1)')
    feat.add_argument('--per-frequency', action='store_true', help='Per-frequency noise floor')
    _add_stft(feat)

    train = command('train', 'Fit a mixture of locally-linear mappings to a training set')
    train.add_argument('--data', type=Path, required=True, help='Simulation directory or training .npz')
    train.add_argument('--out', type=Path, required=True, help='Output model JSON')
    train.add_argument('--N', type=int, help='Train on a random subset of N pairs')
    _add_model(train)

    loc = command('localize', 'Localize the sources of one binaural spectrogram')
    loc.add_argument('--model', type=Path, required=True, help='Model JSON')
    loc.add_argument('--spec', type=Path, required=True, help='Binaural spectrogram (.bnsp)')
    loc.add_argument('--out', type=Path, required=True, help='Output report JSON')
    loc.add_argument('--no-mask', dest='use_activity', action='store_false',
                     help='Use every spectrogram entry, ignoring the activity matrix')

    ev = command('evaluate', 'Localize every labelled test item and summarize the errors')
    ev.add_argument('--model', type=Path, required=True, help='Model JSON')
    ev.add_argument('--data', type=Path, required=True, help='Simulation directory or test manifest.json')
    ev.add_argument('--out', type=Path, required=True, help='Output directory')
    _add_evaluation(ev)

    sw = command('sweep', 'Retrain and evaluate over a range of K or N')
    sw.add_argument('--data', type=Path, required=True, help='Simulation directory')
    sw.add_argument('--out', type=Path, required=True, help='Output directory')
    sw.add_argument('--axis', choices=['K', 'N'], required=True, help='Swept quantity')
    sw.add_argument('--values', type=int, nargs='+', required=True, help='Values of the swept quantity')
    sw.add_argument('--seeds', type=int, nargs='+', help='Training seeds (default: --seed)')
    _add_model(sw)
    _add_evaluation(sw, baseline=False)

    oc = command('oracle-check', 'Compare the closed-form posterior with a grid oracle on random instances')
    oc.add_argument('--trials', type=int, default=50, help='Random instances (default 50)')
    oc.add_argument('--nodes', type=int, default=101, help='Grid nodes per axis (default 101)')
    oc.add_argument('--out', type=Path, help='Optional JSON result')

    ds = command('dataset', 'Dataset utilities')
    ds_commands = ds.add_subparsers(dest='dataset_command', metavar='ACTION', required=True)
    ds_pack = ds_commands.add_parser('pack', help='Bundle a manifest and its spectrograms into a directory',
                                     argument_default=argparse.SUPPRESS)
    ds_pack.add_argument('manifest', type=Path, help='Test set manifest.json')
    ds_pack.add_argument('--out', type=Path, required=True, help='Output directory')
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """RunConfig from parsed arguments, with BINLOC_SEED applied and values validated"""
    values = {k: v for k, v in vars(args).items() if k in _CONFIG_FIELDS}
    return RunConfig(**values).with_env().validate()


# subcommands


def _print_summary(summary: Dict) -> None:
    table = Table(title=f"M={summary['num_sources']}, {summary['items']} items, "
                        f"threshold {summary['threshold']:g} deg")
    for column in ('Method', 'Az mean', 'Az std', 'El mean', 'El std', 'Outliers %', 'Mean GTEA'):
        table.add_column(column, justify='right')

    def fmt(value) -> str:
        return '-' if value is None else f"{value:.2f}"

    for name, m in summary['methods'].items():
        table.add_row(name, fmt(m['azimuth']['mean']), fmt(m['azimuth']['std']), fmt(m['elevation']['mean']),
                      fmt(m['elevation']['std']), fmt(m['outlier_percent']), fmt(m['mean_gtea']))
    console.print(table)
    if summary['failed']:
        console.print(f"[red]Failed items: {', '.join(summary['failed'])}[/red]")


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    """Synthesise a filter bank, training set and labelled test set"""
    start = time.perf_counter()
    sim = simulate(config)
    out = write_simulation(sim, args.out, config.dump_dense)
    recorded = {k: v for k, v in asdict(config).items() if k not in ('command', 'threads', 'verbose')}
    write_json(recorded, out / 'config.json')
    write_meta(out / 'config.json', _elapsed_ms(start), command='simulate')

    console.print(f"\n[bold]Simulation written to {out}[/bold]")
    console.print(f"Filter bank: {sim.bank.grid.n_az} x {sim.bank.grid.n_el} directions, F={sim.bank.F}")
    console.print(f"Training set: N={sim.train.N}, L={sim.train.L}, D={sim.train.D}")
    console.print(f"Test set: {len(sim.test)} items, M={sim.test.manifest.num_sources}")
    if sim.regressor is not None:
        console.print(f"PHAT regressor: slope {sim.regressor.slope:.4f}, intercept {sim.regressor.intercept:.4f}")
    return EXIT_OK


def cmd_features(args: argparse.Namespace, config: RunConfig) -> int:
    """Extract a binaural spectrogram from a stereo recording"""
    noise = getattr(args, 'noise', None)
    epsilon = getattr(args, 'epsilon', None)
    if noise is not None and epsilon is not None:
        raise UsageError("--noise and --epsilon are mutually exclusive")
    if epsilon is not None and epsilon < 0:
        raise UsageError("--epsilon must be >= 0")

    left, right, sample_rate = read_stereo(args.input)
    spec_left = stft(left, config.window_len, config.hop, sample_rate)
    spec_right = stft(right, config.window_len, config.hop, sample_rate)
    if noise is not None:
        noise_left, noise_right, noise_rate = read_stereo(noise)
        if noise_rate != sample_rate:
            raise ValueError(f"noise recording is at {noise_rate} Hz, signal at {sample_rate} Hz")
        epsilon = noise_floor_epsilon(stft(noise_left, config.window_len, config.hop, noise_rate),
                                      stft(noise_right, config.window_len, config.hop, noise_rate),
                                      config.epsilon_factor, config.per_frequency)
    elif epsilon is None:
        logger.warning("No --noise or --epsilon given: every bin is marked active")
        epsilon = 0.0

    spec = extract(spec_left, spec_right, epsilon, config.cue_set)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_bnsp(args.out, spec)
    console.print(f"Wrote {spec.D} x {spec.T} spectrogram to {args.out} ({spec.active_fraction:.1%} active)")
    return EXIT_OK


def _load_training(path: Path) -> TrainingSet:
    path = Path(path)
    return TrainingSet.load(path / 'train.npz' if path.is_dir() else path)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Train a model from a training set"""
    train = _load_training(args.data)
    config = replace(config, num_sources=train.L // 2)
    train = subset_training(train, getattr(args, 'N', None), config.seed)
    start = time.perf_counter()
    model = train_model(train, config)
    elapsed = _elapsed_ms(start)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    write_meta(args.out, elapsed, command='train', iterations=len(model.history) - 1)

    console.print(f"Trained K={model.K} (requested {config.resolved_K}) on N={train.N}: "
                  f"{model.n_parameters} parameters, final log-likelihood {model.history[-1]:.4f}")
    console.print(f"Model written to {args.out}")
    return EXIT_OK


def cmd_localize(args: argparse.Namespace, config: RunConfig) -> int:
    """Localize the sources of one spectrogram"""
    model = GllimModel.load(args.model)
    spec = read_bnsp(args.spec)
    report = localize(model, spec, config.use_activity)
    write_json(report.to_dict(include_timing=False), args.out)
    write_meta(args.out, report.elapsed_ms, command='localize')

    estimate = report.estimate.reshape(report.num_sources, 2)
    for m, (az, el) in enumerate(estimate, start=1):
        console.print(f"Source {m}: azimuth {az:.2f} deg, elevation {el:.2f} deg")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    """Score a trained model, and optionally the PHAT baseline, on a labelled test set"""
    model = GllimModel.load(args.model)
    data = Path(args.data)
    regressor: Optional[TdoaRegressor] = None
    if data.is_dir():
        sim = load_simulation(data, with_stereo=config.baseline)
        test, regressor = sim.test, sim.regressor
    else:
        test = load_test_set(data, with_stereo=config.baseline)
    if not config.baseline:
        regressor = None
    elif regressor is None:
        logger.warning("No PHAT calibration found: evaluating the model only")
    elif config.max_lag is not None:
        regressor = replace(regressor, max_lag=config.max_lag)
    if test.items and test.items[0].spec.D != model.D:
        raise ValueError(f"test spectrograms have D={test.items[0].spec.D} but the model expects D={model.D}")

    config = replace(config, num_sources=test.manifest.num_sources)
    runner = BenchmarkRunner(model, config.resolved_threshold, regressor, config.use_activity, config.threads)
    result = runner.run(test)
    if result.results.empty:
        raise RuntimeError("every test item failed")

    out = Path(args.out)
    summary = result.summary_dict()
    results_path = write_csv(result.results, out / 'results.csv')
    write_csv(result.timings, timing_path(results_path))
    summary_path = write_json(summary, out / 'summary.json')
    write_meta(summary_path, float(result.timings['elapsed_ms'].sum()), command='evaluate')
    generate_html_report(summary, result.results, out / 'report.html')
    _print_summary(summary)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    """Retrain and score over a range of K or N"""
    sim = load_simulation(args.data, with_stereo=False)
    config = replace(config, num_sources=sim.train.L // 2)
    metrics, timings = sweep(args.axis, args.values, sim, config, getattr(args, 'seeds', None))
    out = Path(args.out)
    metrics_path = write_csv(metrics, out / 'sweep.csv')
    write_csv(timings, timing_path(metrics_path))

    table = Table(title=f"Sweep over {args.axis}")
    for column in ('value', 'seed', 'K', 'N', 'mean_gtea', 'outlier_percent'):
        table.add_column(column, justify='right')
    for row in metrics.to_dict(orient='records'):
        table.add_row(str(row['value']), str(row['seed']), str(row['K']), str(row['N']),
                      f"{row['mean_gtea']:.3f}", f"{row['outlier_percent']:.1f}")
    console.print(table)
    return EXIT_OK


def cmd_oracle_check(args: argparse.Namespace, config: RunConfig) -> int:
    """Compare the closed-form posterior with the grid oracle on random instances"""
    if args.trials < 1 or args.nodes < 3:
        raise UsageError("--trials must be >= 1 and --nodes >= 3")
    check = oracle_check(args.trials, config.seed, nodes=args.nodes)
    console.print(f"Trials: {check.trials}")
    console.print(f"Max mean error: {check.max_mean_error:.6f} deg ({check.max_mean_error_spacings:.4f} grid spacings)")
    console.print(f"Max weight error: {check.max_weight_error:.3e}")
    console.print('[green]PASS[/green]' if check.passed else '[red]FAIL[/red]')
    out = getattr(args, 'out', None)
    if out is not None:
        write_json({'version': 1, 'seed': config.seed, 'nodes': args.nodes, **asdict(check)}, out)
    return EXIT_OK if check.passed else EXIT_RUNTIME


def cmd_dataset(args: argparse.Namespace, config: RunConfig) -> int:
    """Dataset maintenance; pack bundles a test set manifest and its files"""
    if args.dataset_command == 'pack':
        target = pack(args.manifest, args.out)
        console.print(f"Packed {args.manifest} into {target}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    'simulate': cmd_simulate,
    'features': cmd_features,
    'train': cmd_train,
    'localize': cmd_localize,
    'evaluate': cmd_evaluate,
    'sweep': cmd_sweep,
    'oracle-check': cmd_oracle_check,
    'dataset': cmd_dataset,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = config_from_args(args)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE

    if config.verbose:
        set_level(logging.DEBUG)
    try:
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        logger.debug("Full traceback:", exc_info=True)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
