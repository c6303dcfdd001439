"""Synthetic benchmark pipeline: simulate, train, localize test items, sweep K or N"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig
from .dataset import (LabelledItem, LabelledSet, RecordingSet, build_pair_training, build_single_source_training,
                      build_test_set, child_seeds, frames_for_duration, load_test_set, offgrid_directions,
                      record_grid, sample_pair_directions, write_test_set)
from .evaluation import (ErrorSummary, TdoaRegressor, assign_sources, fit_tdoa_regressor, phat_tdoas,
                         summarize)
from .gllim import FitConfig, GllimModel, TrainingSet, fit
from .posterior import localize
from .report import write_json
from .simroom import FilterBank, make_filter_bank
from .utils.logger import log_progress, setup_logger
from .utils.parallel import ordered_map

logger = setup_logger(__name__)

SUMMARY_FORMAT_VERSION = 1
MODEL_METHOD = 'gllim'
PHAT_METHOD = 'phat'


@dataclass
class Simulation:
    bank: FilterBank
    train: TrainingSet
    test: LabelledSet
    regressor: Optional[TdoaRegressor] = None


def make_bank(config: RunConfig) -> FilterBank:
    """Filter bank described by the acoustic-space section of config"""
    return make_filter_bank(config.grid, config.F, config.smoothness_order, config.bank_seed, config.sample_rate)


def fit_phat_regressor(recordings: RecordingSet, max_lag: float, threads: int = 1) -> TdoaRegressor:
    """Linear TDOA-to-azimuth map calibrated on the single-source grid recordings"""
    def tdoa(index: int) -> float:
        recording = recordings[index]
        return phat_tdoas(recording.left, recording.right, max_lag, 1)[0]

    tdoas = ordered_map(tdoa, range(len(recordings)), threads)
    regressor = fit_tdoa_regressor(tdoas, recordings.directions[:, 0], max_lag)
    logger.info(f"PHAT regressor: azimuth = {regressor.slope:.4f} x tdoa + {regressor.intercept:.4f}")
    return regressor


def simulate(config: RunConfig) -> Simulation:
    """Filter bank, training set, labelled test set and PHAT calibration for one configuration"""
    config.validate()
    train_seed, test_seed, direction_seed = child_seeds(config.seed, 3)
    bank = make_bank(config)
    recordings = record_grid(bank, None, config.train_frames, config.noise_std, train_seed, config.hop)

    if config.num_sources == 1:
        train = build_single_source_training(bank, None, config.train_frames, config.noise_std, train_seed,
                                             config.cue_set, config.threads, config.hop, recordings)
        directions = offgrid_directions(bank.grid, config.test_az, config.test_el)
    else:
        train = build_pair_training(recordings, config.num_pairs, train_seed, config.min_sep, config.max_sep,
                                    config.gain_db, config.cue_set, config.threads)
        directions = sample_pair_directions(bank.grid, config.num_test, direction_seed, config.min_sep,
                                            config.max_sep)

    T = frames_for_duration(config.duration, config.sample_rate, config.hop)
    test = build_test_set(bank, directions, config.mixture_kinds, T, config.occupancy, config.noise_std,
                          test_seed, config.epsilon_factor, config.per_frequency, config.identical,
                          config.gain_db, config.cue_set, config.threads, config.hop)
    regressor = fit_phat_regressor(recordings, config.resolved_max_lag, config.threads) if config.baseline else None
    return Simulation(bank, train, test, regressor)


def write_simulation(sim: Simulation, out_dir: Path, dump_dense: bool = False) -> Path:
    """Write bank, training set, PHAT calibration and test set under out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sim.bank.save(out_dir / 'bank.json')
    if dump_dense:
        sim.bank.dump_dense(out_dir / 'bank_dense.npz')
    sim.train.save(out_dir / 'train.npz')
    if sim.regressor is not None:
        write_json(sim.regressor.to_dict(), out_dir / 'phat.json')
    write_test_set(sim.test, out_dir / 'test')
    logger.info(f"Simulation written to {out_dir}")
    return out_dir


def load_simulation(data_dir: Path, with_stereo: bool = True) -> Simulation:
    """Read a directory written by write_simulation"""
    data_dir = Path(data_dir)
    for required in ('bank.json', 'train.npz', 'test/manifest.json'):
        if not (data_dir / required).exists():
            raise ValueError(f"{data_dir} is not a simulation directory: missing {required}")
    bank = FilterBank.load(data_dir / 'bank.json')
    train = TrainingSet.load(data_dir / 'train.npz')
    test = load_test_set(data_dir / 'test' / 'manifest.json', with_stereo)
    phat_path = data_dir / 'phat.json'
    regressor = TdoaRegressor.from_dict(json.loads(phat_path.read_text())) if phat_path.exists() else None
    return Simulation(bank, train, test, regressor)


def subset_training(train: TrainingSet, N: Optional[int], seed: int = 0) -> TrainingSet:
    """N rows drawn without replacement, kept in their original order; N=None or the full size returns train"""
    if N is None or N == train.N:
        return train
    if not 1 <= N <= train.N:
        raise ValueError(f"N={N} must be in [1, {train.N}]")
    return train.subset(np.sort(np.random.default_rng(seed).choice(train.N, N, replace=False)))


def train_model(train: TrainingSet, config: RunConfig) -> GllimModel:
    """Fit the locally-linear mapping with the model section of config"""
    fit_config = FitConfig(max_iter=config.max_iter, rel_tol=config.rel_tol, prior_mode=config.prior,
                           seed=config.seed, threads=config.threads)
    return fit(train, config.resolved_K, fit_config)


@dataclass
class BenchmarkResult:
    results: pd.DataFrame
    timings: pd.DataFrame
    summaries: Dict[str, ErrorSummary]
    num_sources: int
    threshold: float
    failed: List[str] = field(default_factory=list)
    use_activity: bool = True

    def method_frame(self, method: str) -> pd.DataFrame:
        return self.results[self.results['method'] == method]

    def errors(self, method: str) -> np.ndarray:
        """(items x M) x 2 per-source errors for one method"""
        frame = self.method_frame(method)
        columns = [(f'err_az{m}', f'err_el{m}') for m in range(1, self.num_sources + 1)]
        return np.concatenate([frame[list(pair)].to_numpy(dtype=np.float64) for pair in columns])

    def mean_gtea(self, method: str) -> float:
        return float(np.nanmean(self.errors(method)))

    def summary_dict(self) -> Dict[str, Any]:
        methods = {}
        for method, summary in self.summaries.items():
            errors = self.errors(method)
            entry = summary.to_dict()
            entry['mean_gtea'] = self.mean_gtea(method)
            entry['mean_gtea_azimuth'] = float(np.nanmean(errors[:, 0]))
            elevation = errors[:, 1]
            entry['mean_gtea_elevation'] = float(np.nanmean(elevation)) if np.any(np.isfinite(elevation)) else None
            if self.num_sources > 1:
                entry['mistaken_percent'] = 100.0 * float(self.method_frame(method)['crossed'].mean())
            methods[method] = entry
        return {
            'version': SUMMARY_FORMAT_VERSION,
            'num_sources': self.num_sources,
            'threshold': self.threshold,
            'assignment': 'min_total_distance',
            'use_activity': self.use_activity,
            'items': int(self.results['id'].nunique()) if len(self.results) else 0,
            'failed': self.failed,
            'methods': methods,
        }


class BenchmarkRunner:
    """Localizes every labelled item with the trained model and, optionally, the PHAT baseline"""

    def __init__(self, model: GllimModel, threshold: float, regressor: Optional[TdoaRegressor] = None,
                 use_activity: bool = True, threads: int = 1):
        self.model = model
        self.threshold = threshold
        self.regressor = regressor
        self.use_activity = use_activity
        self.threads = threads

    def _row(self, item: LabelledItem, estimate: np.ndarray, method: str, M: int) -> Dict[str, Any]:
        matched, crossed = assign_sources(estimate, item.truth, M)
        truth = item.truth.reshape(M, 2)
        row: Dict[str, Any] = {'id': item.entry.id, 'method': method}
        for m in range(M):
            n = m + 1
            row[f'truth_az{n}'], row[f'truth_el{n}'] = truth[m]
            row[f'est_az{n}'], row[f'est_el{n}'] = matched[m]
            row[f'err_az{n}'], row[f'err_el{n}'] = np.abs(matched[m] - truth[m])
        row['crossed'] = crossed
        return row

    def _phat_estimate(self, item: LabelledItem, M: int) -> np.ndarray:
        tdoas = phat_tdoas(item.left, item.right, self.regressor.max_lag, M)
        if not tdoas:
            raise ValueError("PHAT histogram is empty")
        azimuths = sorted(float(a) for a in self.regressor.predict(tdoas))
        while len(azimuths) < M:
            azimuths.append(azimuths[-1])
        return np.array([[az, np.nan] for az in azimuths]).ravel()

    def _evaluate_item(self, item: LabelledItem) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
        M = item.entry.num_sources
        report = localize(self.model, item.spec, self.use_activity)
        rows = [self._row(item, report.estimate, MODEL_METHOD, M)]
        timings = [{'id': item.entry.id, 'method': MODEL_METHOD, 'elapsed_ms': report.elapsed_ms}]
        logger.debug(f"Item {item.entry.id}: estimate {np.round(report.estimate, 2).tolist()}")

        if self.regressor is not None and item.left is not None:
            start = time.perf_counter()
            estimate = self._phat_estimate(item, M)
            elapsed = (time.perf_counter() - start) * 1000.0
            rows.append(self._row(item, estimate, PHAT_METHOD, M))
            timings.append({'id': item.entry.id, 'method': PHAT_METHOD, 'elapsed_ms': elapsed})
        return rows, timings

    def run(self, test_set: LabelledSet) -> BenchmarkResult:
        """Localize every item of test_set; failing items are logged and listed, not raised"""
        M = test_set.manifest.num_sources
        if M != self.model.L // 2:
            raise ValueError(f"test set has M={M} sources but the model was trained for L={self.model.L}")
        total = len(test_set.items)
        logger.info(f"Starting localization of {total} test items...")

        def guarded(index: int):
            item = test_set.items[index]
            try:
                outcome = self._evaluate_item(item)
            except Exception as e:
                logger.error(f"Error localizing item {item.entry.id}: {str(e)}")
                logger.exception("Full traceback:")
                outcome = None
            log_progress(logger, index + 1, total, "items localized")
            return item.entry.id, outcome

        rows, timings, failed = [], [], []
        for item_id, outcome in ordered_map(guarded, range(total), self.threads):
            if outcome is None:
                failed.append(item_id)
                continue
            rows.extend(outcome[0])
            timings.extend(outcome[1])

        results = pd.DataFrame(rows)
        result = BenchmarkResult(results, pd.DataFrame(timings), {}, M, self.threshold, failed, self.use_activity)
        if len(results):
            for method in results['method'].unique():
                result.summaries[method] = summarize(result.errors(method), self.threshold)
        logger.info(f"Localization completed. Processed {total - len(failed)} items successfully.")
        return result


def sweep(axis: str, values: Sequence[int], sim: Simulation, config: RunConfig,
          seeds: Optional[Sequence[int]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Retrain and evaluate once per (seed, value), varying K or the number of
    training points N.  N subsets keep the original row order, so the full N
    reproduces the standalone pipeline.  Returns the metric table and the
    timing table separately.
    """
    if axis not in ('K', 'N'):
        raise ValueError(f"sweep axis must be 'K' or 'N', got '{axis}'")
    if not values:
        raise ValueError("sweep needs at least one value")
    seeds = list(seeds) if seeds else [config.seed]
    train = sim.train
    if axis == 'N' and max(values) > train.N:
        raise ValueError(f"N={max(values)} exceeds the {train.N} available training points")

    rows, timings = [], []
    for seed in seeds:
        for value in values:
            K = int(value) if axis == 'K' else config.resolved_K
            N = int(value) if axis == 'N' else train.N
            subset = subset_training(train, N, seed)
            logger.info(f"Sweep {axis}={value} (seed {seed}): training K={K} on N={N}")
            start = time.perf_counter()
            model = train_model(subset, replace(config, K=K, seed=seed))
            training_ms = (time.perf_counter() - start) * 1000.0
            result = BenchmarkRunner(model, config.resolved_threshold, None, config.use_activity,
                                     config.threads).run(sim.test)
            if MODEL_METHOD not in result.summaries:
                raise RuntimeError("every test item failed")
            summary = result.summaries[MODEL_METHOD]
            rows.append({
                'axis': axis, 'value': int(value), 'seed': seed, 'K': model.K, 'N': N,
                'mean_gtea': result.mean_gtea(MODEL_METHOD),
                'mean_azimuth': summary.mean[0], 'mean_elevation': summary.mean[1],
                'outlier_percent': summary.outlier_percent,
            })
            timings.append({
                'axis': axis, 'value': int(value), 'seed': seed,
                'training_ms': training_ms,
                'localization_ms': float(result.timings['elapsed_ms'].mean()),
            })
    return pd.DataFrame(rows), pd.DataFrame(timings)
