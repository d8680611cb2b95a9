"""Multi-stage protocol: fit the detector on no-leak data, then calibrate it."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ocsvm
from .autoencoder import TrainResult, check_no_leak, train, training_windows
from .config import RunConfig, SvmConfig, resolve_topology
from .detector import DetectorConfig, LeakDetector, calibrate_threshold, fpr_curve, realized_fpr
from .evaluation import EvalReport, evaluate, score_traces
from .scenario import GenerationConfig, Network, Scenario, ScenarioSet, generate_dataset, load_topology
from .windowing import fit_stats

logger = logging.getLogger(__name__)


def svm_gamma(embeddings: np.ndarray, config: SvmConfig) -> float:
    if config.gamma is not None:
        return config.gamma
    return config.gamma_scale * ocsvm.default_gamma(embeddings)


def fit_detector(scenarios: Sequence[Scenario], config: RunConfig) -> tuple[LeakDetector, TrainResult]:
    """Standardisation, autoencoder, then one-class SVM, all from no-leak scenarios."""
    check_no_leak(scenarios)
    if not scenarios:
        raise ValueError("train split is empty")
    stats = fit_stats([s.pressures for s in scenarios]) if config.normalize else None
    result = train(scenarios, stats, config.train, config.window_length)
    windows = training_windows(scenarios, stats, config.window_length, config.svm.window_stride)
    emb = result.model.encode(windows)
    svm = ocsvm.fit(emb, nu=config.svm.nu, gamma=svm_gamma(emb, config.svm),
                    tol=config.svm.tol, seed=config.seed)
    return LeakDetector(result.model, svm, stats), result


@dataclass
class Calibration:
    threshold: float
    target_fpr: float
    mode: str
    curve: list[tuple[float, float]]
    n_scenarios: int
    realized_fpr: float

    def record(self) -> dict:
        return {
            "threshold": self.threshold,
            "target_fpr": self.target_fpr,
            "fpr_mode": self.mode,
            "n_validation_scenarios": self.n_scenarios,
            "realized_fpr": self.realized_fpr,
        }


def calibrate(
    scenarios: Sequence[Scenario],
    detector: LeakDetector,
    config: DetectorConfig,
    curve_fprs: Sequence[float] = (),
    workers: int = 1,
) -> Calibration:
    """Threshold from no-leak validation scenarios at ``config.target_fpr``."""
    check_no_leak(scenarios)
    results = score_traces(scenarios, detector, config, workers)
    traces = [r.trace.smoothed for r in results]
    gamma = calibrate_threshold(traces, config.target_fpr, config.fpr_mode)
    return Calibration(
        threshold=gamma,
        target_fpr=config.target_fpr,
        mode=config.fpr_mode,
        curve=fpr_curve(traces, sorted(curve_fprs), config.fpr_mode) if curve_fprs else [],
        n_scenarios=len(traces),
        realized_fpr=realized_fpr(traces, gamma, config.fpr_mode),
    )


@dataclass
class Experiment:
    """Everything produced by one in-memory generate -> train -> calibrate -> evaluate run."""

    config: RunConfig
    dataset: ScenarioSet
    detector: LeakDetector
    training: TrainResult
    calibration: Calibration
    report: EvalReport
    results: list
    timings: dict

    @property
    def detector_config(self) -> DetectorConfig:
        return self.config.detector.model_copy(update={"threshold": self.calibration.threshold})


def run_experiment(config: RunConfig, network: Network | None = None) -> Experiment:
    """Full desk-scale protocol without touching the disk."""
    timings = {}
    t0 = time.perf_counter()
    network = network or load_topology(resolve_topology(config.topology))
    dataset = generate_dataset(network, config.generation)
    timings["generate"] = time.perf_counter() - t0
    t = time.perf_counter()
    detector, training = fit_detector(dataset.split("train"), config)
    timings["train"] = time.perf_counter() - t
    t = time.perf_counter()
    cal = calibrate(dataset.split("validation"), detector, config.detector,
                    config.evaluation.fpr_curve, config.workers)
    timings["calibrate"] = time.perf_counter() - t
    t = time.perf_counter()
    dcfg = config.detector.model_copy(update={"threshold": cal.threshold})
    report, results = evaluate(dataset.split("test"), detector, dcfg, {"network": network.name},
                               config.workers, config.evaluation.delay_mode)
    timings["evaluate"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    logger.info("seed %d: accuracy %.3f, DD %.1f h, %.0f s", config.seed, report.accuracy,
                report.mean_delay, timings["total"])
    return Experiment(config, dataset, detector, training, cal, report, results, timings)


def foreign_seed(seed: int) -> int:
    """Master seed of the foreign-network dataset, derived from the run seed."""
    return int(np.random.SeedSequence([seed, 11]).generate_state(1, dtype=np.uint32)[0])


def foreign_generation(config: RunConfig) -> GenerationConfig:
    """Recipe for a foreign network: no-leak reference scenarios in the train split, leak/no-leak tests."""
    ev = config.evaluation
    return GenerationConfig(**{
        **config.generation.model_dump(),
        "n_train": ev.foreign_reference, "n_validation": 0, "n_test": ev.foreign_test,
        "master_seed": foreign_seed(config.seed),
    })
