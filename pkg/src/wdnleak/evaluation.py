"""Scenario-level metrics, the test-time noise sweep and cross-network runs.

A scenario counts as correct when the detector's decision matches its label,
with one twist: in a leak scenario the first alarm must not precede the leak
onset. Such early alarms are false positives; the scenario is scored wrong and
contributes no detection delay.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Sequence

import numpy as np

from .detector import DetectionResult, DetectorConfig, LeakDetector, run_pipeline
from .scenario import Scenario, add_noise
from .windowing import NormStats, fit_stats

logger = logging.getLogger(__name__)

Outcome = Literal["TP", "TN", "FP", "FN", "early"]


class DelayError(ValueError):
    """A detection delay was requested for an alarm that precedes the onset."""


def detection_delay(t_hat: float, t_star: float) -> float:
    """Hours between the true onset and the estimated leak start."""
    if t_hat < t_star:
        raise DelayError(f"alarm at {t_hat} h precedes the onset at {t_star} h")
    return float(t_hat - t_star)


@dataclass(frozen=True)
class ScenarioRow:
    scenario_id: str
    label: int
    decision: int
    onset_time: float | None
    alarm_time: float | None
    delay: float | None
    outcome: Outcome
    end_time: float | None = None

    @property
    def correct(self) -> bool:
        return self.outcome in ("TP", "TN")


def score_result(result: DetectionResult, scenario: Scenario) -> ScenarioRow:
    t_star = scenario.leak.onset_time if scenario.leak is not None else None
    t_hat = result.first_alarm_time
    delay = None
    if scenario.label == 0:
        outcome: Outcome = "FP" if result.decision else "TN"
    elif not result.decision:
        outcome = "FN"
    elif t_hat < t_star:
        outcome = "early"
    else:
        outcome = "TP"
        delay = detection_delay(t_hat, t_star)
    return ScenarioRow(
        scenario_id=scenario.id,
        label=scenario.label,
        decision=result.decision,
        onset_time=t_star,
        alarm_time=t_hat,
        delay=delay,
        outcome=outcome,
        end_time=(scenario.n_samples - 1) * scenario.sample_period,
    )


def accuracy(rows: Sequence[ScenarioRow]) -> float:
    if not rows:
        raise ValueError("no results to score")
    return sum(r.correct for r in rows) / len(rows)


def mean_delay(rows: Sequence[ScenarioRow], mode: Literal["detected", "censored"] = "detected") -> float:
    """Mean DD in hours; NaN when nothing qualifies.

    ``detected`` averages true positives only. ``censored`` also counts every
    leak scenario without a valid detection, charging it the time from onset to
    the end of the record (a lower bound on its delay).
    """
    delays = [r.delay for r in rows if r.outcome == "TP"]
    if mode == "censored":
        delays += [r.end_time - r.onset_time for r in rows
                   if r.label == 1 and r.outcome != "TP" and r.end_time is not None]
    elif mode != "detected":
        raise ValueError(f"unknown delay mode {mode!r}")
    return float(np.mean(delays)) if delays else math.nan


CSV_FIELDS = ("scenario", "label", "decision", "outcome", "onset_time_h", "alarm_time_h", "delay_h")


@dataclass
class EvalReport:
    rows: list[ScenarioRow]
    tags: dict = field(default_factory=dict)
    delay_mode: Literal["detected", "censored"] = "detected"

    def __post_init__(self) -> None:
        self.rows = sorted(self.rows, key=lambda r: r.scenario_id)

    @property
    def accuracy(self) -> float:
        return accuracy(self.rows)

    @property
    def mean_delay(self) -> float:
        return mean_delay(self.rows, self.delay_mode)

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in ("TP", "TN", "FP", "FN", "early")}
        for r in self.rows:
            out[r.outcome] += 1
        return out

    def summary(self) -> dict:
        dd = self.mean_delay
        return {
            **self.tags,
            "n_scenarios": len(self.rows),
            "accuracy": round(self.accuracy, 6),
            "mean_dd_h": None if math.isnan(dd) else round(dd, 6),
            "delay_mode": self.delay_mode,
            **self.counts(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.scenario_id, r.label, r.decision, r.outcome,
                        _fmt(r.onset_time), _fmt(r.alarm_time), _fmt(r.delay)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def format_table(reports: Sequence[EvalReport], key: str | None = None, title: str = "") -> str:
    """Plain-text table, one row per report: condition, accuracy, mean DD."""
    head = key or "condition"
    lines = [title] if title else []
    lines.append(f"{head:<16} {'Accuracy':>9} {'DD [h]':>9}")
    lines.append("-" * 36)
    for rep in reports:
        name = str(rep.tags.get(key, "")) if key else str(rep.tags.get("network", "all"))
        dd = rep.mean_delay
        dd_s = "-" if math.isnan(dd) else f"{dd:.1f}"
        lines.append(f"{name:<16} {rep.accuracy:>9.2f} {dd_s:>9}")
    return "\n".join(lines) + "\n"


# -- running the detector over many scenarios --------------------------------

def run_all(
    scenarios: Sequence[Scenario],
    detector: LeakDetector,
    config: DetectorConfig,
    workers: int = 1,
) -> list[DetectionResult]:
    """Run the pipeline on every scenario; results follow the input order.

    Each run owns its buffer; the trained models are only read, so a thread
    pool can share them.
    """
    if workers <= 1 or len(scenarios) < 2:
        return [run_pipeline(s, detector, config) for s in scenarios]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_pipeline(s, detector, config), scenarios))


def score_traces(
    scenarios: Sequence[Scenario],
    detector: LeakDetector,
    config: DetectorConfig,
    workers: int = 1,
) -> list[DetectionResult]:
    """Pipeline runs without a decision rule (threshold at +inf); used for calibration."""
    silent = config.model_copy(update={"threshold": math.inf})
    return run_all(scenarios, detector, silent, workers)


def evaluate(
    scenarios: Sequence[Scenario],
    detector: LeakDetector,
    config: DetectorConfig,
    tags: dict | None = None,
    workers: int = 1,
    delay_mode: Literal["detected", "censored"] = "detected",
) -> tuple[EvalReport, list[DetectionResult]]:
    if not scenarios:
        raise ValueError("no scenarios to evaluate")
    results = run_all(scenarios, detector, config, workers)
    rows = [score_result(r, s) for r, s in zip(results, scenarios)]
    return EvalReport(rows, dict(tags or {}), delay_mode), results


def with_noise(scenario: Scenario, snr_db: float, seed: int = 0,
               reference: Literal["ac", "total"] = "ac") -> Scenario:
    """Copy of ``scenario`` with test-time white noise; the realisation depends
    on the scenario seed and ``seed`` but not on the SNR, so levels differ only in scale."""
    if math.isinf(snr_db) and snr_db > 0:
        return scenario
    noisy = add_noise(scenario.pressures, snr_db, seed=scenario.seed + seed, reference=reference)
    return replace(scenario, pressures=noisy)


def noise_sweep(
    scenarios: Sequence[Scenario],
    detector: LeakDetector,
    config: DetectorConfig,
    snrs: Iterable[float],
    seed: int = 0,
    workers: int = 1,
    delay_mode: Literal["detected", "censored"] = "detected",
    reference: Literal["ac", "total"] = "ac",
) -> list[EvalReport]:
    """One report per SNR level; models and threshold stay as trained on clean data."""
    snrs = list(snrs)
    if not snrs:
        raise ValueError("SNR list is empty")
    reports = []
    for snr in snrs:
        noisy = [with_noise(s, snr, seed, reference) for s in scenarios]
        rep, _ = evaluate(noisy, detector, config, {"snr_db": snr}, workers, delay_mode)
        logger.info("SNR %s dB: accuracy %.3f, DD %.1f h", snr, rep.accuracy, rep.mean_delay)
        reports.append(rep)
    return reports


def tile_stats(stats: NormStats, n_nodes: int) -> NormStats:
    """Repeat per-node statistics cyclically, matching the row replication of windows."""
    rows = np.arange(n_nodes) % stats.n_nodes
    return NormStats(stats.mean[rows], stats.std[rows])


def foreign_detector(
    detector: LeakDetector,
    reference: Sequence[Scenario] | None,
) -> LeakDetector:
    """Detector for a network with fewer nodes than the model.

    With ``reference`` (no-leak scenarios of the foreign network) the input
    standardisation is refitted on them and tiled to the model's node count;
    without it the training network's statistics are applied as they are.
    """
    if not reference:
        return detector
    k_foreign = reference[0].n_nodes
    if k_foreign > detector.n_nodes:
        raise ValueError(f"foreign network has {k_foreign} nodes, model only {detector.n_nodes}")
    stats = fit_stats([s.pressures for s in reference if s.label == 0])
    return replace(detector, stats=tile_stats(stats, detector.n_nodes))


def cross_network_eval(
    scenarios: Sequence[Scenario],
    detector: LeakDetector,
    config: DetectorConfig,
    reference: Sequence[Scenario] | None = None,
    workers: int = 1,
    delay_mode: Literal["detected", "censored"] = "detected",
) -> tuple[EvalReport, list[DetectionResult]]:
    if not scenarios:
        raise ValueError("no scenarios to evaluate")
    k = scenarios[0].n_nodes
    if k > detector.n_nodes:
        raise ValueError(f"foreign network has {k} nodes, model only {detector.n_nodes}")
    det = foreign_detector(detector, reference)
    config = config.model_copy(update={"adapt_nodes": True})
    tags = {"network": scenarios[0].network or f"{k}-node", "n_nodes": k}
    return evaluate(scenarios, det, config, tags, workers, delay_mode)
