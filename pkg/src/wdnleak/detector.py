"""From pressure streams to leak decisions.

``run_pipeline`` pushes every sample through a circular buffer; once the buffer
holds a full window, the window is standardised, encoded, and scored by the
one-class SVM. Scores are smoothed with a causal moving average and compared
against the threshold; the first alarm gives the estimated leak start.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .autoencoder import Autoencoder
from .nn import ShapeError
from .ocsvm import OcSvmModel
from .scenario import SAMPLE_PERIOD_H, Scenario
from .windowing import CircularBuffer, NormStats, normalize


class CalibrationError(ValueError):
    pass


class DetectorConfig(BaseModel):
    smoothing: int = Field(48, ge=1, description="moving-average length in samples")
    threshold: float | None = None
    target_fpr: float = Field(0.10, gt=0, lt=1)
    fpr_mode: Literal["sample", "scenario"] = "scenario"
    sample_period: float = Field(SAMPLE_PERIOD_H, gt=0)
    batch_size: int = Field(256, ge=1)
    adapt_nodes: bool = Field(False, description="replicate rows when the network has fewer nodes")


@dataclass
class ScoreTrace:
    """Scores indexed by absolute sample number (the newest sample of each window)."""

    samples: np.ndarray
    raw: np.ndarray
    smoothed: np.ndarray

    def __len__(self) -> int:
        return len(self.raw)

    def to_csv(self) -> str:
        lines = ["sample,raw_score,smoothed_score"]
        lines += [f"{n},{r:.10g},{s:.10g}" for n, r, s in zip(self.samples, self.raw, self.smoothed)]
        return "\n".join(lines) + "\n"


@dataclass
class DetectionResult:
    scenario_id: str
    decision: int
    first_alarm_sample: int | None
    first_alarm_time: float | None
    trace: ScoreTrace
    metadata: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "scenario": self.scenario_id,
            "decision": self.decision,
            "first_alarm_sample": self.first_alarm_sample,
            "first_alarm_time_h": self.first_alarm_time,
            **self.metadata,
        }


@dataclass
class LeakDetector:
    """Trained pieces of the pipeline; immutable once built, safe to share."""

    autoencoder: Autoencoder
    svm: OcSvmModel
    stats: NormStats | None

    @property
    def n_nodes(self) -> int:
        return self.autoencoder.n_nodes

    @property
    def window_length(self) -> int:
        return self.autoencoder.window_length

    def _standardise(self, windows: np.ndarray) -> np.ndarray:
        return normalize(windows, self.stats) if self.stats is not None else windows

    def score_windows(self, windows: np.ndarray) -> np.ndarray:
        """Raw anomaly scores for a stack of (n, K, L) unnormalised windows."""
        emb = self.autoencoder.encode(self._standardise(windows))
        return self.svm.score(emb)

    def raw_scores(self, pressures: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Stream a (K, N) series sample by sample; returns (sample indices, raw scores)."""
        k, n = pressures.shape
        if k != self.n_nodes:
            raise ValueError(f"series has {k} nodes, model expects {self.n_nodes}")
        if n < self.window_length:
            raise ValueError(f"series of {n} samples is shorter than the window ({self.window_length})")
        buf = CircularBuffer(k, self.window_length, dtype=pressures.dtype)
        samples: list[int] = []
        scores: list[np.ndarray] = []
        pending: list[np.ndarray] = []
        for i in range(n):
            buf.push(pressures[:, i])
            if not buf.ready:
                continue
            win = buf.window()
            pending.append(win.values)
            samples.append(win.end_sample)
            if len(pending) == batch_size:
                scores.append(self.score_windows(np.stack(pending)))
                pending = []
        if pending:
            scores.append(self.score_windows(np.stack(pending)))
        return np.asarray(samples), np.concatenate(scores)


def smooth(raw: Sequence[float] | np.ndarray, length: int) -> np.ndarray:
    """Causal moving average; the first ``length - 1`` outputs average the available prefix."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty score sequence")
    if length < 1:
        raise ValueError("smoothing length must be >= 1")
    if length == 1:
        return raw.copy()
    sums = np.convolve(raw, np.ones(length))[: raw.size]
    counts = np.minimum(np.arange(1, raw.size + 1), length)
    return sums / counts


def calibrate_threshold(
    traces: Sequence[np.ndarray],
    target_fpr: float,
    mode: Literal["sample", "scenario"] = "sample",
) -> float:
    """Threshold whose false-positive rate on no-leak ``traces`` is ``target_fpr``.

    ``mode="sample"`` pools every smoothed sample; ``mode="scenario"`` uses the
    maximum of each trace, so the rate is the fraction of no-leak scenarios that
    would raise an alarm. The (1 - target_fpr) quantile uses linear interpolation.
    """
    if not 0 < target_fpr < 1:
        raise CalibrationError(f"target FPR must be in (0, 1), got {target_fpr}")
    traces = [np.asarray(t, dtype=np.float64) for t in traces if len(t)]
    if not traces:
        raise CalibrationError("no validation scores to calibrate on")
    if mode == "sample":
        pool = np.concatenate(traces)
    elif mode == "scenario":
        pool = np.array([t.max() for t in traces])
    else:
        raise CalibrationError(f"unknown FPR mode {mode!r}")
    return float(np.quantile(pool, 1.0 - target_fpr, method="linear"))


def fpr_curve(traces: Sequence[np.ndarray], fprs: Sequence[float],
              mode: Literal["sample", "scenario"] = "sample") -> list[tuple[float, float]]:
    return [(f, calibrate_threshold(traces, f, mode)) for f in fprs]


def realized_fpr(traces: Sequence[np.ndarray], threshold: float,
                 mode: Literal["sample", "scenario"] = "sample") -> float:
    if mode == "sample":
        pool = np.concatenate([np.asarray(t) for t in traces])
        return float(np.mean(pool >= threshold))
    return float(np.mean([np.max(t) >= threshold for t in traces]))


def classify(smoothed: np.ndarray, threshold: float) -> np.ndarray:
    """1 where the smoothed score reaches the threshold (inclusive), else 0."""
    return (np.asarray(smoothed) >= threshold).astype(np.int8)


def leak_start(
    alarms: Sequence[int] | np.ndarray,
    sample_period: float = SAMPLE_PERIOD_H,
    first_sample: int = 0,
) -> tuple[int | None, float | None]:
    """Index and time (hours) of the first alarm, or ``(None, None)``.

    ``alarms[i]`` refers to sample ``first_sample + i``.
    """
    hits = np.flatnonzero(np.asarray(alarms))
    if hits.size == 0:
        return None, None
    n = int(first_sample + hits[0])
    return n, n * sample_period


def adapt_node_count(window: np.ndarray, n_nodes: int) -> np.ndarray:
    """Repeat rows cyclically (row i <- row i mod K') until there are ``n_nodes`` rows.

    Works on a single (K', L) window, a (K', N) series or a stack (..., K', L).
    """
    window = np.asarray(window)
    have = window.shape[-2]
    if have > n_nodes:
        raise ValueError(f"cannot shrink {have} nodes to {n_nodes}; only replication is supported")
    if have == n_nodes:
        return window
    rows = np.arange(n_nodes) % have
    return np.take(window, rows, axis=-2)


def run_pipeline(
    scenario: Scenario,
    detector: LeakDetector,
    config: DetectorConfig,
) -> DetectionResult:
    if config.threshold is None:
        raise CalibrationError("detector threshold is not set; calibrate first")
    pressures = scenario.pressures
    meta: dict = {"label": scenario.label}
    if scenario.n_nodes != detector.n_nodes:
        if not config.adapt_nodes:
            raise ShapeError(
                f"scenario {scenario.id} has {scenario.n_nodes} nodes, model expects {detector.n_nodes}"
            )
        pressures = adapt_node_count(pressures, detector.n_nodes)
        meta["adapted_from_nodes"] = scenario.n_nodes
    samples, raw = detector.raw_scores(pressures, config.batch_size)
    smoothed = smooth(raw, config.smoothing)
    alarms = classify(smoothed, config.threshold)
    n_hat, t_hat = leak_start(alarms, scenario.sample_period, int(samples[0]))
    if scenario.leak is not None:
        meta["onset_sample"] = scenario.leak.onset_sample
        meta["onset_time_h"] = scenario.leak.onset_time
    return DetectionResult(
        scenario_id=scenario.id,
        decision=int(n_hat is not None),
        first_alarm_sample=n_hat,
        first_alarm_time=t_hat,
        trace=ScoreTrace(samples, raw, smoothed),
        metadata=meta,
    )


def smoothed_scores(scenarios: Sequence[Scenario], detector: LeakDetector,
                    config: DetectorConfig) -> list[np.ndarray]:
    """Smoothed score traces of several scenarios (used for calibration)."""
    out = []
    for s in scenarios:
        pressures = s.pressures
        if s.n_nodes != detector.n_nodes:
            if not config.adapt_nodes:
                raise ShapeError(f"scenario {s.id} has {s.n_nodes} nodes, model expects {detector.n_nodes}")
            pressures = adapt_node_count(pressures, detector.n_nodes)
        _, raw = detector.raw_scores(pressures, config.batch_size)
        out.append(smooth(raw, config.smoothing))
    return out


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()
