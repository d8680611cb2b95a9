"""Circular sample buffer, K x L window matrices and per-node standardisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class BufferNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowMatrix:
    """The ``L`` most recent samples of all ``K`` nodes, oldest column first.

    Column ``j`` holds sample ``end_sample - L + 1 + j``.
    """

    values: np.ndarray
    end_sample: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def start_sample(self) -> int:
        return self.end_sample - self.values.shape[1] + 1


class CircularBuffer:
    """Fixed-length per-node history. Single writer.

    The buffer becomes ready once it has received ``length`` samples; before
    that no window can be read (the setup time of the detector).
    """

    def __init__(self, n_nodes: int, length: int, dtype=np.float64) -> None:
        if n_nodes < 1 or length < 1:
            raise ValueError("n_nodes and length must be positive")
        self.n_nodes = n_nodes
        self.length = length
        self._data = np.zeros((n_nodes, length), dtype=dtype)
        self._head = 0  # next column to overwrite
        self.count = 0

    @property
    def ready(self) -> bool:
        return self.count >= self.length

    @property
    def end_sample(self) -> int:
        return self.count - 1

    def push(self, sample: np.ndarray) -> "CircularBuffer":
        sample = np.asarray(sample)
        if sample.shape != (self.n_nodes,):
            raise ValueError(f"sample must have shape ({self.n_nodes},), got {sample.shape}")
        if not np.all(np.isfinite(sample)):
            raise ValueError(f"non-finite value in sample {self.count}")
        self._data[:, self._head] = sample
        self._head = (self._head + 1) % self.length
        self.count += 1
        return self

    def window(self) -> WindowMatrix:
        if not self.ready:
            raise BufferNotReady(f"buffer holds {self.count} of {self.length} samples")
        values = np.concatenate((self._data[:, self._head:], self._data[:, :self._head]), axis=1)
        return WindowMatrix(values, self.end_sample)


def push_sample(buffer: CircularBuffer, sample: np.ndarray) -> CircularBuffer:
    return buffer.push(sample)


def current_window(buffer: CircularBuffer) -> WindowMatrix:
    return buffer.window()


def sliding_windows(series: np.ndarray, length: int, stride: int = 1) -> np.ndarray:
    """All windows of a (K, N) series as a read-only view (n_windows, K, length).

    Window ``i`` ends at sample ``length - 1 + i * stride``; equals what a
    :class:`CircularBuffer` would emit at that sample.
    """
    if series.shape[1] < length:
        raise ValueError(f"series of {series.shape[1]} samples is shorter than window {length}")
    view = sliding_window_view(series, length, axis=1)  # (K, N-L+1, L)
    return view[:, ::stride, :].transpose(1, 0, 2)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be matching 1-D vectors")
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")

    @property
    def n_nodes(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, n_nodes: int) -> "NormStats":
        return cls(np.zeros(n_nodes), np.ones(n_nodes))


def fit_stats(series: Iterable[np.ndarray]) -> NormStats:
    """Per-node mean and (population) std pooled over every sample of every series."""
    series = [np.asarray(s, dtype=np.float64) for s in series]
    if not series:
        raise ValueError("need at least one training series")
    if len({s.shape[0] for s in series}) != 1:
        raise ValueError("training series disagree on node count")
    count = sum(s.shape[1] for s in series)
    mean = sum(s.sum(axis=1) for s in series) / count
    var = sum(np.sum((s - mean[:, None]) ** 2, axis=1) for s in series) / count
    std = np.sqrt(var)
    bad = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if bad.size:
        raise ValueError(f"zero-variance node(s) at index {bad.tolist()}")
    return NormStats(mean, std)


def _values(window):
    return window.values if isinstance(window, WindowMatrix) else np.asarray(window)


def normalize(window, stats: NormStats):
    """Map row ``k`` to ``(row - mean_k) / std_k``; accepts arrays (..., K, L) too."""
    values = _values(window)
    if values.shape[-2] != stats.n_nodes:
        raise ValueError(f"window has {values.shape[-2]} rows, stats cover {stats.n_nodes} nodes")
    out = (values - stats.mean[:, None]) / stats.std[:, None]
    if isinstance(window, WindowMatrix):
        return WindowMatrix(out, window.end_sample)
    return out


def denormalize(window, stats: NormStats):
    values = _values(window)
    if values.shape[-2] != stats.n_nodes:
        raise ValueError(f"window has {values.shape[-2]} rows, stats cover {stats.n_nodes} nodes")
    out = values * stats.std[:, None] + stats.mean[:, None]
    if isinstance(window, WindowMatrix):
        return WindowMatrix(out, window.end_sample)
    return out
