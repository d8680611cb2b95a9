"""Convolutional autoencoder over K x L pressure windows.

Nodes are channels and time is the convolution axis. The encoder is two
stride-2 convolutions (64 then 32 filters, kernel 7, ReLU after each); the
decoder mirrors it with three transposed convolutions (32, 64, then K filters,
the last one stride 1 and linear). With padding 3 everywhere a window of length
L comes back with length L; the output padding of each stride-2 transposed
layer is derived from the encoder lengths so any L >= 4 round-trips.

The embedding of a window is the encoder's final (32, ceil(L/4)) feature map
flattened channel-major.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field

from .nn import (
    Adam,
    Conv1d,
    ConvTranspose1d,
    ReLU,
    Sequential,
    ShapeError,
    conv_output_length,
    conv_transposed_output_length,
    mse_loss,
    mse_loss_grad,
)
from .scenario import Scenario
from .windowing import NormStats, WindowMatrix, normalize, sliding_windows

logger = logging.getLogger(__name__)

KERNEL = 7
PADDING = 3
ENCODER_FILTERS = (64, 32)
DECODER_FILTERS = (32, 64)


class LeakInTrainingDataError(ValueError):
    """A leak-labelled scenario was handed to a no-leak-only training routine."""


class TrainingDivergedError(FloatingPointError):
    pass


class Autoencoder:
    def __init__(
        self,
        n_nodes: int,
        window_length: int = 336,
        seed: int = 0,
        dtype=np.float32,
    ) -> None:
        if window_length < 4:
            raise ValueError("window_length must be at least 4")
        self.n_nodes = n_nodes
        self.window_length = window_length
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        l1 = conv_output_length(window_length, KERNEL, 2, PADDING)
        l2 = conv_output_length(l1, KERNEL, 2, PADDING)
        op1 = l1 - conv_transposed_output_length(l2, KERNEL, 2, PADDING)
        op2 = window_length - conv_transposed_output_length(l1, KERNEL, 2, PADDING)
        self.lengths = (window_length, l1, l2)
        kw = dict(kernel_size=KERNEL, padding=PADDING, rng=rng, dtype=self.dtype)
        self.encoder = Sequential(
            Conv1d(n_nodes, ENCODER_FILTERS[0], stride=2, **kw),
            ReLU(),
            Conv1d(ENCODER_FILTERS[0], ENCODER_FILTERS[1], stride=2, **kw),
            ReLU(),
        )
        self.decoder = Sequential(
            ConvTranspose1d(ENCODER_FILTERS[1], DECODER_FILTERS[0], stride=2, output_padding=op1, **kw),
            ReLU(),
            ConvTranspose1d(DECODER_FILTERS[0], DECODER_FILTERS[1], stride=2, output_padding=op2, **kw),
            ReLU(),
            ConvTranspose1d(DECODER_FILTERS[1], n_nodes, stride=1, **kw),
        )

    @property
    def embedding_dim(self) -> int:
        return ENCODER_FILTERS[1] * self.lengths[2]

    def conv_layers(self) -> list:
        return [l for l in self.encoder.layers + self.decoder.layers if hasattr(l, "params")]

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def gradients(self) -> list[np.ndarray]:
        return self.encoder.gradients() + self.decoder.gradients()

    def zero_grad(self) -> None:
        for g in self.gradients():
            g[...] = 0.0

    def _as_batch(self, windows) -> np.ndarray:
        x = windows.values if isinstance(windows, WindowMatrix) else np.asarray(windows)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.n_nodes, self.window_length):
            raise ShapeError(
                f"expected windows of shape ({self.n_nodes}, {self.window_length}), got {x.shape[-2:]}"
            )
        return x.astype(self.dtype, copy=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Training forward pass; records what ``backward`` needs."""
        return self.decoder.forward(self.encoder.forward(x))

    def encode(self, windows, batch_size: int = 256) -> np.ndarray:
        """Embeddings, shape (n_windows, 32 * ceil(L/4)); a single window gives one row."""
        x = self._as_batch(windows)
        out = np.empty((x.shape[0], self.embedding_dim), dtype=self.dtype)
        for i in range(0, x.shape[0], batch_size):
            f = self.encoder.infer(x[i : i + batch_size])
            out[i : i + f.shape[0]] = f.reshape(f.shape[0], -1)
        return out

    def reconstruct(self, windows, batch_size: int = 256) -> np.ndarray:
        x = self._as_batch(windows)
        out = np.empty_like(x)
        for i in range(0, x.shape[0], batch_size):
            out[i : i + batch_size] = self.decoder.infer(self.encoder.infer(x[i : i + batch_size]))
        return out

    def reconstruction_errors(self, windows, batch_size: int = 256) -> np.ndarray:
        """Per-window MSE between window and reconstruction."""
        x = self._as_batch(windows)
        rec = self.reconstruct(x, batch_size)
        return np.mean((rec.astype(np.float64) - x) ** 2, axis=(1, 2))

    def loss(self, windows) -> float:
        x = self._as_batch(windows)
        return float(np.mean(self.reconstruction_errors(x)))


def encode(window, model: Autoencoder) -> np.ndarray:
    return model.encode(window)[0]


def reconstruct(window, model: Autoencoder) -> np.ndarray:
    return model.reconstruct(window)[0]


class TrainConfig(BaseModel):
    window_stride: int = Field(24, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    max_epochs: int = Field(40, ge=1)
    patience: int = Field(10, ge=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0


@dataclass
class TrainResult:
    model: Autoencoder
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def check_no_leak(scenarios: Sequence[Scenario]) -> None:
    bad = [s.id for s in scenarios if s.label != 0]
    if bad:
        raise LeakInTrainingDataError(
            f"training data must be leak-free; leak scenarios given: {', '.join(bad)}"
        )


def training_windows(
    scenarios: Sequence[Scenario], stats: NormStats | None, length: int, stride: int
) -> np.ndarray:
    """Subsampled (normalised) windows from no-leak scenarios, shape (n, K, L)."""
    check_no_leak(scenarios)
    if not scenarios:
        raise ValueError("no training scenarios")
    chunks = []
    for s in scenarios:
        series = normalize(s.pressures, stats) if stats is not None else s.pressures
        chunks.append(np.ascontiguousarray(sliding_windows(series, length, stride)))
    return np.concatenate(chunks, axis=0)


def fit_windows(
    model: Autoencoder,
    windows: np.ndarray,
    val_windows: np.ndarray | None,
    config: TrainConfig,
    max_steps: int | None = None,
) -> TrainResult:
    """Minibatch Adam on the reconstruction MSE with early stopping.

    Early stopping watches the validation loss (training loss when there is no
    validation set) once per epoch and restores the best parameters.
    """
    x = windows.astype(model.dtype, copy=False)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    opt = Adam(model.parameters(), lr=config.learning_rate)
    history: list[dict] = []
    best = math.inf
    best_params = [p.copy() for p in model.parameters()]
    best_epoch = 0
    stale = 0
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(x.shape[0])
        total = 0.0
        seen = 0
        for i in range(0, len(order), config.batch_size):
            batch = x[order[i : i + config.batch_size]]
            model.zero_grad()
            out = model.forward(batch)
            loss = mse_loss(out, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, step {steps}")
            g = model.decoder.backward(mse_loss_grad(out, batch))
            model.encoder.backward(g)
            opt.step(model.gradients())
            total += loss * batch.shape[0]
            seen += batch.shape[0]
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        train_loss = total / seen
        val_loss = model.loss(val_windows) if val_windows is not None and len(val_windows) else train_loss
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best:
            best, best_epoch, stale = val_loss, epoch, 0
            best_params = [p.copy() for p in model.parameters()]
        else:
            stale += 1
            if stale >= config.patience:
                break
        if max_steps is not None and steps >= max_steps:
            break
    for p, b in zip(model.parameters(), best_params):
        p[...] = b
    return TrainResult(model, history, best_epoch)


def train(
    scenarios: Sequence[Scenario],
    stats: NormStats | None,
    config: TrainConfig = TrainConfig(),
    window_length: int = 336,
) -> TrainResult:
    """Train a fresh autoencoder on no-leak scenarios (refuses leak-labelled ones)."""
    windows = training_windows(scenarios, stats, window_length, config.window_stride)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))
    order = rng.permutation(windows.shape[0])
    n_val = int(round(config.validation_fraction * windows.shape[0]))
    val = windows[np.sort(order[:n_val])] if n_val else None
    tr = windows[np.sort(order[n_val:])]
    model = Autoencoder(scenarios[0].n_nodes, window_length, seed=config.seed)
    initial = model.loss(val if val is not None else tr)
    result = fit_windows(model, tr, val, config)
    result.history.insert(0, {"epoch": 0, "train_loss": initial, "val_loss": initial})
    return result
