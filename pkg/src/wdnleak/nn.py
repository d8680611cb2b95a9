"""Small numpy neural-network kernels with hand-written reverse-mode gradients.

Only what the leak-detection autoencoder needs: 1D convolution, 1D transposed
convolution, ReLU, MSE loss and an Adam optimizer. Tensors are plain numpy
arrays shaped ``(batch, channels, length)``.

Every layer caches what it needs during ``forward`` and returns the gradient
with respect to its input from ``backward``, accumulating parameter gradients
on the way. :class:`Sequential` keeps the tape of layers that ran, so calling
``backward`` without a recorded forward pass is an error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


class GraphError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


@dataclass
class ConvLayerParams:
    """Weights of a 1D (transposed) convolution.

    ``weight`` is always ``(out_channels, in_channels, kernel_size)`` where
    ``out_channels`` are the channels the layer produces, for both the plain
    and the transposed flavour.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weight.ndim != 3:
            raise ShapeError(f"weight must be 3-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be nonnegative")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv_transposed_output_length(
    length: int, kernel: int, stride: int, padding: int, output_padding: int = 0
) -> int:
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def _check_input(x: np.ndarray, params: ConvLayerParams) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected (batch, channels, length) input, got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, layer expects {params.in_channels}"
        )


# Internally the kernels work on channel-major (C, B, T) buffers so that each
# layer is a single large matrix product; results are handed back as (B, C, T)
# views of that memory.


def _channel_major(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2))


def _gather_taps(signal: np.ndarray, kernel: int, stride: int, count: int) -> np.ndarray:
    """(C, k, B, count) array with ``[c, j, b, t] = signal[c, b, t*stride + j]``.

    ``signal`` is channel-major (C, B, T).
    """
    c, b, _ = signal.shape
    out = np.empty((c, kernel, b, count), dtype=signal.dtype)
    span = stride * (count - 1) + 1
    for j in range(kernel):
        out[:, j] = signal[:, :, j : j + span : stride]
    return out


def _scatter_taps(cols: np.ndarray, out_len: int, stride: int) -> np.ndarray:
    """Overlap-add ``cols`` (C, k, B, T) into a channel-major (C, B, out_len) signal.

    Tap ``j`` of position ``t`` lands at index ``t * stride + j``.
    """
    c, k, b, t = cols.shape
    out = np.zeros((c, b, out_len), dtype=cols.dtype)
    span = stride * (t - 1) + 1
    for j in range(k):
        out[:, :, j : j + span : stride] += cols[:, j]
    return out


def _pad_time(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x


def _conv_cols(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """im2col matrix (in_channels * k, B * L_out) of a (B, C, L) input."""
    k, s, p = params.kernel_size, params.stride, params.padding
    out_len = conv_output_length(x.shape[2], k, s, p)
    if out_len < 1:
        raise ShapeError(f"input length {x.shape[2]} too short for kernel {k}")
    xpad = _pad_time(_channel_major(x), p)
    return _gather_taps(xpad, k, s, out_len).reshape(-1, x.shape[0] * out_len), out_len


def conv1d_forward(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Cross-correlation with stride and symmetric zero padding."""
    _check_input(x, params)
    cols, out_len = _conv_cols(x, params)
    return _conv_from_cols(cols, params, x.shape[0], out_len)


def _conv_from_cols(cols: np.ndarray, params: ConvLayerParams, batch: int, out_len: int) -> np.ndarray:
    w = params.weight.reshape(params.out_channels, -1)
    y = w @ cols + params.bias[:, None]
    return y.reshape(params.out_channels, batch, out_len).transpose(1, 0, 2)


def _transposed_weight(weight: np.ndarray) -> np.ndarray:
    """(O, I, k) -> (O*k, I) with row ``o*k + j`` holding ``weight[o, :, j]``."""
    o, i, k = weight.shape
    return np.ascontiguousarray(weight.transpose(0, 2, 1)).reshape(o * k, i)


def conv1d_transposed_forward(
    x: np.ndarray, params: ConvLayerParams, output_padding: int = 0
) -> np.ndarray:
    """Gradient-of-convolution ("deconvolution") with cropping and output padding."""
    _check_input(x, params)
    k, s, p = params.kernel_size, params.stride, params.padding
    if output_padding < 0 or (output_padding and output_padding >= s):
        raise ValueError("output_padding must be smaller than the stride")
    b, n_in, length = x.shape
    out_len = conv_transposed_output_length(length, k, s, p, output_padding)
    if out_len < 1:
        raise ShapeError("transposed convolution would produce an empty output")
    full_len = (length - 1) * s + k + output_padding
    x2 = _channel_major(x).reshape(n_in, b * length)
    cols = (_transposed_weight(params.weight) @ x2).reshape(params.out_channels, k, b, length)
    full = _scatter_taps(cols, full_len, s)
    y = full[:, :, p : p + out_len] + params.bias[:, None, None]
    return y.transpose(1, 0, 2)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> float:
    """Mean of squared differences over all elements."""
    if prediction.shape != target.shape:
        raise ShapeError(f"shape mismatch {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return float(np.mean(diff * diff))


def mse_loss_grad(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    if prediction.shape != target.shape:
        raise ShapeError(f"shape mismatch {prediction.shape} vs {target.shape}")
    return 2.0 * (prediction - target) / prediction.size


class Layer:
    """Base class: ``forward`` caches, ``backward`` returns the input gradient."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without caching anything; safe on shared, read-only layers."""
        raise NotImplementedError

    def parameters(self) -> list[np.ndarray]:
        return []

    def gradients(self) -> list[np.ndarray]:
        return []

    def zero_grad(self) -> None:
        for g in self.gradients():
            g[...] = 0.0

    def __getstate__(self) -> dict:
        # forward caches are scratch space; never ship them to worker processes
        state = self.__dict__.copy()
        for key in ("_x", "_cols", "_mask"):
            if key in state:
                state[key] = None
        if "_tape" in state:
            state["_tape"] = []
        return state


def _uniform_init(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype
) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _ConvBase(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 7,
        stride: int = 1,
        padding: int = 3,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size
        self.params = ConvLayerParams(
            weight=_uniform_init((out_channels, in_channels, kernel_size), fan_in, rng, dtype),
            bias=_uniform_init((out_channels,), fan_in, rng, dtype),
            stride=stride,
            padding=padding,
        )
        self.grad_weight = np.zeros_like(self.params.weight)
        self.grad_bias = np.zeros_like(self.params.bias)
        self._x: np.ndarray | None = None
        self._cols: np.ndarray | None = None

    def parameters(self) -> list[np.ndarray]:
        return [self.params.weight, self.params.bias]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    def _cached_input(self) -> np.ndarray:
        if self._x is None:
            raise GraphError(f"{type(self).__name__}.backward called before forward")
        return self._x


class Conv1d(_ConvBase):
    def infer(self, x: np.ndarray) -> np.ndarray:
        return conv1d_forward(x, self.params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_input(x, self.params)
        cols, out_len = _conv_cols(x, self.params)
        self._x = x
        self._cols = cols
        return _conv_from_cols(cols, self.params, x.shape[0], out_len)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._cached_input()
        k, s, p = self.params.kernel_size, self.params.stride, self.params.padding
        b, n_in, length = x.shape
        out_len = grad.shape[2]
        g = _channel_major(grad).reshape(self.params.out_channels, b * out_len)
        self.grad_weight += (g @ self._cols.T).reshape(self.params.weight.shape)
        self.grad_bias += g.sum(axis=1)
        w = self.params.weight.reshape(self.params.out_channels, -1)
        dcols = (w.T @ g).reshape(n_in, k, b, out_len)
        dxpad = _scatter_taps(dcols, length + 2 * p, s)
        return dxpad[:, :, p : p + length].transpose(1, 0, 2)


class ConvTranspose1d(_ConvBase):
    def __init__(self, *args, output_padding: int = 0, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.output_padding = output_padding

    def infer(self, x: np.ndarray) -> np.ndarray:
        return conv1d_transposed_forward(x, self.params, self.output_padding)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return self.infer(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._cached_input()
        k, s, p = self.params.kernel_size, self.params.stride, self.params.padding
        b, n_in, length = x.shape
        n_out = self.params.out_channels
        full_len = (length - 1) * s + k + self.output_padding
        gfull = np.zeros((n_out, b, full_len), dtype=grad.dtype)
        gfull[:, :, p : p + grad.shape[2]] = grad.transpose(1, 0, 2)
        cols = _gather_taps(gfull, k, s, length).reshape(n_out * k, b * length)
        x2 = _channel_major(x).reshape(n_in, b * length)
        dwt = cols @ x2.T  # (O*k, I)
        self.grad_weight += dwt.reshape(n_out, k, n_in).transpose(0, 2, 1)
        self.grad_bias += grad.sum(axis=(0, 2))
        dx = _transposed_weight(self.params.weight).T @ cols
        return dx.reshape(n_in, b, length).transpose(1, 0, 2)


class ReLU(Layer):
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def infer(self, x: np.ndarray) -> np.ndarray:
        return np.where(x > 0, x, 0.0).astype(x.dtype, copy=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise GraphError("ReLU.backward called before forward")
        return np.where(self._mask, grad, 0.0).astype(grad.dtype, copy=False)


class Sequential(Layer):
    """Chain of layers; the forward pass doubles as the backward tape."""

    def __init__(self, *layers: Layer) -> None:
        self.layers = list(layers)
        self._tape: list[Layer] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._tape = []
        for layer in self.layers:
            x = layer.forward(x)
            self._tape.append(layer)
        return x

    def infer(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.infer(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if not self._tape:
            raise GraphError("backward called without a recorded forward pass")
        for layer in reversed(self._tape):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.gradients()]


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adaptive-moment optimizer.

    With gradient ``g`` at step ``t``::

        m <- beta1 * m + (1 - beta1) * g
        v <- beta2 * v + (1 - beta2) * g**2
        w <- w - lr * (m / (1 - beta1**t)) / (sqrt(v / (1 - beta2**t)) + eps)

    No weight decay is applied. Parameters are updated in place.
    """

    def __init__(
        self,
        params: list[np.ndarray],
        lr: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params]
        )

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameter list")
        for i, g in enumerate(grads):
            if g.shape != self.params[i].shape:
                raise ShapeError(f"gradient {i} has shape {g.shape}, expected {self.params[i].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.count_nonzero(~np.isfinite(g)))
                raise NonFiniteGradientError(
                    f"parameter {i} (shape {g.shape}) has {bad} non-finite gradient entries "
                    f"at step {self.state.step + 1}"
                )
        st = self.state
        st.step += 1
        c1 = 1.0 - self.beta1**st.step
        c2 = 1.0 - self.beta2**st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
