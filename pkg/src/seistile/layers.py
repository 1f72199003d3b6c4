"""Network building blocks: convolution, transposed convolution, batch
normalization, residual and transposed residual units, and the pixel-wise
softmax cross-entropy loss.

Geometry follows the "half" padding scheme throughout: a stride-s
convolution maps H to ceil(H/s) with total padding
max((out-1)*s + k - in, 0), split floor(total/2) before and the remainder
after. A stride-s transposed convolution maps H to exactly H*s and is the
linear adjoint of the convolution with the same kernel and geometry.

Kernel storage is Kh x Kw x A x B. A forward convolution reads A as its
input channels and B as its output channels; a transposed convolution
sharing the same array maps B channels back to A, which is exactly what
makes <conv(x), y> == <x, tconv(y)> hold.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError, LabelError
from .tensor import Tensor, add, record_op, relu

__all__ = [
    "half_padding",
    "conv_out_size",
    "conv2d",
    "conv2d_transposed",
    "batch_norm",
    "softmax_cross_entropy",
    "Conv2D",
    "TransposedConv2D",
    "BatchNorm2D",
    "ResidualUnit",
    "TransposedResidualUnit",
]


def conv_out_size(in_size: int, stride: int) -> int:
    return -(-in_size // stride)  # ceil division


def half_padding(in_size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding so that out == ceil(in/stride)."""
    out = conv_out_size(in_size, stride)
    total = max((out - 1) * stride + kernel - in_size, 0)
    before = total // 2
    return before, total - before


def _pad_nhwc(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int]) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, hout: int, wout: int) -> np.ndarray:
    # [N, H', W', C, Kh, Kw] view over the padded input, subsampled by stride
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :hout, :wout]


def _conv2d_raw(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    n, h, w, cin = x.shape
    kh, kw = kernel.shape[:2]
    hout, wout = conv_out_size(h, stride), conv_out_size(w, stride)
    xp = _pad_nhwc(x, half_padding(h, kh, stride), half_padding(w, kw, stride))
    win = _windows(xp, kh, kw, stride, hout, wout)
    # contract over (C, Kh, Kw) against kernel axes (2, 0, 1)
    return np.tensordot(win, kernel, axes=([3, 4, 5], [2, 0, 1]))


def _conv2d_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    n, h, w, cin = x.shape
    hout, wout = g.shape[1], g.shape[2]
    xp = _pad_nhwc(x, half_padding(h, kh, stride), half_padding(w, kw, stride))
    win = _windows(xp, kh, kw, stride, hout, wout)
    kg = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # [C, Kh, Kw, Cout]
    return kg.transpose(1, 2, 0, 3)


def _conv2d_scatter(g: np.ndarray, kernel: np.ndarray, stride: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _conv2d_raw: scatter g back onto an H x W input plane."""
    n, hout, wout, cout = g.shape
    kh, kw = kernel.shape[:2]
    (pht, phb), (pwl, pwr) = half_padding(h, kh, stride), half_padding(w, kw, stride)
    out = np.zeros((n, h + pht + phb, w + pwl + pwr, kernel.shape[2]), dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = g @ kernel[u, v].T  # [N, H', W', Cin]
            out[:, u : u + hout * stride : stride, v : v + wout * stride : stride] += patch
    return out[:, pht : pht + h, pwl : pwl + w]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1) -> Tensor:
    """Strided 2-D convolution, N x H x W x Cin -> N x ceil(H/s) x ceil(W/s) x Cout."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be KhKwCinCout, got shape {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise DimensionError(
            f"conv2d: input has {x.shape[3]} channels but kernel expects {kernel.shape[2]}"
        )
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[3]},)")

    y = _conv2d_raw(x.data, kernel.data, stride)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    kh, kw = kernel.shape[:2]
    h, w = x.shape[1], x.shape[2]

    def backward_fn(g):
        gx = _conv2d_scatter(g, kernel.data, stride, h, w) if x.requires_grad else None
        gk = _conv2d_kernel_grad(x.data, g, stride, kh, kw) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record_op(out, inputs, backward_fn)


def conv2d_transposed(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1) -> Tensor:
    """Transposed convolution, N x H x W x Cin -> N x H*s x W*s x Cout.

    With kernel storage Kh x Kw x Cout x Cin this is the exact adjoint of
    ``conv2d`` run with the same array and stride.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d_transposed expects NHWC input, got shape {x.shape}")
    if x.shape[3] != kernel.shape[3]:
        raise DimensionError(
            f"conv2d_transposed: input has {x.shape[3]} channels but kernel expects {kernel.shape[3]}"
        )
    cout = kernel.shape[2]
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d_transposed: bias shape {bias.shape} != ({cout},)")

    n, h, w, _ = x.shape
    hf, wf = h * stride, w * stride  # fine-side output dims
    y = _conv2d_scatter(x.data, kernel.data, stride, hf, wf)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def backward_fn(g):
        gx = _conv2d_raw(g, kernel.data, stride) if x.requires_grad else None
        gk = _conv2d_kernel_grad(g, x.data, stride, kernel.shape[0], kernel.shape[1]) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record_op(out, inputs, backward_fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.997,
    train: bool = True,
) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with (biased) batch statistics and updates the
    running arrays in place: running <- momentum*running + (1-momentum)*batch.
    Infer mode normalizes with the running statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects NHWC input, got shape {x.shape}")
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},)")

    if train:
        m = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]
        if m < 2:
            raise DegenerateBatchError(
                f"batch_norm train mode needs >= 2 elements per channel, got {m}"
            )
        mean = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
        m = None

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def backward_fn(g):
        gbeta = g.sum(axis=(0, 1, 2)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if train:
                # batch statistics depend on x
                s1 = gxhat.sum(axis=(0, 1, 2))
                s2 = (gxhat * xhat).sum(axis=(0, 1, 2))
                gx = (inv_std / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return record_op(out, (x, gamma, beta), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[label].

    ``logits`` is N x H x W x C, ``labels`` an integer N x H x W array with
    values in [0, C-1].
    """
    if logits.data.ndim != 4:
        raise DimensionError(f"softmax_cross_entropy expects NHWC logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:3]:
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != {logits.shape[:3]}"
        )
    num_classes = logits.shape[3]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = np.argwhere((labels < 0) | (labels >= num_classes))[0]
        value = labels[tuple(bad)]
        raise LabelError(
            f"label {value} at position {tuple(int(i) for i in bad)} outside [0, {num_classes - 1}]"
        )

    z = logits.data - logits.data.max(axis=3, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=3, keepdims=True))
    picked = np.take_along_axis(log_probs, labels[..., None].astype(np.int64), axis=3)
    m = labels.size
    out = Tensor(np.asarray(-picked.sum() / m, dtype=logits.data.dtype))

    def backward_fn(g):
        if not logits.requires_grad:
            return (None,)
        probs = np.exp(log_probs)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=3)
        return ((probs - onehot) * (float(g) / m),)

    return record_op(out, (logits,), backward_fn)


# --------------------------------------------------------------------------
# Parameter containers


def _bn_arrays(channels: int, dtype) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    return gamma, beta, np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype)


class BatchNorm2D:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.997, dtype=np.float64):
        if eps <= 0:
            raise ContractError("eps must be positive")
        if not 0.0 < momentum < 1.0:
            raise ContractError("momentum must lie in (0, 1)")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma, self.beta, self.running_mean, self.running_var = _bn_arrays(channels, dtype)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, train=train,
        )

    def parameters(self):
        return [("gamma", self.gamma, False), ("beta", self.beta, False)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Conv2D:
    """Convolution parameters; kernel Kh x Kw x Cin x Cout, bias Cout."""

    def __init__(self, kernel: Tensor, bias: Tensor, stride: int = 1):
        if stride < 1:
            raise ContractError("stride must be >= 1")
        self.kernel = kernel
        self.bias = bias
        self.stride = stride

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride)

    def parameters(self):
        return [("kernel", self.kernel, True), ("bias", self.bias, False)]


class TransposedConv2D:
    """Transposed convolution; kernel Kh x Kw x Cout x Cin, bias Cout."""

    def __init__(self, kernel: Tensor, bias: Tensor, stride: int = 1):
        if stride < 1:
            raise ContractError("stride must be >= 1")
        self.kernel = kernel
        self.bias = bias
        self.stride = stride

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[3]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_transposed(x, self.kernel, self.bias, self.stride)

    def parameters(self):
        return [("kernel", self.kernel, True), ("bias", self.bias, False)]


def _unit_shapes(transposed: bool, in_ch: int, out_ch: int, k: int) -> dict[str, tuple[int, ...]]:
    """Kernel shapes for a residual/transposed-residual unit's three convs."""
    if transposed:
        return {
            "conv1": (k, k, out_ch, in_ch),
            "conv2": (k, k, out_ch, out_ch),
            "shortcut": (1, 1, out_ch, in_ch),
        }
    return {
        "conv1": (k, k, in_ch, out_ch),
        "conv2": (k, k, out_ch, out_ch),
        "shortcut": (1, 1, in_ch, out_ch),
    }


class _ResidualBase:
    """y = ReLU(h(x) + F(x)) with F = conv(k,s) -> BN -> ReLU -> conv(k,1) -> BN.

    h is the identity when the unit changes neither resolution nor channel
    count, otherwise a 1x1 projection with the unit's stride (no BN).
    """

    transposed = False

    def __init__(self, conv1, bn1, conv2, bn2, shortcut, stride: int):
        self.conv1 = conv1
        self.bn1 = bn1
        self.conv2 = conv2
        self.bn2 = bn2
        self.shortcut = shortcut  # None means identity
        self.stride = stride

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    def forward(self, x: Tensor, train: bool) -> Tensor:
        f = self.conv1.forward(x)
        f = self.bn1.forward(f, train)
        f = relu(f)
        f = self.conv2.forward(f)
        f = self.bn2.forward(f, train)
        h = x if self.shortcut is None else self.shortcut.forward(x)
        if h.shape != f.shape:
            raise DimensionError(
                f"residual unit: main path {f.shape} and shortcut {h.shape} disagree"
            )
        return relu(add(h, f))

    def parameters(self):
        named = []
        for prefix, part in (
            ("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2),
        ):
            named.extend((f"{prefix}.{n}", t, d) for n, t, d in part.parameters())
        if self.shortcut is not None:
            named.extend((f"shortcut.{n}", t, d) for n, t, d in self.shortcut.parameters())
        return named

    def buffers(self):
        out = [("bn1." + n, a) for n, a in self.bn1.buffers()]
        out += [("bn2." + n, a) for n, a in self.bn2.buffers()]
        return out


class ResidualUnit(_ResidualBase):
    transposed = False


class TransposedResidualUnit(_ResidualBase):
    """The residual unit with every convolution transposed; a stride-s unit
    upsamples H x W to H*s x W*s."""

    transposed = True
