"""Model construction: Xavier initialization and topology instantiation."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .errors import ContractError
from .tensor import Tensor, relu
from .topology import TopologySpec, render_topology

__all__ = ["xavier_init", "Model", "build_model"]


def xavier_init(shape, seed_or_rng) -> Tensor:
    """Uniform Xavier draw for a rank-4 kernel.

    Bound L = sqrt(6 / (fan_in + fan_out)) with fan_in = Kh*Kw*Cin and
    fan_out = Kh*Kw*Cout. Values are drawn in float64 so a given seed yields
    the same numbers regardless of the model's storage dtype.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ContractError(f"xavier_init expects a rank-4 kernel shape, got {shape}")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    kh, kw, a, b = shape
    limit = np.sqrt(6.0 / (kh * kw * a + kh * kw * b))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _conv(rng, k, cin, cout, stride, dtype) -> L.Conv2D:
    kernel = xavier_init((k, k, cin, cout), rng)
    kernel.data = kernel.data.astype(dtype)
    bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return L.Conv2D(kernel, bias, stride)


def _tconv(rng, k, cin, cout, stride, dtype) -> L.TransposedConv2D:
    # transposed kernels store [Kh, Kw, Cout, Cin]
    kernel = xavier_init((k, k, cout, cin), rng)
    kernel.data = kernel.data.astype(dtype)
    bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return L.TransposedConv2D(kernel, bias, stride)


def _residual_unit(rng, cin, cout, stride, k, dtype, transposed: bool,
                   bn_eps: float = 1e-5, bn_momentum: float = 0.997):
    make = _tconv if transposed else _conv
    conv1 = make(rng, k, cin, cout, stride, dtype)
    conv2 = make(rng, k, cout, cout, 1, dtype)
    bn1 = L.BatchNorm2D(cout, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
    bn2 = L.BatchNorm2D(cout, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = make(rng, 1, cin, cout, stride, dtype)
    cls = L.TransposedResidualUnit if transposed else L.ResidualUnit
    return cls(conv1, bn1, conv2, bn2, shortcut, stride)


class _ConvBlock:
    """conv (or tconv) -> BN -> ReLU, the expansion of plain c/tc tokens."""

    def __init__(self, conv, bn):
        self.conv = conv
        self.bn = bn

    def forward(self, x, train):
        return relu(self.bn.forward(self.conv.forward(x), train))

    def parameters(self):
        named = [("conv." + n, t, d) for n, t, d in self.conv.parameters()]
        named += [("bn." + n, t, d) for n, t, d in self.bn.parameters()]
        return named

    def buffers(self):
        return [("bn." + n, a) for n, a in self.bn.buffers()]


class _Classifier:
    def __init__(self, conv):
        self.conv = conv

    def forward(self, x, train):
        return self.conv.forward(x)

    def parameters(self):
        return [("conv." + n, t, d) for n, t, d in self.conv.parameters()]

    def buffers(self):
        return []


class Model:
    """A sequential stack instantiated from a TopologySpec."""

    def __init__(self, spec: TopologySpec, blocks, dtype):
        self.spec = spec
        self.blocks = blocks
        self.dtype = dtype

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, train)
        return x

    def parameters(self) -> list[tuple[str, Tensor, bool]]:
        """(name, tensor, weight_decay_eligible) for every learnable tensor.

        Only convolution kernels are decay-eligible; biases and batch-norm
        affine parameters are excluded.
        """
        named = []
        for i, block in enumerate(self.blocks):
            named.extend((f"layer{i}.{n}", t, d) for n, t, d in block.parameters())
        return named

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        named = []
        for i, block in enumerate(self.blocks):
            named.extend((f"layer{i}.{n}", a) for n, a in block.buffers())
        return named

    def zero_grads(self) -> None:
        for _, t, _ in self.parameters():
            t.zero_grad()

    def topology_text(self) -> str:
        return render_topology(self.spec)


def build_model(spec: TopologySpec, seed: int, dtype=np.float64,
                bn_eps: float = 1e-5, bn_momentum: float = 0.997) -> Model:
    """Instantiate a topology with Xavier kernels and zero biases.

    Construction is pure in (spec, seed): the same pair always yields
    bitwise-identical parameters for a given dtype. ``bn_momentum`` is the
    running-statistics decay; the 0.997 default suits long runs, short
    desk-scale runs want a smaller value so inference statistics warm up.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    def bn(c):
        return L.BatchNorm2D(c, eps=bn_eps, momentum=bn_momentum, dtype=dtype)

    blocks = []
    cin = spec.input_channels
    for layer in spec.layers:
        n, k, s = layer.channels, layer.kernel, layer.stride
        if layer.kind == "conv":
            blocks.append(_ConvBlock(_conv(rng, k, cin, n, s, dtype), bn(n)))
        elif layer.kind == "tconv":
            blocks.append(_ConvBlock(_tconv(rng, k, cin, n, s, dtype), bn(n)))
        elif layer.kind == "ru":
            blocks.append(_residual_unit(rng, cin, n, s, k, dtype, False, bn_eps, bn_momentum))
        elif layer.kind == "tru":
            blocks.append(_residual_unit(rng, cin, n, s, k, dtype, True, bn_eps, bn_momentum))
        else:
            blocks.append(_Classifier(_conv(rng, 1, cin, n, 1, dtype)))
        cin = n
    return Model(spec, blocks, dtype)
