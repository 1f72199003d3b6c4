"""The convolutional building blocks and their defining identities.

Strided convolutions downsample with "half" padding (out = ceil(in/s));
transposed convolutions upsample to exactly in*s and are the linear adjoint
of the convolution sharing the same kernel. Residual units wrap two convs
with batch norm and a shortcut; transposed residual units mirror them for
the decoder.
"""

import numpy as np

from seistile.layers import batch_norm, conv2d, conv2d_transposed
from seistile.network import _residual_unit
from seistile.tensor import Tensor

rng = np.random.default_rng(0)

# shapes: 80x120 halves under stride 2, and a stride-2 transposed conv undoes it
x = Tensor(rng.normal(size=(1, 80, 120, 1)))
k = Tensor(rng.normal(size=(5, 5, 1, 8)))
y = conv2d(x, k, None, stride=2)
print("conv   1x80x120x1  ->", y.shape)

tk = Tensor(rng.normal(size=(5, 5, 4, 8)))  # Kh x Kw x Cout x Cin
z = conv2d_transposed(y, tk, None, stride=2)
print("tconv  1x40x60x8   ->", z.shape)

# the adjoint identity <conv(x), y> == <x, tconv(y)> with a shared kernel
a = rng.normal(size=(2, 6, 6, 3))
b = rng.normal(size=(2, 3, 3, 5))
shared = Tensor(rng.normal(size=(3, 3, 3, 5)))
lhs = (conv2d(Tensor(a), shared, None, 2).data * b).sum()
rhs = (a * conv2d_transposed(Tensor(b), shared, None, 2).data).sum()
print(f"adjoint identity: <Ax,y>={lhs:.12f}  <x,A'y>={rhs:.12f}  gap={abs(lhs-rhs):.2e}")

# batch norm: train mode zero-centers and unit-scales each channel
feats = Tensor(rng.uniform(-3, 7, size=(4, 8, 8, 2)))
gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
out = batch_norm(feats, gamma, beta, np.zeros(2), np.ones(2), train=True)
print("batch norm channel means:", out.data.mean(axis=(0, 1, 2)).round(12))
print("batch norm channel vars: ", out.data.var(axis=(0, 1, 2)).round(6))

# a residual unit degenerates to ReLU when its body is zeroed
unit = _residual_unit(rng, cin=3, cout=3, stride=1, k=3, dtype=np.float64, transposed=False)
unit.conv2.kernel.data[:] = 0.0
inp = Tensor(rng.normal(size=(1, 6, 6, 3)))
print("zero-body unit == relu(x):",
      np.array_equal(unit.forward(inp, train=True).data, np.maximum(inp.data, 0)))

# a strided unit and its transposed mirror restore the original extent
down = _residual_unit(rng, 1, 6, 2, 3, np.float64, transposed=False)
up = _residual_unit(rng, 6, 1, 2, 3, np.float64, transposed=True)
img = Tensor(rng.normal(size=(1, 80, 120, 1)))
restored = up.forward(down.forward(img, True), True)
print("ru s2 -> tru s2 on 80x120:", restored.shape)
