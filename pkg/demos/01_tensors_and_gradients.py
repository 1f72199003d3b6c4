"""Taped reverse-mode autodiff in a few lines.

Operations executed inside a `recording()` block register backward rules;
`backward` replays the tape and fills `.grad` on every leaf that wants one.
`grad_check` compares any analytic gradient against central finite
differences, which is the oracle every layer in this library is held to.
"""

import numpy as np

from seistile.tensor import Tensor, backward, grad_check, matmul, mul, recording, relu, tensor_sum

# d/dx sum(x * x) = 2x
x = Tensor(np.array([1.0, 2.0, -3.0]), requires_grad=True)
with recording() as tape:
    loss = tensor_sum(mul(x, x))
backward(loss, tape)
print("x      =", x.data)
print("grad   =", x.grad, "(expect 2x)")

# a small graph: y = relu(x) @ w, loss = sum(y)
x = Tensor(np.array([[1.0, -1.0], [0.5, 2.0]]), requires_grad=True)
w = Tensor(np.array([[1.0, 0.0], [2.0, 1.0]]), requires_grad=True)
with recording() as tape:
    loss = tensor_sum(matmul(relu(x), w))
backward(loss, tape)
print("\ngraph grads:")
print("dL/dx  =\n", x.grad)
print("dL/dw  =\n", w.grad)

# the finite-difference oracle
err = grad_check(lambda t: tensor_sum(mul(t, t)), Tensor(np.random.default_rng(0).normal(size=8)))
print(f"\ngrad_check on sum(x^2): max relative error {err:.2e}")

err = grad_check(lambda t: tensor_sum(matmul(relu(t), w)), Tensor(x.data))
print(f"grad_check through relu+matmul: max relative error {err:.2e}")
