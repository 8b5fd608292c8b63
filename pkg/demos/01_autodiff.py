"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a tiny graph, run backward, and compare against central differences.
"""

import numpy as np

from droppos import tensor as T
from droppos.tensor import Tensor, backward, grad_check

# a leaf that wants gradients
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = T.square(x).sum()
backward(loss)
print("d/dx sum(x^2) at", x.data, "=", x.grad)

# softmax cross-entropy on two equal logits pushes them apart by 0.5 each
logits = Tensor([[0.0, 0.0]], requires_grad=True)
backward(T.cross_entropy(logits, np.array([0])))
print("CE gradient:", logits.grad)

# every op is checked against finite differences the same way
rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(4, 3)))
gain, bias = Tensor(np.ones(3)), Tensor(np.zeros(3))


def f(a):
    h = T.layer_norm(T.gelu(a @ w), gain, bias)
    return (T.softmax(h) * h).mean()


err = grad_check(f, Tensor(rng.uniform(-1, 1, size=(2, 4))), h=1e-3)
print(f"max relative error, 64-bit: {err:.2e}")
