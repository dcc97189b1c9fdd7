"""Reverse-mode autodiff on float64 tensors, checked against central differences.

Run: python3 demos/01_autodiff_and_gradcheck.py
"""
import numpy as np

from spmamba import tensor as T
from spmamba.blocks import RGBlock
from spmamba.gradcheck import grad_check
from spmamba.tensor import Tensor

rng = np.random.default_rng(0)

# A two-op chain: silu(x @ W^T + b), reduced to a scalar.
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
b = Tensor(rng.normal(size=5), requires_grad=True)
loss = T.silu(T.linear(x, w, b)).sum()
loss.backward()
print(f"loss = {loss.item():.6f}")
print("dloss/db =", np.round(b.grad, 4))

# grad_check perturbs every coordinate by +-h and compares with backprop.
report = grad_check(lambda: T.silu(T.linear(x, w, b)).sum(), [x, w, b], h=1e-5, tol=1e-6)
print("two-op chain:", report)

# Every block carries a named fault point.  Doubling its backward pass must be caught.
block = RGBlock(4, rng)
inp = Tensor(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
weights = rng.normal(size=(1, 4, 5, 5))


def f():
    return (block(inp) * weights).sum()


print("rg block, clean:        ", grad_check(f, [inp] + block.parameters(), max_coords=200))
with T.inject_faults(["rg"]):
    print("rg block, doubled grads:", grad_check(f, [inp] + block.parameters(), max_coords=200))
