"""The differentiable core: tape, hand-derived backwards, finite differences.

Shows a few ops under grad_check, then demonstrates that the checker
actually catches a corrupted backward pass.
"""

import numpy as np

import uniview.tensor as T
from uniview.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

print("== gradient checks on individual ops ==")
x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
b = Tensor(rng.standard_normal(5), requires_grad=True)
print(f"  affine:     max rel err {grad_check(T.affine, [x, w, b]):.2e}")

fm = Tensor(rng.standard_normal((6, 6, 4)), requires_grad=True)
uv = Tensor(rng.uniform(0.12, 0.88, (50, 2)), requires_grad=True)
print(f"  bilinear:   max rel err {grad_check(T.bilinear_sample, [fm, uv]):.2e}")

gates = [Tensor(rng.standard_normal((2, 3)), requires_grad=True),
         Tensor(rng.standard_normal((2, 4)), requires_grad=True),
         Tensor(rng.standard_normal((2, 4)), requires_grad=True),
         Tensor(rng.standard_normal((7, 16)) * 0.4, requires_grad=True),
         Tensor(rng.standard_normal(16) * 0.1, requires_grad=True)]
fn = lambda *a: T.concat(list(T.lstm_cell(*a)), axis=-1)
print(f"  lstm_cell:  max rel err {grad_check(fn, gates):.2e}")

print("== fault injection: a deliberately wrong backward ==")


def broken_mse(pred):
    diff = pred.data - 1.0
    n = pred.size
    out = np.asarray((diff * diff).sum() / n)

    def bw(g):
        pred._accum(g * 2.2 * diff / n)  # 10% too large

    return T._node(out, (pred,), bw)


bad = Tensor(rng.standard_normal(8) + 2.0, requires_grad=True)
err = grad_check(broken_mse, [bad])
print(f"  corrupted backward reports max rel err {err:.2e} (clearly above any tolerance)")

print("== one Adam descent ==")
from uniview.optim import AdamState, ParamStore, adam_step

store = ParamStore()
p = store.add("x", np.array([3.0, -2.0]))
state = AdamState(store, lr=0.05)
for i in range(300):
    p.grad = 2.0 * p.data  # gradient of x^2
    adam_step(store, state)
print(f"  after 300 steps on f(x)=|x|^2: x = {np.round(p.data, 4)}")
