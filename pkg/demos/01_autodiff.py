"""
The autodiff core
=================

Everything in the package is built on a small reverse-mode Tensor.  This walks
through a forward pass, a backward pass and a finite-difference check.
"""
import numpy as np

from fusionret import compute as C

rng = np.random.default_rng(0)

# A tiny two-layer network on four inputs.
x = C.Tensor(rng.standard_normal((4, 3)))
w1 = C.Tensor(rng.standard_normal((3, 5)) * 0.5, requires_grad=True)
w2 = C.Tensor(rng.standard_normal((5, 2)) * 0.5, requires_grad=True)

out = C.gelu(x @ w1) @ w2
loss = C.mean(out * out)
loss.backward()
print("loss", float(loss.data))
print("dL/dw2\n", w2.grad)

# Tensors default to float32.  Gradient checks run in float64.
with C.precision(np.float64):
    report = C.check_gradients(lambda a, b: C.gelu(x @ a) @ b, [w1, w2])
print("relative errors per input:", [f"{e:.1e}" for e in report["errors"]])

# Attention with a key mask: masked keys get zero weight.
q = C.Tensor(rng.standard_normal((1, 2, 4)))
k = C.Tensor(rng.standard_normal((1, 3, 4)))
v = C.Tensor(np.eye(3, 4)[None])
mask = np.array([[[True, True, False]]])
print("attention output (third key masked)\n", C.scaled_dot_attention(q, k, v, mask=mask).data)

# Forward ops refuse to produce non-finite values.
try:
    with np.errstate(invalid="ignore"):
        C.log(C.Tensor([-1.0]))
except FloatingPointError as err:
    print("caught:", err)
