"""
The numerics underneath
=======================

Small tour of the tape-based autodiff and the optimizers the model uses.
"""
import numpy as np

from denomae.numerics import Parameter, Tape, adam_step, gradient_check, ops

# record a few ops, then walk the tape backwards
w = Parameter(np.array([[1.0, -2.0], [0.5, 3.0]]), name="w")
x = np.array([[1.0, 2.0]])
with Tape() as tape:
    y = ops.gelu(ops.matmul(x, w))
    loss = ops.sum_(ops.mul(y, y))
tape.backward(loss)
print("loss", float(loss.data))
print("dloss/dw\n", w.grad)

# central differences agree with the tape
report = gradient_check(lambda: ops.sum_(ops.mul(ops.gelu(ops.matmul(x, w)), ops.gelu(ops.matmul(x, w)))), {"w": w})
print("gradient check max relative error", f"{report.max_error:.2e}", "passed" if report.passed else "FAILED")

# Adam on x^2 from x=1: the step size stays near lr until x gets close to zero
p = Parameter(np.array([1.0]), name="x")
for step in range(1, 201):
    with Tape() as tape:
        f = ops.mul(p, p)
    p.zero_grad()
    tape.backward(f)
    adam_step([p], lr=0.01)
    if step in (1, 10, 50, 100, 200):
        print(f"step {step:3d}  x = {float(p.data[0]): .6f}")
