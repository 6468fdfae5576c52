"""Reverse-mode gradients on capsule operations, checked against central differences.

Every layer of the model is built from a handful of tape operations.  Here we
push a few of them through ``backward`` and compare with the numeric oracle in
``ctlmtnet.gradcheck``.  Run with ``python3 demos/01_autodiff_and_gradient_checks.py``.
"""

import numpy as np

from ctlmtnet import ops
from ctlmtnet.gradcheck import finite_diff_gradient, gradient_errors
from ctlmtnet.losses import margin_loss
from ctlmtnet.model import capsule_self_attention, dynamic_routing
from ctlmtnet.tensor import Tensor, backward

rng = np.random.default_rng(0)

# a scalar read-out w makes the check sensitive to every output entry
caps = rng.standard_normal((1, 6, 4)) * 0.5
proj = [rng.standard_normal((4, 4)) * 0.5 for _ in range(3)]
transforms = rng.standard_normal((3, 3, 5, 4)) * 0.5
w_att = rng.standard_normal((1, 6, 4))
w_route = rng.standard_normal((1, 3, 5))

functions = {
    "squash": (lambda x: (ops.squash(x) * w_att).sum(), caps),
    "self-attention": (lambda x: (capsule_self_attention(x, proj) * w_att).sum(), caps),
    "routing (3 iterations)": (lambda x: (dynamic_routing(ops.squash(x), transforms) * w_route).sum(), caps),
    "margin loss": (lambda x: margin_loss(x, [1, 0, 2, 1, 5, 3]), rng.standard_normal((6, 6, 4)) * 0.3),
}

print(f"{'operation':<24} {'max rel err':>12} {'max abs err':>12}")
for name, (f, x0) in functions.items():
    x = Tensor(x0, requires_grad=True)
    backward(f(x))
    numeric = finite_diff_gradient(f, x0)
    rel, absolute = gradient_errors(x.grad, numeric)
    print(f"{name:<24} {rel:12.2e} {absolute:12.2e}")

# The gradient reversal layer is the identity going forward and flips the sign
# (scaled by lambda) going back, so one backward pass serves both players.
x = Tensor(rng.standard_normal(5), requires_grad=True)
y = ops.grl(x, 0.5)
backward((y * np.arange(5.0)).sum())
print("\nGRL forward equals input:", np.array_equal(y.data, x.data))
print("GRL gradient:", x.grad, "(expected -0.5 * [0 1 2 3 4])")
