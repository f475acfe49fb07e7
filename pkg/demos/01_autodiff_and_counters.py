"""
Tape autodiff, precision modes and MAC counters
===============================================

Every kernel in ``gsdc.tensor`` records itself on the active graph.  This
walk-through builds a tiny computation, checks its gradient against
central differences, and shows how the MAC counters see each kernel.

Run with ``python3 demos/01_autodiff_and_counters.py``.
"""

import numpy as np

from gsdc import tensor as T
from gsdc.gradcheck import check_gradients

rng = np.random.default_rng(0)

# A graph decides precision: float32 by default, float64 when wide.
x = rng.normal(size=(6, 6, 2))
w = rng.normal(size=(3, 3, 2, 4))
for wide in (False, True):
    with T.Graph(wide=wide):
        y = T.conv2d(T.Tensor(x), T.Tensor(w), pad=1)
    print(f"wide={wide}: conv output {y.shape} {y.data.dtype}")

# Backprop through conv -> relu -> softmax, then the same thing numerically.
def loss(x, w):
    h = T.relu(T.conv2d(x, w, pad=1))
    return T.tsum(T.softmax(h, axis=-1) * np.arange(4.0))

print("max relative gradient error:", check_gradients(loss, [x, w]))

# Deformable sampling reads four taps per point; the counter tracks them.
grid = rng.normal(size=(8, 8, 16))
points = rng.uniform(0, 7, size=(32, 2))  # (x, y)
with T.count_macs() as c:
    T.bilinear_sample(grid, points)
    T.matmul(rng.normal(size=(32, 16)), rng.normal(size=(16, 16)))
print(f"MACs: {c['macs']}  (bilinear 4*32*16 = {4 * 32 * 16}, matmul 32*16*16 = {32 * 16 * 16})")
print(f"bilinear samples: {c['samples']}")

# Anything non-finite is an error rather than a silent NaN.
try:
    T.log(T.Tensor(np.array([0.0, 1.0])))
except T.NonFiniteError as e:
    print("caught:", e)
