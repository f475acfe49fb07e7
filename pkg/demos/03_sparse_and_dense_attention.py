"""
Deformable sampling as a sparse attention matrix, and candidate windows
=======================================================================

Each query of the deformable branch reads N_s bilinear samples.  When the
offsets are whole numbers every sample hits one token, so the branch is
exactly a dense attention whose matrix has N_s nonzeros per row.  The
dense branch then spends full window attention only on the TopK super
tokens picked by the dynamic mask.

Run with ``python3 demos/03_sparse_and_dense_attention.py``.
"""

import numpy as np

from gsdc import tensor as T
from gsdc.deform import SampleField, deform_attend, token_grid
from gsdc.supermask import block_max, covering_proportion, topk_candidates

rng = np.random.default_rng(1)

# 1. sparse sampling == masked dense attention on an 8x8 grid
values = rng.normal(size=(8, 8, 4))
ref = token_grid(8, 8)
offsets = rng.integers(-2, 3, size=(64, 4, 2)).astype(float)
w = rng.uniform(size=(64, 4, 1))
w /= w.sum(1, keepdims=True)

A = np.zeros((64, 64))
for q in range(64):
    for s in range(4):
        x, y = ref[q] + offsets[q, s]
        if 0 <= x < 8 and 0 <= y < 8:
            A[q, int(y) * 8 + int(x)] += w[q, s, 0]

with T.Graph(wide=True):
    out = deform_attend(SampleField(T.Tensor(offsets), T.Tensor(w)), T.Tensor(values), ref).data
print("nonzeros per row:", (A > 0).sum(1).max(), " max |sparse - dense|:",
      np.abs(out - A @ values.reshape(64, 4)).max())

# 2. from a pixel mask to candidate windows
mask = np.zeros((32, 64))
mask[4:14, 10:30] = 1.0  # one moving object
scores = block_max(mask + 0.05 * rng.uniform(size=mask.shape), 8)
gt = block_max(mask, 8)
for n in (1, 2, 4, 8):
    cand = topk_candidates(scores, n)
    print(f"N={n}: candidates {sorted(cand.indices.tolist())}, CP {covering_proportion(cand, gt):.2f}")
