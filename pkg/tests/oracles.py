"""Slow, loop-based reference implementations used by the tests.

Nothing here imports the package; each function spells out the
definition element by element so it can be compared against the
vectorised kernels.
"""

import math

import numpy as np


def matmul(a, b):
    M, K = a.shape
    K2, N = b.shape
    assert K == K2
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            s = 0.0
            for k in range(K):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def conv2d(x, w, stride=1, pad=0):
    H, W, Cin = x.shape
    k, _, _, Cout = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((Ho, Wo, Cout))
    for i in range(Ho):
        for j in range(Wo):
            for co in range(Cout):
                s = 0.0
                for di in range(k):
                    for dj in range(k):
                        y = i * stride + di - pad
                        xx = j * stride + dj - pad
                        if 0 <= y < H and 0 <= xx < W:
                            for ci in range(Cin):
                                s += x[y, xx, ci] * w[di, dj, ci, co]
                out[i, j, co] = s
    return out


def bilinear(value, px, py):
    """Four-tap sample at continuous (x, y) with zero padding."""
    H, W, C = value.shape
    x0, y0 = math.floor(px), math.floor(py)
    out = np.zeros(C)
    for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
        for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
            if 0 <= yy < H and 0 <= xx < W:
                out += wy * wx * value[yy, xx]
    return out


def upsample_pixel(x, factor, i, j):
    """Value at output pixel (i, j) of an align_corners=False upsample."""
    H, W, _ = x.shape

    def taps(o, n):
        s = max((o + 0.5) / factor - 0.5, 0.0)
        a = min(int(math.floor(s)), n - 1)
        b = min(a + 1, n - 1)
        return a, b, s - a

    y0, y1, fy = taps(i, H)
    x0, x1, fx = taps(j, W)
    return ((1 - fy) * ((1 - fx) * x[y0, x0] + fx * x[y0, x1])
            + fy * ((1 - fx) * x[y1, x0] + fx * x[y1, x1]))


def block_max(m, k):
    H, W = m.shape[:2]
    out = np.zeros((H // k, W // k))
    for by in range(H // k):
        for bx in range(W // k):
            best = -np.inf
            for u in range(by * k, by * k + k):
                for v in range(bx * k, bx * k + k):
                    best = max(best, float(m[u, v].ravel()[0]) if m.ndim == 3 else float(m[u, v]))
            out[by, bx] = best
    return out


def topk(scores, n):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:n]


def cp(indices, gt_positive):
    pos = [i for i, g in enumerate(gt_positive) if g]
    if not pos:
        return 1.0
    return sum(1 for i in pos if i in set(indices)) / len(pos)


def bce(p, y, eps=1e-7):
    tot = 0.0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pc = min(max(pi, eps), 1 - eps)
        tot += -(yi * math.log(pc) + (1 - yi) * math.log(1 - pc))
    return tot / np.size(p)


def attention(q, k, v, bias=None):
    """Single-head dense attention, row by row."""
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        s = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d)
             + (0.0 if bias is None else bias[i, j]) for j in range(k.shape[0])]
        w = softmax(s)
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


def window_of(y, x, kappa, w_tok):
    return (y // kappa) * (w_tok // kappa) + x // kappa, (y % kappa) * kappa + x % kappa


def depth_metrics(pred, gt):
    pred, gt = np.ravel(pred), np.ravel(gt)
    n = len(gt)
    ar = sum(abs(p - g) / g for p, g in zip(pred, gt)) / n
    sr = sum((p - g) ** 2 / g for p, g in zip(pred, gt)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(pred, gt)) / n)
    rlog = math.sqrt(sum((math.log(p) - math.log(g)) ** 2 for p, g in zip(pred, gt)) / n)
    ds = [sum(1 for p, g in zip(pred, gt) if max(p / g, g / p) < 1.25 ** k) / n for k in (1, 2, 3)]
    return [ar, sr, rmse, rlog, *ds]


def silog(pred, gt):
    g = [math.log(p) - math.log(t) for p, t in zip(np.ravel(pred), np.ravel(gt))]
    n = len(g)
    m2 = sum(x * x for x in g) / n
    m1 = sum(g) / n
    return 10 * math.sqrt(max(m2 - 0.85 * m1 * m1, 0.0))
