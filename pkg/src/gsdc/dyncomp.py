"""Dense compensation inside candidate super tokens.

Query tokens come from the pseudo cost volume and key/value tokens from
the adjacent volumes, all at 4x downsampling.  Only the TopK candidate
windows are gathered, modulated by their super-token scores, attended
densely with a relative position bias, and written back over a base
derived from the sparse branch's output.

``fuse_local`` and ``fuse_full`` are the window-everywhere and
global-attention baselines that share this machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .deform import tokenize


@dataclass(frozen=True)
class DenseConfig:
    kappa: int = 8
    d_v: int = 32
    heads: int = 1
    downsample: int = 4
    mlp_hidden: int = 32


@dataclass
class WindowSet:
    q: T.Tensor  # N x kappa^2 x d_v
    k: T.Tensor
    v: T.Tensor
    scores: object


def window_partition(x, kappa):
    """HxWxC -> (H*W/kappa^2) x kappa^2 x C, windows and slots row-major."""
    x = T.as_tensor(x)
    H, W, C = x.shape
    if H % kappa or W % kappa:
        raise T.ShapeError(f"extents {(H, W)} not divisible by window {kappa}")
    x = T.reshape(x, (H // kappa, kappa, W // kappa, kappa, C))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (H * W // kappa ** 2, kappa * kappa, C))


def window_merge(windows, height, width, kappa):
    windows = T.as_tensor(windows)
    C = windows.shape[-1]
    x = T.reshape(windows, (height // kappa, width // kappa, kappa, kappa, C))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (height, width, C))


def relative_position_index(kappa):
    """kappa^2 x kappa^2 lookup into a (2*kappa-1)^2 offset table."""
    ys, xs = np.mgrid[0:kappa, 0:kappa]
    c = np.stack([ys.ravel(), xs.ravel()], 1)
    rel = c[:, None, :] - c[None, :, :] + (kappa - 1)
    return rel[..., 0] * (2 * kappa - 1) + rel[..., 1]


def relative_position_bias(table, kappa):
    """heads x kappa^2 x kappa^2 bias from a ((2*kappa-1)^2, heads) table."""
    n = kappa * kappa
    idx = relative_position_index(kappa).ravel()
    b = T.reshape(T.gather(table, idx, axis=0), (n, n, -1))
    return T.transpose(b, (2, 0, 1))


def gather_windows(q, k, v, cand):
    """Rows ``cand.indices`` of each partitioned tensor, scaled by their scores."""
    idx = cand.indices
    s = T.reshape(T.as_tensor(cand.scores), (-1, 1, 1))
    return WindowSet(T.gather(q, idx) * s, T.gather(k, idx) * s, T.gather(v, idx) * s,
                     cand.scores)


def attention(q, k, v, heads=1, bias=None):
    """softmax(q k^T / sqrt(d_h) + bias) v over the last two axes, per head."""
    *lead, n, dv = q.shape
    m = k.shape[-2]
    dh = dv // heads

    def split(x, rows):
        x = T.reshape(x, (*lead, rows, heads, dh))
        return T.transpose(x, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    qh, kh, vh = split(q, n), split(k, m), split(v, m)
    kt = T.transpose(kh, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1))
    scores = (qh @ kt) * (1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    out = T.softmax(scores, axis=-1) @ vh
    out = T.transpose(out, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
    return T.reshape(out, (*lead, n, dv))


def window_attention(ws: WindowSet, bias, params, heads=1, prefix="dense."):
    """Dense attention within each gathered window, then output projection."""
    a = attention(ws.q, ws.k, ws.v, heads, bias)
    return a @ params[prefix + "out.w"] + params[prefix + "out.b"]


def scatter_compensate(a, base, cand, kappa):
    """Overwrite the candidate windows of ``base`` with ``a``."""
    base = T.as_tensor(base)
    H, W, _ = base.shape
    if len(cand.indices) == 0:
        return base
    bw = T.scatter(window_partition(base, kappa), cand.indices, a)
    return window_merge(bw, H, W, kappa)


def init_dense_params(rng, n_bins, cfg: DenseConfig, with_base=True):
    f, dv, kp = cfg.downsample, cfg.d_v, cfg.kappa
    p = {
        "q.w": rng.normal(0, np.sqrt(1.0 / (f * f * n_bins)), (f, f, n_bins, dv)),
        "q.b": np.zeros(dv),
        "k.w": rng.normal(0, np.sqrt(1.0 / (f * f * 2 * n_bins)), (f, f, 2 * n_bins, dv)),
        "k.b": np.zeros(dv),
        "v.w": rng.normal(0, np.sqrt(1.0 / (f * f * 2 * n_bins)), (f, f, 2 * n_bins, dv)),
        "v.b": np.zeros(dv),
        "rpb": np.zeros(((2 * kp - 1) ** 2, cfg.heads)),
        "out.w": rng.normal(0, np.sqrt(1.0 / dv), (dv, dv)),
        "out.b": np.zeros(dv),
        "mlp1.w": rng.normal(0, np.sqrt(2.0 / dv), (dv, cfg.mlp_hidden)),
        "mlp1.b": np.zeros(cfg.mlp_hidden),
        "mlp2.w": rng.normal(0, np.sqrt(1.0 / cfg.mlp_hidden), (cfg.mlp_hidden, n_bins)),
        "mlp2.b": np.zeros(n_bins),
    }
    if with_base:
        p["base.w"] = rng.normal(0, np.sqrt(1.0 / (f * f * n_bins)), (f, f, n_bins, dv))
        p["base.b"] = np.zeros(dv)
    return p


def _qkv(c_t, adj, cfg, params, prefix):
    f = cfg.downsample
    H, W, _ = c_t.shape
    shape = (H // f, W // f, cfg.d_v)
    q = T.reshape(tokenize(c_t, f, params[prefix + "q.w"], params[prefix + "q.b"]), shape)
    k = T.reshape(tokenize(adj, f, params[prefix + "k.w"], params[prefix + "k.b"]), shape)
    v = T.reshape(tokenize(adj, f, params[prefix + "v.w"], params[prefix + "v.b"]), shape)
    return q, k, v


def _head(tokens, H, W, cfg, params, prefix):
    """Upsample token features to full resolution and map them to D bins."""
    x = T.upsample_bilinear(tokens, cfg.downsample)
    x = T.reshape(x, (H * W, cfg.d_v))
    x = T.relu(x @ params[prefix + "mlp1.w"] + params[prefix + "mlp1.b"])
    x = x @ params[prefix + "mlp2.w"] + params[prefix + "mlp2.b"]
    return T.reshape(x, (H, W, -1))


def fuse_dense(c_f0, c_t, adj, cand, cfg: DenseConfig, params, prefix="dense."):
    """Compensated fused volume C_f1 (HxWxD)."""
    c_t = T.as_tensor(c_t)
    H, W, _ = c_t.shape
    f, kp = cfg.downsample, cfg.kappa
    base = T.reshape(tokenize(c_f0, f, params[prefix + "base.w"], params[prefix + "base.b"]),
                     (H // f, W // f, cfg.d_v))
    if len(cand.indices):
        q, k, v = _qkv(c_t, adj, cfg, params, prefix)
        ws = gather_windows(window_partition(q, kp), window_partition(k, kp),
                            window_partition(v, kp), cand)
        bias = relative_position_bias(params[prefix + "rpb"], kp)
        a = ws.q + window_attention(ws, bias, params, cfg.heads, prefix)
        base = scatter_compensate(a, base, cand, kp)
    return _head(base, H, W, cfg, params, prefix)


def fuse_local(c_t, adj, cfg: DenseConfig, params, prefix="dense."):
    """Window attention over every window (no mask, no base)."""
    c_t = T.as_tensor(c_t)
    H, W, _ = c_t.shape
    kp = cfg.kappa
    q, k, v = _qkv(c_t, adj, cfg, params, prefix)
    qw = window_partition(q, kp)
    ws = WindowSet(qw, window_partition(k, kp), window_partition(v, kp), None)
    bias = relative_position_bias(params[prefix + "rpb"], kp)
    a = qw + window_attention(ws, bias, params, cfg.heads, prefix)
    return _head(window_merge(a, q.shape[0], q.shape[1], kp), H, W, cfg, params, prefix)


def fuse_full(c_t, adj, cfg: DenseConfig, params, prefix="dense."):
    """Global attention over all 4x tokens."""
    c_t = T.as_tensor(c_t)
    H, W, _ = c_t.shape
    q, k, v = _qkv(c_t, adj, cfg, params, prefix)
    h, w = q.shape[:2]
    qf, kf, vf = (T.reshape(x, (h * w, cfg.d_v)) for x in (q, k, v))
    a = qf + attention(qf, kf, vf, cfg.heads) @ params[prefix + "out.w"] + params[prefix + "out.b"]
    return _head(T.reshape(a, (h, w, cfg.d_v)), H, W, cfg, params, prefix)
