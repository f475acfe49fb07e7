"""Globally sparse fusion branch: single-level deformable attention.

Queries are tokens of the pseudo cost volume, values are tokens of the
concatenated adjacent volumes.  Each query predicts ``n_samples`` offsets
around its own grid position and softmax weights over them; the weighted
bilinear samples form the attention output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class DeformConfig:
    n_samples: int = 4
    heads: int = 1
    d_v: int = 32
    downsample: int = 2
    residual: bool = False  # add the query tokens back before projection

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.d_v % self.heads:
            raise ValueError("d_v must be divisible by heads")
        if self.downsample not in (1, 2, 4):
            raise ValueError("downsample must be 1, 2 or 4")


@dataclass
class SampleField:
    offsets: T.Tensor  # N_q x (heads*N_s) x 2, (dx, dy) in token units
    weights: T.Tensor  # N_q x (heads*N_s) x 1, softmax over each head's samples


def tokenize(cv, factor, weight, bias=None):
    """Patchify an HxWxC map with a stride-``factor`` conv; flatten row-major."""
    cv = T.as_tensor(cv)
    H, W, _ = cv.shape
    if H % factor or W % factor:
        raise T.ShapeError(f"extents {(H, W)} not divisible by {factor}")
    x = T.conv2d(cv, weight, stride=factor)
    if bias is not None:
        x = x + bias
    return T.reshape(x, (-1, x.shape[-1]))


def token_grid(h, w):
    """(x, y) coordinate of every token, row-major."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def init_deform_params(rng, n_bins, cfg: DeformConfig):
    f, dv, ns = cfg.downsample, cfg.d_v, cfg.n_samples * cfg.heads
    return {
        "q.w": rng.normal(0, np.sqrt(1.0 / (f * f * n_bins)), (f, f, n_bins, dv)),
        # C_t starts constant (zero pcv head), so a zero bias would leave q = 0
        # and the offset/weight heads without gradient in the deform-only model
        "q.b": rng.normal(0, 0.1, dv),
        "v.w": rng.normal(0, np.sqrt(1.0 / (f * f * 2 * n_bins)), (f, f, 2 * n_bins, dv)),
        "v.b": np.zeros(dv),
        "offset.w": np.zeros((dv, ns * 2)),
        "offset.b": np.zeros(ns * 2),
        "weight.w": np.zeros((dv, ns)),
        "weight.b": np.zeros(ns),
        # zero start only when the residual carries the signal
        "out.w": np.zeros((dv, dv)) if cfg.residual else rng.normal(0, np.sqrt(1.0 / dv), (dv, dv)),
        "out.b": np.zeros(dv),
        "proj.w": rng.normal(0, np.sqrt(1.0 / dv), (dv, n_bins)),
        "proj.b": np.zeros(n_bins),
    }


def predict_sample_field(queries, params, cfg: DeformConfig, prefix="deform."):
    nq = queries.shape[0]
    ns, h = cfg.n_samples, cfg.heads
    off = queries @ params[prefix + "offset.w"] + params[prefix + "offset.b"]
    logits = queries @ params[prefix + "weight.w"] + params[prefix + "weight.b"]
    w = T.softmax(T.reshape(logits, (nq, h, ns)), axis=-1)
    return SampleField(T.reshape(off, (nq, h * ns, 2)), T.reshape(w, (nq, h * ns, 1)))


def deform_attend(field: SampleField, value_grid, ref_points, heads=1):
    """Weighted sum of bilinear samples at ``ref_points + offsets``.

    ``value_grid`` is h x w x d_v; head ``i`` reads channel slice ``i``.
    """
    value_grid = T.as_tensor(value_grid)
    nq, hs, _ = field.offsets.shape
    ns = hs // heads
    dv = value_grid.shape[-1]
    dh = dv // heads
    ref = T.as_tensor(np.repeat(np.asarray(ref_points, dtype=np.float64), hs, axis=0))
    pts = T.reshape(field.offsets, (nq * hs, 2)) + ref
    outs = []
    for i in range(heads):
        vg = value_grid if heads == 1 else value_grid[:, :, i * dh:(i + 1) * dh]
        p = pts if heads == 1 else T.reshape(T.reshape(pts, (nq, hs, 2))[:, i * ns:(i + 1) * ns], (nq * ns, 2))
        w = field.weights if heads == 1 else field.weights[:, i * ns:(i + 1) * ns]
        vs = T.reshape(T.bilinear_sample(vg, p), (nq, ns, dh))
        outs.append(T.reshape(T.transpose(w, (0, 2, 1)) @ vs, (nq, dh)))
    return outs[0] if heads == 1 else T.concat(outs, axis=-1)


def fuse_sparse(c_t, adj, cfg: DeformConfig, params, prefix="deform."):
    """Sparse fused volume C_f0 (HxWxD) from the query and adjacent volumes."""
    c_t = T.as_tensor(c_t)
    H, W, D = c_t.shape
    f = cfg.downsample
    h, w = H // f, W // f
    q = tokenize(c_t, f, params[prefix + "q.w"], params[prefix + "q.b"])
    v = tokenize(adj, f, params[prefix + "v.w"], params[prefix + "v.b"])
    field = predict_sample_field(q, params, cfg, prefix)
    att = deform_attend(field, T.reshape(v, (h, w, cfg.d_v)), token_grid(h, w), cfg.heads)
    x = att @ params[prefix + "out.w"] + params[prefix + "out.b"]
    if cfg.residual:
        x = x + q
    x = x @ params[prefix + "proj.w"] + params[prefix + "proj.b"]
    return T.upsample_bilinear(T.reshape(x, (h, w, D)), f)
