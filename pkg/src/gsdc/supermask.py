"""Dynamic-scene mask prediction and its super-token reduction.

The pixel mask is reduced to one score per kappa x kappa token window by
taking the window maximum; the TopK windows become the candidates the
dense compensation branch works on.  Coverage of the ground-truth dynamic
windows by those candidates (CP) is the model-selection metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

VARIANTS = ("full", "ds_us_4x", "ds_us_8x", "ds_maxpool_4x")
TOKEN_FACTOR = 4  # the dense branch works on the 4x-downsampled token grid

UNET_LAYERS = {
    "enc1": (3, 16),
    "enc2": (16, 32),
    "bott": (32, 64),
    "dec2": (64 + 32, 32),
    "dec1": (32 + 16, 16),
}


@dataclass
class DynamicMask:
    values: object  # Tensor or ndarray, Hm x Wm x 1 in [0, 1]
    factor: int  # downsampling of the mask grid relative to the image


@dataclass
class SuperMask:
    values: object  # Tensor or ndarray, Gy x Gx x 1
    kappa: int


@dataclass
class CandidateSet:
    indices: np.ndarray  # flat super-token indices, best first
    scores: object  # Tensor or ndarray, scores at ``indices``


def variant_factor(variant, kappa=8):
    return {"full": 1, "ds_us_4x": 4, "ds_us_8x": 8,
            "ds_maxpool_4x": TOKEN_FACTOR * kappa}[variant]


def input_factor(variant):
    return {"full": 1, "ds_us_4x": 4, "ds_us_8x": 8, "ds_maxpool_4x": 4}[variant]


def init_mask_params(rng):
    p = {}
    for name, (cin, cout) in UNET_LAYERS.items():
        p[f"{name}.w"] = rng.normal(0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        p[f"{name}.b"] = np.zeros(cout)
    p["head.w"] = rng.normal(0, 0.1, (1, 1, 16, 1))
    p["head.b"] = np.full(1, -2.0)
    return p


def _block(x, params, name, prefix):
    return T.relu(T.conv2d(x, params[f"{prefix}{name}.w"], pad=1) + params[f"{prefix}{name}.b"])


def unet_logits(x, params, prefix="mask."):
    e1 = _block(x, params, "enc1", prefix)
    e2 = _block(T.max_pool2d(e1, 2), params, "enc2", prefix)
    b = _block(T.max_pool2d(e2, 2), params, "bott", prefix)
    d2 = _block(T.concat([T.upsample_bilinear(b, 2), e2], -1), params, "dec2", prefix)
    d1 = _block(T.concat([T.upsample_bilinear(d2, 2), e1], -1), params, "dec1", prefix)
    return T.conv2d(d1, params[f"{prefix}head.w"]) + params[f"{prefix}head.b"]


def predict_mask(image, params, variant="ds_us_4x", kappa=8, prefix="mask."):
    """Per-pixel dynamic probability from a three-level U-Net."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}")
    x = T.as_tensor(image)
    f = input_factor(variant)
    if f > 1:
        x = T.avg_pool2d(x, f)
    logits = unet_logits(x, params, prefix)
    if variant == "ds_maxpool_4x":
        logits = T.max_pool2d(logits, kappa)
    return DynamicMask(T.sigmoid(logits), variant_factor(variant, kappa))


def to_super_mask(mask, kappa):
    """Window max over ``kappa`` x ``kappa`` blocks of the mask grid."""
    values = mask.values if isinstance(mask, DynamicMask) else mask
    values = T.as_tensor(values)
    H, W, _ = values.shape
    if H % kappa or W % kappa:
        raise T.ShapeError(f"mask extents {(H, W)} not divisible by {kappa}")
    return SuperMask(T.max_pool2d(values, kappa), kappa)


def super_mask_for(mask: DynamicMask, kappa):
    """Super mask on the token grid for a mask predicted at any resolution."""
    block = TOKEN_FACTOR * kappa // mask.factor
    return SuperMask(to_super_mask(mask, block).values, kappa)


def block_max(x, k):
    """Numpy block max of an HxW(xC) array."""
    x = np.asarray(x)
    if k == 1:
        return x
    H, W = x.shape[:2]
    return x.reshape(H // k, k, W // k, k, *x.shape[2:]).max(axis=(1, 3))


def topk_candidates(super_mask, n):
    """Indices of the ``n`` highest scores; ties go to the lower flat index."""
    vals = super_mask.values if isinstance(super_mask, SuperMask) else super_mask
    flat = np.asarray(vals.data if isinstance(vals, T.Tensor) else vals).reshape(-1)
    if n > flat.size:
        raise ValueError(f"asked for {n} candidates from {flat.size} super tokens")
    idx = np.argsort(-flat, kind="stable")[:n]
    if isinstance(vals, T.Tensor):
        scores = T.gather(T.reshape(vals, (-1,)), idx)
    else:
        scores = flat[idx]
    return CandidateSet(idx, scores)


def covering_proportion(cand, gt_super):
    """Share of ground-truth dynamic super tokens that are candidates.

    ``gt_super`` is binarised at 0.5; returns 1.0 when it has no positives.
    """
    gt = np.asarray(gt_super).reshape(-1) >= 0.5
    pos = np.flatnonzero(gt)
    if pos.size == 0:
        return 1.0
    idx = cand.indices if isinstance(cand, CandidateSet) else np.asarray(cand)
    return float(np.isin(pos, idx).sum() / pos.size)


def align_gt(gt, factor):
    """Block-max pool a full-resolution ground-truth mask to ``factor``."""
    return block_max(np.asarray(gt), factor)


def mask_loss(pred, gt, eps=1e-7):
    """Mean binary cross-entropy; the target is pooled to the prediction grid."""
    p = pred.values if isinstance(pred, DynamicMask) else pred
    p = T.as_tensor(p)
    y = np.asarray(gt, dtype=np.float64)
    if y.shape[:2] != p.shape[:2]:
        y = align_gt(y, y.shape[0] // p.shape[0])
    y = y.reshape(p.shape)
    pc = T.clip(p, eps, 1.0 - eps)
    ll = y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc)
    return -T.mean(ll)


def iou(pred, gt, threshold=0.5):
    """Intersection over union of binarised masks; 1.0 when both are empty."""
    a = np.asarray(pred) >= threshold
    b = np.asarray(gt) >= threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
