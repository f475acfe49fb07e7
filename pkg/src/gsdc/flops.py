"""Closed-form multiply-accumulate counts for the fusion variants.

Counted: matmuls, convolutions, attention scores and aggregation, and four
taps per bilinear sample or bilinear-upsampled output element.  Elementwise
work (bias adds, activations, softmax, the mask gating) is free.  One MAC
is two FLOPs.

The counted region is the cue-fusion block: everything between the input
volumes and the fused volume, including the combiner 1x1 conv and, for
``ours``, the mask network.  The pseudo cost volume encoder and the depth
head are shared by every variant and left out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .supermask import UNET_LAYERS, input_factor

STAGES = ("tokenize", "sample_field", "deform_attend", "window_attention",
          "scatter_merge", "projections", "upsample", "mask_net")

FORMULAS = {
    "tokenize": "deform: N2*4*(D + 2D)*d_v; dense: N4*16*(D + 2D + 2D)*d_v (+ N4*16*D*d_v base for ours)",
    "sample_field": "N2*d_v*3*heads*N_s",
    "deform_attend": "N2*N_s*(4*d_v + d_v)",
    "window_attention": "ours: 2*N_theta*kappa^4*d_v; local: 2*N4*kappa^2*d_v; full: 2*N4^2*d_v",
    "scatter_merge": "0 (index copies)",
    "projections": "deform: N2*d_v*(d_v + D); attention out: rows*d_v^2; MLP: H*W*hidden*(d_v + D); combiner: H*W*D^2",
    "upsample": "4*H*W*D per 2x-token map, 4*H*W*d_v per 4x-token map",
    "mask_net": "3x3 U-Net convs + two 2x bilinear upsamples at the mask input grid",
}


@dataclass
class FlopsReport:
    variant: str
    stages: dict = field(default_factory=dict)

    @property
    def total(self):
        return int(sum(self.stages.values()))

    @property
    def gflops(self):
        return 2 * self.total / 1e9

    def to_dict(self):
        return {"variant": self.variant, **{s: int(self.stages.get(s, 0)) for s in STAGES},
                "total_macs": self.total}


def mask_net_macs(height, width, variant="ds_us_4x"):
    """MACs of the mask U-Net for an ``height`` x ``width`` image."""
    f = input_factor(variant)
    n = (height // f) * (width // f)
    per = {"enc1": n, "enc2": n // 4, "bott": n // 16, "dec2": n // 4, "dec1": n}
    convs = sum(per[k] * 9 * cin * cout for k, (cin, cout) in UNET_LAYERS.items())
    head = n * UNET_LAYERS["dec1"][1]
    ups = 4 * (n // 4) * UNET_LAYERS["bott"][1] + 4 * n * UNET_LAYERS["dec2"][1]
    return convs + head + ups


def count_flops(cfg, height, width, variant=None):
    """FlopsReport for a pipeline config (``PipelineConfig``-like) at H x W."""
    variant = variant or cfg.variant
    H, W, D, C = height, width, cfg.n_bins, cfg.d_v
    S, kp, hid = cfg.n_samples, cfg.kappa, cfg.mlp_hidden
    if H % (4 * kp) or W % (4 * kp):
        raise T.ShapeError(f"{(H, W)} not divisible by super-token footprint {4 * kp}")
    HW = H * W
    n2, n4 = HW // 4, HW // 16
    st = dict.fromkeys(STAGES, 0)
    st["projections"] = HW * D * D  # combiner

    def dense_common(with_base):
        st["tokenize"] += n4 * 16 * (D + 4 * D) * C + (n4 * 16 * D * C if with_base else 0)
        st["upsample"] += 4 * HW * C
        st["projections"] += HW * hid * (C + D)

    if variant in ("ours", "deform"):
        st["tokenize"] += n2 * 4 * 3 * D * C
        st["sample_field"] += n2 * C * 3 * cfg.heads * S
        st["deform_attend"] += n2 * S * 5 * C
        st["projections"] += n2 * C * (C + D)
        st["upsample"] += 4 * HW * D
    if variant == "ours":
        dense_common(True)
        rows = cfg.n_candidates * kp * kp
        st["window_attention"] += 2 * cfg.n_candidates * kp ** 4 * C
        st["projections"] += rows * C * C
        st["mask_net"] += mask_net_macs(H, W, cfg.mask_variant)
    elif variant == "local":
        dense_common(False)
        st["window_attention"] += 2 * n4 * kp * kp * C
        st["projections"] += n4 * C * C
    elif variant == "full":
        dense_common(False)
        st["window_attention"] += 2 * n4 * n4 * C
        st["projections"] += n4 * C * C
    elif variant != "deform":
        raise ValueError(f"unknown variant {variant!r}")
    return FlopsReport(variant, st)


def measured_macs(cfg, height, width, variant=None, seed=0):
    """MACs recorded by the kernel counters over one fusion forward pass."""
    from .pipeline import fusion, init_params, mask_prior

    cfg = type(cfg)(**{**cfg.to_dict(), "variant": variant or cfg.variant})
    rng = np.random.default_rng(seed)
    params = {k: T.Tensor(v) for k, v in init_params(seed, cfg).items()}
    image = rng.random((height, width, 3))
    c_t = rng.normal(size=(height, width, cfg.n_bins))
    adj = rng.random((height, width, 2 * cfg.n_bins))
    with T.count_macs() as c:
        prior = mask_prior(image, params, cfg) if cfg.variant == "ours" else None
        fusion(c_t, adj, params, cfg, prior)
    return int(c["macs"])


FULL_SIZE = (256, 512)


def full_size_config(**overrides):
    """Full-size setting used for the FLOPs comparisons: 256x512 frames,
    2x deformable tokens, 4x dense tokens, kappa=8, N_s=4, N_theta=12."""
    from .pipeline import PipelineConfig

    base = dict(n_bins=96, d_v=32, mlp_hidden=64, n_samples=4, kappa=8, n_candidates=12)
    return PipelineConfig(**{**base, **overrides})
