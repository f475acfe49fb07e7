"""End-to-end fusion model: assembly, losses, two-stage training, metrics.

Variants share one forward function:

``ours``    sparse branch + mask-gated dense compensation, mixed by the super mask
``deform``  sparse branch only
``local``   window attention over every 4x window
``full``    global attention over all 4x tokens
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gst
from . import tensor as T
from .deform import DeformConfig, fuse_sparse, init_deform_params
from .dyncomp import DenseConfig, fuse_dense, fuse_full, fuse_local, init_dense_params
from .optim import Adam, clip_grad_norm, one_cycle_lr
from .scenes import (SceneConfig, build_cost_volume, concat_adjacent, depth_bins,
                     generate_scene, init_pseudo_params, pseudo_cost_volume)
from .supermask import (SuperMask, align_gt, block_max, covering_proportion, init_mask_params,
                        iou, mask_loss, predict_mask, super_mask_for, topk_candidates)

log = logging.getLogger(__name__)

VARIANTS = ("ours", "deform", "local", "full")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    n_bins: int = 32
    d_min: float = 2.0
    d_max: float = 80.0
    d_v: int = 32
    n_samples: int = 4
    heads: int = 1
    kappa: int = 8
    n_candidates: int = 4
    mlp_hidden: int = 32
    mask_variant: str = "ds_us_4x"
    variant: str = "ours"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def deform(self):
        return DeformConfig(self.n_samples, self.heads, self.d_v, 2)

    @property
    def dense(self):
        return DenseConfig(self.kappa, self.d_v, self.heads, 4, self.mlp_hidden)

    @property
    def bins(self):
        return depth_bins(self.n_bins, self.d_min, self.d_max)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch: int = 1
    max_lr: float = 2e-3
    div_factor: float = 10.0
    final_div_factor: float = 10.0
    pct_start: float = 0.3
    clip_norm: float = 1.0
    seed: int = 0
    mono_weight: float = 0.5  # stage 2: weight of the single-frame depth term


@dataclass
class Sample:
    image: np.ndarray  # HxWx3
    depth: np.ndarray  # HxWx1
    dyn_mask: np.ndarray  # HxWx1
    adj: np.ndarray  # HxWx2D, previous volume first


@dataclass
class Outputs:
    depth: T.Tensor
    c_f: T.Tensor
    c_f0: T.Tensor | None = None
    c_f1: T.Tensor | None = None
    super_mask: object = None
    candidates: object = None


@dataclass
class MetricRow:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1: float
    d2: float
    d3: float
    n_images: int = 0

    def to_dict(self):
        return asdict(self)


# --- parameters ----------------------------------------------------------


def init_params(seed, cfg: PipelineConfig):
    """Float32 parameter arrays keyed ``<submodule>.<name>``."""
    rng = np.random.default_rng(seed)
    D = cfg.n_bins
    groups = {"pcv.": init_pseudo_params(rng, D)}
    if cfg.variant in ("ours", "deform"):
        groups["deform."] = init_deform_params(rng, D, cfg.deform)
    if cfg.variant == "ours":
        groups["mask."] = init_mask_params(rng)
    if cfg.variant != "deform":
        groups["dense."] = init_dense_params(rng, D, cfg.dense, with_base=cfg.variant == "ours")
    groups["comb."] = {"w": np.eye(D).reshape(1, 1, D, D), "b": np.zeros(D)}
    return {pre + k: np.asarray(v, dtype=np.float32) for pre, g in groups.items() for k, v in g.items()}


def param_count(params):
    return int(sum(np.asarray(v).size for v in params.values()))


def as_tensors(params, trainable=None):
    """Wrap arrays as tensors; names in ``trainable`` (default all) require grad."""
    return {k: T.Tensor(v, requires_grad=trainable is None or k in trainable)
            for k, v in params.items()}


# --- model pieces --------------------------------------------------------


def expand_super(m, height, width):
    """Nearest-neighbour expansion of a Gy x Gx x 1 super mask to H x W x 1."""
    m = T.as_tensor(m.values if isinstance(m, SuperMask) else m)
    gy, gx, _ = m.shape
    by, bx = height // gy, width // gx
    ones = np.ones((1, by, 1, bx, 1))
    return T.reshape(T.reshape(m, (gy, 1, gx, 1, 1)) * ones, (height, width, 1))


def combine(c_f0, c_f1, m, params, prefix="comb."):
    """C_f = Conv1x1[C_f0 * (1 - m) + C_f1 * m] with m expanded per pixel."""
    c_f0, c_f1 = T.as_tensor(c_f0), T.as_tensor(c_f1)
    if c_f0.shape != c_f1.shape:
        raise T.ShapeError(f"combine shapes differ: {c_f0.shape} vs {c_f1.shape}")
    H, W, _ = c_f0.shape
    me = expand_super(m, H, W)
    mixed = c_f0 * (1.0 - me) + c_f1 * me
    return conv1x1(mixed, params, prefix)


def conv1x1(x, params, prefix="comb."):
    return T.conv2d(x, params[prefix + "w"]) + params[prefix + "b"]


def depth_head(c_f, bins):
    """Soft-argmax depth: expected bin depth under softmax(C_f)."""
    p = T.softmax(c_f, axis=-1)
    return p @ np.asarray(bins, dtype=np.float64).reshape(-1, 1)


def silog_loss(pred, gt, valid=None, variance_focus=0.85):
    """10 * sqrt(mean(g^2) - 0.85 mean(g)^2) with g = log pred - log gt."""
    gt = np.asarray(gt, dtype=np.float64)
    w = np.ones_like(gt) if valid is None else np.asarray(valid, dtype=np.float64).reshape(gt.shape)
    n = w.sum()
    if n == 0:
        raise ValueError("silog_loss: empty valid set")
    g = (T.log(pred) - np.log(np.where(w > 0, gt, 1.0))) * w
    m1 = T.tsum(g) * (1.0 / n)
    m2 = T.tsum(T.square(g)) * (1.0 / n)
    return 10.0 * T.sqrt(T.clip(m2 - variance_focus * T.square(m1), 0.0, np.inf))


def mask_prior(sample_image, params, cfg: PipelineConfig):
    """Super mask and TopK candidates for one image."""
    mask = predict_mask(sample_image, params, cfg.mask_variant, cfg.kappa)
    sm = super_mask_for(mask, cfg.kappa)
    return sm, topk_candidates(sm, cfg.n_candidates)


def fusion(c_t, adj, params, cfg: PipelineConfig, prior=None):
    """Fused volume C_f from the query volume and adjacent volumes."""
    if cfg.variant == "full":
        return Outputs(None, conv1x1(fuse_full(c_t, adj, cfg.dense, params), params))
    if cfg.variant == "local":
        return Outputs(None, conv1x1(fuse_local(c_t, adj, cfg.dense, params), params))
    c_f0 = fuse_sparse(c_t, adj, cfg.deform, params)
    if cfg.variant == "deform":
        return Outputs(None, conv1x1(c_f0, params), c_f0)
    sm, cand = prior
    c_f1 = fuse_dense(c_f0, c_t, adj, cand, cfg.dense, params)
    return Outputs(None, combine(c_f0, c_f1, sm, params), c_f0, c_f1, sm, cand)


def forward(params, sample: Sample, cfg: PipelineConfig, prior=None):
    """Full model on one sample.  ``prior`` (super mask, candidates) is
    computed from the mask net when not supplied."""
    c_t = pseudo_cost_volume(sample.image, params)
    if cfg.variant == "ours" and prior is None:
        prior = mask_prior(sample.image, params, cfg)
    out = fusion(c_t, sample.adj, params, cfg, prior)
    out.depth = depth_head(out.c_f, cfg.bins)
    return out


# --- metrics -------------------------------------------------------------


def depth_metrics(pred, gt, valid=None):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if valid is not None:
        keep = np.asarray(valid).reshape(-1) > 0
        pred, gt = pred[keep], gt[keep]
    if gt.size == 0:
        return None
    ratio = np.maximum(pred / gt, gt / pred)
    return MetricRow(
        abs_rel=float(np.mean(np.abs(pred - gt) / gt)),
        sq_rel=float(np.mean((pred - gt) ** 2 / gt)),
        rmse=float(np.sqrt(np.mean((pred - gt) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        d1=float(np.mean(ratio < 1.25)),
        d2=float(np.mean(ratio < 1.25 ** 2)),
        d3=float(np.mean(ratio < 1.25 ** 3)),
        n_images=1,
    )


def average_metrics(rows):
    rows = [r for r in rows if r is not None]
    if not rows:
        return None
    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3")
    return MetricRow(*[float(np.mean([getattr(r, k) for r in rows])) for k in keys], n_images=len(rows))


def predict_depths(params, data, cfg, priors=None):
    P = {k: T.Tensor(np.asarray(v)) for k, v in params.items()}
    return [forward(P, s, cfg, None if priors is None else priors[i]).depth.data
            for i, s in enumerate(data)]


def evaluate(params, data, cfg: PipelineConfig, region="overall", priors=None, depths=None):
    """Per-image depth metrics averaged over images.

    ``region="dynamic"`` restricts to ground-truth moving-object pixels
    (images without any are skipped).
    """
    if region not in ("overall", "dynamic"):
        raise ValueError(f"unknown region {region!r}")
    if depths is None:
        depths = predict_depths(params, data, cfg, priors)
    rows = []
    for s, d in zip(data, depths):
        valid = s.dyn_mask if region == "dynamic" else None
        rows.append(depth_metrics(d, s.depth, valid))
    return average_metrics(rows)


# --- training ------------------------------------------------------------


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _check_grads(grads, where):
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {k} at {where}")


def _step(loss_fn, params, names, batch_idx):
    """Mean loss and gradients over one batch, one graph per sample."""
    grads = {k: np.zeros_like(params[k]) for k in names}
    total = 0.0
    for i in batch_idx:
        P = as_tensors(params, names)
        with T.Graph() as g:
            loss = loss_fn(P, i)
            T.backward(loss, g)
        total += loss.item()
        for k in names:
            if P[k].grad is not None:
                grads[k] += P[k].grad
    n = len(batch_idx)
    for k in names:
        grads[k] /= n
    return total / n, grads


def mask_scores(mask_params, data, cfg: PipelineConfig, variant=None):
    """Predicted masks for each sample (no gradients)."""
    variant = variant or cfg.mask_variant
    P = {k: T.Tensor(v) for k, v in mask_params.items()}
    return [predict_mask(s.image, P, variant, cfg.kappa) for s in data]


def mask_metrics(mask_params, data, cfg: PipelineConfig, n_candidates=(2, 4), variant=None):
    """Mean IoU (at the prediction grid) and mean CP for each N in ``n_candidates``."""
    masks = mask_scores(mask_params, data, cfg, variant)
    ious, cps = [], {n: [] for n in n_candidates}
    for s, m in zip(data, masks):
        ious.append(iou(m.values.data, align_gt(s.dyn_mask, m.factor)))
        sm = super_mask_for(m, cfg.kappa)
        gt_super = block_max(s.dyn_mask, 4 * cfg.kappa)
        for n in n_candidates:
            cps[n].append(covering_proportion(topk_candidates(sm, n), gt_super))
    return float(np.mean(ious)), {n: float(np.mean(v)) for n, v in cps.items()}


def train_stage1(data, cfg: PipelineConfig, tcfg: TrainConfig, val=None, n_candidates=None):
    """Train the mask net with BCE; keep the epoch with the highest CP.

    Returns ``(mask_params, history)``.  CP is measured on ``val`` (or the
    training data) at ``n_candidates`` (default ``cfg.n_candidates``).
    """
    n_sel = n_candidates or cfg.n_candidates
    small = max(n_sel // 2, 1)
    rng = np.random.default_rng(tcfg.seed)
    params = {"mask." + k: v.astype(np.float32) for k, v in init_mask_params(rng).items()}
    names = sorted(params)
    opt = Adam(params)
    batches_per_epoch = -(-len(data) // tcfg.batch)
    total = tcfg.epochs * batches_per_epoch
    val = data if val is None else val

    def loss_fn(P, i):
        m = predict_mask(data[i].image, P, cfg.mask_variant, cfg.kappa)
        return mask_loss(m, data[i].dyn_mask)

    history, best, best_cp, step = [], None, -1.0, 0
    for epoch in range(tcfg.epochs):
        losses = []
        for b in _batches(len(data), tcfg.batch, rng):
            try:
                loss, grads = _step(loss_fn, params, names, b)
            except T.NonFiniteError as e:
                raise TrainingError(f"stage 1, epoch {epoch}, step {step}: {e}") from e
            _check_grads(grads, f"stage 1 epoch {epoch} step {step}")
            clip_grad_norm(grads, tcfg.clip_norm)
            opt.step(grads, one_cycle_lr(step, total, tcfg.max_lr, tcfg.div_factor,
                                         tcfg.final_div_factor, tcfg.pct_start))
            losses.append(loss)
            step += 1
        miou, cps = mask_metrics(params, val, cfg, (small, n_sel))
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "iou": miou,
               f"cp_{small}": cps[small], f"cp_{n_sel}": cps[n_sel]}
        history.append(row)
        log.info("stage1 %s", row)
        if cps[n_sel] > best_cp:
            best_cp = cps[n_sel]
            best = {k: v.copy() for k, v in params.items()}
    return best, history


def precompute_priors(mask_params, data, cfg: PipelineConfig):
    """Frozen-mask super masks and candidates, as constants."""
    if cfg.variant != "ours":
        return None
    out = []
    for m in mask_scores(mask_params, data, cfg):
        sm = super_mask_for(m, cfg.kappa)
        sm = SuperMask(np.asarray(sm.values.data), cfg.kappa)
        out.append((sm, topk_candidates(sm, cfg.n_candidates)))
    return out


def train_stage2(data, mask_params, cfg: PipelineConfig, tcfg: TrainConfig, callback=None):
    """Train everything except the frozen mask net.

    The objective is silog on the fused depth plus ``tcfg.mono_weight``
    times silog on the soft-argmax of the pseudo cost volume.  Returns ``(params, history)``; ``history`` holds the mean training loss
    per epoch.
    """
    params = init_params(tcfg.seed, cfg)
    if cfg.variant == "ours":
        if mask_params is None:
            raise ValueError("variant 'ours' needs trained mask parameters")
        for k, v in mask_params.items():
            params[k] = np.asarray(v, dtype=np.float32).copy()
    frozen = {k for k in params if k.startswith("mask.")}
    names = sorted(k for k in params if k not in frozen)
    priors = precompute_priors(mask_params, data, cfg) if cfg.variant == "ours" else None
    rng = np.random.default_rng(tcfg.seed + 1)
    opt = Adam({k: params[k] for k in names})
    batches_per_epoch = -(-len(data) // tcfg.batch)
    total = tcfg.epochs * batches_per_epoch
    bins = cfg.bins

    def loss_fn(P, i):
        s = data[i]
        c_t = pseudo_cost_volume(s.image, P)
        out = fusion(c_t, s.adj, P, cfg, None if priors is None else priors[i])
        loss = silog_loss(depth_head(out.c_f, bins), s.depth)
        if tcfg.mono_weight:
            # keeps C_t a depth distribution of its own, not just a query feature
            loss = loss + tcfg.mono_weight * silog_loss(depth_head(c_t, bins), s.depth)
        return loss

    history, step = [], 0
    for epoch in range(tcfg.epochs):
        losses = []
        for b in _batches(len(data), tcfg.batch, rng):
            try:
                loss, grads = _step(loss_fn, params, names, b)
            except T.NonFiniteError as e:
                raise TrainingError(f"stage 2, epoch {epoch}, step {step}: {e}") from e
            _check_grads(grads, f"stage 2 epoch {epoch} step {step}")
            clip_grad_norm(grads, tcfg.clip_norm)
            opt.step(grads, one_cycle_lr(step, total, tcfg.max_lr, tcfg.div_factor,
                                         tcfg.final_div_factor, tcfg.pct_start))
            losses.append(loss)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.append(row)
        log.info("stage2 %s %s", cfg.variant, row)
        if callback is not None:
            callback(epoch, params, row)
    return params, history


# --- datasets ------------------------------------------------------------


def scene_seeds(seed, n):
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(n)]


def make_sample(scene_seed, scene_cfg: SceneConfig = SceneConfig()):
    """Render one scene and build its adjacent-frame cost volumes.

    Returns ``(sample, record)``; the record holds the poses and objects.
    """
    bins = depth_bins(scene_cfg.depth_bins, scene_cfg.d_min, scene_cfg.d_max)
    sc = generate_scene(scene_seed, scene_cfg)
    cp = build_cost_volume(sc.frame, sc.frame_prev, sc.pose_prev, sc.intrinsics, bins)
    cn = build_cost_volume(sc.frame, sc.frame_next, sc.pose_next, sc.intrinsics, bins)
    record = {"seed": int(scene_seed), "pose_prev": sc.pose_prev.tolist(),
              "pose_next": sc.pose_next.tolist(), "objects": sc.objects}
    return Sample(sc.frame, sc.depth, sc.dyn_mask, concat_adjacent(cp, cn)), record


def build_dataset(n, seed, scene_cfg: SceneConfig = SceneConfig(), with_records=False):
    pairs = [make_sample(s, scene_cfg) for s in scene_seeds(seed, n)]
    data = [p[0] for p in pairs]
    return (data, [p[1] for p in pairs]) if with_records else data


_FIELDS = ("image", "depth", "dyn_mask", "adj")


def write_dataset(directory, samples, records=None, scene_cfg: SceneConfig | None = None, **meta):
    """One GST1 tensor per sample and field (``s0007.adj.gst``) plus a manifest."""
    arrays = {f"s{i:04d}.{f}": np.asarray(getattr(s, f), dtype=np.float32)
              for i, s in enumerate(samples) for f in _FIELDS}
    manifest = {"count": len(samples), **meta}
    if scene_cfg is not None:
        manifest["scene"] = scene_cfg.to_dict()
        manifest["intrinsics"] = scene_cfg.intrinsics.to_dict()
        manifest["bins"] = depth_bins(scene_cfg.depth_bins, scene_cfg.d_min, scene_cfg.d_max).tolist()
    if records is not None:
        manifest["samples"] = records
    gst.save_bundle(directory, arrays, manifest)


def load_dataset(directory):
    arrays, meta = gst.load_bundle(directory)
    n = meta["count"]
    return [Sample(*(arrays[f"s{i:04d}.{f}"] for f in _FIELDS)) for i in range(n)], meta


# --- checkpoints ---------------------------------------------------------


def save_checkpoint(directory, params, cfg: PipelineConfig, **meta):
    manifest = {"config": cfg.to_dict(), "param_count": param_count(params), **meta}
    gst.save_bundle(directory, {k: np.asarray(v, dtype=np.float32) for k, v in params.items()},
                    manifest)


def load_checkpoint(directory):
    arrays, meta = gst.load_bundle(directory)
    return arrays, PipelineConfig.from_dict(meta["config"]), meta


def write_csv(path, rows):
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
