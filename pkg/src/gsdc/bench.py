"""Ablation runners, throughput timing, and SVG plots.

Three tables are produced as CSV:

* attention variants (ours / deform / local / full): accuracy on the
  overall and dynamic regions, FLOPs, FPS
* mask-network designs: IoU, CP at two candidate counts, FLOPs
* the N_s x N_theta grid: candidate proportion, accuracy, FLOPs, FPS

Accuracy comes from the desk-scale synthetic data.  FLOPs and FPS are
taken at the full-size setting (``flops.FULL_SIZE``) on random inputs,
timing only the fusion block that the FLOPs count covers.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .flops import FULL_SIZE, count_flops, full_size_config, mask_net_macs
from .pipeline import (PipelineConfig, evaluate, fusion, init_params, load_checkpoint, mask_metrics,
                       mask_prior, precompute_priors, predict_depths)
from .supermask import VARIANTS as MASK_VARIANTS

LABELS = {"ours": ("Ours", "/"), "deform": ("Deform", "2x"),
          "local": ("Local", "4x"), "full": ("Full", "4x")}
MASK_LABELS = {"full": "No DS & US", "ds_us_4x": "DS & US (4x)",
               "ds_us_8x": "DS & US (8x)", "ds_maxpool_4x": "DS & MP (4x)"}


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class BenchRow:
    method: str
    ds: str
    abs_rel_overall: float
    delta1_overall: float
    abs_rel_dynamic: float
    delta1_dynamic: float
    flops_g: float
    fps: float

    def to_dict(self):
        return asdict(self)


def median_fps(fn, warmup=5, iters=20):
    """Median frames per second of ``fn()`` after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1.0 / statistics.median(times)


def fusion_fps(cfg: PipelineConfig, size=FULL_SIZE, warmup=5, iters=20, seed=0):
    """Throughput of the fusion block (plus mask net for ``ours``) at ``size``."""
    H, W = size
    rng = np.random.default_rng(seed)
    params = {k: T.Tensor(v) for k, v in init_params(seed, cfg).items()}
    image = rng.random((H, W, 3)).astype(np.float32)
    c_t = T.Tensor(rng.normal(size=(H, W, cfg.n_bins)))
    adj = T.Tensor(rng.random((H, W, 2 * cfg.n_bins)))

    def run():
        prior = mask_prior(image, params, cfg) if cfg.variant == "ours" else None
        fusion(c_t, adj, params, cfg, prior)

    return median_fps(run, warmup, iters)


def _resolve(ckpts, names):
    """Map each name to ``(params, cfg)``; directories are loaded."""
    missing = [n for n in names if n not in ckpts or ckpts[n] is None
               or (isinstance(ckpts[n], (str, Path)) and not (Path(ckpts[n]) / "manifest.json").exists())]
    if missing:
        raise MissingCheckpointError(f"missing checkpoints for: {', '.join(missing)}")
    out = {}
    for n in names:
        c = ckpts[n]
        if isinstance(c, (str, Path)):
            params, cfg, _ = load_checkpoint(c)
            c = (params, cfg)
        out[n] = c
    return out


def _accuracy(params, cfg, data, mask_params=None):
    priors = None
    if cfg.variant == "ours":
        priors = precompute_priors(mask_params or {k: v for k, v in params.items()
                                                   if k.startswith("mask.")}, data, cfg)
    depths = predict_depths(params, data, cfg, priors)
    return (evaluate(params, data, cfg, "overall", depths=depths),
            evaluate(params, data, cfg, "dynamic", depths=depths))


def run_ablation_table2(data, ckpts, timing=True, size=FULL_SIZE, iters=20):
    """One BenchRow per attention variant, in table order.

    ``ckpts`` maps variant name to a checkpoint directory or
    ``(params, PipelineConfig)``.
    """
    resolved = _resolve(ckpts, list(LABELS))
    rows = []
    for v, (params, cfg) in resolved.items():
        ov, dyn = _accuracy(params, cfg, data)
        big = full_size_config(variant=v, n_samples=cfg.n_samples)
        fps = fusion_fps(big, size, iters=iters) if timing else float("nan")
        name, ds = LABELS[v]
        rows.append(BenchRow(name, ds, ov.abs_rel, ov.d1,
                             dyn.abs_rel if dyn else float("nan"), dyn.d1 if dyn else float("nan"),
                             count_flops(big, *size).gflops, fps))
    return rows


def run_mask_designs(data, mask_ckpts, cfg: PipelineConfig = PipelineConfig(), n_candidates=(2, 4),
               size=FULL_SIZE):
    """IoU, CP and FLOPs of each mask-network design.

    ``mask_ckpts`` maps mask variant to its stage-1 parameters.
    """
    missing = [v for v in MASK_VARIANTS if v not in mask_ckpts]
    if missing:
        raise MissingCheckpointError(f"missing mask checkpoints for: {', '.join(missing)}")
    rows = []
    for v in MASK_VARIANTS:
        c = replace(cfg, mask_variant=v)
        miou, cps = mask_metrics(mask_ckpts[v], data, c, n_candidates)
        row = {"design": MASK_LABELS[v], "iou": miou}
        row.update({f"cp_{n}": cps[n] for n in n_candidates})
        row["flops_g"] = 2 * mask_net_macs(*size, v) / 1e9
        rows.append(row)
    return rows


def run_sweep_table4(data, ckpts, grid, timing=True, size=FULL_SIZE, iters=20):
    """Evaluate the ``ours`` model over ``grid`` = [(N_s, N_theta), ...].

    ``ckpts`` maps N_s to a trained checkpoint (sampling heads depend on
    N_s); N_theta is an inference-time setting.
    """
    missing = sorted({ns for ns, _ in grid if ns not in ckpts})
    if missing:
        raise MissingCheckpointError(f"missing checkpoints for N_s = {missing}")
    rows = []
    for ns, nt in grid:
        params, cfg = _resolve(ckpts, [ns])[ns]
        c = replace(cfg, n_candidates=nt)
        ov, dyn = _accuracy(params, c, data)
        windows = (data[0].image.shape[0] // (4 * c.kappa)) * (data[0].image.shape[1] // (4 * c.kappa))
        big = full_size_config(n_samples=ns, n_candidates=nt)
        rows.append({
            "n_s": ns, "n_theta": nt, "proportion": candidate_proportion(nt, windows),
            "abs_rel_overall": ov.abs_rel, "delta1_overall": ov.d1,
            "abs_rel_dynamic": dyn.abs_rel if dyn else float("nan"),
            "delta1_dynamic": dyn.d1 if dyn else float("nan"),
            "flops_g": count_flops(big, *size).gflops,
            "fps": fusion_fps(big, size, iters=iters) if timing else float("nan"),
        })
    return rows


def candidate_proportion(n_candidates, n_windows):
    return n_candidates / n_windows


# --- CSV and plots -------------------------------------------------------


def write_rows(path, rows):
    rows = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in rows]
    if not rows:
        raise ValueError("no rows to write")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


PLOTS = (("flops_g", "FLOPs (G)", "flops.svg"), ("abs_rel_overall", "Abs Rel (overall)", "absrel.svg"))


def emit_plots(csv_path, out_dir):
    """FLOPs and Abs Rel bar charts (SVG) from an attention-variant CSV.

    Each bar is labelled with its value so the plot can be read back.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [r["method"] for r in rows]
    paths = []
    with plt.rc_context({"svg.fonttype": "none", "svg.hashsalt": "gsdc"}):
        for key, label, fname in PLOTS:
            vals = [float(r[key]) for r in rows]
            fig, ax = plt.subplots(figsize=(5, 3.2))
            bars = ax.bar(names, vals, color="#4a7ab5")
            texts = ax.bar_label(bars, labels=[r[key] for r in rows], fontsize=7)
            for i, t in enumerate(texts):
                t.set_gid(f"value-{i}")
            ax.set_ylabel(label)
            fig.tight_layout()
            path = out_dir / fname
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths


def read_bar_labels(svg_path):
    """Bar values, in bar order, parsed back from an ``emit_plots`` SVG."""
    import re

    text = Path(svg_path).read_text()
    found = re.findall(r'<g id="value-(\d+)">\s*<text[^>]*>([^<]*)</text>', text)
    return [float(v) for _, v in sorted(found, key=lambda x: int(x[0]))]
