"""Command-line entry point: ``gsdc {gen,train,mask-train,eval,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .scenes import SceneConfig

log = logging.getLogger("gsdc")


def _split_config(path):
    """Read a JSON config and split it into pipeline and training overrides."""
    from .pipeline import PipelineConfig, TrainConfig

    raw = json.loads(Path(path).read_text()) if path else {}
    pkeys = {f.name for f in fields(PipelineConfig)}
    tkeys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - pkeys - tkeys
    if unknown:
        raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ({k: v for k, v in raw.items() if k in pkeys},
            {k: v for k, v in raw.items() if k in tkeys})


def cmd_gen(args):
    from .pipeline import build_dataset, write_dataset

    cfg = SceneConfig(height=args.height, width=args.width, n_objects=args.objects)
    data, records = build_dataset(args.count, args.seed, cfg, with_records=True)
    write_dataset(args.out, data, records, cfg, seed=args.seed)
    log.info("wrote %d samples to %s", len(data), args.out)


def cmd_train(args):
    from .pipeline import (PipelineConfig, TrainConfig, load_checkpoint, load_dataset, save_checkpoint,
                           train_stage1, train_stage2, write_csv)

    pover, tover = _split_config(args.config)
    cfg = PipelineConfig(**pover)
    tcfg = TrainConfig(**tover)
    tcfg = replace(tcfg, seed=args.seed, **({"epochs": args.epochs} if args.epochs else {}))
    data, _ = load_dataset(args.data)
    val = load_dataset(args.val)[0] if args.val else None
    out = Path(args.out)
    if args.stage == 1:
        params, history = train_stage1(data, cfg, tcfg, val=val)
    else:
        mask = None
        if cfg.variant == "ours":
            if not args.mask_ckpt:
                raise SystemExit("stage 2 of variant 'ours' needs --mask-ckpt")
            mask, _, _ = load_checkpoint(args.mask_ckpt)
        params, history = train_stage2(data, mask, cfg, tcfg)
    save_checkpoint(out, params, cfg, stage=args.stage, train=tcfg.__dict__)
    write_csv(out / "metrics.csv", history)
    log.info("checkpoint written to %s", out)


def cmd_mask_train(args):
    from .pipeline import PipelineConfig, TrainConfig, load_dataset, save_checkpoint, train_stage1, write_csv

    pover, _ = _split_config(args.config)
    cfg = PipelineConfig(**{**pover, "mask_variant": args.variant})
    tcfg = TrainConfig(epochs=args.epochs, batch=args.batch, max_lr=args.max_lr, seed=args.seed)
    data, _ = load_dataset(args.data)
    val = load_dataset(args.val)[0] if args.val else None
    params, history = train_stage1(data, cfg, tcfg, val=val)
    out = Path(args.out)
    save_checkpoint(out, params, cfg, stage=1, train=tcfg.__dict__)
    write_csv(out / "metrics.csv", history)


def cmd_eval(args):
    from .pipeline import evaluate, load_checkpoint, load_dataset, write_csv

    params, cfg, _ = load_checkpoint(args.ckpt)
    data, _ = load_dataset(args.data)
    row = evaluate(params, data, cfg, args.region)
    if row is None:
        raise SystemExit(f"no pixels in region {args.region!r}")
    write_csv(args.out, [{"region": args.region, **row.to_dict()}])
    print(json.dumps({"region": args.region, **row.to_dict()}))


def cmd_bench(args):
    from . import bench
    from .pipeline import load_checkpoint, load_dataset

    data, _ = load_dataset(args.data)
    out = Path(args.out)
    ck = Path(args.ckpts) if args.ckpts else None
    size = tuple(args.size)
    if args.table == 2:
        ckpts = {v: ck / v for v in bench.LABELS} if ck else {}
        rows = bench.run_ablation_table2(data, ckpts, timing=not args.no_timing, size=size,
                                         iters=args.iters)
        bench.write_rows(out / "table2.csv", rows)
        bench.emit_plots(out / "table2.csv", out)
    elif args.table == 3:
        from .supermask import VARIANTS

        mask = {}
        for v in VARIANTS:
            d = ck / f"mask_{v}" if ck else None
            if d is not None and (d / "manifest.json").exists():
                mask[v] = load_checkpoint(d)[0]
        bench.write_rows(out / "table3.csv", bench.run_mask_designs(data, mask, size=size))
    else:
        ckpts = {}
        for ns in sorted({g[0] for g in args.grid}):
            d = ck / f"ns{ns}" if ck else None
            if d is not None and (d / "manifest.json").exists():
                ckpts[ns] = d
        rows = bench.run_sweep_table4(data, ckpts, args.grid, timing=not args.no_timing,
                                      size=size, iters=args.iters)
        bench.write_rows(out / "table4.csv", rows)
    log.info("bench table %d written to %s", args.table, out)


def _grid(text):
    ns, nt = text.split("x")
    return int(ns), int(nt)


def build_parser():
    p = argparse.ArgumentParser(prog="gsdc", description="Cue-fusion depth toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--objects", type=int, default=2)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train stage 1 (mask) or stage 2 (fusion)")
    t.add_argument("--data", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--config", help="JSON file of pipeline/training overrides")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--mask-ckpt", help="stage-1 checkpoint (stage 2, variant 'ours')")
    t.add_argument("--val", help="validation dataset for stage-1 selection")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("mask-train", help="train the mask network alone (stage 1)")
    m.add_argument("--data", required=True)
    m.add_argument("--variant", choices=("full", "ds_us_4x", "ds_us_8x", "ds_maxpool_4x"),
                   default="ds_us_4x")
    m.add_argument("--epochs", type=int, default=40)
    m.add_argument("--batch", type=int, default=4)
    m.add_argument("--max-lr", type=float, default=2e-3)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--val")
    m.add_argument("--config", help="JSON file with pipeline overrides (kappa, candidates, ...)")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_mask_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--region", choices=("overall", "dynamic"), default="overall")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="write an ablation table (2: variants, 3: mask designs, 4: N_s x N_theta sweep) as CSV")
    b.add_argument("--data", required=True)
    b.add_argument("--table", type=int, choices=(2, 3, 4), required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--ckpts", help="directory of per-variant checkpoints")
    b.add_argument("--grid", type=_grid, nargs="+", default=[(4, 4), (4, 2), (4, 8), (8, 4)],
                   help="N_s x N_theta pairs for --table 4, e.g. 4x4 8x4")
    b.add_argument("--size", type=int, nargs=2, default=[256, 512], metavar=("H", "W"))
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--no-timing", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (FileNotFoundError, ValueError) as e:
        print(f"gsdc: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
