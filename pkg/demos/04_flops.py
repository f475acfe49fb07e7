"""
Where the compute goes
======================

Closed-form MAC counts for the four fusion variants at 256x512, broken
down by stage.  The sparse branch is cheap, full attention is quadratic in
tokens, and the mask-gated variant pays for dense attention only inside
its N_theta candidate windows.

Run with ``python3 demos/04_flops.py``.
"""

from gsdc.flops import FULL_SIZE, STAGES, count_flops, full_size_config, mask_net_macs

cfg = full_size_config()
reports = {v: count_flops(cfg, *FULL_SIZE, v) for v in ("deform", "local", "ours", "full")}

print(f"{'stage (GMAC)':18s}" + "".join(f"{v:>10s}" for v in reports))
for s in STAGES:
    row = [reports[v].stages.get(s, 0) / 1e9 for v in reports]
    if any(row):
        print(f"{s:18s}" + "".join(f"{x:10.3f}" for x in row))
print(f"{'GFLOPs':18s}" + "".join(f"{r.gflops:10.2f}" for r in reports.values()))
print(f"\nfull -> ours saves {100 * (1 - reports['ours'].total / reports['full'].total):.1f}%")

print("\nmask network GFLOPs by design:")
for v in ("full", "ds_us_4x", "ds_us_8x"):
    print(f"  {v:10s} {2 * mask_net_macs(*FULL_SIZE, v) / 1e9:8.2f}")
