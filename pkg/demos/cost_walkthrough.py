"""Where the compute goes: analytic cost ledger for the full-size network.

Run: python3 demos/cost_walkthrough.py
"""

from collections import defaultdict

from clusterscan import build, full_config
from clusterscan.costs import count_model, published_comparison, scaling_report, strategy_compare

model = build(full_config(), seed=0)

# Totals at 64x64 next to the published figures.
cmp = published_comparison(model)
print(f"parameters   {cmp['params']:,} (published {cmp['published_params']:,})")
print(f"FLOPs @64x64 {cmp['flops_64'] / 1e9:.3f} G (published {cmp['published_flops_64'] / 1e9:.3f} G)")
print(f"MACs  @64x64 {cmp['macs_64'] / 1e9:.3f} G")

# Break the total down by stage, and by mixer type where blocks have one.
led = count_model(model, (1, 3, 64, 64))
by_stage = defaultdict(int)
for path, entry in led.entries.items():
    parts = path.split(".")
    kind = next((k for k in ("ccsm", "scfm", "ffn") if k in parts), None)
    by_stage[parts[0] if kind is None else f"{parts[0]}/{kind}"] += entry.flops
print("\nFLOPs by stage (M):")
for key, v in sorted(by_stage.items(), key=lambda kv: -kv[1]):
    print(f"  {key:<18} {v / 1e6:8.1f}")

# Doubling the side length: the scan over centroids stays put, the rest grows 4x.
print("\nscaling 64 -> 128:")
print(scaling_report(model, [64, 128]).text())

# Serial scan over every pixel against the cluster-centric path.
print("cluster path / full-pixel scan (C=32, n=4, N=16):")
for side in (16, 32, 64, 128, 256):
    r = strategy_compare(32, side, side, 4, 16)
    print(f"  {side:>3}x{side:<3} ratio {r['ratio']:.4f}")
