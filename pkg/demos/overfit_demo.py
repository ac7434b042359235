"""Fit the smoke network to a single synthetic 64x64 pair and watch PSNR climb.

Run: python3 demos/overfit_demo.py [steps]   (2000 steps take about 3 minutes)
"""

import sys

import numpy as np

from clusterscan import build, smoke_config
from clusterscan.metrics import psnr
from clusterscan.training import block_averages, synthetic_pair, train_pairs

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
degraded, clean = synthetic_pair(64)
print(f"input PSNR {psnr(degraded, clean):.2f} dB")

model = build(smoke_config(), seed=0)


def progress(line):
    step = int(line.split()[0])
    if step % 100 == 0:
        print(line)


log, _ = train_pairs(
    model, [(degraded, clean)], steps, crop=64, seed=0, lr0=1e-3, flips=False, on_step=progress
)
means = block_averages(log.losses)
print("100-step loss means:", np.array2string(means, precision=5))
print(f"final training PSNR {log.psnrs[-1]:.2f} dB")
