"""One feature map through aggregation, the centroid scan and diffusion back to pixels.

Run: python3 demos/cluster_pipeline.py
"""

import numpy as np

from clusterscan.aggregate import AggregatorParams, feature_aggregate
from clusterscan.autodiff import no_grad
from clusterscan.diffuse import DiffuseParams, assign, sd_apply
from clusterscan.scan import ScanParams, s6_scan

rng = np.random.default_rng(7)
C, H, W, n = 8, 16, 16, 4

# Two flat regions with a little noise: left half and right half differ in direction.
F = np.zeros((C, H, W))
F[:, :, : W // 2] = rng.normal(size=(C, 1, 1))
F[:, :, W // 2 :] = rng.normal(size=(C, 1, 1))
F += 0.05 * rng.normal(size=F.shape)

agg = AggregatorParams.init(C, n, rng=rng)
scan = ScanParams.init(C, state_dim=4, rng=rng)
diffuse = DiffuseParams.init()

with no_grad():
    cs = feature_aggregate(F, agg, seed=0)
    print("initial centroids", cs.initial.shape, "-> refined", cs.refined.shape)
    print("pdf rows sum to", np.round(cs.pdf.data.sum(axis=1), 12))

    # The scan runs over n centroids, not H*W pixels.
    weights = s6_scan(cs.refined, scan)
    print("centroid weights", weights.shape)

    # Each pixel takes the expected weight under its assignment distribution.
    field = assign(cs.pdf, diffuse.sharp_alpha, diffuse.sharp_beta)
    winner = field.alpha.data.argmax(axis=1).reshape(H, W)
    print("dominant centroid per pixel (rows 0 and 8):")
    print(" ", winner[0])
    print(" ", winner[8])

    out = sd_apply(F, cs.pdf, weights, diffuse)
    print("modulated map", out.shape, "finite:", bool(np.isfinite(out.data).all()))
