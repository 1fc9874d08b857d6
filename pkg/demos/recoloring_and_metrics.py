"""Recoloring, the geometry/color error link, and rate-distortion bookkeeping.

Run with ``python3 demos/recoloring_and_metrics.py``.
"""

import numpy as np

from pcenhance import metrics
from pcenhance.harness.codec import PRESETS, degrade
from pcenhance.harness.synthetic import jitter_frame, make_synthetic_sequence
from pcenhance.recolor import correlation_analysis, da_knn_recolor

frame = make_synthetic_sequence("textured-wave", 2, bit_depth=6, seed=0)[0]
print(f"textured wave: {len(frame)} points")

# Recoloring onto the original geometry gives back the original colors
# exactly: every point is its own unique nearest neighbour.
same = da_knn_recolor(frame.with_attrs(None), frame)
print("recolor onto identical geometry is exact:", np.array_equal(same.attrs, frame.attrs))

# Move points around while keeping their own colors, then ask what color
# the original cloud would have given them. The further a point moved,
# the further its color is from what recoloring finds there.
moved = jitter_frame(frame, 3, np.random.default_rng(1))
res = correlation_analysis(frame, moved)
print(f"\njittered by up to 3 voxels: pearson r = {res.pearson_r:.3f}, "
      f"through-origin slope = {res.slope:.2f} color units per voxel")
for lo, hi in ((0, 1), (1, 4), (4, 10), (10, np.inf)):
    sel = (res.delta_geo >= lo) & (res.delta_geo < hi)
    if sel.any():
        print(f"  geometry error in [{lo}, {hi}): mean color error {res.delta_att[sel].mean():6.2f} "
              f"over {sel.sum()} points")

# The codec stand-in: five presets from coarse to fine. Each gives a rate
# (bits per input point) and a quality; together they form an R-D curve.
print("\npreset  bpip    D1 PSNR   Y PSNR")
points, shifted = [], []
for name in sorted(PRESETS):
    dec, bits = degrade(frame, PRESETS[name])
    bpip = metrics.bpip(bits / 8.0, len(frame))
    d1 = metrics.d1_psnr(frame, dec).symmetric
    y = metrics.yuv_psnr(frame, dec).y
    print(f"{name}    {bpip:6.3f}  {d1:7.2f}  {y:7.2f}")
    points.append((bpip, y))
    shifted.append((bpip * 0.8, y))

# Bjontegaard deltas compare two curves over their shared range. The
# D1 column repeats itself where only the color step changes, so the
# curves use Y PSNR. Reaching every quality with 20% fewer bits shows
# as a -20% BD rate.
anchor, better = metrics.RdCurve(points), metrics.RdCurve(shifted)
print(f"\nBD rate of a curve needing 0.8x the bits: {metrics.bd_rate(anchor, better):.2f}%")
print(f"BD quality of the same curve:            {metrics.bd_quality(anchor, better):+.3f} dB")
