"""
Thread occupancy of the three render schedules
==============================================

Four views, each rendering a disjoint quarter of every tile.  The masked
schedule launches a full tile of threads per (tile, view) and idles three
quarters of them; the compacted schedule packs each view's pixels into its
own block.
"""

import time

import numpy as np

from mvgs.batchvar import split_pixels
from mvgs.objective import evaluate
from mvgs.rasterizer import CSV_HEADER, make_plan, occupancy_report, render
from mvgs.trainer import make_dataset

ds = make_dataset(1, 200, 8)
cams, cloud = ds.cameras, ds.gaussians
images = [im.pixels * 0.9 for im in ds.images]
sets = split_pixels(64, 64, 4, np.random.default_rng(0), 16)

plans = {
    "one full view": make_plan([0], 64, 64, "full"),
    "4 views, masked": make_plan(range(4), 64, 64, "naive_masked", 16, sets),
    "4 views, compacted": make_plan(range(4), 64, 64, "thread_efficient", 16, sets),
    "4 full views": make_plan(range(4), 64, 64, "full"),
}

print(CSV_HEADER)
for plan in plans.values():
    print(occupancy_report(render(plan, cloud, cams)).csv_row())

# forward + backward, median of 20
print()
base = None
for name, plan in plans.items():
    evaluate(plan, cloud, cams, images)
    ts = []
    for _ in range(20):
        t = time.perf_counter()
        evaluate(plan, cloud, cams, images)
        ts.append(time.perf_counter() - t)
    ms = np.median(ts) * 1e3
    base = base or ms
    print(f"{name:20s} {ms:7.2f} ms  ({ms / base:.2f}x)")
