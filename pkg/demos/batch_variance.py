"""
Gradient variance: one whole view vs four partial views
=======================================================

Freeze a partly trained cloud, draw many mini-batches of one image's worth
of pixels, and measure how much the positional gradients scatter.
"""

from mvgs.batchvar import MiniBatchSpec, estimate_grad_variance
from mvgs.cli import frozen_cloud
from mvgs.trainer import make_dataset, split_views

ds = make_dataset(0, 200, 16, width=32, height=32)
train_views, _ = split_views(16, 8)
images = [im.pixels for im in ds.images]

for it in (100, 500):
    cloud = frozen_cloud(ds, 0, it)
    for strategy, b in (("single_view", 1), ("multi_view", 2), ("multi_view", 4)):
        rep = estimate_grad_variance(cloud, ds.cameras, images, MiniBatchSpec(strategy, b), 64, views=train_views)
        print(f"iter {it:4d}  {strategy:11s} B={b}  variance {rep.variance:.3e}")
