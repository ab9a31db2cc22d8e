"""
Training the toy scene three ways
=================================

Single-view batches with the classic densification metric, four-view
batches with the per-view metrics, and the same with the distance-aware
SSIM term added.  Short runs; the acceptance suite does the full 2k.
"""

from mvgs.batchvar import MiniBatchSpec
from mvgs.densify import AdcConfig
from mvgs.trainer import TrainConfig, Trainer, make_dataset

ITERS = 400
ds = make_dataset(0, 200, 16)

arms = {
    "single view, e_old": ("l1", MiniBatchSpec("single_view", 1), "e_old"),
    "4 views, e1/e2": ("l1", MiniBatchSpec("multi_view", 4), "multi_view"),
    "4 views, e1/e2, +dssim3d": ("l1_dssim3d", MiniBatchSpec("multi_view", 4), "multi_view"),
}

for name, (loss, batch, metric) in arms.items():
    adc = AdcConfig(metric_mode=metric, grad_threshold=5e-4, start_iter=100, interval=100, stop_iter=300,
                    opacity_reset_interval=0)
    tr = Trainer(TrainConfig(iterations=ITERS, loss_mode=loss, batch=batch, adc=adc, eval_every=100,
                             max_gaussians=1000), ds)
    tr.run()
    for row in tr.history:
        print(f"{name:26s} iter {row.iteration:4d}  psnr {row.psnr:6.2f}  ssim {row.ssim:.4f}  n {row.n_gauss}")
