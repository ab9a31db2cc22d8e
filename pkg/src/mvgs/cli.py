"""``mvgs`` command line: scene generation, training, rendering, checks and benchmarks.

Exit status: 0 on success, 1 when a check or validation fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .batchvar import (LEMMA1_CSV_HEADER, VARIANCE_CSV_HEADER, LemmaOneSetup, MiniBatchSpec, estimate_grad_variance,
                       lemma1_experiment, split_pixels)
from .gradcheck import GRADCHECK_LOSSES, run_gradcheck
from .rasterizer import CSV_HEADER as OCCUPANCY_CSV_HEADER
from .rasterizer import make_plan, occupancy_report, render
from .scene import (Image, SceneDataset, SceneFormatError, load_scene, read_depth, read_ppm, save_scene,
                    write_depth, write_ppm)
from .trainer import TrainConfig, Trainer, TrainingDiverged, make_dataset, render_views

log = logging.getLogger("mvgs")

SCENE_FILE = "scene.txt"


class UsageError(Exception):
    pass


def _write_resolved(out: Path, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k} = {values[k]}\n" for k in sorted(values))
    (out / "resolved-config").write_text(text, encoding="utf-8")


def _args_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",) and v is not None}


def _view_name(i: int) -> str:
    return f"view_{i:03d}"


def load_dataset(scene_dir: Path) -> SceneDataset:
    scene_path = scene_dir / SCENE_FILE
    if not scene_path.exists():
        raise UsageError(f"--scene: {scene_path} not found")
    cloud, cams = load_scene(scene_path)
    images = []
    for i, cam in enumerate(cams):
        ppm = scene_dir / f"{_view_name(i)}.ppm"
        if not ppm.exists():
            raise UsageError(f"--scene: missing ground-truth image {ppm}")
        dpath = scene_dir / f"{_view_name(i)}.depth"
        depth = read_depth(dpath) if dpath.exists() else None
        images.append(Image(cam.width, cam.height, read_ppm(ppm), depth))
    return SceneDataset(cams, images, name=scene_dir.name, gaussians=cloud if len(cloud) else None)


def write_dataset(ds: SceneDataset, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_scene(ds.gaussians, ds.cameras, out / SCENE_FILE)
    for i, im in enumerate(ds.images):
        write_ppm(out / f"{_view_name(i)}.ppm", im.pixels)
        write_depth(out / f"{_view_name(i)}.depth", im.depth)


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_synthetic(args) -> int:
    out = Path(args.out)
    ds = make_dataset(args.seed, args.gaussians, args.cameras, width=args.size, height=args.size,
                      layout=args.layout, workers=args.workers)
    write_dataset(ds, out)
    _write_resolved(out, _args_config(args))
    print(f"wrote {out / SCENE_FILE} and {len(ds.images)} views")
    return 0


def build_train_config(args) -> TrainConfig:
    values = cfgmod.read_file(args.config) if args.config else {}
    values.update(cfgmod.parse_overrides(args.set))
    cfg = cfgmod.apply(TrainConfig(), values)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, batch=dataclasses.replace(cfg.batch, seed=args.seed))
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    return cfg


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config").write_text(cfgmod.resolved_text(cfg), encoding="utf-8")
    if args.scene:
        ds = load_dataset(Path(args.scene))
    else:
        ds = make_dataset(cfg.seed, 200, 16, workers=cfg.workers)
    if args.resume:
        tr = Trainer.resume(args.resume, cfg, ds, out)
    else:
        tr = Trainer(cfg, ds, out)
    try:
        while tr.iteration < cfg.iterations:
            tr.step()
            if args.checkpoint_every and tr.iteration % args.checkpoint_every == 0:
                tr.save_checkpoint(out / f"checkpoint_{tr.iteration:06d}.txt")
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    (out / "metrics.csv").write_text(tr.metrics_csv(), encoding="utf-8")
    (out / "adc.csv").write_text(tr.adc_csv(), encoding="utf-8")
    tr.save_checkpoint(out / "checkpoint_final.txt")
    save_scene(tr.cloud, tr.cams, out / SCENE_FILE)
    last = tr.history[-1] if tr.history else None
    if last:
        print(f"iter {last.iteration} loss {last.loss:.5f} psnr {last.psnr:.3f} ssim {last.ssim:.4f} "
              f"gaussians {last.n_gauss}")
    return 0


def cmd_render(args) -> int:
    path = Path(args.scene)
    scene_file = path / SCENE_FILE if path.is_dir() else path
    if not scene_file.exists():
        raise UsageError(f"--scene: {scene_file} not found")
    text = scene_file.read_text(encoding="utf-8")
    if "\nmoments " in text:
        text = text.partition("\nmoments ")[0] + "\n"
        from .scene import parse_scene

        cloud, cams, _ = parse_scene(text, renormalize=False)
    else:
        cloud, cams = load_scene(scene_file)
    views = range(len(cams)) if args.views is None else [int(v) for v in args.views.split(",")]
    for v in views:
        if not 0 <= v < len(cams):
            raise UsageError(f"--views: view {v} out of range (0..{len(cams) - 1})")
    out = Path(args.out)
    _write_resolved(out, _args_config(args))
    for v, (img, depth, _) in zip(views, render_views(cloud, cams, list(views), args.workers)):
        write_ppm(out / f"render_{v:03d}.ppm", img)
        write_depth(out / f"render_{v:03d}.depth", depth)
    print(f"rendered {len(list(views))} views to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if not 8 <= args.size <= 16:
        raise UsageError("--size must be between 8 and 16")
    if not 1 <= args.gaussians <= 10:
        raise UsageError("--gaussians must be between 1 and 10")
    losses = GRADCHECK_LOSSES if args.loss == "all" else (args.loss,)
    ok = True
    worst = None
    for loss in losses:
        res = run_gradcheck(args.seed, loss, args.gaussians, args.size, rel_tol=args.tol)
        print(res.line())
        ok &= res.passed
        if worst is None or res.worst_rel > worst.worst_rel:
            worst = res
    print(f"worst parameter: {worst.worst_param} rel={worst.worst_rel:.3g} (loss {worst.loss})")
    return 0 if ok else 1


def cmd_variance(args) -> int:
    if args.scene:
        ds = load_dataset(Path(args.scene))
    else:
        ds = make_dataset(args.seed, args.gaussians, args.cameras, width=args.size, height=args.size,
                          workers=args.workers)
    from .trainer import split_views

    train_views, _ = split_views(len(ds.cameras), 8)
    strategies = ["single_view", "multi_view"] if args.strategy == "both" else [args.strategy]
    rows = [VARIANCE_CSV_HEADER + ",iter"]
    for it in [int(x) for x in args.iters.split(",")]:
        cloud = frozen_cloud(ds, args.seed, it, args.workers)
        for strat in strategies:
            spec = MiniBatchSpec(strat, args.B if strat == "multi_view" else 1, seed=args.seed)
            rep = estimate_grad_variance(cloud, ds.cameras, [im.pixels for im in ds.images], spec, args.samples,
                                         views=train_views, workers=args.workers)
            rows.append(rep.csv_row() + f",{it}")
    _emit(rows, args.out)
    return 0


def frozen_cloud(ds: SceneDataset, seed: int, iterations: int, workers: int | None = 1):
    """Parameters after ``iterations`` steps of plain single-view L1 training."""
    from .densify import AdcConfig

    cfg = TrainConfig(iterations=iterations, loss_mode="l1", seed=seed, workers=workers or 1,
                      batch=MiniBatchSpec("single_view", 1, seed=seed), adc=AdcConfig(enabled=False),
                      eval_every=max(iterations, 1))
    tr = Trainer(cfg, ds)
    tr.run()
    return tr.cloud


def cmd_lemma1(args) -> int:
    means = [float(x) for x in args.means.split(",")]
    spread = args.spread
    values = np.array([[m - spread, m + spread] for m in means])
    probs = np.full_like(values, 0.5)
    setup = LemmaOneSetup(values, probs, args.K)
    rows = lemma1_experiment(setup, args.trials, np.random.default_rng(args.seed))
    _emit([LEMMA1_CSV_HEADER] + [r.csv_row() for r in rows], args.out)
    exact = [r.var_exact for r in rows]
    if setup.sigma_mu2 > 0 and all(e is not None for e in exact):
        if any(b >= a for a, b in zip(exact, exact[1:])):
            print("error: exact variance is not strictly decreasing in m", file=sys.stderr)
            return 1
    return 0


def cmd_bench_occupancy(args) -> int:
    ds = make_dataset(args.seed, args.gaussians, max(args.views, 2), width=args.size, height=args.size,
                      workers=args.workers)
    cams = ds.cameras
    rng = np.random.default_rng(args.seed)
    views = list(range(args.views))
    sets = split_pixels(args.size, args.size, args.views, rng, args.tile)
    rows = [OCCUPANCY_CSV_HEADER]
    plans = [make_plan([0], args.size, args.size, "full", args.tile),
             make_plan(views, args.size, args.size, "naive_masked", args.tile, sets),
             make_plan(views, args.size, args.size, "thread_efficient", args.tile, sets)]
    for plan in plans:
        render(plan, ds.gaussians, cams, workers=args.workers)  # warm-up
        out = min((render(plan, ds.gaussians, cams, workers=args.workers) for _ in range(args.repeats)),
                  key=lambda o: o.wall_ms)
        rows.append(occupancy_report(out).csv_row())
    _emit(rows, args.out)
    return 0


def _emit(rows: list[str], out: str | None) -> None:
    text = "\n".join(rows) + "\n"
    if out:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        _write_resolved(p.parent, {"output": p.name})
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvgs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--workers", type=int, default=None, help="worker threads (default: logical cores)")

    s = sub.add_parser("make-synthetic", help="random scene plus ground-truth renders")
    common(s)
    s.add_argument("--gaussians", type=int, default=200)
    s.add_argument("--cameras", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--layout", choices=["orbit", "random"], default="orbit")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("train", help="optimise a scene")
    common(s, None)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--scene", help="directory written by make-synthetic")
    s.add_argument("--iterations", type=int)
    s.add_argument("--resume", help="checkpoint file to continue from")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render views of a scene or checkpoint")
    common(s)
    s.add_argument("--scene", required=True)
    s.add_argument("--views", help="comma-separated view indices")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    common(s)
    s.add_argument("--gaussians", type=int, default=8)
    s.add_argument("--size", type=int, default=12)
    s.add_argument("--loss", choices=[*GRADCHECK_LOSSES, "all"], default="mix")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("variance", help="mini-batch gradient variance")
    common(s)
    s.add_argument("--scene")
    s.add_argument("--gaussians", type=int, default=200)
    s.add_argument("--cameras", type=int, default=16)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--strategy", choices=["single_view", "multi_view", "both"], default="both")
    s.add_argument("--B", type=int, default=4)
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--iters", default="500,5000", help="training iterations at which to freeze")
    s.add_argument("--out")
    s.set_defaults(func=cmd_variance)

    s = sub.add_parser("lemma1", help="sampling-lemma variance experiment")
    common(s)
    s.add_argument("--means", default="0,1,2,3")
    s.add_argument("--spread", type=float, default=0.5)
    s.add_argument("--K", type=int, default=2)
    s.add_argument("--trials", type=int, default=200000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_lemma1)

    s = sub.add_parser("bench-occupancy", help="thread occupancy and wall-clock per scheduler")
    common(s)
    s.add_argument("--gaussians", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--tile", type=int, choices=[8, 16, 32], default=16)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_occupancy)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, SceneFormatError, FileNotFoundError) as exc:
        print(f"mvgs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"mvgs {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
