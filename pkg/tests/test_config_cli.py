import subprocess
import sys

import numpy as np
import pytest

from mvgs import config as cfgmod
from mvgs.batchvar import LEMMA1_CSV_HEADER, VARIANCE_CSV_HEADER
from mvgs.cli import load_dataset, run
from mvgs.rasterizer import CSV_HEADER as OCCUPANCY_CSV_HEADER
from mvgs.scene import read_ppm
from mvgs.trainer import METRICS_CSV_HEADER, TrainConfig


def test_parse_text():
    vals = cfgmod.parse_text("# comment\n\niterations = 10  # trailing\nadc.interval=50\n")
    assert vals == {"iterations": "10", "adc.interval": "50"}
    with pytest.raises(cfgmod.ConfigError, match=":2:"):
        cfgmod.parse_text("a = 1\nnot a pair\n")


def test_apply_nested_and_types():
    cfg = cfgmod.apply(TrainConfig(), {"iterations": "10", "adc.interval": "50", "adc.enabled": "false",
                                       "batch.pixels_per_batch": "none", "lam": "0.3"})
    assert cfg.iterations == 10 and cfg.adc.interval == 50 and cfg.adc.enabled is False
    assert cfg.batch.pixels_per_batch is None and cfg.lam == 0.3
    assert TrainConfig().adc.interval != 50  # defaults untouched


def test_apply_errors():
    with pytest.raises(cfgmod.UnknownKey):
        cfgmod.apply(TrainConfig(), {"adc.intervall": "5"})
    with pytest.raises(cfgmod.ConfigError, match="iterations"):
        cfgmod.apply(TrainConfig(), {"iterations": "ten"})
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.apply(TrainConfig(), {"lam": "2.0"})


def test_resolved_text_round_trip():
    cfg = cfgmod.apply(TrainConfig(), {"seed": "7", "loss_mode": "l1"})
    text = cfgmod.resolved_text(cfg)
    lines = text.splitlines()
    assert lines == sorted(lines)
    again = cfgmod.apply(TrainConfig(), cfgmod.parse_text(text))
    assert cfgmod.resolved_text(again) == text
    assert cfgmod.config_hash(again) == cfgmod.config_hash(cfg) != cfgmod.config_hash(TrainConfig())


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert run(["make-synthetic", "--seed", "1", "--gaussians", "20", "--cameras", "4", "--size", "16",
                "--out", str(out)]) == 0
    return out


def test_make_synthetic_outputs(scene_dir):
    names = sorted(p.name for p in scene_dir.iterdir())
    assert names == ["resolved-config", "scene.txt", *(f"view_{i:03d}.{e}" for i in range(4) for e in ("depth", "ppm"))]
    ds = load_dataset(scene_dir)
    assert len(ds.cameras) == 4 and len(ds.gaussians) == 20
    assert read_ppm(scene_dir / "view_000.ppm").shape == (16, 16, 3)
    assert "seed = 1" in (scene_dir / "resolved-config").read_text()


def test_make_synthetic_is_deterministic(scene_dir, tmp_path):
    run(["make-synthetic", "--seed", "1", "--gaussians", "20", "--cameras", "4", "--size", "16",
         "--out", str(tmp_path)])
    for name in ("scene.txt", "view_002.ppm", "view_002.depth"):
        assert (tmp_path / name).read_bytes() == (scene_dir / name).read_bytes()


def train_args(scene_dir, out, *extra):
    return ["train", "--scene", str(scene_dir), "--out", str(out), "--iterations", "6", "--workers", "1",
            "--set", "eval_every=3", "--set", "holdout_every=4", "--set", "batch.views_per_batch=2",
            "--set", "batch.tile_size=8", "--set", "adc.start_iter=2", "--set", "adc.interval=2", *extra]


def test_train_outputs_and_reproducibility(scene_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(train_args(scene_dir, a)) == 0
    assert run(train_args(scene_dir, b)) == 0
    metrics = (a / "metrics.csv").read_text().splitlines()
    assert metrics[0] == METRICS_CSV_HEADER and len(metrics) == 3
    assert (a / "adc.csv").read_text().startswith("iter,split,clone,prune,total\n")
    assert (a / "checkpoint_final.txt").read_bytes() == (b / "checkpoint_final.txt").read_bytes()
    resolved = (a / "resolved-config").read_text()
    assert "adc.interval = 2" in resolved and "iterations = 6" in resolved
    assert resolved == (b / "resolved-config").read_text()


def test_train_resume_from_cli(scene_dir, tmp_path):
    full, part, rest = tmp_path / "full", tmp_path / "part", tmp_path / "rest"
    assert run(train_args(scene_dir, full)) == 0
    assert run(train_args(scene_dir, part, "--checkpoint-every", "4")) == 0
    assert run(train_args(scene_dir, rest, "--resume", str(part / "checkpoint_000004.txt"))) == 0
    assert (rest / "checkpoint_final.txt").read_bytes() == (full / "checkpoint_final.txt").read_bytes()


def test_train_unknown_key_exits_2(scene_dir, tmp_path, capsys):
    assert run(train_args(scene_dir, tmp_path, "--set", "adc.bogus=1")) == 2
    assert "adc.bogus" in capsys.readouterr().err


def test_train_config_file(scene_dir, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("loss_mode = l1\nlam = 0.1\n")
    assert run(train_args(scene_dir, tmp_path / "o", "--config", str(conf))) == 0
    text = (tmp_path / "o" / "resolved-config").read_text()
    assert "loss_mode = l1\n" in text and "lam = 0.1\n" in text


def test_render(scene_dir, tmp_path):
    assert run(["render", "--scene", str(scene_dir), "--views", "0,3", "--out", str(tmp_path)]) == 0
    got = read_ppm(tmp_path / "render_003.ppm")
    assert np.array_equal(got, read_ppm(scene_dir / "view_003.ppm"))
    assert run(["render", "--scene", str(scene_dir), "--views", "9", "--out", str(tmp_path)]) == 2


def test_gradcheck_cli(capsys):
    assert run(["gradcheck", "--seed", "3", "--gaussians", "3", "--size", "8", "--loss", "l2"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ok seed=3 loss=l2") and "worst parameter:" in out
    # an impossible tolerance turns the same check into a failure
    assert run(["gradcheck", "--seed", "3", "--gaussians", "3", "--size", "8", "--loss", "l2",
                "--tol", "0"]) == 1
    assert run(["gradcheck", "--size", "20"]) == 2


def test_lemma1_cli(tmp_path):
    out = tmp_path / "l.csv"
    assert run(["lemma1", "--trials", "4000", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == LEMMA1_CSV_HEADER and [r.split(",")[0] for r in rows[1:]] == ["1", "2", "4"]


def test_bench_occupancy_cli(capsys):
    assert run(["bench-occupancy", "--gaussians", "20", "--size", "32", "--repeats", "1", "--workers", "1"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == OCCUPANCY_CSV_HEADER
    occ = {r.split(",")[0]: float(r.split(",")[5]) for r in rows[1:]}
    assert occ["thread_efficient"] == 1.0 and occ["naive_masked"] == pytest.approx(0.25)


def test_variance_cli(scene_dir, capsys):
    assert run(["variance", "--scene", str(scene_dir), "--iters", "0", "--samples", "3", "--B", "2",
                "--workers", "1"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == VARIANCE_CSV_HEADER + ",iter"
    assert [r.split(",")[0] for r in rows[1:]] == ["single_view", "multi_view"]


def test_usage_errors():
    assert subprocess.run([sys.executable, "-m", "mvgs"], capture_output=True).returncode == 2
    assert subprocess.run([sys.executable, "-m", "mvgs", "train"], capture_output=True).returncode == 2
    with pytest.raises(SystemExit) as err:
        run(["frobnicate"])
    assert err.value.code == 2
