import json
import shutil

import numpy as np
import pytest

from labeltransfer import rasters
from labeltransfer.cli import CONFIG_ENV, main
from labeltransfer.training import read_loss_log

from conftest import TINY_FIELD


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen, then a short train, then eval: the whole command sequence."""
    root = tmp_path_factory.mktemp("cli")
    ds, run = root / "ds", root / "run"
    assert main(["gen", str(ds), "--seed", "7", "--frames", "3", "--width", "16", "--height", "12"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 30, "batch_rays": 64, "checkpoint_every": 10, "log_every": 5,
                               "field": TINY_FIELD.to_dict()}))
    assert main(["train", str(ds), str(run), "--config", str(cfg)]) == 0
    return root, ds, run


def test_gen_train_eval_end_to_end(pipeline):
    root, ds, run = pipeline
    assert (run / "model.ckpt").exists()
    assert len(read_loss_log(run / "losses.csv")["step"]) == 6
    out = root / "eval"
    assert main(["eval", str(ds), str(run / "model.ckpt"), str(out)]) == 0
    text = (out / "metrics.csv").read_text()
    for metric in ("miou,learned", "miou,pseudo", "mc,learned", "pq,all", "depth_rmse", "panoptic_violations"):
        assert metric in text
    assert (out / "metrics.txt").exists()
    assert (out / "figures" / "class_iou.png").exists() and (out / "figures" / "losses.png").exists()
    assert list((out / "figures").glob("frame_*.png"))


def test_render_fixed_semantic_pass(pipeline):
    root, ds, run = pipeline
    out = root / "render_fixed"
    assert main(["render", str(ds), str(run / "model.ckpt"), str(out), "--passes", "semantic_fixed",
                 "--frames", "0,1"]) == 0
    assert sorted(p.name for p in out.glob("*.png")) == ["000_semantic_fixed.png", "001_semantic_fixed.png"]
    fixed = rasters.read_label_png(out / "000_semantic_fixed.png")
    gt = rasters.read_label_png(ds / "gt" / "000_semantic.png")
    assert fixed.shape == gt.shape and np.mean(fixed == gt) > 0.5
    assert (out / "manifest.json").exists()


def test_render_all_passes_default_frames(pipeline):
    root, ds, run = pipeline
    out = root / "render_all"
    assert main(["render", str(ds), str(run / "model.ckpt"), str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"000_semantic.png", "000_instance.png", "000_depth.dgrid", "000_rgb.png", "000_meta.json"} <= names
    assert not any(n.startswith("001_") for n in names)


def test_eval_without_ground_truth_fails(pipeline, tmp_path, capsys):
    _, ds, run = pipeline
    bare = tmp_path / "bare"
    shutil.copytree(ds, bare)
    shutil.rmtree(bare / "gt")
    assert main(["eval", str(bare), str(run / "model.ckpt"), str(tmp_path / "out")]) != 0
    assert "no ground truth" in capsys.readouterr().err


def test_resume_and_config_from_environment(pipeline, tmp_path, monkeypatch):
    root, ds, run = pipeline
    monkeypatch.setenv(CONFIG_ENV, str(root / "cfg.json"))
    again = tmp_path / "run"
    assert main(["train", str(ds), str(again)]) == 0
    assert (again / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()
    (again / "checkpoints" / "step_0000030.ckpt").unlink()
    (again / "model.ckpt").unlink()
    assert main(["train", str(ds), str(again), "--resume"]) == 0
    assert (again / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()


def test_oracle_check_passes(pipeline, capsys):
    _, ds, _ = pipeline
    assert main(["oracle-check", str(ds)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(line.startswith("PASS") for line in lines)


def test_bad_usage_and_missing_inputs(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["render", "--bogus"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        main(["frobnicate"])
    assert main(["eval", str(tmp_path / "nope"), str(tmp_path / "m.ckpt"), str(tmp_path / "o")]) != 0
    assert "error" in capsys.readouterr().err
