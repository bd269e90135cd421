import json
from dataclasses import replace

import numpy as np
import pytest

from labeltransfer import autodiff as ad
from labeltransfer import fields as fl
from labeltransfer import losses as ls
from labeltransfer.training import (LOG_COLUMNS, SupervisionSet, TrainConfig, TrainingDiverged, desk_config,
                                    load_model, read_loss_log, sample_batch, train)

from conftest import TINY_FIELD


def _cfg(**kw) -> TrainConfig:
    base = dict(iterations=10, batch_rays=64, lr=5e-3, lr_final=1e-3, n_per_interval=4, field=TINY_FIELD,
                checkpoint_every=5, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_round_trip_and_validation():
    cfg = desk_config(seed=4)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.lr_at(0) == pytest.approx(cfg.lr)
    assert cfg.lr_at(cfg.iterations) == pytest.approx(cfg.lr_final)
    with pytest.raises(ValueError):
        TrainConfig(batch_rays=0)


def test_batches_have_requested_size_and_repeat_under_seed(small_dataset):
    sup = SupervisionSet.from_dataset(small_dataset)
    cfg = _cfg(batch_rays=100)
    a = sample_batch(sup, cfg, np.random.default_rng(9)).index
    b = sample_batch(sup, cfg, np.random.default_rng(9)).index
    assert len(a) == 100 and len(np.unique(a)) == 100
    np.testing.assert_array_equal(a, b)


def test_right_camera_rays_carry_color_only(small_dataset):
    sup = SupervisionSet.from_dataset(small_dataset)
    right = np.isin(sup.frame, [f.id for f in small_dataset.scene.frames if f.side == "right"])
    assert right.any() and (~right).any()
    assert np.all(sup.labels[right] == ls.VOID) and np.all(sup.depth[right] == 0)
    assert np.all(sup.labels[~right] != ls.VOID)


def test_zero_iterations_writes_initialization(small_dataset, tmp_path):
    cfg = _cfg(iterations=0, seed=5)
    params, _ = load_model(train(small_dataset, cfg, tmp_path))
    init = fl.init_params(replace(TINY_FIELD, num_classes=7), np.random.default_rng(5))
    for k, v in init.items():
        np.testing.assert_array_equal(params[k].data, v.data)


def test_short_run_lowers_the_loss(small_dataset, tmp_path):
    cfg = _cfg(iterations=200, checkpoint_every=200)
    train(small_dataset, cfg, tmp_path)
    log = read_loss_log(tmp_path / "losses.csv")
    assert list(log) == list(LOG_COLUMNS)
    assert len(log["step"]) == 200 and np.all(np.isfinite(log["loss_total"]))
    assert log["loss_total"][-20:].mean() < log["loss_total"][0]


def test_resume_continues_bitwise(small_dataset, tmp_path):
    cfg = _cfg()
    full = train(small_dataset, cfg, tmp_path / "full")
    assert not (tmp_path / "cut" / "model.ckpt").exists()
    train(small_dataset, cfg, tmp_path / "cut", stop_after=5)
    assert not (tmp_path / "cut" / "model.ckpt").exists()
    resumed = train(small_dataset, cfg, tmp_path / "cut", resume=True)
    assert full.read_bytes() == resumed.read_bytes()
    assert (tmp_path / "full" / "losses.csv").read_text() == (tmp_path / "cut" / "losses.csv").read_text()


def test_same_seed_same_checkpoint_different_seed_differs(small_dataset, tmp_path):
    a = train(small_dataset, _cfg(iterations=4), tmp_path / "a").read_bytes()
    b = train(small_dataset, _cfg(iterations=4), tmp_path / "b").read_bytes()
    c = train(small_dataset, _cfg(iterations=4, seed=1), tmp_path / "c").read_bytes()
    assert a == b and a != c


def test_nan_loss_aborts_with_snapshot(small_dataset, tmp_path, monkeypatch):
    real = ls.loss_photometric

    def poisoned(color, target):
        out = real(color, target)
        return out * ad.Tensor(np.float32(np.nan))

    monkeypatch.setattr(ls, "loss_photometric", poisoned)
    with pytest.raises(TrainingDiverged, match="photometric"):
        train(small_dataset, _cfg(), tmp_path)
    snaps = list(tmp_path.glob("diverged_step_*.ckpt"))
    assert len(snaps) == 1
    meta = ad.load_checkpoint(snaps[0]).meta
    assert "photometric" in meta["reason"] and len(meta["batch_rays"]) == 64


def test_checkpoints_every_k(small_dataset, tmp_path):
    train(small_dataset, _cfg(iterations=12, checkpoint_every=5), tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["step_0000005.ckpt", "step_0000010.ckpt", "step_0000012.ckpt"]
