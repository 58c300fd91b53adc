from dataclasses import replace

import numpy as np
import pytest

from nicelab.model import init_params
from nicelab.trainer import (CheckpointError, TrainConfig, ablation_run, dumps_checkpoint, evaluate,
                             format_ablation, loads_checkpoint, lr_at, scene_gradients, train,
                             train_and_evaluate, variant_config)


@pytest.mark.parametrize("epoch, expected", [(0, 1e-4), (4, 1e-4), (5, 5e-5), (9, 2.5e-5), (10, 5e-7),
                                             (12, 5e-7), (100, 5e-7)])
def test_schedule(epoch, expected):
    assert lr_at(epoch) == expected


def test_constant_schedule():
    assert lr_at(50, TrainConfig(lr=1e-3, schedule="constant")) == 1e-3


def test_zero_epochs_returns_init(small_scenes, small_cfg):
    cfg = replace(small_cfg, epochs=0)
    ckpt, rows = train(small_scenes, cfg)
    init = init_params(cfg.model, cfg.seed).state_dict()
    assert rows == [] and ckpt.epoch == 0
    assert all(np.array_equal(init[k], ckpt.params[k]) for k in init)


def test_zero_lr_freezes(small_scenes, small_cfg):
    cfg = replace(small_cfg, lr=0.0)
    ckpt, rows = train(small_scenes, cfg)
    init = init_params(cfg.model, cfg.seed).state_dict()
    assert len(rows) == 4
    assert all(np.array_equal(init[k], ckpt.params[k]) for k in init)


def test_single_step_adam_oracle(small_scenes, small_cfg):
    cfg = replace(small_cfg, epochs=1, batch_size=1, clip_norm=0.0)
    scene = small_scenes[0]
    params = init_params(cfg.model, cfg.seed)
    before = params.state_dict()
    _, grads = scene_gradients(params, cfg, scene)
    ckpt, _ = train([scene], cfg)
    lr, b1, b2, eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps
    for k, g in grads.items():
        m = (1 - b1) * g / (1 - b1)
        v = (1 - b2) * g * g / (1 - b2)
        np.testing.assert_allclose(ckpt.params[k], before[k] - lr * m / (np.sqrt(v) + eps), atol=1e-14, rtol=0)
        np.testing.assert_allclose(ckpt.adam_m[k], (1 - b1) * g, atol=1e-15)


def test_training_reduces_loss(small_scenes, small_cfg):
    _, rows = train(small_scenes, replace(small_cfg, epochs=8))
    assert rows[-1]["total"] < rows[0]["total"]


def test_determinism(small_scenes, small_cfg):
    a, ra = train(small_scenes, small_cfg)
    b, rb = train(small_scenes, small_cfg)
    assert ra == rb
    assert dumps_checkpoint(a) == dumps_checkpoint(b)


def test_mask_only_logs_zero_box_terms(small_scenes, small_cfg):
    cfg = replace(small_cfg, model=replace(small_cfg.model, mode="mask_only"))
    _, rows = train(small_scenes, cfg)
    assert all(r["smooth_l1"] == 0.0 and r["giou"] == 0.0 for r in rows)


def test_box_only_logs_zero_mask_terms(small_scenes, small_cfg):
    cfg = replace(small_cfg, model=replace(small_cfg.model, mode="box_only"))
    _, rows = train(small_scenes, cfg)
    assert all(r["bce"] == 0.0 and r["dice"] == 0.0 for r in rows)
    assert all(r["giou"] > 0 for r in rows)


def test_checkpoint_round_trip(small_scenes, small_cfg):
    ckpt, _ = train(small_scenes, small_cfg)
    back = loads_checkpoint(dumps_checkpoint(ckpt))
    assert back.config == ckpt.config and back.step == ckpt.step and back.epoch == ckpt.epoch
    for k in ckpt.params:
        assert np.array_equal(back.params[k], ckpt.params[k])
        assert np.array_equal(back.adam_v[k], ckpt.adam_v[k])
    r1 = evaluate(ckpt.build_params(), ckpt.config.model, small_scenes)
    r2 = evaluate(back.build_params(), back.config.model, small_scenes)
    assert r1.to_text() == r2.to_text()


def test_checkpoint_rejects_garbage_and_tampering(small_scenes, small_cfg):
    with pytest.raises(CheckpointError):
        loads_checkpoint(b"garbage" * 4)
    data = dumps_checkpoint(train(small_scenes, replace(small_cfg, epochs=0))[0])
    tampered = data.replace(b'"epochs": 0', b'"epochs": 9', 1)
    assert tampered != data
    with pytest.raises(CheckpointError, match="hash"):
        loads_checkpoint(tampered)


def test_oracle_evaluation_is_perfect(small_scenes, small_cfg):
    params = init_params(small_cfg.model, 0)
    rep = evaluate(params, small_cfg.model, small_scenes, oracle=True)
    assert rep.ar_mask["all"] == pytest.approx(1.0) and rep.ar_box["all"] == pytest.approx(1.0)
    assert rep.ie["all"] == 0.0


def test_ablation_singleton_matches_plain_run(small_scenes, small_cfg):
    (row,) = ablation_run(small_scenes, ["joint"], small_cfg)
    _, _, rep = train_and_evaluate(small_scenes, small_cfg)
    assert row["variant"] == "joint" and row["report"].to_text() == rep.to_text()


def test_ablation_two_modes_cross_check(small_scenes, small_cfg):
    table = ablation_run(small_scenes, ["joint", "box_only"], small_cfg)
    again = ablation_run(small_scenes, ["joint", "box_only"], small_cfg)
    assert [r["report"].to_text() for r in table] == [r["report"].to_text() for r in again]
    cfg, source = variant_config(small_cfg, "box_only")
    _, _, rep = train_and_evaluate(small_scenes, cfg, source)
    assert table[1]["report"].to_text() == rep.to_text()
    text = format_ablation(table)
    assert text.splitlines()[0].startswith("variant\tmask_all") and len(text.splitlines()) == 3


def test_variant_names(small_cfg):
    assert variant_config(small_cfg, "top1")[0].model.barycenter == "top1"
    assert variant_config(small_cfg, "tight")[1] == "tight"
    with pytest.raises(ValueError):
        variant_config(small_cfg, "nonsense")


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine").validate()
    with pytest.raises(ValueError):
        train([], TrainConfig())
