import json

import numpy as np
import pytest

from dyntok import data, train, vit
from dyntok.pruning import PruneSchedule
from helpers import tiny_config


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config()
    tr, va = data.synth_splits(classes=3, per_class=8, val_per_class=4, image_size=16, patch=4)
    tc = train.TrainConfig(epochs=2, batch_size=8, base_lr=0.08, freeze_backbone_epochs=1, stage_blocks=(1, 2, 3), pretrain_epochs=2, warmup_epochs=1)
    teacher, _ = train.pretrain_teacher(cfg, tr, tc)
    return cfg, tr, va, tc, teacher


def test_default_learning_rates():
    tc = train.TrainConfig()
    assert tc.predictor_lr == pytest.approx(64 / 1024 * 0.001)
    assert tc.backbone_lr == pytest.approx(tc.predictor_lr * 0.01)
    assert (tc.freeze_backbone_epochs, tc.epochs) == (5, 30)
    tc = train.TrainConfig(batch_size=256)
    assert tc.predictor_lr == pytest.approx(256 / 1024 * 0.001)


def test_config_file_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"epochs": 3, "stage_blocks": [1, 2], "ratios": [0.5, 0.2]}))
    tc = train.TrainConfig.from_file(f, seed=4)
    assert tc.epochs == 3 and tc.stage_blocks == (1, 2) and tc.seed == 4
    assert tc.schedule().targets == [0.5, 0.2]
    with pytest.raises(ValueError):
        train.TrainConfig.from_dict({"epoch": 3})


def test_cosine_schedule():
    assert train.cosine_lr(1.0, 0, 10, warmup=2) == 0.5
    assert train.cosine_lr(1.0, 2, 10, warmup=2) == 1.0
    assert train.cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_zero_epoch_pretrain_returns_init():
    cfg = tiny_config()
    tr, _ = data.synth_splits(classes=3, per_class=2, val_per_class=1, image_size=16)
    init = vit.init_vit(cfg, 0)
    params, hist = train.pretrain_teacher(cfg, tr, train.TrainConfig(pretrain_epochs=0), params={k: v for k, v in init.items()})
    assert hist == []
    for k in init:
        assert params[k].data.tobytes() == vit.init_vit(cfg, 0)[k].data.tobytes()


def test_pretrain_is_deterministic(tiny):
    cfg, tr, _, tc, teacher = tiny
    again, hist = train.pretrain_teacher(cfg, tr, tc)
    _, hist2 = train.pretrain_teacher(cfg, tr, tc)
    assert hist == hist2
    for k in teacher:
        assert again[k].data.tobytes() == teacher[k].data.tobytes()


def test_dynamic_history_bitwise_deterministic(tiny):
    cfg, tr, _, tc, teacher = tiny
    a = train.train_dynamic(teacher, cfg, tr, tc)
    b = train.train_dynamic(teacher, cfg, tr, tc)
    assert json.dumps(a.history) == json.dumps(b.history)
    for key in ("total", "cls", "kl", "distill", "ratio", "ratios", "train_acc", "frozen"):
        assert key in a.history[0]
    assert [h["frozen"] for h in a.history] == [True, False]


def test_backbone_frozen_in_first_phase(tiny):
    cfg, tr, _, tc, teacher = tiny
    tc1 = train.TrainConfig(**{**tc.to_dict(), "epochs": 1, "freeze_backbone_epochs": 1})
    res = train.train_dynamic(teacher, cfg, tr, tc1)
    for k, p in teacher.items():
        assert res.params[k].data.tobytes() == p.data.tobytes(), k
    moved = [k for k in res.params if k.startswith("pred.") and np.any(res.params[k].data != vit.init_vit(cfg, tc.seed, 3)[k].data)]
    assert moved, "predictor parameters did not move"


def test_predictor_head_receives_gradient(tiny):
    cfg, tr, _, tc, teacher = tiny
    tc1 = train.TrainConfig(**{**tc.to_dict(), "epochs": 1})
    res = train.train_dynamic(teacher, cfg, tr, tc1)
    fresh = vit.init_vit(cfg, tc.seed, 3)
    delta = sum(np.abs(res.params[f"pred.{s}.head.w3"].data - fresh[f"pred.{s}.head.w3"].data).sum() for s in range(3))
    assert delta > 0


def test_evaluate_teacher_with_empty_schedule(tiny):
    cfg, _, va, _, teacher = tiny
    ev = train.evaluate(teacher, cfg, PruneSchedule(), va)
    assert ev["kept_per_stage"] == []
    assert np.array(ev["confusion"]).sum() == len(va)
    with vit.T.no_grad():
        pred = vit.forward(va.floats(), teacher, cfg).logits.data.argmax(-1)
    assert ev["top1"] == pytest.approx(float((pred == va.labels).mean()))


def test_evaluate_reports_kept_counts(tiny):
    cfg, _, va, tc, teacher = tiny
    params = {k: v for k, v in teacher.items()}
    vit.add_stages(params, cfg, 3)
    ev = train.evaluate(params, cfg, tc.schedule(), va)
    assert ev["kept_per_stage"] == tc.schedule().keep_counts(cfg.num_patches)


def test_divergence_aborts(tiny, monkeypatch):
    cfg, tr, _, tc, teacher = tiny
    monkeypatch.setattr(train.losses, "cls_loss", lambda probs, y: vit.T.Tensor(np.array(np.nan)))
    with pytest.raises(train.TrainingDiverged, match="step 0"):
        train.train_dynamic(teacher, cfg, tr, tc)


def test_checkpoint_round_trip_preserves_evaluation(tiny, tmp_path):
    cfg, tr, va, tc, teacher = tiny
    res = train.train_dynamic(teacher, cfg, tr, train.TrainConfig(**{**tc.to_dict(), "epochs": 1}))
    vit.save_checkpoint(tmp_path / "s", res.params, cfg)
    loaded, cfg2, _ = vit.load_checkpoint(tmp_path / "s")
    assert train.evaluate(res.params, cfg, tc.schedule(), va) == train.evaluate(loaded, cfg2, tc.schedule(), va)
