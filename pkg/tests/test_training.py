"""Training-loop invariants: freezing, logging, decomposition, determinism."""

import json

import numpy as np
import pytest

from seqswap import training as tr
from seqswap.data import SyntheticSpec, make_synthetic
from seqswap.errors import ConfigError, ContractError
from seqswap.losses import cls_loss
from seqswap.model import (
    ModelConfig,
    forward,
    init_model,
    named_parameters,
    replace_layers,
)

ROW_KEYS = {"epoch", "lr", "loss_total", "loss_cls", "loss_sim", "loss_halt",
            "loss_avit", "val_top1", "retention_per_layer"}


def tiny_setup(seed=0):
    cfg = ModelConfig(depth=2, dim=8, n_heads=2, image_size=14, patch_size=7,
                      n_classes=3)
    ds = make_synthetic(SyntheticSpec(image_size=14, patch_size=7, n_classes=3,
                                      train_size=24, val_size=12, seed=seed))
    return cfg, ds


def snapshot(model):
    return {k: t.data.copy() for k, t in named_parameters(model).items()}


def assert_identical(before, after_model, exclude=()):
    after = named_parameters(after_model)
    for k, v in before.items():
        if any(k.startswith(p) or k == p for p in exclude):
            continue
        assert np.array_equal(v, after[k].data), f"{k} changed"


# config ---------------------------------------------------------------------


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        tr.DistillConfig(stage="stage3")
    with pytest.raises(ConfigError):
        tr.DistillConfig(stage="stage1", replaced=(0,), lambda_sim=-0.1)
    with pytest.raises(ConfigError):
        tr.DistillConfig(stage="stage1", replaced=())  # sim needs layers
    with pytest.raises(ConfigError):
        tr.DistillConfig(stage="stage2", trainable_policy="some")
    with pytest.raises(ConfigError):
        tr.DistillConfig.from_dict({"stage": "stage2", "momentum": 0.9})
    cfg = tr.DistillConfig(stage="stage1", replaced=[1, 0, 1])
    assert cfg.replaced == (0, 1)
    assert tr.DistillConfig(stage="dense", replaced=(), lambda_sim=0.0).stage == "dense"


def test_trainable_parameters_policies():
    cfg, _ = tiny_setup()
    model = init_model(cfg, seed=0)
    every = tr.trainable_parameters(model, "all")
    assert every.keys() == named_parameters(model).keys()
    only = tr.trainable_parameters(model, "replaced_only", replaced=(1,))
    assert only
    for name in only:
        assert name.startswith("blocks.1.") or name in ("halt.scale.1", "halt.shift.1")
    assert "blocks.0.mlp_w1" not in only
    assert "halt.scale.0" not in only


# invariants -----------------------------------------------------------------


def test_zero_lr_training_changes_nothing():
    cfg, ds = tiny_setup()
    model = init_model(cfg, seed=1)
    before = snapshot(model)
    tr.train_classifier(model, ds, epochs=2, lr_max=0.0, batch_size=8, seed=0)
    assert_identical(before, model)


def test_teacher_frozen_through_distillation():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=2)
    student = replace_layers(teacher, [1], "ssm", seed=0)
    before = snapshot(teacher)
    dcfg = tr.DistillConfig(stage="stage1", replaced=(1,), epochs=2,
                            lr_max=1e-3, batch_size=8, seed=0)
    tr.train_distill(student, teacher, ds, dcfg)
    assert_identical(before, teacher)


def test_replaced_only_freezes_everything_outside_set():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=3)
    student = replace_layers(teacher, [1], "lstm", seed=0)
    before = snapshot(student)
    dcfg = tr.DistillConfig(stage="stage1", replaced=(1,), epochs=2,
                            lr_max=1e-3, batch_size=8, seed=0)
    tr.train_distill(student, teacher, ds, dcfg)
    assert_identical(before, student,
                     exclude=("blocks.1.", "halt.scale.1", "halt.shift.1"))
    after = named_parameters(student)
    assert not np.array_equal(before["blocks.1.mixer.w_out"],
                              after["blocks.1.mixer.w_out"].data)


def test_identical_copy_reproduces_teacher_cls_loss():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=4)
    student = replace_layers(teacher, [], "ssm")  # exact parameter copy
    logits = forward(teacher, ds.train_x, halting="off").logits
    expected_cls = float(cls_loss(logits, ds.train_y).item())
    dcfg = tr.DistillConfig(stage="dense", replaced=(), lambda_sim=0.0,
                            trainable_policy="all", epochs=1, lr_max=0.0,
                            batch_size=24, seed=0)
    rows = tr.train_distill(student, teacher, ds, dcfg)
    assert rows[0]["loss_cls"] == pytest.approx(expected_cls, abs=1e-12)
    assert rows[0]["loss_sim"] == 0.0


def test_stage1_masks_agree_with_teacher_thresholds():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=5)
    for l in range(cfg.depth):
        teacher.halt.shift[l].data[()] = 40.0  # saturate so tokens really halt
    cache = tr._teacher_cache(teacher, ds.train_x, [1], "threshold")
    trace = forward(teacher, ds.train_x, halting="threshold")
    assert np.array_equal(cache["masks"], trace.masks)
    assert cache["masks"].min() == 0.0  # something halted, so the test bites
    student = replace_layers(teacher, [1], "ssm", seed=0)
    strace = forward(student, ds.train_x, halting="given", masks=cache["masks"])
    assert np.array_equal(strace.masks[1], cache["masks"][1])


def test_stage1_fixed_retention_teacher_masks():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=7)
    cache = tr._teacher_cache(teacher, ds.train_x, [1], "fixed", rho=0.5)
    trace = forward(teacher, ds.train_x, halting="fixed", rho=0.5)
    assert np.array_equal(cache["masks"], trace.masks)
    # T=5 here: class token plus ceil(0.5 * 4) = 2 patch tokens stay active
    assert np.all(cache["masks"].sum(axis=-1) == 3.0)
    student = replace_layers(teacher, [1], "ssm", seed=0)
    dcfg = tr.DistillConfig(stage="stage1", replaced=(1,), teacher_rho=0.5,
                            epochs=1, lr_max=1e-3, batch_size=8, seed=0)
    rows = tr.train_distill(student, teacher, ds, dcfg)
    assert rows[0]["retention_per_layer"] == [0.5, 0.5]
    with pytest.raises(ConfigError):
        tr.DistillConfig(stage="stage2", teacher_rho=0.5)
    with pytest.raises(ConfigError):
        tr.DistillConfig(stage="stage1", replaced=(1,), teacher_rho=1.5)


def test_distill_contract_errors():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=6)
    student = replace_layers(teacher, [1], "ssm", seed=0)
    with pytest.raises(ContractError):
        tr.train_distill(student, None, ds,
                         tr.DistillConfig(stage="stage1", replaced=(1,)))
    with pytest.raises(ContractError):
        tr.train_distill(student, teacher, ds,
                         tr.DistillConfig(stage="stage1", replaced=(7,)))
    with pytest.raises(ContractError):
        # replaced_only with an empty set selects nothing to train
        tr.train_distill(student, None, ds,
                         tr.DistillConfig(stage="stage2", replaced=()))


# logging --------------------------------------------------------------------


def test_metrics_rows_complete_and_logged(tmp_path):
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=7)
    student = replace_layers(teacher, [1], "ssm", seed=0)
    log = tmp_path / "run.jsonl"
    dcfg = tr.DistillConfig(stage="stage1", replaced=(1,), epochs=3,
                            lr_max=1e-3, batch_size=8, seed=0)
    rows = tr.train_distill(student, teacher, ds, dcfg, log_path=str(log))
    assert len(rows) == 3
    logged = [json.loads(line) for line in log.read_text().splitlines()]
    assert logged == json.loads(json.dumps(rows))
    for row in rows:
        assert set(row) == ROW_KEYS
        assert len(row["retention_per_layer"]) == cfg.depth
        assert row["epoch"] in (0, 1, 2)


def test_logged_decomposition_matches_weights():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=8)
    student = replace_layers(teacher, [1], "lstm", seed=0)
    dcfg = tr.DistillConfig(stage="stage1", replaced=(1,), epochs=2,
                            lr_max=1e-3, batch_size=8, seed=0,
                            lambda_cls=0.9, lambda_sim=0.6, lambda_mask=0.2)
    rows = tr.train_distill(student, teacher, ds, dcfg)
    for row in rows:
        recon = 0.9 * row["loss_cls"] + 0.6 * row["loss_sim"] \
            + 0.2 * row["loss_halt"] + 0.1 * row["loss_avit"]
        assert abs(row["loss_total"] - recon) < 1e-12


def test_stage2_runs_and_reports_avit():
    cfg, ds = tiny_setup()
    teacher = init_model(cfg, seed=9)
    student = replace_layers(teacher, [1], "ssm", seed=0)
    dcfg = tr.DistillConfig(stage="stage2", replaced=(1,), epochs=2,
                            lr_max=1e-3, batch_size=8, seed=0)
    rows = tr.train_distill(student, None, ds, dcfg)
    for row in rows:
        assert row["loss_avit"] > 0.0
        assert row["loss_sim"] == 0.0
        assert abs(row["loss_total"]
                   - (row["loss_cls"] + 0.1 * row["loss_avit"])) < 1e-12


def test_classifier_with_fixed_retention():
    cfg, ds = tiny_setup()
    model = init_model(cfg, seed=8)
    rows = tr.train_classifier(model, ds, epochs=1, lr_max=1e-3, batch_size=8,
                               rho=0.5, seed=0)
    assert rows[0]["retention_per_layer"] == [0.5, 0.5]
    with pytest.raises(ConfigError):
        tr.train_classifier(model, ds, epochs=1, use_halting=True, rho=0.5)


def test_classifier_with_halting_objective():
    cfg, ds = tiny_setup()
    model = init_model(cfg, seed=10)
    rows = tr.train_classifier(model, ds, epochs=2, lr_max=1e-3, batch_size=8,
                               use_halting=True, seed=0)
    assert all(set(r) == ROW_KEYS for r in rows)
    assert all(r["loss_avit"] > 0.0 for r in rows)


# determinism ----------------------------------------------------------------


def test_training_deterministic_per_seed():
    cfg, ds = tiny_setup()
    runs = []
    for _ in range(2):
        model = init_model(cfg, seed=11)
        rows = tr.train_classifier(model, ds, epochs=2, lr_max=1e-3,
                                   batch_size=8, seed=4)
        runs.append((rows, snapshot(model)))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_distillation_deterministic_per_seed():
    cfg, ds = tiny_setup()
    outs = []
    for _ in range(2):
        teacher = init_model(cfg, seed=12)
        student = replace_layers(teacher, [1], "ssm", seed=2)
        dcfg = tr.DistillConfig(stage="stage1", replaced=(1,), epochs=2,
                                lr_max=1e-3, batch_size=8, seed=3)
        rows = tr.train_distill(student, teacher, ds, dcfg)
        outs.append((rows, snapshot(student)))
    assert outs[0][0] == outs[1][0]
    for k in outs[0][1]:
        assert np.array_equal(outs[0][1][k], outs[1][1][k])
