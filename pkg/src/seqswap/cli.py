"""Command-line harness: training, replacement, distillation, ablations,
retention sweeps, analysis, profiling, and report assembly.

Configs are JSON with a mandatory "version": 1; unknown keys anywhere are
rejected. Checkpoint paths inside a config are resolved relative to the
output directory unless absolute. Reports and checkpoints are written
atomically (temp file, then rename); per-epoch metrics are appended as
JSON lines while a run progresses.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import checkpoint as ckpt
from .analysis import save_analysis
from .data import load_dataset
from .errors import ConfigError, DependencyError, SeqswapError
from .model import ModelConfig, accuracy, init_model, replace_layers
from .profiling import (
    estimate_model_speedup,
    measure_fixed_cost,
    measure_token_throughput,
    resized_for_profiling,
    retention_to_token_counts,
)
from .analysis import retention_profile
from .training import DistillConfig, train_classifier, train_distill

EXIT_CODES = {"config": 2, "shape": 3, "contract": 4, "format": 5,
              "dependency": 6, "error": 1}

TOP_KEYS = {"version", "seed", "model", "data", "teacher", "replace",
            "distill", "ablate", "sweep", "analyze", "profile"}

DATA_KEYS = {"kind", "image_size", "patch_size", "n_classes", "train_size",
             "val_size", "noise", "on_fraction", "seed", "images", "labels",
             "val_fraction"}


def load_config(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if cfg.get("version") != 1:
        raise ConfigError(f"{path}: missing or unsupported config version "
                          f"(expected 1, got {cfg.get('version')!r})")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def _section(cfg, name, allowed, required=()):
    sec = cfg.get(name)
    if sec is None:
        raise ConfigError(f"config needs a {name!r} section")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r} section: {sorted(unknown)}")
    missing = [r for r in required if r not in sec]
    if missing:
        raise ConfigError(f"{name!r} section needs {missing}")
    return dict(sec)


def _resolve(out, path):
    return path if os.path.isabs(path) else os.path.join(out, path)


def _load_required_checkpoint(out, path, what):
    full = _resolve(out, path)
    if not os.path.exists(full):
        raise DependencyError(f"missing {what} checkpoint: {full}")
    return ckpt.load_checkpoint(full)


def _fresh_log(out, rel):
    path = _resolve(out, rel)
    if os.path.exists(path):
        os.unlink(path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _atomic_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    _atomic_text(path, buf.getvalue())


def _dataset(cfg):
    data = dict(cfg.get("data") or {"kind": "synthetic"})
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in 'data' section: {sorted(unknown)}")
    data.setdefault("seed", cfg.get("seed", 0))
    return load_dataset(data)


def _model_config(cfg):
    return ModelConfig.from_dict(cfg.get("model") or {})


# ---------------------------------------------------------------------------
# subcommands

TEACHER_KEYS = {"epochs", "lr_max", "lr_min", "batch_size", "weight_decay",
                "use_halting", "lambda_avit", "lambda_halt", "prior_center",
                "prior_sigma", "checkpoint", "log"}


def cmd_train_teacher(cfg, out):
    sec = _section(cfg, "teacher", TEACHER_KEYS)
    seed = cfg.get("seed", 0)
    dataset = _dataset(cfg)
    model = init_model(_model_config(cfg), seed=seed)
    log = _fresh_log(out, sec.pop("log", "logs/teacher.jsonl"))
    ckpt_rel = sec.pop("checkpoint", "checkpoints/teacher.ckpt")
    metrics = train_classifier(model, dataset, seed=seed, log_path=log, **sec)
    path = ckpt.save_checkpoint(model, _resolve(out, ckpt_rel))
    print(f"teacher: val_top1={metrics[-1]['val_top1']:.4f} -> {path}")
    return 0


REPLACE_KEYS = {"teacher_checkpoint", "layers", "kind", "checkpoint"}


def cmd_replace(cfg, out):
    sec = _section(cfg, "replace", REPLACE_KEYS, required=("teacher_checkpoint",))
    teacher = _load_required_checkpoint(out, sec["teacher_checkpoint"], "teacher")
    layers = sec.get("layers", [])
    kind = sec.get("kind", "ssm")
    if layers:
        student = replace_layers(teacher, layers, kind, seed=cfg.get("seed", 0))
    else:
        student = replace_layers(teacher, [], "ssm", seed=cfg.get("seed", 0))
    path = ckpt.save_checkpoint(
        student, _resolve(out, sec.get("checkpoint", "checkpoints/student_init.ckpt")))
    print(f"student: mixers={student.config.mixer_kinds} -> {path}")
    return 0


DISTILL_KEYS = {"teacher_checkpoint", "student_checkpoint", "checkpoint",
                "log"} | set(DistillConfig.__dataclass_fields__) - {"seed"}


def cmd_distill(cfg, out):
    sec = _section(cfg, "distill", DISTILL_KEYS,
                   required=("teacher_checkpoint", "student_checkpoint"))
    teacher = _load_required_checkpoint(out, sec.pop("teacher_checkpoint"), "teacher")
    student = _load_required_checkpoint(out, sec.pop("student_checkpoint"), "student")
    out_rel = sec.pop("checkpoint", "checkpoints/student.ckpt")
    log = _fresh_log(out, sec.pop("log", "logs/distill.jsonl"))
    if "replaced" not in sec:
        sec["replaced"] = [l for l, k in enumerate(student.config.mixer_kinds)
                           if k != "attention"]
    dcfg = DistillConfig(seed=cfg.get("seed", 0), **sec)
    metrics = train_distill(student, teacher, _dataset(cfg), dcfg, log_path=log)
    path = ckpt.save_checkpoint(student, _resolve(out, out_rel))
    print(f"distill[{dcfg.stage}]: val_top1={metrics[-1]['val_top1']:.4f} -> {path}")
    return 0


ABLATE_KEYS = {"teacher_checkpoint", "kinds", "groups", "include_full",
               "epochs", "lr_max", "lr_min", "batch_size", "lambda_cls",
               "lambda_sim", "trainable_policy"}


def cmd_ablate_groups(cfg, out):
    sec = _section(cfg, "ablate", ABLATE_KEYS, required=("teacher_checkpoint",))
    seed = cfg.get("seed", 0)
    teacher = _load_required_checkpoint(out, sec["teacher_checkpoint"], "teacher")
    dataset = _dataset(cfg)
    depth = teacher.config.depth
    kinds = sec.get("kinds", ["lstm", "ssm"])
    groups = [tuple(g) for g in sec.get("groups", [[l] for l in range(depth)])]
    if sec.get("include_full", True):
        groups.append(tuple(range(depth)))
    teacher_top1 = accuracy(teacher, dataset.val_x, dataset.val_y)
    rows = [["none", "", f"{teacher_top1:.4f}", ""]]
    for kind in kinds:
        for group in groups:
            tag = "-".join(str(l) for l in group)
            student = replace_layers(teacher, group, kind, seed=seed)
            dcfg = DistillConfig(
                stage="dense", replaced=group,
                epochs=sec.get("epochs", 50),
                lr_max=sec.get("lr_max", 5e-4), lr_min=sec.get("lr_min", 0.0),
                batch_size=sec.get("batch_size", 64),
                lambda_cls=sec.get("lambda_cls", 1.0),
                lambda_sim=sec.get("lambda_sim", 0.75),
                trainable_policy=sec.get("trainable_policy", "replaced_only"),
                seed=seed)
            log = _fresh_log(out, f"logs/ablate_{kind}_g{tag}.jsonl")
            metrics = train_distill(student, teacher, dataset, dcfg, log_path=log)
            rows.append([kind, tag, f"{metrics[-1]['val_top1']:.4f}",
                         f"{metrics[-1]['loss_sim']:.6g}"])
            print(f"ablate {kind} [{tag}]: val_top1={metrics[-1]['val_top1']:.4f}")
    _write_csv(_resolve(out, "reports/ablate_groups.csv"),
               ["substitute", "replaced_layers", "val_top1", "final_loss_sim"], rows)
    return 0


SWEEP_KEYS = {"teacher_checkpoint", "student_checkpoint", "ratios"}


def cmd_sweep_retention(cfg, out):
    sec = _section(cfg, "sweep", SWEEP_KEYS,
                   required=("teacher_checkpoint", "student_checkpoint"))
    teacher = _load_required_checkpoint(out, sec["teacher_checkpoint"], "teacher")
    student = _load_required_checkpoint(out, sec["student_checkpoint"], "student")
    dataset = _dataset(cfg)
    rows = []
    for rho in sec.get("ratios", [1.0, 0.8, 0.6]):
        t_acc = accuracy(teacher, dataset.val_x, dataset.val_y,
                         halting="fixed", rho=rho)
        s_acc = accuracy(student, dataset.val_x, dataset.val_y,
                         halting="fixed", rho=rho)
        rows.append([f"{rho:.2f}", f"{t_acc:.4f}", f"{s_acc:.4f}",
                     f"{t_acc - s_acc:.4f}"])
        print(f"rho={rho:.2f}: teacher={t_acc:.4f} student={s_acc:.4f}")
    _write_csv(_resolve(out, "reports/retention_sweep.csv"),
               ["retention_ratio", "teacher_top1", "student_top1", "gap"], rows)
    return 0


ANALYZE_KEYS = {"checkpoint", "halting", "rho", "n_images"}


def cmd_analyze(cfg, out):
    sec = _section(cfg, "analyze", ANALYZE_KEYS, required=("checkpoint",))
    model = _load_required_checkpoint(out, sec["checkpoint"], "analysis")
    dataset = _dataset(cfg)
    images = dataset.val_x[:sec.get("n_images", 8)]
    index = save_analysis(model, images, os.path.join(out, "analysis"),
                          halting=sec.get("halting", "threshold"),
                          rho=sec.get("rho"))
    print(f"analysis: {len(index['files'])} maps -> {os.path.join(out, 'analysis')}")
    return 0


PROFILE_KEYS = {"checkpoints", "baseline", "repeats", "warmup", "scales",
                "halting", "rho", "top1"}


def cmd_profile(cfg, out):
    sec = _section(cfg, "profile", PROFILE_KEYS, required=("checkpoints",))
    baseline_label = sec.get("baseline", "attention")
    if baseline_label not in sec["checkpoints"]:
        raise ConfigError(f"profile baseline {baseline_label!r} missing from "
                          f"checkpoints map")
    models = {label: _load_required_checkpoint(out, path, f"profile[{label}]")
              for label, path in sec["checkpoints"].items()}
    repeats = sec.get("repeats", 7)
    warmup = sec.get("warmup", 2)
    halting = sec.get("halting", "off")
    rho = sec.get("rho")
    base_cfg = models[baseline_label].config
    scales = sec.get("scales", [base_cfg.image_size, 2 * base_cfg.image_size])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.get("seed", 0), 6]))

    native = rng.uniform(size=(1, base_cfg.image_size, base_cfg.image_size,
                               base_cfg.channels))
    result = {"scales": scales, "t_fix": {}, "models": {}}
    reports = {}
    for scale in scales:
        imgs = rng.uniform(size=(1, scale, scale, base_cfg.channels))
        for label, model in models.items():
            scaled = model if scale == model.config.image_size \
                else resized_for_profiling(model, scale)
            if label == baseline_label and scale not in result["t_fix"]:
                result["t_fix"][scale] = measure_fixed_cost(
                    scaled, imgs, repeats=repeats, warmup=warmup)
            reports[(label, scale)] = measure_token_throughput(
                scaled, imgs, repeats=repeats, warmup=warmup,
                halting=halting, rho=rho, label=f"{label}@{scale}")

    header = ["model", "layers", "retention", "top1"]
    for scale in scales:
        header.append(f"throughput_img{scale}")
    for scale in scales:
        header.append(f"speedup_img{scale}")
    rows = []
    for label, model in models.items():
        retention = float(np.mean(retention_profile(model, native,
                                                    halting="threshold")))
        seq_layers = "-".join(str(l) for l, k in
                              enumerate(model.config.mixer_kinds)
                              if k != "attention") or "none"
        entry = {"speedup": {}, "reports": {}}
        row = [label, seq_layers, f"{retention:.3f}",
               str(sec.get("top1", {}).get(label, ""))]
        for scale in scales:
            row.append(f"{reports[(label, scale)].throughput:.2f}")
            entry["reports"][scale] = reports[(label, scale)].to_dict()
        for scale in scales:
            sp = estimate_model_speedup(reports[(baseline_label, scale)],
                                        reports[(label, scale)],
                                        result["t_fix"][scale])
            entry["speedup"][scale] = sp
            row.append(f"{sp:.2f}x")
        result["models"][label] = entry
        rows.append(row)
    _write_csv(_resolve(out, "reports/profile.csv"), header, rows)
    _atomic_text(_resolve(out, "reports/profile.json"),
                 json.dumps(result, indent=2, default=str))
    for row in rows:
        print(" ".join(str(c) for c in row))
    return 0


def cmd_report(cfg, out):
    rows = []
    for path in sorted(glob.glob(os.path.join(out, "logs", "*.jsonl"))):
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines:
            continue
        last = lines[-1]
        retention = last.get("retention_per_layer") or [1.0]
        rows.append([os.path.splitext(os.path.basename(path))[0],
                     str(len(lines)),
                     f"{last.get('val_top1', float('nan')):.4f}",
                     f"{last.get('loss_total', float('nan')):.6g}",
                     f"{float(np.mean(retention)):.3f}"])
    if not rows:
        raise DependencyError(f"no metrics logs found under {os.path.join(out, 'logs')}")
    _write_csv(_resolve(out, "reports/summary.csv"),
               ["run", "epochs", "final_val_top1", "final_loss_total",
                "mean_retention"], rows)
    print(f"report: {len(rows)} runs -> {_resolve(out, 'reports/summary.csv')}")
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "replace": cmd_replace,
    "distill": cmd_distill,
    "ablate-groups": cmd_ablate_groups,
    "sweep-retention": cmd_sweep_retention,
    "analyze": cmd_analyze,
    "profile": cmd_profile,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="seqswap",
        description="Train, distill, analyze, and profile token-mixer models.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default="runs", help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except SeqswapError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.category, 1)


if __name__ == "__main__":
    sys.exit(main())
