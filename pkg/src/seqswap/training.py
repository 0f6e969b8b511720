"""Training loops: supervised teacher training and two-stage distillation.

Stage semantics:
  dense  - no halting anywhere; loss = w_sim * L_sim + w_cls * L_cls.
  stage1 - teacher generates threshold masks, student runs under them as
           hard constants; loss = w_sim * L_sim + w_mask * L_halt + w_cls * L_cls.
  stage2 - student thresholds its own masks; loss = w_avit * L_avit + w_cls * L_cls.

The teacher is frozen throughout: its forward passes run outside any tape and
its per-sample outputs are cached once up front. trainable_policy
"replaced_only" updates only the blocks in the replacement set and their
halting heads; everything else stays bit-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .losses import (
    avit_regularizer,
    cls_loss,
    halting_alignment_loss,
    halting_prior,
    similarity_loss,
    weighted_total,
)
from .model import accuracy, forward, named_parameters
from .optim import AdamW, cosine_lr

STAGES = ("dense", "stage1", "stage2")


@dataclass
class DistillConfig:
    stage: str = "stage1"
    replaced: tuple = ()
    lambda_cls: float = 1.0
    lambda_sim: float = 0.75
    lambda_mask: float = 0.1
    lambda_avit: float = 0.1
    lambda_halt: float = 0.01
    epochs: int = 50
    lr_max: float = 5e-4
    lr_min: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 64
    trainable_policy: str = "replaced_only"
    teacher_rho: float = -1.0  # >= 0: stage-1 teacher masks use fixed retention
    prior_center: int = -1  # -1 means depth - 2
    prior_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        for name in ("lambda_cls", "lambda_sim", "lambda_mask", "lambda_avit",
                     "lambda_halt"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        self.replaced = tuple(sorted(set(int(l) for l in self.replaced)))
        if self.stage != "stage2" and self.lambda_sim > 0 and not self.replaced:
            raise ConfigError("similarity loss needs a non-empty replacement set")
        if self.trainable_policy not in ("replaced_only", "all"):
            raise ConfigError(f"unknown trainable policy {self.trainable_policy!r}")
        if self.teacher_rho >= 0:
            if self.stage != "stage1":
                raise ConfigError("teacher_rho only applies to stage1")
            if not 0.0 < self.teacher_rho <= 1.0:
                raise ConfigError("teacher_rho must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**d)


def trainable_parameters(model, policy, replaced=()):
    """Name -> tensor map of parameters the optimizer may update."""
    params = named_parameters(model)
    if policy == "all":
        return params
    prefixes = tuple(f"blocks.{l}." for l in replaced)
    heads = {f"halt.scale.{l}" for l in replaced} | {f"halt.shift.{l}" for l in replaced}
    return {n: p for n, p in params.items()
            if n.startswith(prefixes) or n in heads}


def append_jsonl(path, row):
    if path is None:
        return
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(row) + "\n")


def _epoch_average(sums, count):
    return {k: v / count for k, v in sums.items()}


def _run_loop(dataset, cfg_epochs, cfg_lr_max, cfg_lr_min, cfg_batch, seed,
              trainable, weight_decay, batch_loss_fn, eval_fn, log_path):
    n = len(dataset.train_x)
    if n == 0:
        raise ContractError("empty training set")
    opt = AdamW(list(trainable.values()), lr=cfg_lr_max, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(n / cfg_batch)
    total_steps = max(1, cfg_epochs * steps_per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    metrics = []
    step = 0
    lr = cfg_lr_max
    for epoch in range(cfg_epochs):
        perm = rng.permutation(n)
        sums = {}
        for s in range(0, n, cfg_batch):
            idx = perm[s:s + cfg_batch]
            lr = cosine_lr(step, total_steps, cfg_lr_max, cfg_lr_min)
            with ad.Tape() as tape:
                total, parts = batch_loss_fn(idx)
            opt.zero_grad()
            ad.backward(total)
            opt.step(lr=lr)
            tape.clear()
            for k, v in parts.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            step += 1
        row = {"epoch": epoch, "lr": lr}
        row.update(_epoch_average(sums, n))
        row.update(eval_fn())
        metrics.append(row)
        append_jsonl(log_path, row)
    return metrics


def _masked_accuracy(model, images, labels, masks, batch=64):
    preds = []
    for s in range(0, len(images), batch):
        logits = forward(model, images[s:s + batch], halting="given",
                         masks=masks[:, s:s + batch]).logits
        preds.append(np.argmax(logits.data, axis=-1))
    return float(np.mean(np.concatenate(preds) == np.asarray(labels)))


def _retention_row(model, images, halting, rho=None, masks=None, batch=64):
    """Mean per-layer retention ratio over a validation set, class excluded."""
    depth = model.config.depth
    n_patch = model.config.n_tokens - 1
    totals = np.zeros(depth)
    n = len(images)
    for s in range(0, n, batch):
        m = None if masks is None else masks[:, s:s + batch]
        tr = forward(model, images[s:s + batch], halting=halting, rho=rho, masks=m)
        totals += tr.active_counts.sum(axis=1) / n_patch
    return (totals / n).tolist()


def _teacher_cache(teacher, images, replaced, halting, batch=64, rho=None):
    """Frozen-teacher outputs for a whole split, computed once, no tape."""
    feats = {l: [] for l in replaced}
    scores, masks, logits = [], [], []
    n = len(images)
    for s in range(0, n, batch):
        tr = forward(teacher, images[s:s + batch], halting=halting, rho=rho)
        for l in replaced:
            feats[l].append(tr.block_outputs[l].data)
        scores.append(np.stack([h.data for h in tr.halt_scores]))
        masks.append(tr.masks)
        logits.append(tr.logits.data)
    return {
        "feats": {l: np.concatenate(v) for l, v in feats.items()},
        "scores": np.concatenate(scores, axis=1),
        "masks": np.concatenate(masks, axis=1),
        "logits": np.concatenate(logits),
    }


def train_classifier(model, dataset, epochs=30, lr_max=5e-4, lr_min=0.0,
                     batch_size=64, weight_decay=0.0, use_halting=False,
                     lambda_avit=0.1, lambda_halt=0.01, prior_center=-1,
                     prior_sigma=1.0, rho=None, seed=0, log_path=None):
    """Supervised training; with use_halting the A-ViT objective is added and
    the model thresholds its own masks (sparsity-aware teacher). With rho the
    fixed-retention masks are active during training instead, so the backbone
    adapts to that token budget."""
    if use_halting and rho is not None:
        raise ConfigError("use_halting and rho are mutually exclusive")
    cfg = model.config
    prior = halting_prior(cfg.depth,
                          None if prior_center < 0 else prior_center, prior_sigma)
    trainable = trainable_parameters(model, "all")
    weights = {"cls": 1.0, "avit": lambda_avit}
    mode = "threshold" if use_halting else ("fixed" if rho is not None else "off")

    def batch_loss(idx):
        tr = forward(model, dataset.train_x[idx], halting=mode, rho=rho)
        parts = {"cls": cls_loss(tr.logits, dataset.train_y[idx])}
        if use_halting:
            parts["avit"] = avit_regularizer(tr.cumulative[-1], tr.halt_scores,
                                             prior, lambda_halt)
        return weighted_total(parts, weights)

    def evaluate():
        top1 = accuracy(model, dataset.val_x, dataset.val_y, halting=mode,
                        rho=rho)
        return {"val_top1": top1,
                "retention_per_layer": _retention_row(model, dataset.val_x,
                                                      mode, rho=rho)}

    return _run_loop(dataset, epochs, lr_max, lr_min, batch_size, seed,
                     trainable, weight_decay, batch_loss, evaluate, log_path)


def train_distill(student, teacher, dataset, cfg, log_path=None):
    """Run one distillation stage per DistillConfig; returns per-epoch metrics."""
    if cfg.stage in ("dense", "stage1") and teacher is None:
        raise ContractError(f"stage {cfg.stage!r} needs a teacher")
    depth = student.config.depth
    for l in cfg.replaced:
        if l < 0 or l >= depth:
            raise ContractError(f"replaced layer {l} outside [0, {depth})")
    prior = halting_prior(depth, None if cfg.prior_center < 0 else cfg.prior_center,
                          cfg.prior_sigma)
    trainable = trainable_parameters(student, cfg.trainable_policy, cfg.replaced)
    if not trainable:
        raise ContractError("no trainable parameters selected")
    weights = {"cls": cfg.lambda_cls, "sim": cfg.lambda_sim,
               "halt": cfg.lambda_mask, "avit": cfg.lambda_avit}

    cache = None
    val_cache = None
    if cfg.stage in ("dense", "stage1"):
        mode, rho = ("off", None) if cfg.stage == "dense" else ("threshold", None)
        if cfg.stage == "stage1" and cfg.teacher_rho >= 0:
            mode, rho = "fixed", cfg.teacher_rho
        cache = _teacher_cache(teacher, dataset.train_x, cfg.replaced, mode, rho=rho)
        if cfg.stage == "stage1":
            val_cache = _teacher_cache(teacher, dataset.val_x, cfg.replaced, mode,
                                       rho=rho)

    def batch_loss(idx):
        x, y = dataset.train_x[idx], dataset.train_y[idx]
        if cfg.stage == "dense":
            tr = forward(student, x, halting="off")
            parts = {
                "sim": similarity_loss([tr.block_outputs[l] for l in cfg.replaced],
                                       [cache["feats"][l][idx] for l in cfg.replaced])
                if cfg.lambda_sim > 0 else None,
                "cls": cls_loss(tr.logits, y),
            }
        elif cfg.stage == "stage1":
            masks = cache["masks"][:, idx]
            tr = forward(student, x, halting="given", masks=masks)
            parts = {
                "sim": similarity_loss([tr.block_outputs[l] for l in cfg.replaced],
                                       [cache["feats"][l][idx] for l in cfg.replaced],
                                       masks=[masks[l] for l in cfg.replaced]),
                "halt": halting_alignment_loss(tr.halt_scores,
                                               cache["scores"][:, idx], cfg.replaced),
                "cls": cls_loss(tr.logits, y),
            }
        else:
            tr = forward(student, x, halting="threshold")
            parts = {
                "avit": avit_regularizer(tr.cumulative[-1], tr.halt_scores,
                                         prior, cfg.lambda_halt),
                "cls": cls_loss(tr.logits, y),
            }
        return weighted_total(parts, weights)

    def evaluate():
        if cfg.stage == "dense":
            top1 = accuracy(student, dataset.val_x, dataset.val_y, halting="off")
            ret = _retention_row(student, dataset.val_x, "off")
        elif cfg.stage == "stage1":
            vm = val_cache["masks"]
            top1 = _masked_accuracy(student, dataset.val_x, dataset.val_y, vm)
            ret = _retention_row(student, dataset.val_x, "given", masks=vm)
        else:
            top1 = accuracy(student, dataset.val_x, dataset.val_y, halting="threshold")
            ret = _retention_row(student, dataset.val_x, "threshold")
        return {"val_top1": top1, "retention_per_layer": ret}

    return _run_loop(dataset, cfg.epochs, cfg.lr_max, cfg.lr_min, cfg.batch_size,
                     cfg.seed, trainable, cfg.weight_decay, batch_loss, evaluate,
                     log_path)
