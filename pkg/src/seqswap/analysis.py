"""Dependency analysis: gradient interaction maps, token importance, AUPRC
of retained tokens against importance, and retention profiles.

The interaction map M for a (layer, head) pair measures how output token i
depends on input token j: backward from the channel sum of the head's
pre-merge output row i, then M[i, j] = sum_d |d/dx_{j,d}|, averaged over the
batch. Gradients are taken with respect to the block input (through the
block's first layer norm), so maps are comparable across mixer kinds.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .mixers import AttentionParams, SeqMixerParams, attention_head_output, \
    attention_probs, seq_head_output
from .model import forward


def _check_layer_head(model, layer, head):
    if layer < 0 or layer >= model.config.depth:
        raise ContractError(f"layer {layer} outside [0, {model.config.depth})")
    if head < 0 or head >= model.config.n_heads:
        raise ContractError(f"head {head} outside [0, {model.config.n_heads})")


def _head_forward(block, x, head, branch):
    u = ad.layer_norm(x, block.ln1_scale, block.ln1_shift)
    mixer = block.mixer
    if isinstance(mixer, AttentionParams):
        if branch != "merged":
            raise ContractError("attention has no directional branches")
        return attention_head_output(u, mixer, head)
    if isinstance(mixer, SeqMixerParams):
        return seq_head_output(u, mixer, head, branch=branch)
    raise ContractError(f"unknown mixer {type(mixer).__name__}")


def interaction_map(model, layer, head, images, branch="merged"):
    """(T, T) batch-averaged absolute-gradient dependency matrix."""
    _check_layer_head(model, layer, head)
    trace = forward(model, images)
    x_in = trace.block_inputs[layer]  # (B, T, D)
    b, t, _ = x_in.shape
    block = model.blocks[layer]
    m = np.zeros((t, t))
    for i in range(t):
        with ad.Tape() as tape:
            x = Tensor(x_in, requires_grad=True)
            out = _head_forward(block, x, head, branch)  # (B, T, Dh)
            ad.backward(ad.tensor_sum(ad.select(out, 1, i)))
        tape.clear()
        m[i] = np.abs(x.grad).sum(axis=-1).mean(axis=0)
    return m


def token_importance(m):
    """Column sums: aggregate influence of each input token on all outputs."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ContractError("interaction map must be nonnegative and finite")
    return m.sum(axis=0)


def attention_score_map(model, layer, head, images):
    """Batch-averaged post-softmax attention probabilities, rows sum to 1."""
    _check_layer_head(model, layer, head)
    block = model.blocks[layer]
    if not isinstance(block.mixer, AttentionParams):
        raise ContractError(f"layer {layer} mixer is not attention")
    trace = forward(model, images)
    u = ad.layer_norm(Tensor(trace.block_inputs[layer]),
                      block.ln1_scale, block.ln1_shift)
    probs = attention_probs(u, block.mixer)  # (B, N, T, T)
    return probs.data[:, head].mean(axis=0)


def auprc(labels, scores):
    """Average precision over descending distinct thresholds.

    AP = sum_k (R_k - R_{k-1}) * P_k, accumulated sequentially so the result
    is bit-reproducible against a per-threshold recount.
    """
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise ContractError("labels and scores differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ContractError("AUPRC undefined without positives")
    thresholds = np.unique(s)[::-1]
    tp = 0
    fp = 0
    recall_prev = 0.0
    ap = 0.0
    for thr in thresholds:
        bucket = s == thr
        tp += int(y[bucket].sum())
        fp += int(bucket.sum()) - int(y[bucket].sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - recall_prev) * precision
        recall_prev = recall
    return ap


def random_baseline_auprc(labels, n_draws=100, seed=0):
    """Mean AUPRC of uniform-random score vectors for the same labels."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    y = np.asarray(labels).reshape(-1)
    return float(np.mean([auprc(y, rng.uniform(size=y.shape[0]))
                          for _ in range(n_draws)]))


def retention_profile(model, images, halting="threshold", rho=None, batch=64):
    """Per-layer mean retention ratio over a dataset, class token excluded."""
    n_patch = model.config.n_tokens - 1
    totals = np.zeros(model.config.depth)
    n = len(images)
    for s in range(0, n, batch):
        tr = forward(model, images[s:s + batch], halting=halting, rho=rho)
        totals += tr.active_counts.sum(axis=1) / n_patch
    return totals / n


def _write_csv(path, matrix):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in np.atleast_2d(matrix):
            w.writerow([f"{v:.12g}" for v in row])


def save_analysis(model, images, outdir, halting="threshold", rho=None,
                  auprc_seeds=100):
    """Emit maps, importance vectors, retention profile, and AUPRC summary.

    AUPRC compares each layer's retained-token set (from the halting mode)
    against gradient-based importance scores, with a random-score baseline.
    """
    cfg = model.config
    index = {"layers": cfg.depth, "heads": cfg.n_heads, "files": []}
    importances = {}
    for l in range(cfg.depth):
        acc = np.zeros((cfg.n_tokens, cfg.n_tokens))
        for h in range(cfg.n_heads):
            m = interaction_map(model, l, h, images)
            rel = f"maps/layer{l}_head{h}.csv"
            _write_csv(os.path.join(outdir, rel), m)
            index["files"].append(rel)
            acc += m
        importances[l] = token_importance(acc / cfg.n_heads)
        _write_csv(os.path.join(outdir, f"importance/layer{l}.csv"), importances[l])

    ratios = retention_profile(model, images, halting=halting, rho=rho)
    _write_csv(os.path.join(outdir, "retention.csv"), ratios)

    trace = forward(model, images[:1], halting=halting, rho=rho)
    rows = {}
    for l in range(cfg.depth):
        labels = trace.masks[l, 0, 1:].astype(int)  # patch tokens only
        scores = importances[l][1:]
        if labels.sum() == 0 or labels.sum() == labels.size:
            rows[f"layer{l}"] = {"auprc": None, "random": None,
                                 "note": "degenerate mask (all or none retained)"}
            continue
        rows[f"layer{l}"] = {
            "auprc": auprc(labels, scores),
            "random": random_baseline_auprc(labels, n_draws=auprc_seeds),
        }
    with open(os.path.join(outdir, "auprc.json"), "w") as f:
        json.dump(rows, f, indent=2)
    with open(os.path.join(outdir, "index.json"), "w") as f:
        json.dump(index, f, indent=2)
    return index
