"""Distillation and halting losses.

Conventions: feature tensors are (B, T, D) or (T, D); halting scores and
cumulative probabilities are (B, T) or (T,) with the class token at index 0.
Per-sample quantities are averaged over the batch so reported values match
the single-sample definitions. Teacher-side inputs are plain arrays (the
teacher is frozen; its values enter as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

_KL_EPS = 1e-12


@dataclass
class LossBreakdown:
    total: float = 0.0
    cls: float = 0.0
    sim: float = 0.0
    halt: float = 0.0
    avit: float = 0.0

    def as_dict(self):
        return {"loss_total": self.total, "loss_cls": self.cls, "loss_sim": self.sim,
                "loss_halt": self.halt, "loss_avit": self.avit}


def _batched(t):
    t = ad.as_tensor(t)
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    return t


def similarity_loss(student_feats, teacher_feats, masks=None):
    """Sum over layers of mean squared feature distance, 1/(T*D) per sample.

    The lists hold one (B, T, D) tensor per replaced layer, already
    restricted to the replacement set. When masks are given (one (B, T)
    array per entry), inactive rows are zeroed in the difference so halted
    tokens contribute nothing; the normalizer stays T*D.
    """
    if len(student_feats) != len(teacher_feats):
        raise ShapeError("teacher and student layer lists differ in length")
    total = ad.as_tensor(0.0)
    for i, (zs, zt) in enumerate(zip(student_feats, teacher_feats)):
        zs = _batched(zs)
        zt = _batched(zt)
        if zs.shape != zt.shape:
            raise ShapeError(f"feature shape mismatch at entry {i}: "
                             f"{zs.shape} vs {zt.shape}")
        d = ad.sub(zs, zt)
        if masks is not None:
            m = np.asarray(masks[i], dtype=np.float64)
            if m.ndim == 1:
                m = m[None, :]
            d = ad.mul(d, m[:, :, None])
        b, t, dim = zs.shape
        total = ad.add(total, ad.mul(ad.tensor_sum(ad.mul(d, d)), 1.0 / (b * t * dim)))
    return total


def halting_alignment_loss(student_scores, teacher_scores, replaced):
    """Sum over replaced layers of the mean squared halting-score gap."""
    total = ad.as_tensor(0.0)
    for l in replaced:
        hs = ad.as_tensor(student_scores[l])
        if hs.ndim == 1:
            hs = ad.reshape(hs, (1,) + hs.shape)
        ht = np.asarray(teacher_scores[l].data
                        if isinstance(teacher_scores[l], Tensor) else teacher_scores[l],
                        dtype=np.float64)
        if ht.ndim == 1:
            ht = ht[None, :]
        if hs.shape != ht.shape:
            raise ShapeError(f"halting score shape mismatch at layer {l}")
        d = ad.sub(hs, ht)
        b, t = hs.shape
        total = ad.add(total, ad.mul(ad.tensor_sum(ad.mul(d, d)), 1.0 / (b * t)))
    return total


def cls_loss(logits, labels):
    """Mean softmax cross-entropy over the batch."""
    logits = ad.as_tensor(logits)
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1,) + logits.shape)
    b, k = logits.shape
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != b:
        raise ShapeError(f"{y.shape[0]} labels for {b} logit rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ContractError(f"label outside [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), y] = 1.0
    lp = ad.log_softmax_rows(logits)
    return ad.mul(ad.tensor_sum(ad.mul(lp, onehot)), -1.0 / b)


def halting_prior(depth, center=None, sigma=1.0):
    """Discretized Gaussian over layer indices, strictly positive, sums to 1."""
    if center is None:
        center = depth - 2
    idx = np.arange(depth, dtype=np.float64)
    p = np.exp(-0.5 * ((idx - center) / sigma) ** 2)
    return p / p.sum()


def discrete_kl(p, q):
    """KL(p || q) over a shared support; both logs share one epsilon so
    KL(p, p) is exactly zero."""
    logp = ad.log(ad.add(ad.as_tensor(p), _KL_EPS))
    logq = np.log(np.asarray(q, dtype=np.float64) + _KL_EPS)
    return ad.tensor_sum(ad.mul(ad.as_tensor(p), ad.sub(logp, logq)))


def halting_mass_distribution(scores):
    """Per-layer expected halting mass h_l * prod_{l'<l}(1 - h_l'), averaged
    over batch and patch tokens, normalized into a distribution over layers."""
    mass = []
    survive = None
    for h in scores:
        h = ad.as_tensor(h)
        if h.ndim == 1:
            h = ad.reshape(h, (1,) + h.shape)
        b, t = h.shape
        patch = np.zeros((1, t))
        patch[0, 1:] = 1.0
        if survive is None:
            survive = Tensor(np.ones((b, t)))
        layer_mass = ad.mul(h, survive)
        survive = ad.mul(survive, ad.sub(1.0, h))
        mass.append(ad.mul(ad.tensor_sum(ad.mul(layer_mass, patch)), 1.0 / (b * (t - 1))))
    raw = ad.stack(mass, 0)
    return ad.div(raw, ad.add(ad.tensor_sum(raw), _KL_EPS))


def avit_regularizer(cumulative_final, scores, prior, lambda_halt=0.01):
    """Mean |R - 1| over patch tokens plus a KL pull of the halting-mass
    distribution toward the given layer prior."""
    r = ad.as_tensor(cumulative_final)
    if r.ndim == 1:
        r = ad.reshape(r, (1,) + r.shape)
    b, t = r.shape
    patch = np.zeros((1, t))
    patch[0, 1:] = 1.0
    ponder = ad.mul(ad.tensor_sum(ad.mul(ad.absolute(ad.sub(r, 1.0)), patch)),
                    1.0 / (b * (t - 1)))
    p = halting_mass_distribution(scores)
    return ad.add(ponder, ad.mul(discrete_kl(p, prior), lambda_halt))


def weighted_total(parts, weights):
    """Tensor-valued lambda-weighted sum plus a float breakdown.

    parts maps component name (cls/sim/halt/avit) to a scalar tensor or None;
    weights maps the same names to nonnegative floats.
    """
    total = ad.as_tensor(0.0)
    fields = {}
    for name, part in parts.items():
        if part is None:
            fields[name] = 0.0
            continue
        w = weights[name]
        if w < 0:
            raise ContractError(f"negative loss weight for {name}")
        fields[name] = float(part.item())
        total = ad.add(total, ad.mul(part, w))
    return total, LossBreakdown(total=float(total.item()), **fields)
