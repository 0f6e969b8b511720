"""Token mixers: multihead attention and the bidirectional sequential wrapper.

All mixers map (B, T, D) -> (B, T, D) and accept an optional per-token
active mask (B, T). Masked semantics are the dense equivalent of removing
inactive tokens before the mixer and restoring zeros afterwards: attention
gives inactive keys -inf logits, scans carry their state through inactive
steps unchanged, and inactive output rows are zeroed so the residual path
leaves halted tokens frozen.

Sequential mixer layout: the input projection splits features into N head
subspaces; each head runs one operator forward and an independently
parameterized operator on the reversed sequence (re-aligned to token order
afterwards), concatenates both to 2*Dh, merges back to Dh per head, and a
final output projection mixes heads. Head-stacked parameter arrays carry
the head axis first so one batched matmul serves all heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

NEG_INF = -np.inf


@dataclass
class AttentionParams:
    wq: Tensor  # (D, D)
    wk: Tensor  # (D, D)
    wv: Tensor  # (D, D)
    wo: Tensor  # (D, D)
    n_heads: int


@dataclass
class LSTMDirection:
    """One scan direction for all heads; gate order i, f, g, o on the last axis."""

    w_x: Tensor  # (N, Dh, 4*Dh)
    w_h: Tensor  # (N, Dh, 4*Dh)
    b: Tensor    # (N, 1, 4*Dh)


@dataclass
class SSMDirection:
    """Selective diagonal state-space scan, one shared state vector per head.

    The state decay is A = -exp(log_a) (negative by construction), the step
    size comes from a softplus so exp(dt*A) lies in (0, 1), and the read-out
    is the inner product <W_c x_k, s_k> broadcast across channels plus an
    elementwise skip.
    """

    log_a: Tensor   # (N, 1, Ds)
    w_dt: Tensor    # (N, Dh, 1)
    b_dt: Tensor    # (N, 1, 1)
    w_b: Tensor     # (N, Dh, Ds)
    w_c: Tensor     # (N, Dh, Ds)
    d_skip: Tensor  # (N, 1, Dh)


@dataclass
class SeqMixerParams:
    kind: str  # "lstm" | "ssm"
    w_in: Tensor    # (D, D)
    fwd: LSTMDirection | SSMDirection
    rev: LSTMDirection | SSMDirection
    p_merge: Tensor  # (N, 2*Dh, Dh)
    w_out: Tensor    # (D, D)
    n_heads: int


def _ensure_batched(u):
    if u.ndim == 2:
        return ad.reshape(u, (1,) + u.shape), True
    return u, False


def _mask_arrays(mask, n_tokens):
    """Normalize an active mask to float (B, T) plus the attention key bias."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape[-1] != n_tokens:
        raise ShapeError(f"mask covers {m.shape[-1]} tokens, input has {n_tokens}")
    key_bias = np.where(m > 0, 0.0, NEG_INF)[:, None, None, :]
    return m, key_bias


def split_heads(x, n_heads):
    """(B, T, D) -> (B, N, T, Dh) with contiguous channel blocks per head."""
    b, t, d = x.shape
    dh = d // n_heads
    return ad.transpose(ad.reshape(x, (b, t, n_heads, dh)), (0, 2, 1, 3))


def join_heads(x):
    """(B, N, T, Dh) -> (B, T, N*Dh)."""
    b, n, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, n * dh))


# ---------------------------------------------------------------------------
# attention


def _attention_probs(u, params, mask=None):
    n = params.n_heads
    d = u.shape[-1]
    dh = d // n
    q = split_heads(ad.matmul(u, params.wq), n)
    k = split_heads(ad.matmul(u, params.wk), n)
    v = split_heads(ad.matmul(u, params.wv), n)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        _, key_bias = _mask_arrays(mask, u.shape[-2])
        scores = ad.add(scores, key_bias)
    return ad.softmax_rows(scores), v


def attention_mixer(u, params, mask=None):
    """N-head scaled dot-product attention with output projection."""
    u, squeeze = _ensure_batched(u)
    probs, v = _attention_probs(u, params, mask)
    out = ad.matmul(join_heads(ad.matmul(probs, v)), params.wo)
    if mask is not None:
        m, _ = _mask_arrays(mask, u.shape[-2])
        out = ad.mul(out, m[:, :, None])
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def attention_probs(u, params, mask=None):
    """Post-softmax attention probabilities, shape (B, N, T, T)."""
    u, _ = _ensure_batched(u)
    probs, _ = _attention_probs(u, params, mask)
    return probs


def attention_head_output(u, params, head):
    """Per-head attention output (B, T, Dh) before the final post-projection."""
    u, _ = _ensure_batched(u)
    probs, v = _attention_probs(u, params)
    ctx = ad.matmul(probs, v)  # (B, N, T, Dh)
    return ad.select(ctx, 1, head)


# ---------------------------------------------------------------------------
# sequential scans (shared layout: seq is (B, N, T, Dh))


def _step_mask(mask, t):
    # (B, 1, 1) float factor selecting state update vs carry-through
    return mask[:, None, t:t + 1]


def _recurrent_matmul(h, w):
    """(B, N, H) x (N, H, M) -> (B, N, M) through a per-head batched matmul."""
    b, n, hdim = h.shape
    out = ad.matmul(ad.reshape(h, (b, n, 1, hdim)), w)
    return ad.reshape(out, (b, n, out.shape[-1]))


def lstm_scan(seq, p, mask=None):
    """Standard LSTM recurrence over the token axis, zero initial state."""
    b, n, t_len, dh = seq.shape
    pre = ad.add(ad.matmul(seq, p.w_x), p.b)  # (B, N, T, 4Dh)
    h = Tensor(np.zeros((b, n, dh)))
    c = Tensor(np.zeros((b, n, dh)))
    outs = []
    for t in range(t_len):
        z = ad.add(ad.select(pre, 2, t), _recurrent_matmul(h, p.w_h))
        gi = ad.sigmoid(ad.narrow(z, -1, 0, dh))
        gf = ad.sigmoid(ad.narrow(z, -1, dh, dh))
        gg = ad.tanh(ad.narrow(z, -1, 2 * dh, dh))
        go = ad.sigmoid(ad.narrow(z, -1, 3 * dh, dh))
        c_new = ad.add(ad.mul(gf, c), ad.mul(gi, gg))
        h_new = ad.mul(go, ad.tanh(c_new))
        if mask is not None:
            m = _step_mask(mask, t)
            c = ad.add(ad.mul(c_new, m), ad.mul(c, 1.0 - m))
            h = ad.add(ad.mul(h_new, m), ad.mul(h, 1.0 - m))
        else:
            c, h = c_new, h_new
        outs.append(h)
    return ad.stack(outs, 2)


def ssm_scan(seq, p, mask=None):
    """Selective state-space scan: s_k = exp(dt_k*A) (.) s_{k-1} + dt_k*(W_b x_k),
    read out as <W_c x_k, s_k> broadcast over channels plus d_skip (.) x_k."""
    b, n, t_len, dh = seq.shape
    a_diag = ad.neg(ad.exp(p.log_a))                        # (N, 1, Ds)
    dt = ad.softplus(ad.add(ad.matmul(seq, p.w_dt), p.b_dt))  # (B, N, T, 1)
    decay = ad.exp(ad.mul(dt, a_diag))                      # (B, N, T, Ds)
    drive = ad.mul(dt, ad.matmul(seq, p.w_b))               # (B, N, T, Ds)
    cx = ad.matmul(seq, p.w_c)                              # (B, N, T, Ds)
    ds = p.w_b.shape[-1]
    s = Tensor(np.zeros((b, n, ds)))
    states = []
    for t in range(t_len):
        s_new = ad.add(ad.mul(ad.select(decay, 2, t), s), ad.select(drive, 2, t))
        if mask is not None:
            m = _step_mask(mask, t)
            s = ad.add(ad.mul(s_new, m), ad.mul(s, 1.0 - m))
        else:
            s = s_new
        states.append(s)
    stacked = ad.stack(states, 2)                           # (B, N, T, Ds)
    read = ad.tensor_sum(ad.mul(cx, stacked), axis=-1, keepdims=True)
    return ad.add(read, ad.mul(p.d_skip, seq))


_SCANS = {"lstm": lstm_scan, "ssm": ssm_scan}


def scan_for(kind):
    if kind not in _SCANS:
        raise ContractError(f"unknown sequential operator kind {kind!r}")
    return _SCANS[kind]


# ---------------------------------------------------------------------------
# multihead bidirectional wrapper


def _bidi_branches(heads, params, mask=None, scan_fn=None):
    scan = scan_fn if scan_fn is not None else scan_for(params.kind)
    fwd = scan(heads, params.fwd, mask)
    rev_mask = None if mask is None else mask[:, ::-1]
    rev = ad.flip(scan(ad.flip(heads, 2), params.rev, rev_mask), 2)
    return fwd, rev


def multihead_bidi_mixer(u, params, mask=None, scan_fn=None):
    """Splitter -> per-head bidirectional operator -> merger -> output projection."""
    u, squeeze = _ensure_batched(u)
    m = None
    if mask is not None:
        m, _ = _mask_arrays(mask, u.shape[-2])
    heads = split_heads(ad.matmul(u, params.w_in), params.n_heads)
    fwd, rev = _bidi_branches(heads, params, m, scan_fn)
    merged = ad.matmul(ad.concat([fwd, rev], -1), params.p_merge)  # (B, N, T, Dh)
    out = ad.matmul(join_heads(merged), params.w_out)
    if m is not None:
        out = ad.mul(out, m[:, :, None])
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def _single_head(direction, head):
    """Slice one head out of a direction's stacked parameter arrays."""
    fields = {}
    for name in direction.__dataclass_fields__:
        fields[name] = ad.narrow(getattr(direction, name), 0, head, 1)
    return type(direction)(**fields)


def seq_head_output(u, params, head, branch="merged"):
    """One head's output (B, T, Dh) before the final post-projection.

    branch selects the merged head output or a single direction's aligned
    contribution ("fwd" / "rev").
    """
    u, _ = _ensure_batched(u)
    d = u.shape[-1]
    dh = d // params.n_heads
    w_in_h = ad.narrow(params.w_in, 1, head * dh, dh)
    heads = ad.reshape(ad.matmul(u, w_in_h), (u.shape[0], 1, u.shape[1], dh))
    sub = SeqMixerParams(
        kind=params.kind,
        w_in=params.w_in,
        fwd=_single_head(params.fwd, head),
        rev=_single_head(params.rev, head),
        p_merge=ad.narrow(params.p_merge, 0, head, 1),
        w_out=params.w_out,
        n_heads=1,
    )
    fwd, rev = _bidi_branches(heads, sub)
    if branch == "fwd":
        out = fwd
    elif branch == "rev":
        out = rev
    elif branch == "merged":
        out = ad.matmul(ad.concat([fwd, rev], -1), sub.p_merge)
    else:
        raise ContractError(f"unknown branch {branch!r}")
    return ad.select(out, 1, 0)


def mixer_output(u, block_params, mask=None):
    """Dispatch on the parameter type; the uniform (B,T,D)->(B,T,D) surface."""
    if isinstance(block_params, AttentionParams):
        return attention_mixer(u, block_params, mask)
    if isinstance(block_params, SeqMixerParams):
        return multihead_bidi_mixer(u, block_params, mask)
    raise ContractError(f"unknown mixer params {type(block_params).__name__}")
