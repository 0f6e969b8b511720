"""Miniature pre-norm vision transformer with a pluggable token mixer per layer.

Each block computes y = x + Mixer(LN1(x)) and out = y + MLP(LN2(y)); the
mixer slot holds either multihead attention or the bidirectional sequential
mixer, both mapping (B, T, D) -> (B, T, D). A per-layer halting head drives
cumulative token halting; halted tokens are frozen passthrough (mixer and
MLP rows zeroed, residual carries the value). The class token sits at index
0, never halts, and feeds the classification head after a final layer norm.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mixers
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .halting import (
    HaltingParams,
    fixed_retention_mask,
    halting_score,
    retention_mask,
    update_cumulative_t,
)
from .mixers import AttentionParams, LSTMDirection, SeqMixerParams, SSMDirection

MIXER_KINDS = ("attention", "lstm", "ssm")
SEQ_KINDS = ("lstm", "ssm")


@dataclass
class ModelConfig:
    depth: int = 4
    dim: int = 32
    n_heads: int = 4
    image_size: int = 28
    patch_size: int = 7
    n_classes: int = 10
    channels: int = 1
    mixer_kinds: tuple = ()
    state_size: int = 0  # SSM state width; 0 means head_dim

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if not self.mixer_kinds:
            self.mixer_kinds = ("attention",) * self.depth
        self.mixer_kinds = tuple(self.mixer_kinds)
        if len(self.mixer_kinds) != self.depth:
            raise ConfigError("mixer_kinds length must equal depth")
        for k in self.mixer_kinds:
            if k not in MIXER_KINDS:
                raise ConfigError(f"unknown mixer kind {k!r}")

    @property
    def head_dim(self):
        return self.dim // self.n_heads

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self):
        return self.n_patches + 1

    @property
    def ssm_state(self):
        return self.state_size if self.state_size else self.head_dim

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mixer_kinds"] = list(self.mixer_kinds)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Block:
    ln1_scale: Tensor
    ln1_shift: Tensor
    mixer: object  # AttentionParams | SeqMixerParams
    ln2_scale: Tensor
    ln2_shift: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class Model:
    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos: Tensor
    blocks: list
    halt: HaltingParams
    ln_f_scale: Tensor
    ln_f_shift: Tensor
    head_w: Tensor
    head_b: Tensor


@dataclass
class ForwardTrace:
    """Everything a loss or analysis pass needs from one forward evaluation."""

    tokens: Tensor            # final token embeddings, pre final norm (B, T, D)
    logits: Tensor            # (B, K)
    block_inputs: list        # detached numpy copies of each block's input
    block_outputs: list       # per-layer output tensors (graph-connected)
    halt_scores: list         # per-layer halting scores (B, T)
    cumulative: list          # per-layer cumulative halting probabilities (B, T)
    masks: np.ndarray         # hard masks applied per layer (L, B, T)
    active_counts: np.ndarray  # active patch tokens per layer and sample (L, B)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return ad.param(rng.uniform(-bound, bound, size=shape))


def init_attention(cfg, rng):
    d = cfg.dim
    return AttentionParams(
        wq=_uniform(rng, (d, d), d),
        wk=_uniform(rng, (d, d), d),
        wv=_uniform(rng, (d, d), d),
        wo=_uniform(rng, (d, d), d),
        n_heads=cfg.n_heads,
    )


def _init_lstm_direction(cfg, rng):
    n, dh = cfg.n_heads, cfg.head_dim
    b = np.zeros((n, 1, 4 * dh))
    b[:, :, dh:2 * dh] = 1.0  # forget-gate bias, standard trick
    return LSTMDirection(
        w_x=_uniform(rng, (n, dh, 4 * dh), dh),
        w_h=_uniform(rng, (n, dh, 4 * dh), dh),
        b=ad.param(b),
    )


def _init_ssm_direction(cfg, rng):
    n, dh, ds = cfg.n_heads, cfg.head_dim, cfg.ssm_state
    log_a = np.tile(np.log(np.arange(1, ds + 1, dtype=np.float64)), (n, 1, 1))
    dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(n, 1, 1)))
    return SSMDirection(
        log_a=ad.param(log_a),
        w_dt=_uniform(rng, (n, dh, 1), dh),
        b_dt=ad.param(np.log(np.expm1(dt0))),  # softplus(b_dt) == dt0
        w_b=_uniform(rng, (n, dh, ds), dh),
        w_c=_uniform(rng, (n, dh, ds), dh),
        d_skip=ad.param(np.ones((n, 1, dh))),
    )


def init_seq_mixer(cfg, kind, rng):
    if kind not in SEQ_KINDS:
        raise ContractError(f"not a sequential mixer kind: {kind!r}")
    d, n, dh = cfg.dim, cfg.n_heads, cfg.head_dim
    direction = _init_lstm_direction if kind == "lstm" else _init_ssm_direction
    return SeqMixerParams(
        kind=kind,
        w_in=_uniform(rng, (d, d), d),
        fwd=direction(cfg, rng),
        rev=direction(cfg, rng),
        p_merge=_uniform(rng, (n, 2 * dh, dh), 2 * dh),
        w_out=_uniform(rng, (d, d), d),
        n_heads=n,
    )


def init_mixer(cfg, kind, rng):
    if kind == "attention":
        return init_attention(cfg, rng)
    return init_seq_mixer(cfg, kind, rng)


def init_block(cfg, kind, rng):
    d = cfg.dim
    hidden = 4 * d
    return Block(
        ln1_scale=ad.param(np.ones(d)),
        ln1_shift=ad.param(np.zeros(d)),
        mixer=init_mixer(cfg, kind, rng),
        ln2_scale=ad.param(np.ones(d)),
        ln2_shift=ad.param(np.zeros(d)),
        mlp_w1=_uniform(rng, (d, hidden), d),
        mlp_b1=ad.param(np.zeros(hidden)),
        mlp_w2=_uniform(rng, (hidden, d), hidden),
        mlp_b2=ad.param(np.zeros(d)),
    )


def init_model(cfg, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    d = cfg.dim
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    blocks = [init_block(cfg, k, rng) for k in cfg.mixer_kinds]
    halt = HaltingParams(
        scale=[ad.param(np.asarray(1.0)) for _ in range(cfg.depth)],
        shift=[ad.param(np.asarray(-4.0)) for _ in range(cfg.depth)],  # near-zero halting at start
    )
    return Model(
        config=cfg,
        patch_w=_uniform(rng, (patch_dim, d), patch_dim),
        patch_b=ad.param(np.zeros(d)),
        cls_token=ad.param(rng.normal(0.0, 0.02, size=(1, 1, d))),
        pos=ad.param(rng.normal(0.0, 0.02, size=(cfg.n_tokens, d))),
        blocks=blocks,
        halt=halt,
        ln_f_scale=ad.param(np.ones(d)),
        ln_f_shift=ad.param(np.zeros(d)),
        head_w=_uniform(rng, (d, cfg.n_classes), d),
        head_b=ad.param(np.zeros(cfg.n_classes)),
    )


# ---------------------------------------------------------------------------
# parameter registry


def _walk_params(prefix, obj, out):
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, ModelConfig):
        for f in dataclasses.fields(obj):
            _walk_params(f"{prefix}.{f.name}" if prefix else f.name,
                         getattr(obj, f.name), out)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _walk_params(f"{prefix}.{i}", v, out)


def named_parameters(obj):
    """Flat ordered name -> Tensor map over any parameter container."""
    out = {}
    _walk_params("", obj, out)
    return out


def parameter_count(obj):
    return sum(t.size for t in named_parameters(obj).values())


def _copy_value(v):
    if isinstance(v, Tensor):
        return ad.param(v.data.copy())
    if isinstance(v, ModelConfig):
        return ModelConfig.from_dict(v.to_dict())
    if dataclasses.is_dataclass(v):
        return type(v)(**{f.name: _copy_value(getattr(v, f.name))
                          for f in dataclasses.fields(v)})
    if isinstance(v, list):
        return [_copy_value(x) for x in v]
    return v


def copy_model(model):
    """Deep value copy; every leaf becomes a fresh trainable parameter."""
    return _copy_value(model)


def replace_layers(teacher, layers, kind, seed=0):
    """Student sharing all parameters except fresh sequential mixers at `layers`."""
    if kind not in SEQ_KINDS:
        raise ContractError(f"replacement mixer must be sequential, got {kind!r}")
    layers = sorted(set(int(l) for l in layers))
    for l in layers:
        if l < 0 or l >= teacher.config.depth:
            raise ContractError(f"layer index {l} outside [0, {teacher.config.depth})")
    student = copy_model(teacher)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    kinds = list(student.config.mixer_kinds)
    for l in layers:
        student.blocks[l].mixer = init_seq_mixer(student.config, kind, rng)
        kinds[l] = kind
    student.config.mixer_kinds = tuple(kinds)
    return student


# ---------------------------------------------------------------------------
# forward


def patch_grid(images, cfg):
    """Patchify to (B, n_patches, patch*patch*channels) in raster order, numpy in/out."""
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, :, :, None]
    elif a.ndim == 3:
        # (H, W, C) if trailing axis matches channels and leading matches image
        if a.shape[0] == cfg.image_size and a.shape[-1] == cfg.channels \
                and a.shape[1] == cfg.image_size:
            a = a[None]
        else:
            a = a[..., None]
    if a.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(f"expected images of shape "
                         f"({cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {a.shape[1:]}")
    p = cfg.patch_size
    g = cfg.image_size // p
    b = a.shape[0]
    a = a.reshape(b, g, p, g, p, cfg.channels)
    a = a.transpose(0, 1, 3, 2, 4, 5)
    return a.reshape(b, g * g, p * p * cfg.channels)


def patch_embed(model, images):
    """Project patches to D, prepend the class token, add positional embeddings."""
    cfg = model.config
    patches = patch_grid(images, cfg)
    b = patches.shape[0]
    tok = ad.add(ad.matmul(Tensor(patches), model.patch_w), model.patch_b)
    cls = ad.add(model.cls_token, Tensor(np.zeros((b, 1, cfg.dim))))
    return ad.add(ad.concat([cls, tok], 1), model.pos)


def block_forward(x, block, mask=None, stub_mixer=False):
    """y = x + Mixer(LN1(x)); out = y + MLP(LN2(y)); masked rows frozen."""
    u = ad.layer_norm(x, block.ln1_scale, block.ln1_shift)
    mixed = u if stub_mixer else mixers.mixer_output(u, block.mixer, mask)
    y = ad.add(x, mixed)
    v = ad.layer_norm(y, block.ln2_scale, block.ln2_shift)
    hidden = ad.gelu(ad.add(ad.matmul(v, block.mlp_w1), block.mlp_b1))
    out = ad.add(ad.matmul(hidden, block.mlp_w2), block.mlp_b2)
    if mask is not None:
        out = ad.mul(out, np.asarray(mask)[:, :, None])
    return ad.add(y, out)


def _normalize_given_masks(masks, depth, b, t):
    m = np.asarray(masks, dtype=np.float64)
    if m.shape == (depth, t):
        m = np.broadcast_to(m[:, None, :], (depth, b, t)).copy()
    if m.shape != (depth, b, t):
        raise ShapeError(f"expected masks of shape ({depth}, {b}, {t}), got {m.shape}")
    return m


def forward(model, images, halting="off", rho=None, masks=None, stub_mixers=False):
    """Run all blocks, tracking halting state and per-layer tensors.

    halting modes: "off" (dense), "threshold" (strict R < 1 masks),
    "fixed" (keep the rho-fraction of patch tokens with lowest R per layer),
    "given" (hard external masks, e.g. a teacher's). Halting scores and
    cumulative probabilities are tracked in every mode.
    """
    cfg = model.config
    x = patch_embed(model, images)
    b, t, _ = x.shape
    if halting == "fixed" and rho is None:
        raise ContractError("fixed-retention mode needs a retention ratio")
    if halting == "given":
        if masks is None:
            raise ContractError("mask mode 'given' needs masks")
        given = _normalize_given_masks(masks, cfg.depth, b, t)
    elif halting not in ("off", "threshold", "fixed"):
        raise ContractError(f"unknown halting mode {halting!r}")

    patch_only = np.zeros((1, t))
    patch_only[0, 1:] = 1.0
    r = Tensor(np.zeros((b, t)))
    prev = np.ones((b, t))
    block_inputs, block_outputs, scores, cums = [], [], [], []
    mask_list, counts = [], []
    for l, block in enumerate(model.blocks):
        block_inputs.append(x.data.copy())
        h = halting_score(x, model.halt, l)
        r = ad.mul(update_cumulative_t(r, h), patch_only)  # class token pinned at 0
        if halting == "off":
            m = np.ones((b, t))
        elif halting == "threshold":
            m = retention_mask(r.data) * prev
        elif halting == "fixed":
            m = fixed_retention_mask(r.data, rho)
        else:
            m = given[l]
        m[:, 0] = 1.0
        prev = m
        x = block_forward(x, block, None if halting == "off" else m,
                          stub_mixer=stub_mixers)
        block_outputs.append(x)
        scores.append(h)
        cums.append(r)
        mask_list.append(m)
        counts.append(m[:, 1:].sum(axis=1))

    final = ad.layer_norm(x, model.ln_f_scale, model.ln_f_shift)
    logits = ad.add(ad.matmul(ad.select(final, 1, 0), model.head_w), model.head_b)
    return ForwardTrace(
        tokens=x,
        logits=logits,
        block_inputs=block_inputs,
        block_outputs=block_outputs,
        halt_scores=scores,
        cumulative=cums,
        masks=np.stack(mask_list),
        active_counts=np.stack([c.astype(np.int64) for c in counts]),
    )


def classify(model, images, **kwargs):
    """Logits only; see forward() for the halting modes."""
    return forward(model, images, **kwargs).logits


def predict_labels(model, images, batch=64, **kwargs):
    """Argmax labels evaluated without building any tape, batched for memory."""
    n = np.asarray(images).shape[0] if np.asarray(images).ndim >= 3 else 1
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    out = []
    for i in range(0, n, batch):
        logits = classify(model, imgs[i:i + batch], **kwargs)
        out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out)


def accuracy(model, images, labels, **kwargs):
    pred = predict_labels(model, images, **kwargs)
    return float(np.mean(pred == np.asarray(labels)))
