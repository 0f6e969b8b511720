"""Cumulative token halting: scores, masks, and token compression.

Per layer, each token carries a cumulative halting probability R updated by
R <- R + (1 - R) * h and becomes inactive once R reaches 1 (strict "< 1"
retention test). Masks are binary and monotone under repeated updates; the
class token is pinned active by the callers and excluded from retention
statistics. Halted tokens are frozen in place: the surrounding block zeroes
their mixer and MLP contributions so the residual path carries their value
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


@dataclass
class HaltingParams:
    """Per-layer scale and shift scalars for the halting head.

    Kept as one scalar tensor per layer so a training policy can freeze or
    update individual layers' heads independently.
    """

    scale: list
    shift: list


def halting_score(x, params, layer):
    """sigmoid(scale_l * x[..., 0] + shift_l), the first-channel halting head.

    Accepts a single token embedding (D,) or any batch of them (..., D);
    returns a tensor one axis smaller with values in [0, 1].
    """
    if layer < 0 or layer >= len(params.scale):
        raise ContractError(f"halting layer {layer} out of range")
    gamma = params.scale[layer]
    beta = params.shift[layer]
    ch0 = ad.select(ad.as_tensor(x), -1, 0)
    return ad.sigmoid(ad.add(ad.mul(gamma, ch0), beta))


def update_cumulative(r_prev, h):
    """R' = R + (1 - R) * h, clamped to [0, 1]; elementwise on arrays."""
    r = np.asarray(r_prev, dtype=np.float64)
    hv = np.asarray(h, dtype=np.float64)
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise ContractError("cumulative halting probability outside [0, 1]")
    if np.any(hv < 0.0) or np.any(hv > 1.0):
        raise ContractError("halting score outside [0, 1]")
    out = np.clip(r + (1.0 - r) * hv, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def update_cumulative_t(r_prev, h):
    """Differentiable batched version of update_cumulative (no range check)."""
    r_new = ad.add(r_prev, ad.mul(ad.sub(1.0, r_prev), h))
    return ad.clip(r_new, 0.0, 1.0)


def retention_mask(r):
    """m = 1[R < 1]: tokens stay active strictly below the halting threshold."""
    return (np.asarray(r, dtype=np.float64) < 1.0).astype(np.float64)


def fixed_retention_mask(r, ratio):
    """Keep the ceil(ratio * (T-1)) patch tokens with lowest R, plus the class token.

    r has shape (..., T) with the class token at index 0; ties break toward
    the lower token index (stable argsort of (R, index)).
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"retention ratio {ratio} outside (0, 1]")
    r = np.asarray(r, dtype=np.float64)
    n_patch = r.shape[-1] - 1
    keep = int(np.ceil(ratio * n_patch))
    order = np.argsort(r[..., 1:], axis=-1, kind="stable")
    mask = np.zeros_like(r)
    np.put_along_axis(mask[..., 1:], order[..., :keep], 1.0, axis=-1)
    mask[..., 0] = 1.0
    return mask


def compress_tokens(x, m):
    """Drop inactive rows of a (T, D) sequence; returns (active rows, index map)."""
    x = ad.as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"compress_tokens expects (T, D), got {x.shape}")
    idx = np.flatnonzero(np.asarray(m, dtype=np.float64) > 0)
    if idx.size == 0:
        raise ContractError("no active tokens to compress")
    return ad.take_rows(x, idx, axis=0), idx


def restore_tokens(z, index_map, n_tokens):
    """Scatter compressed rows back to their original positions, zeros elsewhere."""
    z = ad.as_tensor(z)
    if z.shape[0] != len(index_map):
        raise ShapeError("compressed row count does not match index map")
    return ad.scatter_rows(z, np.asarray(index_map), n_tokens, axis=0)
