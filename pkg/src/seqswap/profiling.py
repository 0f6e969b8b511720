"""Wall-clock throughput of token-mixing sublayers and model-level speedup.

Token throughput aggregates over the evaluated mixing layers:
TP = sum_l T_l / sum_l t_l, with T_l the (compressed) token count a layer
actually processes and t_l the median runtime over repeats. The model-level
speedup against an attention baseline is
(t_fix + t_mix_attn) / (t_fix + t_mix_method), where t_fix times the
backbone with every mixer stubbed to identity. Per-layer timings include
the halting-head evaluation. Timing runs are forward-only (no tape) and
expect a single-threaded process; absolute numbers are hardware-dependent.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import mixers
from .autodiff import Tensor
from .errors import ContractError
from .halting import halting_score
from .model import ModelConfig, copy_model, forward


@dataclass
class LayerTiming:
    layer: int
    tokens: int
    runtime_ms: float

    def __post_init__(self):
        if self.tokens < 1:
            raise ContractError("layer must process at least one token")
        if self.runtime_ms <= 0:
            raise ContractError("layer runtime must be positive")


@dataclass
class ProfileReport:
    layers: list
    throughput: float
    t_mix: float
    t_fix: float = 0.0
    t_model: float = 0.0
    label: str = ""

    def validate(self):
        tokens = sum(lt.tokens for lt in self.layers)
        ms = sum(lt.runtime_ms for lt in self.layers)
        if abs(self.throughput - tokens / ms) > 1e-12:
            raise ContractError("stored throughput disagrees with layer timings")
        if abs(self.t_mix - ms) > 1e-12:
            raise ContractError("stored t_mix disagrees with layer timings")
        if abs(self.t_model - (self.t_fix + self.t_mix)) > 1e-12:
            raise ContractError("t_model must equal t_fix + t_mix")
        return self

    def to_dict(self):
        return {
            "label": self.label,
            "layers": [{"layer": lt.layer, "tokens": lt.tokens,
                        "runtime_ms": lt.runtime_ms} for lt in self.layers],
            "throughput": self.throughput,
            "t_mix": self.t_mix,
            "t_fix": self.t_fix,
            "t_model": self.t_model,
        }


def build_report(timings, t_fix=0.0, label=""):
    """Assemble a report from raw per-layer (token count, runtime) pairs."""
    timings = list(timings)
    if not timings:
        raise ContractError("no layer timings")
    tokens = sum(lt.tokens for lt in timings)
    ms = sum(lt.runtime_ms for lt in timings)
    return ProfileReport(layers=timings, throughput=tokens / ms, t_mix=ms,
                         t_fix=t_fix, t_model=t_fix + ms, label=label).validate()


def with_fixed_cost(report, t_fix):
    return replace(report, t_fix=t_fix, t_model=t_fix + report.t_mix).validate()


def _median_ms(fn, repeats, warmup):
    if repeats < 3:
        raise ContractError("need at least 3 timing repeats")
    if warmup < 1:
        raise ContractError("need at least 1 warmup run")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    return statistics.median(samples)


def retention_to_token_counts(ratios, n_tokens):
    """T_l = 1 + round(ratio * (T - 1)): the class token is always processed."""
    out = []
    for r in np.asarray(ratios, dtype=np.float64).reshape(-1):
        if not 0.0 < r <= 1.0:
            raise ContractError(f"retention ratio {r} outside (0, 1]")
        out.append(1 + int(np.rint(r * (n_tokens - 1))))
    return out


def measure_token_throughput(model, images, repeats=7, warmup=2, halting="off",
                             rho=None, token_counts=None, label=""):
    """Time each mixing sublayer in isolation at its active token count.

    Inputs to each layer come from a real forward pass; rows are compressed
    per the layer's mask, or truncated to token_counts[l] when given.
    """
    trace = forward(model, images[:1], halting=halting, rho=rho)
    timings = []
    for l, block in enumerate(model.blocks):
        x_full = Tensor(trace.block_inputs[l])
        u_full = ad.layer_norm(x_full, block.ln1_scale, block.ln1_shift).data
        if token_counts is not None:
            t_l = int(token_counts[l])
            idx = np.arange(t_l)
        else:
            idx = np.flatnonzero(trace.masks[l, 0] > 0)
            t_l = idx.size
        comp = Tensor(np.ascontiguousarray(u_full[:, idx, :]))

        def run_layer(block=block, comp=comp, x_full=x_full, l=l):
            halting_score(x_full, model.halt, l)
            mixers.mixer_output(comp, block.mixer)

        timings.append(LayerTiming(layer=l, tokens=t_l,
                                   runtime_ms=_median_ms(run_layer, repeats, warmup)))
    return build_report(timings, label=label)


def measure_fixed_cost(model, images, repeats=7, warmup=2):
    """Median runtime of the full forward with mixers stubbed to identity."""
    def run():
        forward(model, images[:1], stub_mixers=True)
    return _median_ms(run, repeats, warmup)


def estimate_model_speedup(baseline, method, t_fix):
    """(t_fix + baseline t_mix) / (t_fix + method t_mix)."""
    num = t_fix + baseline.t_mix
    den = t_fix + method.t_mix
    if num <= 0 or den <= 0:
        raise ContractError("speedup needs positive total runtimes")
    return num / den


def resized_for_profiling(model, image_size):
    """Same block parameters at a different token count (fresh zero positional
    table); only for timing, the outputs are not meaningful predictions."""
    cfg = model.config
    new_cfg = ModelConfig.from_dict({**cfg.to_dict(), "image_size": image_size})
    scaled = copy_model(model)
    scaled.config = new_cfg
    scaled.pos = ad.param(np.zeros((new_cfg.n_tokens, cfg.dim)))
    return scaled
