"""Checkpoint persistence: one-line JSON header, then raw little-endian
64-bit parameter blobs concatenated in manifest order.

Header: {"magic": "seqswap", "version": 1, "config": {...},
"manifest": {name: {"shape": [...], "offset": bytes-from-data-start}}}.
Offsets must tile the data section without gaps or overlap; loads are
validated against the model structure the config implies, so a round trip
is bit-exact and byte-identical on re-save.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import FormatError
from .model import ModelConfig, init_model, named_parameters

MAGIC = "seqswap"
VERSION = 1


def _atomic_write(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path):
    params = named_parameters(model)
    manifest = {}
    blobs = []
    offset = 0
    for name, t in params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest[name] = {"shape": list(t.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"magic": MAGIC, "version": VERSION,
                         "config": model.config.to_dict(),
                         "manifest": manifest}, sort_keys=True)
    _atomic_write(path, header.encode() + b"\n" + b"".join(blobs))
    return path


def _validate_manifest(manifest, data_len, path):
    spans = []
    for name, entry in manifest.items():
        size = 8 * int(np.prod(entry["shape"])) if entry["shape"] else 8
        spans.append((entry["offset"], entry["offset"] + size, name))
    spans.sort()
    prev_end, prev_name = 0, None
    for start, end, name in spans:
        if start < prev_end:
            raise FormatError(f"{path}: manifest offsets overlap "
                              f"({prev_name!r} and {name!r})")
        if start != prev_end:
            raise FormatError(f"{path}: gap before {name!r} at offset {start}")
        prev_end, prev_name = end, name
    if prev_end != data_len:
        raise FormatError(f"{path}: data section holds {data_len} bytes, "
                          f"manifest spans {prev_end}")


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed header JSON ({e})") from None
    if header.get("magic") != MAGIC:
        raise FormatError(f"{path}: bad magic {header.get('magic')!r}")
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    cfg = ModelConfig.from_dict(header["config"])
    model = init_model(cfg, seed=0)
    params = named_parameters(model)
    manifest = header["manifest"]
    if set(manifest) != set(params):
        missing = sorted(set(params) - set(manifest))
        extra = sorted(set(manifest) - set(params))
        raise FormatError(f"{path}: manifest mismatch "
                          f"(missing {missing}, unexpected {extra})")
    data = raw[nl + 1:]
    _validate_manifest(manifest, len(data), path)
    for name, t in params.items():
        entry = manifest[name]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise FormatError(f"{path}: {name} has shape {shape}, "
                              f"model expects {t.shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count,
                            offset=entry["offset"])
        t.data = arr.reshape(shape).astype(np.float64).copy()
    return model
