"""Checkpoint persistence: bit-exact round trips and format validation."""

import json

import numpy as np
import pytest

from seqswap import checkpoint as ck
from seqswap.errors import FormatError
from seqswap.model import ModelConfig, forward, init_model, named_parameters, replace_layers

rng = np.random.default_rng(61)


def small_model(seed=0, **over):
    base = dict(depth=2, dim=8, n_heads=2, image_size=14, patch_size=7,
                n_classes=3)
    base.update(over)
    return init_model(ModelConfig(**base), seed=seed)


def test_round_trip_bit_exact(tmp_path):
    m = small_model(seed=1, mixer_kinds=("attention", "ssm"))
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    back = ck.load_checkpoint(path)
    assert back.config == m.config
    a, b = named_parameters(m), named_parameters(back)
    assert list(a) == list(b)
    for k in a:
        assert a[k].data.dtype == b[k].data.dtype
        assert np.array_equal(a[k].data, b[k].data), k


def test_resave_byte_identical(tmp_path):
    m = small_model(seed=2)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    ck.save_checkpoint(m, p1)
    ck.save_checkpoint(ck.load_checkpoint(p1), p2)
    with open(p1, "rb") as f:
        raw1 = f.read()
    with open(p2, "rb") as f:
        raw2 = f.read()
    assert raw1 == raw2


def test_forward_outputs_preserved(tmp_path):
    m = small_model(seed=3, mixer_kinds=("lstm", "attention"))
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    back = ck.load_checkpoint(path)
    imgs = rng.standard_normal((10, 14, 14))
    out_a = forward(m, imgs).logits.data
    out_b = forward(back, imgs).logits.data
    assert np.array_equal(out_a, out_b)


def test_checkpoint_preserves_replaced_student(tmp_path):
    teacher = small_model(seed=4)
    student = replace_layers(teacher, [1], "ssm", seed=7)
    path = str(tmp_path / "s.ckpt")
    ck.save_checkpoint(student, path)
    back = ck.load_checkpoint(path)
    assert back.config.mixer_kinds == ("attention", "ssm")
    a, b = named_parameters(student), named_parameters(back)
    for k in a:
        assert np.array_equal(a[k].data, b[k].data), k


def _split(path):
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    return json.loads(raw[:nl]), raw[nl + 1:]


def _rewrite(path, header, data):
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n" + data)


def test_corrupt_headers_rejected(tmp_path):
    m = small_model(seed=5)
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    header, data = _split(path)

    with open(path, "wb") as f:
        f.write(b"no newline at all")
    with pytest.raises(FormatError, match="header"):
        ck.load_checkpoint(path)

    with open(path, "wb") as f:
        f.write(b"{not json\n" + data)
    with pytest.raises(FormatError, match="JSON"):
        ck.load_checkpoint(path)

    bad = dict(header, magic="other")
    _rewrite(path, bad, data)
    with pytest.raises(FormatError, match="magic"):
        ck.load_checkpoint(path)

    bad = dict(header, version=99)
    _rewrite(path, bad, data)
    with pytest.raises(FormatError, match="version"):
        ck.load_checkpoint(path)


def test_manifest_mismatch_rejected(tmp_path):
    m = small_model(seed=6)
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    header, data = _split(path)

    bad = json.loads(json.dumps(header))
    del bad["manifest"]["head_b"]
    _rewrite(path, bad, data)
    with pytest.raises(FormatError, match="missing"):
        ck.load_checkpoint(path)

    bad = json.loads(json.dumps(header))
    bad["manifest"]["bonus"] = {"shape": [1], "offset": 0}
    _rewrite(path, bad, data)
    with pytest.raises(FormatError, match="unexpected"):
        ck.load_checkpoint(path)


def test_overlap_gap_and_length_errors(tmp_path):
    m = small_model(seed=7)
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    header, data = _split(path)
    names = sorted(header["manifest"], key=lambda n: header["manifest"][n]["offset"])
    second = names[1]

    bad = json.loads(json.dumps(header))
    bad["manifest"][second]["offset"] -= 8
    _rewrite(path, bad, data)
    with pytest.raises(FormatError, match="overlap"):
        ck.load_checkpoint(path)

    bad = json.loads(json.dumps(header))
    for n in names[1:]:
        bad["manifest"][n]["offset"] += 8
    _rewrite(path, bad, data + b"\x00" * 8)
    with pytest.raises(FormatError, match="gap"):
        ck.load_checkpoint(path)

    _rewrite(path, header, data + b"\x00" * 8)
    with pytest.raises(FormatError, match="data section"):
        ck.load_checkpoint(path)


def test_shape_mismatch_rejected(tmp_path):
    m = small_model(seed=8)
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    header, data = _split(path)
    # transpose head_w's declared shape; sizes agree so only shape checks fire
    bad = json.loads(json.dumps(header))
    shp = bad["manifest"]["head_w"]["shape"]
    bad["manifest"]["head_w"]["shape"] = shp[::-1]
    _rewrite(path, bad, data)
    with pytest.raises(FormatError, match="shape"):
        ck.load_checkpoint(path)


def test_config_validation_goes_through_config_errors(tmp_path):
    m = small_model(seed=9)
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(m, path)
    header, data = _split(path)
    bad = json.loads(json.dumps(header))
    bad["config"]["surprise"] = True
    _rewrite(path, bad, data)
    from seqswap.errors import ConfigError
    with pytest.raises(ConfigError):
        ck.load_checkpoint(path)
