import json
import struct

import numpy as np
import pytest

from netcvr.checkpoint import (
    MAGIC, CheckpointError, CheckpointVersionError, load_checkpoint, load_checkpoint_bundle, save_checkpoint,
    sidecar_path,
)
from netcvr.delay_model import DelayTailModel
from netcvr.model import CascadeModel, ModelConfig
from netcvr.nn import AdamConfig

CARDS = (4,) * 22


def trained(variant="hybrid", dtype="float32"):
    m = CascadeModel(ModelConfig(CARDS, d_emb=2, d_shared=4, hidden=(6, 5), variant=variant, dtype=dtype),
                     AdamConfig(lr=0.01))
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = rng.integers(0, 4, (32, 22))
        preds, cache = m.forward(x, train=True)
        m.backward_and_step(cache, preds.p_v - 1, preds.p_r)
    return m


@pytest.mark.parametrize("variant", ["hybrid", "shared", "separate"])
@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_roundtrip_is_bit_identical(tmp_path, variant, dtype):
    m = trained(variant, dtype)
    path = save_checkpoint(m, tmp_path / "m.ckpt", {"note": "x"})
    back = load_checkpoint(path)
    assert back.variant == variant and back.optimizer.t == m.optimizer.t
    assert back.optimizer.cfg == m.optimizer.cfg
    for store in ("params", "buffers"):
        a, b = getattr(m, store), getattr(back, store)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()
    for k in m.optimizer.m:
        assert m.optimizer.m[k].tobytes() == back.optimizer.m[k].tobytes()
        assert m.optimizer.v[k].tobytes() == back.optimizer.v[k].tobytes()
    assert back.fingerprint() == m.fingerprint()
    side = json.loads(sidecar_path(path).read_text())
    assert side["metadata"] == {"note": "x"} and side["fingerprint"] == m.fingerprint()


def test_training_continues_identically_after_reload(tmp_path):
    m = trained()
    back = load_checkpoint(save_checkpoint(m, tmp_path / "m.ckpt"))
    x = np.random.default_rng(9).integers(0, 4, (32, 22))
    for model in (m, back):
        preds, cache = model.forward(x, train=True)
        model.backward_and_step(cache, preds.p_v - 1, preds.p_r)
    assert m.fingerprint() == back.fingerprint()


def test_header_layout(tmp_path):
    path = save_checkpoint(trained(), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    version, head_len = struct.unpack("<II", raw[8:16])
    header = json.loads(raw[16:16 + head_len])
    assert version == 1 and header["variant"] == "hybrid" and header["dtype"] == "<f4"


def test_version_mismatch(tmp_path):
    path = save_checkpoint(trained(), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("mutate", [
    lambda raw: b"NOTACKPT" + raw[8:],
    lambda raw: raw[:10],
    lambda raw: raw[:-3],
    lambda raw: raw + b"\0",
    lambda raw: raw[:16] + b"\xff" + raw[17:],
])
def test_corrupt_files_rejected(tmp_path, mutate):
    path = save_checkpoint(trained(), tmp_path / "m.ckpt")
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_tail_models_ride_along(tmp_path):
    rng = np.random.default_rng(1)
    vocab = int(sum(c + 1 for c in CARDS))
    fitted = DelayTailModel(0.01, CARDS, {"kind": "conversion", "n_positives": 9}, None,
                            rng.normal(size=(vocab, 3)), rng.normal(size=66), 0.25)
    constant = DelayTailModel(0.01, CARDS, {"kind": "refund", "fallback": "no_positives"}, constant=0.0)
    path = save_checkpoint(trained(), tmp_path / "m.ckpt", tails={"tail_v": fitted, "tail_r": constant})
    model, tails = load_checkpoint_bundle(path)
    x = rng.integers(0, 4, (20, 22))
    np.testing.assert_array_equal(tails["tail_v"].predict(x), fitted.predict(x))
    assert tails["tail_v"].fingerprint() == fitted.fingerprint()
    assert tails["tail_r"].constant == 0.0 and tails["tail_r"].metadata["fallback"] == "no_positives"
    assert load_checkpoint_bundle(save_checkpoint(model, tmp_path / "n.ckpt"))[1] == {}
