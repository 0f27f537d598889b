import json
import struct

import numpy as np
import pytest

from narasr.checkpoint import MAGIC, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from narasr.errors import FormatError
from narasr.vocab import Vocabulary
from conftest import make_tiny_model


def split(blob):
    (n,) = struct.unpack("<Q", blob[8:16])
    return json.loads(blob[16:16 + n]), blob[16 + n:]


def join(manifest, data):
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + data


def test_save_load_save_byte_identical(tmp_path, tiny_model):
    save_checkpoint(tiny_model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for name, t in tiny_model.tensors.items():
        assert np.array_equal(t.data, back[name].data)
    assert back.config == tiny_model.config and back.vocab == tiny_model.vocab


def test_layout(tiny_model):
    manifest, data = split(checkpoint_bytes(tiny_model))
    names = [e["name"] for e in manifest["tensors"]]
    assert names == sorted(names)
    assert len(data) == 8 * sum(t.data.size for t in tiny_model.parameters())
    first = manifest["tensors"][0]
    raw = np.frombuffer(data[: 8 * first["count"]], dtype="<f8").reshape(first["shape"])
    assert np.array_equal(raw, tiny_model[first["name"]].data)


def test_tampered_count(tiny_model):
    manifest, data = split(checkpoint_bytes(tiny_model))
    manifest["tensors"][2]["count"] += 1
    with pytest.raises(FormatError, match=r"tensors\[2\]\.count"):
        parse_checkpoint(join(manifest, data))


def test_truncated_data(tiny_model):
    blob = checkpoint_bytes(tiny_model)
    with pytest.raises(FormatError, match="offset"):
        parse_checkpoint(blob[:-8])


def test_trailing_bytes(tiny_model):
    with pytest.raises(FormatError, match="trailing"):
        parse_checkpoint(checkpoint_bytes(tiny_model) + b"\0" * 8)


def test_bad_magic(tiny_model):
    with pytest.raises(FormatError, match="magic"):
        parse_checkpoint(b"XXXXXXXX" + checkpoint_bytes(tiny_model)[8:])


def test_vocab_hash_mismatch_refused(tmp_path, tiny_model):
    save_checkpoint(tiny_model, tmp_path / "a.ckpt")
    other = Vocabulary(("<blank>", "<unk>", "x", "y", "z", "<eos>"))
    with pytest.raises(FormatError, match="vocab.sha256"):
        load_checkpoint(tmp_path / "a.ckpt", expected_vocab=other)
    assert load_checkpoint(tmp_path / "a.ckpt", expected_vocab=tiny_model.vocab) is not None


def test_tampered_vocab_detected(tiny_model):
    manifest, data = split(checkpoint_bytes(tiny_model))
    manifest["vocab"]["tokens"][2] = "q"
    with pytest.raises(FormatError, match="vocab.sha256"):
        parse_checkpoint(join(manifest, data))


def test_missing_field_named(tiny_model):
    manifest, data = split(checkpoint_bytes(tiny_model))
    del manifest["tensors"][0]["shape"]
    with pytest.raises(FormatError, match=r"tensors\[0\]\.shape"):
        parse_checkpoint(join(manifest, data))


def test_shape_disagrees_with_config(tiny_vocab):
    params = make_tiny_model(tiny_vocab)
    manifest, data = split(checkpoint_bytes(params))
    manifest["model"]["d_ff"] = 32
    with pytest.raises(FormatError, match="shape"):
        parse_checkpoint(join(manifest, data))
