import hashlib
import json

import pytest
import torch

from scriptorium.checkpoint import (
    MAGIC, CheckpointError, load_checkpoint, load_recognizer, read_archive, read_header, save_checkpoint,
    save_recognizer,
)
from scriptorium.ctc import Alphabet
from scriptorium.nets import NetConfig, TextRecognizer, build_bundle

AB = Alphabet.from_texts(["Gallia est omnis"])


@pytest.fixture(scope="module")
def bundle():
    return build_bundle(AB, NetConfig.tiny(), seed=3)


def test_round_trip_bit_exact(bundle, tmp_path):
    path = save_checkpoint(bundle, tmp_path / "b.ckpt", {"epoch": 4})
    restored = load_checkpoint(path)
    assert restored.alphabet == AB
    assert restored.config == bundle.config
    for name, net in bundle.networks().items():
        a, b = net.state_dict(), restored.networks()[name].state_dict()
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert read_archive(path).payload["extra"] == {"epoch": 4}


def test_header_digest_matches_recomputed(bundle, tmp_path):
    path = save_checkpoint(bundle, tmp_path / "b.ckpt")
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    nl = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):nl])
    assert header["digest"] == hashlib.sha256(raw[nl + 1:]).hexdigest()
    assert header["payload_bytes"] == len(raw) - nl - 1


def _rewrite_header(path, **changes):
    header, data = read_header(path)
    header.update(changes)
    path.write_bytes(MAGIC + json.dumps(header).encode() + b"\n" + data)


def test_wrong_version_refused(bundle, tmp_path):
    path = save_checkpoint(bundle, tmp_path / "b.ckpt")
    _rewrite_header(path, version=99)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_corrupted_payload_refused(bundle, tmp_path):
    path = save_checkpoint(bundle, tmp_path / "b.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)


def test_truncated_and_foreign_files_refused(bundle, tmp_path):
    path = save_checkpoint(bundle, tmp_path / "b.ckpt")
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    other = tmp_path / "x.ckpt"
    other.write_bytes(b"PK\x03\x04 not ours")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(other)


def test_kind_checked(tmp_path):
    net = TextRecognizer(len(AB), 16, 32)
    path = save_recognizer(net, AB, tmp_path / "r.ckpt", {"cer": 0.5})
    with pytest.raises(CheckpointError, match="recognizer"):
        load_checkpoint(path)
    restored, ab, meta = load_recognizer(path)
    assert ab == AB and meta == {"cer": 0.5}
    assert restored.rnn.hidden_size == 32 and restored.features[0].out_channels == 16
    x = torch.rand(2, 1, 32, 128)
    net.eval(), restored.eval()
    assert torch.equal(net(x), restored(x))


def test_no_temp_files_left(bundle, tmp_path):
    save_checkpoint(bundle, tmp_path / "b.ckpt")
    save_checkpoint(bundle, tmp_path / "b.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["b.ckpt"]
