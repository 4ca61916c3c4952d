"""Self-verifying checkpoint archives.

Layout: one magic line, one JSON header line, then a ``torch.save`` payload.
The header records a format version and the sha256 of the payload bytes, both
checked on load. Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .ctc import Alphabet
from .nets import NETWORK_NAMES, ModelBundle, NetConfig, TextRecognizer, build_bundle

MAGIC = b"SCRIPTORIUM-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Archive:
    kind: str
    header: dict
    payload: dict = field(repr=False)


def payload_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_archive(path, kind: str, payload: dict, meta: Optional[dict] = None) -> Path:
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    header = {"version": FORMAT_VERSION, "kind": kind, "digest": payload_digest(data),
              "payload_bytes": len(data), **(meta or {})}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint archive")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC):nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    return header, raw[nl + 1:]


def read_archive(path, kind: Optional[str] = None) -> Archive:
    header, data = read_header(path)
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')!r}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
    if payload_digest(data) != header.get("digest"):
        raise CheckpointError(f"{path}: payload digest mismatch (corrupted or truncated)")
    payload = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
    return Archive(header["kind"], header, payload)


def save_checkpoint(bundle: ModelBundle, path, extra: Optional[dict] = None) -> Path:
    """Write all six networks, the alphabet and the net config, plus any
    trainer state in ``extra`` (optimizer states, epoch counters)."""
    payload = {"nets": bundle.state(), "alphabet": list(bundle.alphabet.symbols),
               "net_config": asdict(bundle.config), "extra": extra or {}}
    return write_archive(path, "bundle", payload, {"alphabet_size": len(bundle.alphabet)})


def load_checkpoint(path) -> ModelBundle:
    return restore_bundle(read_archive(path, "bundle"))


def restore_bundle(archive: Archive) -> ModelBundle:
    p = archive.payload
    bundle = build_bundle(Alphabet(p["alphabet"]), NetConfig(**p["net_config"]), seed=0)
    missing = [n for n in NETWORK_NAMES if n not in p["nets"]]
    if missing:
        raise CheckpointError(f"checkpoint lacks networks {missing}")
    bundle.load_state(p["nets"])
    return bundle


def save_recognizer(net: TextRecognizer, alphabet: Alphabet, path, meta: Optional[dict] = None) -> Path:
    # the first conv has exactly ``width`` channels
    payload = {"state": net.state_dict(), "alphabet": list(alphabet.symbols),
               "width": net.features[0].out_channels, "hidden": net.rnn.hidden_size, "meta": meta or {}}
    return write_archive(path, "recognizer", payload)


def load_recognizer(path) -> tuple[TextRecognizer, Alphabet, dict]:
    p = read_archive(path, "recognizer").payload
    alphabet = Alphabet(p["alphabet"])
    net = TextRecognizer(len(alphabet), p["width"], p["hidden"])
    net.load_state_dict(p["state"])
    return net, alphabet, p["meta"]


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
