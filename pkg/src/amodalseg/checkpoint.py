"""Self-describing checkpoint files.

Layout::

    8 bytes   magic  b"AMSGCKPT"
    2 bytes   format version (little-endian uint16)
    4 bytes   header length n (little-endian uint32)
    n bytes   UTF-8 JSON header
    rest      torch.save() payload holding the state dict

The header can be read without torch, e.g. to check codec compatibility.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import torch

MAGIC = b"AMSGCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def state_hash(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path: str | Path, header: dict, state: dict[str, torch.Tensor]) -> None:
    header = {"format_version": FORMAT_VERSION, **header}
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    torch.save(state, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(buf.getvalue())
    tmp.replace(path)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<HI", fh.read(6))
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    return json.loads(fh.read(n).decode())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        state = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)
    return header, state
