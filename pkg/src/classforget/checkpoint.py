"""Self-describing binary checkpoint container.

Layout: magic ``CFCK`` + u16 version, u32 header length, JSON header
(architecture id, label count, creation seed, config hash, recorded training
augmentations, free-form extra), then each ``state_dict`` tensor in
declaration order as::

    u16 name length | name utf-8 | u8 ndim | ndim * u32 shape | f32 LE data

All tensors are encoded as little-endian float32. Integer buffers (e.g.
BatchNorm's batch counter) are cast through float32, which is exact for the
magnitudes that occur here; they are cast back to the model's dtype on load.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn as nn

from .errors import CheckpointFormatError
from .models import ARCHITECTURES

_MAGIC = b"CFCK"
_VERSION = 1


@dataclass
class CheckpointMeta:
    arch: str
    num_classes: int
    seed: int
    config_hash: str = ""
    train_augmentations: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["train_augmentations"] = list(self.train_augmentations)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CheckpointMeta":
        return cls(arch=d["arch"], num_classes=int(d["num_classes"]),
                   seed=int(d["seed"]), config_hash=d.get("config_hash", ""),
                   train_augmentations=tuple(d.get("train_augmentations", [])),
                   extra=d.get("extra", {}))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode_tensor(name: str, tensor: torch.Tensor) -> bytes:
    data = tensor.detach().to(torch.float32).contiguous()
    name_b = name.encode("utf-8")
    parts = [struct.pack("<H", len(name_b)), name_b,
             struct.pack("<B", data.ndim)]
    parts += [struct.pack("<I", int(s)) for s in data.shape]
    parts.append(data.numpy().astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(model: nn.Module, path: str | Path,
                    meta: CheckpointMeta) -> None:
    state = model.state_dict()
    header = dict(meta.to_json())
    header["tensors"] = len(state)
    header_b = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = [_MAGIC, struct.pack("<H", _VERSION),
            struct.pack("<I", len(header_b)), header_b]
    for name, tensor in state.items():
        blob.append(_encode_tensor(name, tensor))
    atomic_write_bytes(path, b"".join(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_meta(path: str | Path) -> CheckpointMeta:
    with open(path, "rb") as fh:
        data = fh.read(4 + 2 + 4)
        if data[:4] != _MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<H", data[4:6])
        if version != _VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", data[6:10])
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"bad checkpoint header: {exc}") from exc
    return CheckpointMeta.from_json(header)


def load_checkpoint(path: str | Path, factory=None,
                    expect_arch: str | None = None) -> tuple[nn.Module, CheckpointMeta]:
    """Rebuild a model from a checkpoint file.

    ``factory`` overrides the architecture registry (used for ad-hoc test
    models); otherwise the header's architecture id must be registered.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != _MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<H")
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        meta = CheckpointMeta.from_json(header)
        n_tensors = int(header["tensors"])
    except (KeyError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"bad checkpoint header: {exc}") from exc

    if expect_arch is not None and meta.arch != expect_arch:
        raise CheckpointFormatError(
            f"checkpoint architecture {meta.arch!r} does not match "
            f"expected {expect_arch!r}")
    if factory is None:
        if meta.arch not in ARCHITECTURES:
            raise CheckpointFormatError(f"unknown architecture id {meta.arch!r}")
        factory = ARCHITECTURES[meta.arch]
    model = factory(meta.num_classes)

    state = model.state_dict()
    loaded: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
        numel = 1
        for s in shape:
            numel *= s
        raw = r.take(numel * 4)
        tensor = torch.frombuffer(bytearray(raw), dtype=torch.float32).reshape(shape)
        if name not in state:
            raise CheckpointFormatError(f"unexpected tensor {name!r} in checkpoint")
        if tuple(state[name].shape) != shape:
            raise CheckpointFormatError(
                f"tensor {name!r} shape {shape} does not match model "
                f"{tuple(state[name].shape)}")
        loaded[name] = tensor.to(state[name].dtype)
    if set(loaded) != set(state):
        raise CheckpointFormatError("checkpoint is missing model tensors: "
                                    f"{sorted(set(state) - set(loaded))}")
    model.load_state_dict(loaded)
    model.eval()
    return model, meta
