"""Binary checkpoint files.

Layout (little-endian)::

    8 bytes   magic  b"PGNNCKPT"
    u32       format version (1)
    u32       length L of the config block
    L bytes   config block, UTF-8 JSON with sorted keys
    u32       parameter count P
    P times:  u64 rows, u64 cols, rows*cols float64 values in row-major order

Parameters appear in ``GnnModel.named_parameters()`` order; head biases are
stored as 1 x d rows.
"""
from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .model import GnnModel, TrainConfig

MAGIC = b"PGNNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_block(model: GnnModel, config: TrainConfig, extra: dict | None) -> bytes:
    block = {"train_config": config.to_dict(), "d_feat": model.d_feat,
             "widths": list(model.widths), "conv_type": model.conv_type, "mode": model.mode,
             "activation": model.activation}
    if extra:
        block["extra"] = extra
    return json.dumps(block, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(fh: BinaryIO, model: GnnModel, config: TrainConfig, extra: dict | None = None) -> None:
    block = _config_block(model, config, extra)
    params = model.named_parameters()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(block)))
    fh.write(block)
    fh.write(struct.pack("<I", len(params)))
    for _, value, _ in params:
        m = np.ascontiguousarray(value.reshape(1, -1) if value.ndim == 1 else value, dtype="<f8")
        fh.write(struct.pack("<QQ", *m.shape))
        fh.write(m.tobytes(order="C"))


def save_checkpoint(path, model: GnnModel, config: TrainConfig, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, model, config, extra)


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_checkpoint(fh: BinaryIO) -> tuple[GnnModel, TrainConfig, dict]:
    if _read(fh, 8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, block_len = struct.unpack("<II", _read(fh, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        block = json.loads(_read(fh, block_len).decode("utf-8"))
        config = TrainConfig.from_dict(block["train_config"])
        d_feat = int(block["d_feat"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    model = GnnModel.init(d_feat, config, np.random.default_rng(0))
    params = model.named_parameters()
    (count,) = struct.unpack("<I", _read(fh, 4))
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} parameters, config implies {len(params)}")
    for name, value, _ in params:
        rows, cols = struct.unpack("<QQ", _read(fh, 16))
        expected = (1, value.size) if value.ndim == 1 else value.shape
        if (rows, cols) != tuple(expected):
            raise CheckpointError(f"{name}: stored shape {rows}x{cols}, expected {expected[0]}x{expected[1]}")
        data = np.frombuffer(_read(fh, 8 * rows * cols), dtype="<f8")
        value[...] = data.reshape(value.shape)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last parameter")
    return model, config, block.get("extra", {})


def load_checkpoint(path) -> tuple[GnnModel, TrainConfig, dict]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
