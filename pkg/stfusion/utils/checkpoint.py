"""
Binary checkpoint codec.

Layout, all integers little-endian:

    b"MCD1" | u32 format version | u32 model code version | u64 iteration
    u32 len | ModelConfig yaml | u32 len | TrainConfig yaml (empty if absent)
    u32 count | count x blob                              parameters, in model order
    u8 has optimizer | [u64 step | u32 count | count x (blob m, blob v)]

    blob = u16 name len | name | u8 rank | rank x u32 extent | 2-byte dtype tag | values

Values are stored as "f4" (32-bit) or "f8" (64-bit) according to the array's dtype.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel

from stfusion.core.entities import CheckpointError, CheckpointVersionError, ModelConfig, TrainConfig
from stfusion.core.model import ChangeDetector
from stfusion.core.optim import AdamState
from stfusion.utils.config.server import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC, MODEL_CODE_VERSION
from stfusion.utils.hash import hash_sha256

DTYPE_TAGS = {np.dtype("<f4"): b"f4", np.dtype("<f8"): b"f8"}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


class Checkpoint(BaseModel):
    model_cfg: ModelConfig
    train_cfg: TrainConfig | None = None
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    iteration: int = 0
    format_version: int = CHECKPOINT_FORMAT_VERSION
    code_version: int = MODEL_CODE_VERSION

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def from_model(
        cls,
        model: ChangeDetector,
        train_cfg: TrainConfig | None = None,
        optimizer: AdamState | None = None,
        iteration: int = 0,
    ) -> "Checkpoint":
        params = {name: p.data.copy() for name, p in model.named_parameters()}
        if optimizer is not None:
            optimizer = AdamState(
                step=optimizer.step,
                m={k: v.copy() for k, v in optimizer.m.items()},
                v={k: v.copy() for k, v in optimizer.v.items()},
            )
        return cls(model_cfg=model.cfg, train_cfg=train_cfg, params=params, optimizer=optimizer, iteration=iteration)

    def restore_model(self) -> ChangeDetector:
        model = ChangeDetector.create(self.model_cfg)
        named = dict(model.named_parameters())
        if list(named) != list(self.params):
            missing = sorted(set(named) - set(self.params))
            extra = sorted(set(self.params) - set(named))
            raise CheckpointVersionError(
                f"Checkpoint parameters do not match the model code: missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, p in named.items():
            stored = self.params[name]
            if stored.shape != p.shape:
                raise CheckpointVersionError(f"{name}: checkpoint shape {stored.shape}, model expects {p.shape}")
            p.data = stored.copy()
        return model


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.position = 0

    def take(self, size: int) -> bytes:
        if self.position + size > len(self.raw):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.raw[self.position : self.position + size]
        self.position += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def text(self) -> str:
        return self.take(self.unpack("<I")).decode("utf-8")

    def blob(self) -> tuple[str, np.ndarray]:
        name = self.take(self.unpack("<H")).decode("utf-8")
        rank = self.unpack("<B")
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        tag = self.take(2)
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag!r}")
        dtype = TAG_DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype)
        return name, values.reshape(shape).astype(dtype.newbyteorder("="))


def _text(value: str) -> bytes:
    encoded = value.encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded


def _blob(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in DTYPE_TAGS:
        raise CheckpointError(f"{name}: cannot store dtype {array.dtype}")
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape)
    return header + DTYPE_TAGS[dtype] + np.ascontiguousarray(array, dtype=dtype).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IIQ", ckpt.format_version, ckpt.code_version, ckpt.iteration),
        _text(ckpt.model_cfg.to_yaml()),
        _text(ckpt.train_cfg.to_yaml() if ckpt.train_cfg is not None else ""),
        struct.pack("<I", len(ckpt.params)),
    ]
    parts.extend(_blob(name, array) for name, array in ckpt.params.items())
    if ckpt.optimizer is None:
        parts.append(struct.pack("<B", 0))
    else:
        state = ckpt.optimizer
        parts.append(struct.pack("<BQI", 1, state.step, len(state.m)))
        for name, m in state.m.items():
            parts.append(_blob(name, m))
            parts.append(_blob(name, state.v[name]))
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    reader = _Reader(raw)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    format_version, code_version, iteration = reader.unpack("<IIQ")
    if format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(f"Checkpoint format {format_version}, this build reads {CHECKPOINT_FORMAT_VERSION}")
    if code_version != MODEL_CODE_VERSION:
        raise CheckpointVersionError(f"Checkpoint from model code version {code_version}, current is {MODEL_CODE_VERSION}")
    model_cfg = ModelConfig.from_yaml(reader.text())
    train_text = reader.text()
    train_cfg = TrainConfig.from_yaml(train_text) if train_text else None
    params = {}
    for _ in range(reader.unpack("<I")):
        name, array = reader.blob()
        if name in params:
            raise CheckpointError(f"Duplicate parameter name {name}")
        params[name] = array
    optimizer = None
    if reader.unpack("<B"):
        step, count = reader.unpack("<QI")
        m, v = {}, {}
        for _ in range(count):
            name, first = reader.blob()
            _, second = reader.blob()
            m[name], v[name] = first, second
        optimizer = AdamState(step=step, m=m, v=v)
    if reader.position != len(raw):
        raise CheckpointError(f"{len(raw) - reader.position} trailing bytes after checkpoint")
    return Checkpoint(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        params=params,
        optimizer=optimizer,
        iteration=iteration,
        format_version=format_version,
        code_version=code_version,
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write the checkpoint and return its sha256."""
    path = Path(path)
    raw = encode_checkpoint(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    digest = hash_sha256(raw)
    logger.info(f"Saved checkpoint {path} at iteration {ckpt.iteration} (sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    ckpt = decode_checkpoint(path.read_bytes())
    logger.debug(f"Loaded checkpoint {path}: {len(ckpt.params)} parameters, iteration {ckpt.iteration}")
    return ckpt
