import struct

import numpy as np
import pytest

from stfusion.core.entities import CheckpointError, CheckpointVersionError, TrainConfig
from stfusion.core.model import ChangeDetector
from stfusion.core.optim import AdamState
from stfusion.core.tensor import Tensor, default_dtype
from stfusion.handlers.on_gradcheck import micro_config
from stfusion.utils.checkpoint import (
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)


def make_checkpoint(dtype=np.float64) -> Checkpoint:
    with default_dtype(dtype):
        model = ChangeDetector.create(micro_config(), seed=4)
    rng = np.random.default_rng(0)
    names = [name for name, _ in model.named_parameters()][:3]
    state = AdamState(
        step=7,
        m={n: rng.normal(size=dict(model.named_parameters())[n].shape).astype(dtype) for n in names},
        v={n: rng.random(size=dict(model.named_parameters())[n].shape).astype(dtype) for n in names},
    )
    return Checkpoint.from_model(model, TrainConfig(precision="float64", lr=3e-4), state, iteration=42)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_byte_identical(dtype):
    raw = encode_checkpoint(make_checkpoint(dtype))
    back = decode_checkpoint(raw)
    assert encode_checkpoint(back) == raw
    assert back.iteration == 42
    assert back.optimizer.step == 7
    assert back.train_cfg.lr == 3e-4
    assert all(a.dtype == dtype for a in back.params.values())


def test_values_are_tagged_by_precision():
    assert b"f4" in encode_checkpoint(make_checkpoint(np.float32))
    raw = encode_checkpoint(make_checkpoint(np.float64))
    assert raw[:4] == b"MCD1"
    assert struct.unpack("<IIQ", raw[4:20]) == (1, 1, 42)


def test_restored_model_computes_the_same_logits(tmp_path):
    ckpt = make_checkpoint()
    digest = save_checkpoint(tmp_path / "model.ckpt", ckpt)
    assert len(digest) == 64
    with default_dtype(np.float64):
        restored = load_checkpoint(tmp_path / "model.ckpt").restore_model()
        original = ckpt.restore_model()
        x = Tensor(np.random.default_rng(1).uniform(size=(1, 3, 32, 32)))
        np.testing.assert_array_equal(restored(x, x).data, original(x, x).data)


def test_version_mismatch_is_rejected():
    raw = bytearray(encode_checkpoint(make_checkpoint()))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(raw))
    raw = bytearray(encode_checkpoint(make_checkpoint()))
    raw[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(raw))


def test_corrupt_files_are_rejected(tmp_path):
    raw = encode_checkpoint(make_checkpoint())
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_parameters_must_match_the_model_code():
    ckpt = make_checkpoint()
    renamed = dict(ckpt.params)
    renamed["encoder.stem.kernel"] = renamed.pop("encoder.stem.weight")
    with pytest.raises(CheckpointVersionError):
        ckpt.copy(update={"params": renamed}).restore_model()
    reshaped = dict(ckpt.params)
    reshaped["decoder.head.bias"] = np.zeros(3)
    with pytest.raises(CheckpointVersionError):
        ckpt.copy(update={"params": reshaped}).restore_model()
