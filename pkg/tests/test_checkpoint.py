from pathlib import Path

import numpy as np
import pytest

from vpnlab.errors import ConfigurationError
from vpnlab.netcore.adam import AdamState, adam_step
from vpnlab.netcore.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    pack_training_state,
    save_checkpoint,
    unpack_training_state,
)
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import backward, square, sum_all


def trained_store(seed: int) -> tuple[ParamStore, AdamState]:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.dtype(np.float32))
    store.add("layer.w", (3, 2), fan_in=3, rng=rng)
    store.add("layer.b", (2,))
    opt = AdamState(lr=0.01)
    backward(sum_all(square(store["layer.w"])))
    adam_step(store, opt)
    return store, opt


def test_reencoding_is_byte_identical() -> None:
    store, opt = trained_store(0)
    blob = encode_checkpoint({"kind": "vpn", "step": 3}, pack_training_state(store, opt))
    header, records = decode_checkpoint(blob)
    assert header == {"kind": "vpn", "step": 3}
    assert encode_checkpoint(header, records) == blob


def test_mixed_precision_records_survive(tmp_path: Path) -> None:
    records = {
        "single": np.arange(6, dtype=np.float32).reshape(2, 3),
        "double": np.linspace(0.0, 1.0, 4),
        "scalar": np.array(2.5),
    }
    save_checkpoint(tmp_path / "state.ckpt", {}, records)
    _, loaded = load_checkpoint(tmp_path / "state.ckpt")
    assert list(loaded) == ["single", "double", "scalar"]
    assert loaded["single"].dtype == np.float32
    assert loaded["double"].dtype == np.float64
    for name, values in records.items():
        np.testing.assert_array_equal(loaded[name], values)


def test_training_state_restores_params_target_and_moments() -> None:
    store, opt = trained_store(1)
    target, _ = trained_store(2)
    records = pack_training_state(store, opt, target)

    fresh, _ = trained_store(5)
    fresh_target, _ = trained_store(6)
    fresh_opt = AdamState(lr=0.01)
    unpack_training_state(records, fresh, fresh_opt, fresh_target)
    for name in store:
        np.testing.assert_array_equal(fresh[name].data, store[name].data)
        np.testing.assert_array_equal(fresh_target[name].data, target[name].data)
        np.testing.assert_array_equal(fresh_opt.m[name], opt.m[name])
        np.testing.assert_array_equal(fresh_opt.v[name], opt.v[name])


def test_missing_target_falls_back_to_params() -> None:
    store, opt = trained_store(1)
    fresh, _ = trained_store(4)
    target, _ = trained_store(3)
    unpack_training_state(pack_training_state(store, opt), fresh, target=target)
    np.testing.assert_array_equal(target["layer.w"].data, store["layer.w"].data)


def test_rejects_foreign_and_damaged_blobs(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError):
        decode_checkpoint(b"not a checkpoint at all")
    blob = encode_checkpoint({}, {"w": np.zeros(4)})
    with pytest.raises(ConfigurationError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(ConfigurationError):
        decode_checkpoint(blob + b"\x00")
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_integer_records_are_refused() -> None:
    with pytest.raises(ConfigurationError):
        encode_checkpoint({}, {"counts": np.arange(3)})
