import struct

import numpy as np
import pytest

from hippofusion.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from hippofusion.errors import CheckpointError, MissingFileError
from hippofusion.model import build_network, predict


@pytest.fixture
def net(tiny_config):
    net = build_network(tiny_config, init_seed=3)
    stats = net.running_flat()
    net.set_running_flat(np.linspace(0.5, 1.5, stats.size).astype(net.dtype))
    return net


def test_checkpoint_restores_parameters_and_running_stats(tmp_path, net):
    path = save_checkpoint(tmp_path / "model.hfck", net, iteration=42)
    restored = load_checkpoint(path)
    assert restored.iteration == 42
    assert restored.network.config == net.config
    np.testing.assert_array_equal(restored.network.params, net.params)
    np.testing.assert_array_equal(restored.network.running_flat(), net.running_flat())


def test_restored_network_predicts_identically(net):
    restored = decode_checkpoint(encode_checkpoint(net)).network
    rng = np.random.default_rng(0)
    batch = [rng.normal(size=(3, 1, 8, 8, 8)).astype(np.float32) for _ in range(2)]
    np.testing.assert_array_equal(predict(restored, batch), predict(net, batch))


def test_header_layout(net):
    raw = encode_checkpoint(net, iteration=7)
    assert raw[:4] == MAGIC
    version, reserved, config_len = struct.unpack("<HHI", raw[4:12])
    assert (version, reserved) == (1, 0)
    (n_params,) = struct.unpack("<Q", raw[12 + config_len:20 + config_len])
    assert n_params == net.params.size
    assert struct.unpack("<Q", raw[-8:]) == (7,)


def test_bad_magic(net):
    raw = b"XXXX" + encode_checkpoint(net)[4:]
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(raw)
    assert info.value.details["field"] == "magic"


def test_truncated_and_padded_checkpoints(net):
    raw = encode_checkpoint(net)
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:40])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw + b"\x00")


def test_unknown_version(net):
    raw = bytearray(encode_checkpoint(net))
    raw[4:6] = struct.pack("<H", 9)
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(bytes(raw))
    assert info.value.details["version"] == 9


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingFileError):
        load_checkpoint(tmp_path / "absent.hfck")
