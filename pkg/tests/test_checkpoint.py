import json
import struct

import numpy as np
import pytest

from alignkit.checkpoint import (
    MAGIC,
    CheckpointError,
    checkpoint_name,
    config_hash,
    load_checkpoint,
    load_generator,
    load_policy,
    save_generator,
    save_policy,
)
from alignkit.diffusion import GeneratorConfig, ToyGenerator
from alignkit.gradcheck import SMALL_POLICY, jitter
from alignkit.numkit import Rng
from alignkit.policy import ToyPolicy


def _policy():
    p = ToyPolicy.initial(SMALL_POLICY, Rng(0))
    return p.with_params(jitter(p.params, Rng(1), 0.5))


def _split(path):
    data = path.read_bytes()
    _, hlen = struct.unpack("<II", data[8:16])
    return data, hlen, json.loads(data[16:16 + hlen])


def _rewrite(path, header, payload):
    raw = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(MAGIC + struct.pack("<II", 1, len(raw)) + raw + payload)


class TestRoundTrip:
    def test_policy(self, tmp_path):
        p = _policy()
        path = save_policy(tmp_path / "p.ckpt", p, {"stage": "stage1"})
        q = load_policy(path)
        assert q.params.values == p.params.values
        assert q.config == p.config
        assert load_checkpoint(path).meta == {"stage": "stage1"}

    def test_generator(self, tmp_path):
        g = ToyGenerator.initial(GeneratorConfig(), Rng(2))
        g = g.with_params(jitter(g.params, Rng(3), 0.5))
        h = load_generator(save_generator(tmp_path / "g.ckpt", g))
        np.testing.assert_array_equal(h.params.array(), g.params.array())

    def test_payload_is_little_endian_float64(self, tmp_path):
        p = _policy()
        path = save_policy(tmp_path / "p.ckpt", p)
        data, hlen, header = _split(path)
        np.testing.assert_array_equal(np.frombuffer(data[16 + hlen:], "<f8"), p.params.array())
        assert header["segments"][0]["offset"] == 0

    def test_name_format(self):
        assert checkpoint_name("stage2", 840) == "stage2-840.ckpt"

    def test_hash_is_key_order_free(self):
        assert config_hash({"a": 1, "b": [2]}) == config_hash({"b": [2], "a": 1})


class TestRejection:
    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_corrupted_payload(self, tmp_path):
        path = save_policy(tmp_path / "p.ckpt", _policy())
        data = bytearray(path.read_bytes())
        data[-3] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="corrupted"):
            load_policy(path)

    def test_config_hash_mismatch(self, tmp_path):
        path = save_policy(tmp_path / "p.ckpt", _policy())
        data, hlen, header = _split(path)
        header["config"]["hidden"] += 1
        _rewrite(path, header, data[16 + hlen:])
        with pytest.raises(CheckpointError, match="hash"):
            load_policy(path)

    def test_segment_table_mismatch(self, tmp_path):
        path = save_policy(tmp_path / "p.ckpt", _policy())
        data, hlen, header = _split(path)
        header["segments"][0]["shape"] = [1]
        _rewrite(path, header, data[16 + hlen:])
        with pytest.raises(CheckpointError, match="segment"):
            load_policy(path)

    def test_wrong_kind(self, tmp_path):
        path = save_policy(tmp_path / "p.ckpt", _policy())
        with pytest.raises(CheckpointError, match="generator"):
            load_generator(path)

    def test_bad_version(self, tmp_path):
        path = save_policy(tmp_path / "p.ckpt", _policy())
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 9)
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_policy(path)
