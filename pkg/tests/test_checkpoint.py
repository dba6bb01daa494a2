import struct

import numpy as np
import pytest
import torch

from helpers import MICRO_FIELD
from tnrf.checkpoint import MAGIC, VERSION, load_checkpoint, read_blocks, save_checkpoint, write_blocks
from tnrf.dataset import generate_synthetic_family, toy_chair_spec
from tnrf.exceptions import ChecksumError, LoadError, VersionError
from tnrf.trainer import TrainConfig, init_training, train


@pytest.fixture(scope="module")
def family():
    objects, _ = generate_synthetic_family(toy_chair_spec(instance_count=2, views_per_instance=2, image_size=8))
    return objects


def config(precision=64):
    return TrainConfig(samples_per_ray=8, batch_objects=1, rays_per_view=16, precision=precision, seed=5,
                       **MICRO_FIELD)


def strip(history):
    return [{k: v for k, v in m.items() if k != "seconds"} for m in history]


def assert_states_equal(a, b):
    assert a.step == b.step and a.config == b.config
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.dtype == q.dtype and torch.equal(p, q), n
    assert torch.equal(a.latent_shape, b.latent_shape)
    assert torch.equal(a.latent_appearance, b.latent_appearance)
    assert torch.equal(a.latent_steps, b.latent_steps)
    for key in a.moments:
        assert torch.equal(a.moments[key].m, b.moments[key].m)
        assert torch.equal(a.moments[key].v, b.moments[key].v)
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


@pytest.mark.parametrize("precision", [32, 64])
def test_round_trip(tmp_path, family, precision):
    state = init_training(config(precision), family)
    train(state, family, 2)
    save_checkpoint(state, tmp_path / "ckpt")
    assert_states_equal(state, load_checkpoint(tmp_path / "ckpt"))


def test_resume_matches_uninterrupted(tmp_path, family):
    full = init_training(config(), family)
    train(full, family, 5)
    save_checkpoint(full, tmp_path / "ckpt")
    tail = strip(train(full, family, 10))
    resumed = load_checkpoint(tmp_path / "ckpt")
    assert strip(train(resumed, family, 10)) == tail
    assert_states_equal(full, resumed)


def test_header_layout(tmp_path, family):
    save_checkpoint(init_training(config(), family), tmp_path / "ckpt")
    raw = (tmp_path / "ckpt").read_bytes()
    magic, version, _, length = struct.unpack("<4sIIQ", raw[:20])
    assert magic == MAGIC == b"TNRF" and version == VERSION
    assert length == len(raw) - 20


def test_truncated_file(tmp_path, family):
    save_checkpoint(init_training(config(), family), tmp_path / "ckpt")
    raw = (tmp_path / "ckpt").read_bytes()
    (tmp_path / "cut").write_bytes(raw[: len(raw) - 7])
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "cut")


def test_corrupted_byte(tmp_path, family):
    save_checkpoint(init_training(config(), family), tmp_path / "ckpt")
    raw = bytearray((tmp_path / "ckpt").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "bad").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "bad")


def test_version_mismatch(tmp_path, family):
    save_checkpoint(init_training(config(), family), tmp_path / "ckpt")
    raw = bytearray((tmp_path / "ckpt").read_bytes())
    raw[4:8] = struct.pack("<I", VERSION + 1)
    (tmp_path / "v2").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v2")


def test_bad_magic_and_missing(tmp_path):
    (tmp_path / "junk").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises((LoadError, ChecksumError)):
        load_checkpoint(tmp_path / "junk")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "absent")


def test_blocks_round_trip(tmp_path):
    tensors = {"a": torch.arange(5, dtype=torch.float64) / 3, "b": torch.ones(2, 3, dtype=torch.float32)}
    write_blocks(tmp_path / "x", {"k": [1, 2]}, tensors)
    meta, blocks = read_blocks(tmp_path / "x")
    assert meta == {"k": [1, 2]}
    assert blocks["a"].dtype == np.float64 and np.array_equal(blocks["a"], tensors["a"].numpy())
    assert blocks["b"].dtype == np.float32 and blocks["b"].size == 6
