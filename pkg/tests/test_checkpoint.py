import numpy as np
import pytest

from icarus.checkpoint import load_adapters, load_base, save_adapters, save_base
from icarus.errors import ConfigError, StateError
from icarus.model import AdapterSet, ModelConfig, init_base


def toy_config(**over):
    kw = dict(num_layers=2, hidden_dim=8, num_heads=2, num_kv_heads=1,
              head_dim=4, ffn_dim=16, vocab_size=32)
    kw.update(over)
    return ModelConfig(**kw)


def test_base_round_trip_is_bit_exact(tmp_path):
    base = init_base(toy_config(precision="f64"), seed=5)
    path = tmp_path / "base.ckpt"
    save_base(path, base)
    back = load_base(path)
    assert back.freeze_hash == base.freeze_hash
    assert back.config == base.config
    for (name, a), (_, b) in zip(base.named(), back.named()):
        assert a.data.tobytes() == b.data.tobytes(), name
    assert back.verify_frozen()


def test_adapter_round_trip_is_bit_exact(tmp_path):
    cfg = toy_config()
    adapters = AdapterSet.init(cfg, rank=3, alpha=6.0, seed=9, task="copy")
    rng = np.random.default_rng(0)
    for per in adapters.layers:
        for pair in per.values():
            pair.b.data = rng.standard_normal(pair.b.shape).astype(cfg.dtype)
    path = tmp_path / "adapters.ckpt"
    save_adapters(path, adapters)
    back = load_adapters(path)
    assert back.rank == 3 and back.alpha == 6.0 and back.task == "copy"
    assert back.targets == adapters.targets
    for (name, a), (_, b) in zip(adapters.named_params(), back.named_params()):
        assert a.data.tobytes() == b.data.tobytes(), name
        assert b.trainable


def test_save_is_deterministic(tmp_path):
    base = init_base(toy_config(), seed=1)
    save_base(tmp_path / "a", base)
    save_base(tmp_path / "b", base)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_rejects_foreign_bytes(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"PK\x03\x04 definitely a zip")
    with pytest.raises(ConfigError, match="not a checkpoint"):
        load_base(path)


def test_rejects_future_format_version(tmp_path):
    base = init_base(toy_config(), seed=1)
    save_base(tmp_path / "base.ckpt", base)
    blob = (tmp_path / "base.ckpt").read_bytes()
    bumped = blob.replace(b"icarus-ckpt 1\n", b"icarus-ckpt 9\n", 1)
    (tmp_path / "future.ckpt").write_bytes(bumped)
    with pytest.raises(ConfigError, match="unsupported checkpoint format"):
        load_base(tmp_path / "future.ckpt")


def test_rejects_kind_mismatch(tmp_path):
    cfg = toy_config()
    save_adapters(tmp_path / "a.ckpt", AdapterSet.init(cfg, seed=0))
    with pytest.raises(ConfigError, match="expected 'base'"):
        load_base(tmp_path / "a.ckpt")


def test_rejects_truncated_payload(tmp_path):
    base = init_base(toy_config(), seed=1)
    save_base(tmp_path / "base.ckpt", base)
    blob = (tmp_path / "base.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:-10])
    with pytest.raises(ConfigError, match="truncated"):
        load_base(tmp_path / "cut.ckpt")


def test_corrupted_weights_fail_the_freeze_witness(tmp_path):
    base = init_base(toy_config(), seed=1)
    save_base(tmp_path / "base.ckpt", base)
    blob = bytearray((tmp_path / "base.ckpt").read_bytes())
    # Flip one payload byte well past the JSON header.
    blob[-5] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(StateError, match="freeze hash"):
        load_base(tmp_path / "bad.ckpt")
