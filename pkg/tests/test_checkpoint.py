"""Checkpoint archive round-trips, byte reproducibility, and version gating."""

import json
import zipfile

import pytest
import torch

from conftest import tiny_run_config
from pairalign.checkpoint import (FORMAT_VERSION, build_bundle, fresh_checkpoint,
                                  load_checkpoint, save_checkpoint)
from pairalign.config import RunConfig
from pairalign.errors import InputError, ShapeError


def test_fresh_checkpoint_stage_zero():
    ckpt = fresh_checkpoint(tiny_run_config())
    assert ckpt.stage_id == 0 and ckpt.step == 0
    assert ckpt.optimizer_state is None
    assert ckpt.rng_state is not None


def test_round_trip_preserves_state(tmp_path):
    config = tiny_run_config(seed=3)
    ckpt = fresh_checkpoint(config)
    path = tmp_path / "ck.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.stage_id == ckpt.stage_id
    assert loaded.step == ckpt.step
    assert loaded.config.to_dict() == config.to_dict()
    assert set(loaded.model_state) == set(ckpt.model_state)
    for key, tensor in ckpt.model_state.items():
        assert torch.equal(loaded.model_state[key], tensor), key
    assert torch.equal(loaded.rng_state, ckpt.rng_state)


def test_save_load_save_is_byte_identical(tmp_path):
    ckpt = fresh_checkpoint(tiny_run_config(seed=9))
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_optimizer_state_round_trip(tmp_path, small_corpus):
    from pairalign.curriculum import train_stage
    config = tiny_run_config(steps=2)
    ckpt = train_stage(config.curriculum.stages[0], small_corpus,
                       fresh_checkpoint(config), config)
    assert ckpt.optimizer_state is not None
    path = tmp_path / "s1.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    orig, back = ckpt.optimizer_state, loaded.optimizer_state
    assert back["param_groups"] == json.loads(json.dumps(orig["param_groups"]))
    assert set(back["state"]) == set(orig["state"])
    for pid, state in orig["state"].items():
        for name, value in state.items():
            value = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            assert torch.equal(back["state"][pid][name], value), (pid, name)


def test_build_bundle_restores_weights(tmp_path):
    ckpt = fresh_checkpoint(tiny_run_config(seed=4))
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    bundle = build_bundle(load_checkpoint(tmp_path / "c.ckpt"))
    for key, tensor in bundle.state_dict().items():
        assert torch.equal(tensor, ckpt.model_state[key]), key


def test_load_rejects_missing_file(tmp_path):
    with pytest.raises(InputError, match="no checkpoint"):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_load_rejects_non_checkpoint_zip(tmp_path):
    path = tmp_path / "junk.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("readme.txt", "hello")
    with pytest.raises(InputError, match="meta.json"):
        load_checkpoint(path)


def test_load_rejects_future_format_version(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(fresh_checkpoint(tiny_run_config()), path)
    with zipfile.ZipFile(path) as zf:
        entries = {name: zf.read(name) for name in zf.namelist()}
    meta = json.loads(entries["meta.json"])
    meta["format_version"] = FORMAT_VERSION + 1
    entries["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for name, payload in entries.items():
            zf.writestr(name, payload)
    with pytest.raises(InputError, match="format version"):
        load_checkpoint(path)


def test_build_bundle_rejects_mismatched_config():
    ckpt = fresh_checkpoint(tiny_run_config())
    ckpt.config = RunConfig()  # default encoder is wider than the tiny one
    with pytest.raises(ShapeError, match="incompatible"):
        build_bundle(ckpt)


def test_config_hash_tracks_content():
    a = tiny_run_config(seed=1)
    b = tiny_run_config(seed=1)
    c = tiny_run_config(seed=2)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
