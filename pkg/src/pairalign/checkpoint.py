"""Versioned checkpoint archives.

A checkpoint is a plain ZIP holding one `.npy` entry per named array
(`model/<state-dict key>`, optimizer moments, RNG state) plus a `meta.json`
record with the format version, stage/step counters, and the full config.
Entries are written uncompressed in sorted order with fixed timestamps, so
save → load → save reproduces the archive byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import InputError, ShapeError
from .model import ModelBundle, init_model

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model_state: dict[str, torch.Tensor]
    stage_id: int
    step: int
    config: RunConfig
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def fresh_checkpoint(config: RunConfig) -> Checkpoint:
    """Stage-0 state: freshly initialized model, seeded training RNG."""
    bundle = init_model(config.encoder, seed=config.curriculum.seed)
    gen = torch.Generator()
    gen.manual_seed(config.curriculum.seed)
    return Checkpoint(model_state=bundle.state_dict(), stage_id=0, step=0,
                      config=config, optimizer_state=None, rng_state=gen.get_state())


def build_bundle(ckpt: Checkpoint) -> ModelBundle:
    """Instantiate a ModelBundle carrying the checkpoint's weights."""
    bundle = init_model(ckpt.config.encoder, seed=ckpt.config.curriculum.seed)
    try:
        bundle.load_state_dict(ckpt.model_state, strict=True)
    except RuntimeError as exc:
        raise ShapeError(f"checkpoint incompatible with config: {exc}") from exc
    return bundle


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o600 << 16
    zf.writestr(info, payload)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for key, tensor in ckpt.model_state.items():
        arrays[f"model/{key}"] = tensor.detach().cpu().numpy()
    opt_groups = None
    if ckpt.optimizer_state is not None:
        opt_groups = ckpt.optimizer_state["param_groups"]
        for pid, state in ckpt.optimizer_state["state"].items():
            for name, value in state.items():
                tensor = value if isinstance(value, torch.Tensor) else torch.tensor(value)
                arrays[f"optimizer/{pid}/{name}"] = tensor.detach().cpu().numpy()
    if ckpt.rng_state is not None:
        arrays["rng/torch"] = ckpt.rng_state.numpy()
    meta = {
        "format_version": FORMAT_VERSION,
        "stage_id": ckpt.stage_id,
        "step": ckpt.step,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config_hash,
        "optimizer_param_groups": opt_groups,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "meta.json", meta_bytes)
        for name in sorted(arrays):
            _write_entry(zf, name + ".npy", _npy_bytes(arrays[name]))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no checkpoint at {path}")
    with zipfile.ZipFile(path) as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise InputError(f"{path} is not a checkpoint archive (no meta.json)") from exc
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise InputError(
                f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
        arrays: dict[str, np.ndarray] = {}
        for entry in zf.namelist():
            if entry.endswith(".npy"):
                arrays[entry[:-4]] = np.load(io.BytesIO(zf.read(entry)))
    model_state = {name[len("model/"):]: torch.from_numpy(arr.copy())
                   for name, arr in arrays.items() if name.startswith("model/")}
    optimizer_state = None
    if meta["optimizer_param_groups"] is not None:
        state: dict[int, dict] = {}
        for name, arr in arrays.items():
            if not name.startswith("optimizer/"):
                continue
            _, pid, field_name = name.split("/", 2)
            state.setdefault(int(pid), {})[field_name] = torch.from_numpy(arr.copy())
        optimizer_state = {"state": state, "param_groups": meta["optimizer_param_groups"]}
    rng_state = None
    if "rng/torch" in arrays:
        rng_state = torch.from_numpy(arrays["rng/torch"].copy())
    config = RunConfig.from_dict(meta["config"])
    return Checkpoint(model_state=model_state, stage_id=int(meta["stage_id"]),
                      step=int(meta["step"]), config=config,
                      optimizer_state=optimizer_state, rng_state=rng_state)
