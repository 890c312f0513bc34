"""Frozen-embedding extraction and the columnar embedding store."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, build_bundle, load_checkpoint
from .data import MODALITIES, CorpusIndex, load_corpus
from .errors import InputError
from .model import ModelBundle


@dataclass
class EmbeddingRecord:
    vector: np.ndarray  # (embed_dim,) float32
    modality: str
    slide_id: str
    patch_id: str
    class_id: int
    bag_label: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.slide_id, self.patch_id)


def _as_bundle(source) -> ModelBundle:
    if isinstance(source, ModelBundle):
        return source
    if isinstance(source, Checkpoint):
        return build_bundle(source)
    return build_bundle(load_checkpoint(source))


def _as_index(corpus) -> CorpusIndex:
    return corpus if isinstance(corpus, CorpusIndex) else load_corpus(corpus)


def embed_corpus(source, corpus, head: str = "none", batch_size: int = 64,
                 modalities: tuple[str, ...] = MODALITIES) -> list[EmbeddingRecord]:
    """Embed every patch of every requested modality with the frozen student.

    `source` may be a ModelBundle, a Checkpoint, or a checkpoint path. Records
    come out in canonical order: modalities in `modalities` order, patches
    sorted by (slide_id, patch_id) within each.
    """
    bundle = _as_bundle(source)
    index = _as_index(corpus)
    bundle.eval()
    records: list[EmbeddingRecord] = []
    with torch.no_grad():
        for modality in modalities:
            if modality not in MODALITIES:
                raise InputError(f"unknown modality {modality!r}")
            for start in range(0, len(index.records), batch_size):
                chunk = index.records[start:start + batch_size]
                images = torch.stack([index.image(r, modality) for r in chunk])
                vectors = bundle.encode(images, head=head, network="student").numpy()
                for rec, vec in zip(chunk, vectors):
                    records.append(EmbeddingRecord(vec.astype(np.float32), modality,
                                                   rec.slide_id, rec.patch_id,
                                                   rec.class_id, rec.bag_label))
    return records


def save_embeddings(records: list[EmbeddingRecord], path_prefix) -> None:
    """Write `<prefix>.npz` (vector matrix) plus `<prefix>.manifest.jsonl`
    (one row of metadata per vector, same order)."""
    if not records:
        raise InputError("no embedding records to save")
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.stack([r.vector for r in records]).astype(np.float32)
    np.savez(str(prefix) + ".npz", vectors=matrix)
    with open(str(prefix) + ".manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps({"slide_id": rec.slide_id, "patch_id": rec.patch_id,
                                "modality": rec.modality, "class_id": rec.class_id,
                                "bag_label": rec.bag_label}, sort_keys=True) + "\n")


def load_embeddings(path_prefix) -> list[EmbeddingRecord]:
    prefix = Path(path_prefix)
    npz_path = Path(str(prefix) + ".npz")
    man_path = Path(str(prefix) + ".manifest.jsonl")
    if not npz_path.is_file() or not man_path.is_file():
        raise InputError(f"no embedding store at prefix {prefix}")
    matrix = np.load(npz_path)["vectors"]
    records: list[EmbeddingRecord] = []
    with open(man_path) as f:
        for i, line in enumerate(f):
            meta = json.loads(line)
            records.append(EmbeddingRecord(matrix[i], meta["modality"], meta["slide_id"],
                                           meta["patch_id"], int(meta["class_id"]),
                                           int(meta["bag_label"])))
    if len(records) != matrix.shape[0]:
        raise InputError(f"embedding store {prefix}: manifest rows ({len(records)}) "
                         f"!= vector rows ({matrix.shape[0]})")
    return records
