"""Corpus indexing, image loading, and seeded batch sampling.

The corpus layout is `<root>/<slide_id>/<patch_id>_{he,sim}.png` plus a
`manifest.jsonl` written by synthdata. Images are decoded once and cached as
float tensors; a 500-pair corpus is ~50 MB so everything fits in memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError

MODALITIES = ("he", "sim")


@dataclass
class PatchRecord:
    slide_id: str
    patch_id: str
    class_id: int
    bag_label: int
    he_path: Path
    sim_path: Path

    @property
    def key(self) -> tuple[str, str]:
        return (self.slide_id, self.patch_id)

    def path_for(self, modality: str) -> Path:
        if modality == "he":
            return self.he_path
        if modality == "sim":
            return self.sim_path
        raise InputError(f"unknown modality {modality!r}")


@dataclass
class CorpusIndex:
    root: Path
    records: list[PatchRecord]
    slides: dict[str, list[PatchRecord]]
    slide_labels: dict[str, int]
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, record: PatchRecord, modality: str) -> torch.Tensor:
        """(3, H, W) float32 in [0, 1], cached after first decode."""
        key = (record.slide_id, record.patch_id, modality)
        tensor = self._cache.get(key)
        if tensor is None:
            tensor = load_image(record.path_for(modality))
            self._cache[key] = tensor
        return tensor


def load_image(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_corpus(corpus_dir) -> CorpusIndex:
    """Parse manifest.jsonl and verify every referenced image exists."""
    root = Path(corpus_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise InputError(f"no manifest.jsonl under {root}")
    records: list[PatchRecord] = []
    missing: list[str] = []
    with open(manifest) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{manifest}:{line_no}: invalid record: {exc}") from exc
            rec = PatchRecord(
                slide_id=str(raw["slide_id"]),
                patch_id=str(raw["patch_id"]),
                class_id=int(raw["class_id"]),
                bag_label=int(raw["bag_label"]),
                he_path=root / raw["he_path"],
                sim_path=root / raw["sim_path"],
            )
            for modality in MODALITIES:
                if not rec.path_for(modality).is_file():
                    missing.append(f"{rec.slide_id}/{rec.patch_id}_{modality}")
            records.append(rec)
    if missing:
        raise InputError(f"{len(missing)} missing image files: {', '.join(missing[:10])}"
                         + ("..." if len(missing) > 10 else ""))
    if not records:
        raise InputError(f"empty manifest {manifest}")
    records.sort(key=lambda r: r.key)
    slides: dict[str, list[PatchRecord]] = {}
    labels: dict[str, int] = {}
    for rec in records:
        slides.setdefault(rec.slide_id, []).append(rec)
        labels[rec.slide_id] = rec.bag_label
    return CorpusIndex(root, records, slides, labels)


def draw_unpaired(index: CorpusIndex, batch_size: int, rng: torch.Generator,
                  modalities: tuple[str, ...] = MODALITIES
                  ) -> tuple[torch.Tensor, torch.Tensor, list[PatchRecord]]:
    """Sample batch_size (image, modality) draws with replacement.

    Returns (images (B,3,H,W), domain labels (B,), records); labels follow the
    he=0 / sim=1 convention regardless of the allowed-modality restriction.
    """
    if not modalities or any(m not in MODALITIES for m in modalities):
        raise InputError(f"modalities must be a subset of {MODALITIES}, got {modalities}")
    rec_idx = torch.randint(len(index.records), (batch_size,), generator=rng)
    mod_idx = torch.randint(len(modalities), (batch_size,), generator=rng)
    images, labels, records = [], [], []
    for ri, mi in zip(rec_idx.tolist(), mod_idx.tolist()):
        rec = index.records[ri]
        modality = modalities[mi]
        images.append(index.image(rec, modality))
        labels.append(MODALITIES.index(modality))
        records.append(rec)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long), records


def draw_paired(index: CorpusIndex, batch_size: int, rng: torch.Generator
                ) -> tuple[torch.Tensor, torch.Tensor, list[PatchRecord]]:
    """Sample batch_size registered pairs; row i of both stacks is one patch."""
    rec_idx = torch.randint(len(index.records), (batch_size,), generator=rng)
    he, sim, records = [], [], []
    for ri in rec_idx.tolist():
        rec = index.records[ri]
        he.append(index.image(rec, "he"))
        sim.append(index.image(rec, "sim"))
        records.append(rec)
    return torch.stack(he), torch.stack(sim), records


def split_slides(slide_labels: dict[str, int],
                 fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
                 seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Stratified train/val/test split by slide so each part sees both bag
    labels whenever the corpus allows it."""
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise InputError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: tuple[list[str], list[str], list[str]] = ([], [], [])
    for label in (0, 1):
        ids = sorted(s for s, lab in slide_labels.items() if lab == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        n_test = max(1, round(fractions[2] * n)) if n >= 3 else (1 if n >= 2 else 0)
        n_val = max(1, round(fractions[1] * n)) if n >= 3 else 0
        n_train = n - n_val - n_test
        if n_train < 1 and n >= 1:
            n_train, n_val, n_test = max(1, n - 2), min(1, max(0, n - 2)), min(1, n - 1)
        parts[0].extend(ids[:n_train])
        parts[1].extend(ids[n_train:n_train + n_val])
        parts[2].extend(ids[n_train + n_val:])
    return tuple(sorted(p) for p in parts)
