"""Synthetic paired-modality corpus with shared morphology latents.

Each patch is defined by a MorphologyLatent (nuclei geometry + a low-frequency
stroma field) rendered twice: once as brightfield histology (purple nuclei on
pink stroma) and once as fluorescence (bright nuclei on a dark background with
gain/vignette/speckle nuisances, single channel replicated to 3). Both renders
share the exact same nuclei mask, which is the registration ground truth.

Slides bundle patches of three morphology classes; a slide is "positive" when
at least 20% of its patches are dense_nuclei.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

CLASS_NAMES = ("sparse_stroma", "glandular", "dense_nuclei")
SPARSE, GLANDULAR, DENSE = 0, 1, 2
# inclusive nuclei-count ranges; disjoint by construction
CLASS_COUNT_RANGES = {SPARSE: (3, 12), GLANDULAR: (15, 30), DENSE: (40, 80)}
DENSE_BAG_FRACTION = 0.2  # bag_label = 1 iff >= this fraction of dense patches

HE_STROMA = np.array([0.93, 0.80, 0.87])
HE_NUCLEUS = np.array([0.36, 0.21, 0.54])
SIM_BACKGROUND = 0.045


@dataclass
class Nucleus:
    cy: float
    cx: float
    radius: float
    eccentricity: float  # minor/major axis ratio in (0, 1]
    angle: float


@dataclass
class MorphologyLatent:
    nuclei: list[Nucleus]
    stroma_field: tuple[float, float, float, float, float]  # (freq_y, freq_x, phase_y, phase_x, amplitude)
    class_id: int
    size: int = 64


@dataclass
class SlideManifest:
    slide_id: str
    bag_label: int
    patches: list[dict]  # per-patch manifest records


def sample_latent(class_id: int, rng: np.random.Generator, size: int = 64) -> MorphologyLatent:
    """Draw nuclei geometry for one patch of the given morphology class."""
    if class_id not in CLASS_COUNT_RANGES:
        raise InputError(f"unknown class_id {class_id}")
    lo, hi = CLASS_COUNT_RANGES[class_id]
    count = int(rng.integers(lo, hi + 1))
    nuclei: list[Nucleus] = []
    if class_id == GLANDULAR:
        n_rings = 1 + int(count > 22)
        ring_cy = rng.uniform(0.28 * size, 0.72 * size, n_rings)
        ring_cx = rng.uniform(0.28 * size, 0.72 * size, n_rings)
        ring_r = rng.uniform(0.14 * size, 0.24 * size, n_rings)
        for i in range(count):
            k = i % n_rings
            theta = rng.uniform(0.0, 2.0 * np.pi)
            rr = ring_r[k] + rng.normal(0.0, 0.02 * size)
            cy = ring_cy[k] + rr * np.sin(theta)
            cx = ring_cx[k] + rr * np.cos(theta)
            nuclei.append(_make_nucleus(cy, cx, rng, size))
    else:
        for _ in range(count):
            cy = rng.uniform(0.0, size)
            cx = rng.uniform(0.0, size)
            nuclei.append(_make_nucleus(cy, cx, rng, size))
    stroma = (float(rng.uniform(0.8, 2.2)), float(rng.uniform(0.8, 2.2)),
              float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)),
              float(rng.uniform(0.02, 0.05)))
    return MorphologyLatent(nuclei, stroma, class_id, size)


def _make_nucleus(cy: float, cx: float, rng: np.random.Generator, size: int) -> Nucleus:
    # radius floor keeps the boundary-to-area ratio small enough that the
    # cross-modality mask agreement holds even on 3-nucleus sparse patches
    radius = float(rng.uniform(3.0, 4.2))
    ecc = float(rng.uniform(0.72, 1.0))
    angle = float(rng.uniform(0.0, np.pi))
    cy = float(np.clip(cy, radius, size - radius))
    cx = float(np.clip(cx, radius, size - radius))
    return Nucleus(cy, cx, radius, ecc, angle)


def nuclei_mask(latent: MorphologyLatent) -> np.ndarray:
    """Binary union of nucleus interiors; identical for both modalities."""
    size = latent.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for nuc in latent.nuclei:
        mask |= _inside(nuc, yy, xx)
    return mask


def _inside(nuc: Nucleus, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy, dx = yy - nuc.cy, xx - nuc.cx
    cos_t, sin_t = np.cos(nuc.angle), np.sin(nuc.angle)
    major = dx * cos_t + dy * sin_t
    minor = -dx * sin_t + dy * cos_t
    b = nuc.radius * nuc.eccentricity
    return (major / nuc.radius) ** 2 + (minor / b) ** 2 <= 1.0


def _stroma_field(latent: MorphologyLatent) -> np.ndarray:
    fy, fx, py, px, amp = latent.stroma_field
    size = latent.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    return amp * np.sin(2 * np.pi * (fy * yy + py)) * np.sin(2 * np.pi * (fx * xx + px))


def render(latent: MorphologyLatent, modality: str, rng: np.random.Generator) -> np.ndarray:
    """Render a latent as an (H, W, 3) float image in [0, 1]."""
    if modality == "he":
        return _render_he(latent, rng)
    if modality == "sim":
        return _render_sim(latent, rng)
    raise InputError(f"unknown modality {modality!r}")


def _render_he(latent: MorphologyLatent, rng: np.random.Generator) -> np.ndarray:
    size = latent.size
    mask = nuclei_mask(latent)[..., None]
    field = _stroma_field(latent)[..., None]
    bg = HE_STROMA[None, None, :] + field + rng.normal(0.0, 0.015, (size, size, 3))
    nuc_color = HE_NUCLEUS + rng.uniform(-0.04, 0.04, 3)
    fg = nuc_color[None, None, :] + rng.normal(0.0, 0.015, (size, size, 3))
    img = np.where(mask, fg, bg)
    # per-patch stain density and exposure: wide within-modality style spread
    # keeps first-order intensity from being a useful representation feature,
    # so structure (not style) has to carry the self-distillation signal
    stain = rng.uniform(0.55, 1.25)
    brightness = rng.uniform(0.70, 1.05)
    img = (1.0 - stain * (1.0 - img)) * brightness
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_sim(latent: MorphologyLatent, rng: np.random.Generator) -> np.ndarray:
    size = latent.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # per-nucleus brightness; crowded (dense) patches are quenched so total
    # fluorescence alone does not reveal the nuclei count
    crowding = np.clip((len(latent.nuclei) - 15) / 65.0, 0.0, 1.0)
    quench = 1.0 - 0.32 * crowding
    intensity = np.zeros((size, size), dtype=np.float64)
    for nuc in latent.nuclei:
        level = rng.uniform(0.78, 1.0) * quench
        intensity = np.maximum(intensity, _inside(nuc, yy, xx) * level)
    field = _stroma_field(latent)
    bg = SIM_BACKGROUND + 0.4 * field + rng.normal(0.0, 0.008, (size, size))
    img = np.where(intensity > 0.0, intensity, bg)
    gain = rng.uniform(0.35, 1.0)
    strength = rng.uniform(0.10, 0.30)
    r2 = ((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (2 * (size / 2) ** 2)
    vignette = 1.0 - strength * r2
    speckle = 1.0 + 0.06 * rng.normal(0.0, 1.0, (size, size))
    img = img * gain * vignette * np.clip(speckle, 0.0, None)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[..., None], 3, axis=2)


def _slide_class_counts(bag_label: int, patches: int, rng: np.random.Generator) -> np.ndarray:
    """Number of patches per class for one slide, consistent with its bag label."""
    if bag_label == 1:
        frac = rng.uniform(DENSE_BAG_FRACTION + 0.06, 0.45)
        n_dense = max(int(np.ceil(DENSE_BAG_FRACTION * patches)), round(frac * patches))
    else:
        frac = rng.uniform(0.0, 0.12)
        n_dense = min(int(np.ceil(DENSE_BAG_FRACTION * patches)) - 1, round(frac * patches))
    rest = patches - n_dense
    n_sparse = int(round(rest * rng.uniform(0.35, 0.65)))
    counts = np.array([n_sparse, rest - n_sparse, n_dense])
    assert counts.sum() == patches and (counts >= 0).all()
    return counts


def generate_corpus(n_slides: int, patches_per_slide: int, seed: int, out_dir,
                    size: int = 64) -> list[SlideManifest]:
    """Write a paired corpus: per-slide directories of `<patch_id>_{he,sim}.png`
    plus a `manifest.jsonl` at the root. Deterministic in all arguments."""
    if n_slides < 1 or patches_per_slide < 1:
        raise InputError("need at least one slide and one patch per slide")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slide_seeds = np.random.SeedSequence(seed).spawn(n_slides)
    manifests: list[SlideManifest] = []
    records: list[dict] = []
    for i in range(n_slides):
        rng = np.random.default_rng(slide_seeds[i])
        slide_id = f"slide_{i:03d}"
        bag_label = i % 2  # alternate so both labels always occur
        counts = _slide_class_counts(bag_label, patches_per_slide, rng)
        class_ids = np.repeat(np.arange(3), counts)
        class_ids = class_ids[rng.permutation(patches_per_slide)]
        assert int((class_ids == DENSE).sum() >= DENSE_BAG_FRACTION * patches_per_slide) == bag_label
        slide_dir = out / slide_id
        slide_dir.mkdir(exist_ok=True)
        patch_records = []
        for j, class_id in enumerate(class_ids):
            patch_id = f"patch_{j:03d}"
            latent = sample_latent(int(class_id), rng, size)
            he = render(latent, "he", rng)
            sim = render(latent, "sim", rng)
            he_rel = f"{slide_id}/{patch_id}_he.png"
            sim_rel = f"{slide_id}/{patch_id}_sim.png"
            _save_png(he, out / he_rel)
            _save_png(sim, out / sim_rel)
            rec = {
                "slide_id": slide_id,
                "patch_id": patch_id,
                "class_id": int(class_id),
                "class_name": CLASS_NAMES[int(class_id)],
                "bag_label": bag_label,
                "he_path": he_rel,
                "sim_path": sim_rel,
            }
            patch_records.append(rec)
            records.append(rec)
        manifests.append(SlideManifest(slide_id, bag_label, patch_records))
    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifests


def _save_png(img: np.ndarray, path: Path) -> None:
    arr = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
