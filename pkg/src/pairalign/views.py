"""Multi-crop view generation and batch-style standardization.

Views are square random crops (area-fraction sampled) resized to the target
size, with optional horizontal flip and shared-across-channels brightness and
contrast jitter. Everything is driven by an explicit torch.Generator so a given
rng state reproduces the exact same ViewBatch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import ViewConfig
from .errors import InputError

STD_FLOOR = 1e-6  # below this a channel is treated as constant


@dataclass
class ViewBatch:
    global_views: torch.Tensor  # (M, 3, global_size, global_size)
    local_views: torch.Tensor   # (N, 3, local_size, local_size)
    source_id: str = ""
    modality: str = ""
    global_rects: list[tuple[int, int, int]] = field(default_factory=list)  # (top, left, side)
    local_rects: list[tuple[int, int, int]] = field(default_factory=list)


def _rand(rng: torch.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    return lo + (hi - lo) * torch.rand((), generator=rng).item()


def _crop_resize(image: torch.Tensor, scale_range: tuple[float, float], out_size: int,
                 rng: torch.Generator) -> tuple[torch.Tensor, tuple[int, int, int]]:
    _, h, w = image.shape
    area_frac = _rand(rng, *scale_range)
    side = int((area_frac * h * w) ** 0.5)
    side = max(1, min(side, h, w))
    top = int(torch.randint(0, h - side + 1, (), generator=rng))
    left = int(torch.randint(0, w - side + 1, (), generator=rng))
    crop = image[:, top:top + side, left:left + side]
    if side != out_size:
        crop = F.interpolate(crop.unsqueeze(0), size=(out_size, out_size),
                             mode="bilinear", align_corners=False).squeeze(0)
    return crop, (top, left, side)


def _jitter(view: torch.Tensor, config: ViewConfig, rng: torch.Generator) -> torch.Tensor:
    if _rand(rng) < config.flip_prob:
        view = torch.flip(view, dims=[2])
    if _rand(rng) < config.grayscale_prob:
        view = view.mean(dim=0, keepdim=True).expand_as(view).contiguous()
    if _rand(rng) < config.invert_prob:
        view = 1.0 - view
    b = _rand(rng, -config.brightness, config.brightness)
    c = _rand(rng, 1.0 - config.contrast, 1.0 + config.contrast)
    if b != 0.0 or c != 1.0:
        mean = view.mean()
        view = (view + b - mean) * c + mean
        view = view.clamp(0.0, 1.0)
    return view


def make_views(image: torch.Tensor, config: ViewConfig, rng: torch.Generator,
               source_id: str = "", modality: str = "") -> ViewBatch:
    """Generate m_global + n_local augmented views of one source image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputError(f"expected a 3 x H x W image, got {tuple(image.shape)}")
    if min(image.shape[1], image.shape[2]) < config.global_size:
        raise InputError(
            f"image {tuple(image.shape[1:])} smaller than global_size {config.global_size}")
    g_views, g_rects = [], []
    for _ in range(config.m_global):
        crop, rect = _crop_resize(image, config.global_scale, config.global_size, rng)
        g_views.append(_jitter(crop, config, rng))
        g_rects.append(rect)
    l_views, l_rects = [], []
    for _ in range(config.n_local):
        crop, rect = _crop_resize(image, config.local_scale, config.local_size, rng)
        l_views.append(_jitter(crop, config, rng))
        l_rects.append(rect)
    locals_tensor = (torch.stack(l_views) if l_views
                     else image.new_zeros((0, 3, config.local_size, config.local_size)))
    return ViewBatch(torch.stack(g_views), locals_tensor, source_id, modality, g_rects, l_rects)


def batch_standardize(images: torch.Tensor, rng: torch.Generator, prob: float) -> torch.Tensor:
    """Re-standardize each selected image channel-wise to the moments of a
    uniformly chosen *different* image in the batch; unselected images pass
    through unchanged."""
    if images.ndim != 4:
        raise InputError(f"expected a B x C x H x W batch, got {tuple(images.shape)}")
    b = images.shape[0]
    if prob <= 0.0:
        return images
    if b < 2:
        warnings.warn("batch_standardize needs batch size >= 2; passing through")
        return images
    selected = torch.rand(b, generator=rng) < prob
    refs = torch.randint(0, b - 1, (b,), generator=rng)
    refs = refs + (refs >= torch.arange(b)).long()  # never pick self

    mean = images.mean(dim=(2, 3), keepdim=True)
    std = images.std(dim=(2, 3), keepdim=True, unbiased=False)
    ref_mean, ref_std = mean[refs], std[refs]
    safe_std = std.clamp_min(STD_FLOOR)
    out = (images - mean) / safe_std * ref_std + ref_mean
    # degenerate channels map to the reference mean
    out = torch.where(std < STD_FLOOR, ref_mean.expand_as(images), out)
    return torch.where(selected.view(-1, 1, 1, 1), out, images)
