"""Shared encoder, projection heads, modality decoders, and domain classifier.

All trainable state lives in a ModelBundle. The student branch carries the
backbone plus both projection heads; the teacher mirrors backbone + distillation
head only and is updated exclusively by EMA. Two transposed-convolution decoders
map embeddings back to pixel space, one per modality.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import ConfigurationError, InputError, ShapeError


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def grad_reverse(x: torch.Tensor, coeff: float) -> torch.Tensor:
    """Identity in the forward pass; scales gradients by -coeff in the backward pass."""
    if coeff < 0:
        raise InputError(f"gradient-reversal coefficient must be >= 0, got {coeff}")
    return _GradReverse.apply(x, float(coeff))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Small ViT with a class token; accepts any input whose side is a multiple
    of patch_size (positional embeddings are interpolated for non-base sizes)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stem = nn.Conv2d(3, config.width, config.patch_size, stride=config.patch_size)
        self.base_grid = config.image_size // config.patch_size
        n_patches = self.base_grid ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, config.width))
        self.blocks = nn.ModuleList(Block(config.width, config.heads) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.width)
        if config.embed_dim != config.width:
            self.out_proj = nn.Linear(config.width, config.embed_dim)
        else:
            self.out_proj = nn.Identity()
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def _pos_embed_for(self, grid: int) -> torch.Tensor:
        if grid == self.base_grid:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:].reshape(1, self.base_grid, self.base_grid, -1)
        patch_pos = patch_pos.permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid, grid), mode="bilinear", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid * grid, -1)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        if h != w or h % self.config.patch_size != 0:
            raise ShapeError(
                f"image side must be square and divisible by patch_size "
                f"{self.config.patch_size}, got {h}x{w}")
        # instance-normalize each channel: first-order intensity statistics are
        # pure style and would otherwise dominate the embedding geometry as a
        # free modality axis the adversarial stage then has to fight
        mu = images.mean(dim=(2, 3), keepdim=True)
        sd = images.std(dim=(2, 3), keepdim=True, unbiased=False).clamp_min(1e-5)
        images = (images - mu) / sd
        grid = h // self.config.patch_size
        tokens = self.stem(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self._pos_embed_for(grid)
        for block in self.blocks:
            x = block(x)
        return self.out_proj(self.norm(x)[:, 0])


class WeightNormLinear(nn.Module):
    """Linear layer with a weight-normalized weight matrix and no bias.

    The per-row gain is frozen at 1 so prototype logits stay bounded cosine
    similarities; a learnable gain lets the student flatten its outputs and
    drift into the uniform-collapse fixed point of the distillation loss.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight_v = nn.Parameter(torch.empty(out_dim, in_dim))
        self.weight_g = nn.Parameter(torch.ones(out_dim, 1), requires_grad=False)
        nn.init.trunc_normal_(self.weight_v, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = self.weight_g * F.normalize(self.weight_v, dim=1)
        return F.linear(x, weight)


class DinoHead(nn.Module):
    """Three-layer projection head; the final layer is weight-normalized."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        hidden = 2 * in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = WeightNormLinear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        # unit-norm bottleneck: logits become bounded cosines, which blocks
        # the scale-shrinking route to uniform outputs
        x = F.normalize(x, dim=-1)
        return self.out(x)


class ContrastHead(nn.Module):
    """Two-layer projection head for the paired contrastive objective."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, 2 * in_dim)
        self.fc2 = nn.Linear(2 * in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class DomainClassifier(nn.Module):
    """Two-layer MLP emitting modality logits (column 0: he, column 1: sim)."""

    def __init__(self, in_dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(z)))


class Decoder(nn.Module):
    """Projects an embedding to a small seed map, then upsamples through four
    stride-2 transposed-conv blocks to a full-size 3-channel image."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.width < 8:
            raise ConfigurationError("decoder needs width >= 8 for its channel schedule")
        s = config.decoder_seed_size
        self.seed_size = s
        self.width = config.width
        self.fc = nn.Linear(config.embed_dim, s * s * config.width)
        chans = [config.width, config.width // 2, config.width // 4, config.width // 8, 3]
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[i], chans[i + 1], kernel_size=2, stride=2)
            for i in range(4))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.fc(z).reshape(z.shape[0], self.width, self.seed_size, self.seed_size)
        for i, up in enumerate(self.ups):
            x = up(x)
            if i < len(self.ups) - 1:
                x = F.gelu(x)
        return x


class ModelBundle(nn.Module):
    """All trainable state: student branch, EMA teacher, centering vector,
    domain classifier, and the two modality decoders.

    State-dict keys form the stable checkpoint namespace
    (``student.backbone.*``, ``teacher.*``, ``center``, ``domain.*``,
    ``dec_he.*``, ``dec_sim.*``).
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.student = nn.ModuleDict({
            "backbone": VisionTransformer(config),
            "dino_head": DinoHead(config.embed_dim, config.proj_dim_dino),
            "contrast_head": ContrastHead(config.embed_dim, config.proj_dim_contrast),
        })
        self.teacher = nn.ModuleDict({
            "backbone": VisionTransformer(config),
            "dino_head": DinoHead(config.embed_dim, config.proj_dim_dino),
        })
        self.domain = DomainClassifier(config.embed_dim)
        self.dec_he = Decoder(config)
        self.dec_sim = Decoder(config)
        self.register_buffer("center", torch.zeros(config.proj_dim_dino))
        self.sync_teacher()

    def sync_teacher(self) -> None:
        """Copy student backbone + distillation head into the teacher and
        detach the teacher from gradient tracking."""
        for key in ("backbone", "dino_head"):
            self.teacher[key].load_state_dict(self.student[key].state_dict())
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    def encode(self, images: torch.Tensor, head: str = "none", network: str = "student") -> torch.Tensor:
        """Class-token embedding of a batch (head='none'), distillation logits
        (head='dino'), or contrastive projection (head='contrast')."""
        if network not in ("student", "teacher"):
            raise InputError(f"unknown network {network!r}")
        branch = self.student if network == "student" else self.teacher
        z = branch["backbone"](images)
        if head == "none":
            return z
        if head == "dino":
            return branch["dino_head"](z)
        if head == "contrast":
            if network == "teacher":
                raise InputError("the teacher has no contrastive head")
            return branch["contrast_head"](z)
        raise InputError(f"unknown head {head!r}")

    def domain_classify(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.config.embed_dim:
            raise ShapeError(
                f"expected B x {self.config.embed_dim} embeddings, got {tuple(z.shape)}")
        return self.domain(z)

    def decode(self, z: torch.Tensor, which: str) -> torch.Tensor:
        if which not in ("he", "sim"):
            raise InputError(f"unknown decoder {which!r}")
        if z.ndim != 2 or z.shape[1] != self.config.embed_dim:
            raise ShapeError(
                f"expected B x {self.config.embed_dim} embeddings, got {tuple(z.shape)}")
        dec = self.dec_he if which == "he" else self.dec_sim
        return dec(z)

    def trainable_parameters(self):
        """Parameters updated by the optimizer: student + domain + decoders
        (the teacher is EMA-only, the center is a buffer)."""
        for name, p in self.named_parameters():
            if not name.startswith("teacher.") and p.requires_grad:
                yield p

    def parameter_groups(self, base_lr: float, head_lr_multiplier: float):
        """Two optimizer groups in a deterministic order: the representation
        path (backbone, distillation head, contrastive projection) at the base
        rate, and the auxiliary heads (domain classifier, decoders) at a faster
        one. The contrastive projection must stay slow: a fast projection can
        reach the constant-output saddle of the InfoNCE objective (all
        similarities equal, loss pinned at ln(2B-1)) before the backbone has a
        chance to close the modality gap, after which no gradient reaches the
        backbone at all."""
        slow = ("student.backbone.", "student.dino_head.", "student.contrast_head.")
        slow_params, fast_params = [], []
        for name, p in self.named_parameters():
            if name.startswith("teacher.") or not p.requires_grad:
                continue
            (slow_params if name.startswith(slow) else fast_params).append(p)
        return [
            {"params": slow_params, "lr": base_lr},
            {"params": fast_params, "lr": base_lr * head_lr_multiplier},
        ]

    def ema_pairs(self):
        """(teacher_param, student_param) pairs aligned by name."""
        student_params = dict(self.student.named_parameters())
        for name, t_param in self.teacher.named_parameters():
            yield t_param, student_params[name]


def init_model(config: EncoderConfig, seed: int) -> ModelBundle:
    """Build a ModelBundle with deterministic parameters for a fixed seed.

    The teacher starts as an exact copy of the student subset it mirrors and
    the centering vector starts at zero.
    """
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        bundle = ModelBundle(config)
    return bundle


def ema_update(bundle: ModelBundle, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    if not 0.0 <= momentum <= 1.0:
        raise InputError(f"EMA momentum must be in [0, 1], got {momentum}")
    with torch.no_grad():
        for t_param, s_param in bundle.ema_pairs():
            if t_param.shape != s_param.shape:
                raise ShapeError("teacher/student parameter shape mismatch")
            t_param.mul_(momentum).add_(s_param, alpha=1.0 - momentum)
