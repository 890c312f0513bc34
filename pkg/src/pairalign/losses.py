"""Loss functions for the four-stage curriculum.

All losses operate on plain tensors; the curriculum decides which are active at
a given stage and with what weight. Teacher quantities are detached here so
callers do not have to remember to.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .config import Temperatures
from .errors import InputError, NumericGuardError

EPS_NORM = 1e-8


def dino_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
              center: torch.Tensor, temps: Temperatures) -> torch.Tensor:
    """Cross-entropy between centered/sharpened teacher targets (global views
    only) and student predictions over all views, averaged over ordered view
    pairs (i, j) with i != j.

    Accepts (V, K) logits or (V, B, K) batched logits; view index comes first
    and the student views are ordered with the global crops first, so student
    view j < G is the same crop the teacher saw as view j.
    """
    t, s = teacher_logits, student_logits
    if t.ndim == 2:
        t = t.unsqueeze(1)
    if s.ndim == 2:
        s = s.unsqueeze(1)
    if t.ndim != 3 or s.ndim != 3:
        raise InputError("logits must be (V, K) or (V, B, K)")
    g = t.shape[0]
    if g < 2:
        raise InputError(f"need at least 2 teacher (global) views, got {g}")
    if s.shape[0] < g:
        raise InputError("student must cover at least the teacher views")
    if t.shape[1:] != s.shape[1:]:
        raise InputError(f"teacher {tuple(t.shape)} / student {tuple(s.shape)} mismatch")
    if center.shape != (t.shape[-1],):
        raise InputError(f"center shape {tuple(center.shape)} does not match K={t.shape[-1]}")

    p_t = F.softmax((t.detach() - center.detach()) / temps.t_teacher, dim=-1)
    log_p_s = F.log_softmax(s / temps.t_student, dim=-1)
    # ce[i, j] = mean_b CE(p_t[i, b], p_s[j, b])
    ce = torch.einsum("gbk,vbk->gvb", p_t, -log_p_s).mean(dim=-1)
    v = s.shape[0]
    mask = torch.ones(g, v, dtype=torch.bool, device=ce.device)
    mask[torch.arange(g), torch.arange(g)] = False  # skip same-crop pairs
    return ce[mask].sum() / (g * (v - 1))


def update_center(center: torch.Tensor, teacher_logits: torch.Tensor,
                  momentum: float) -> torch.Tensor:
    """EMA update of the DINO centering vector from a batch of teacher logits."""
    if not 0.0 <= momentum <= 1.0:
        raise InputError(f"center momentum must be in [0, 1], got {momentum}")
    if teacher_logits.numel() == 0:
        raise InputError("cannot update center from an empty batch")
    flat = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1])
    if center.shape != (flat.shape[-1],):
        raise InputError("center / logits dimension mismatch")
    return momentum * center.detach() + (1.0 - momentum) * flat.mean(dim=0)


def domain_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Standard cross-entropy of the domain classifier over {0: HE, 1: SIM}."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise InputError(f"domain logits must be (B, 2), got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0],):
        raise InputError("labels must be (B,) aligned with logits")
    if labels.numel() and (labels.min() < 0 or labels.max() > 1):
        raise InputError("domain labels must be 0 or 1")
    return F.cross_entropy(logits, labels.long())


def paired_contrastive_loss(z_he: torch.Tensor, z_sim: torch.Tensor,
                            tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over the union of both modalities' embeddings.

    For each anchor the candidate set is the other 2B - 1 embeddings (its own
    paired partner is the positive); similarities are cosine scaled by 1/tau
    and the two directional losses are averaged.
    """
    if tau <= 0.0:
        raise InputError(f"tau must be positive, got {tau}")
    if z_he.ndim != 2 or z_he.shape != z_sim.shape:
        raise InputError(
            f"paired embeddings must share shape (B, d): {tuple(z_he.shape)} vs {tuple(z_sim.shape)}")
    b = z_he.shape[0]
    if b < 1:
        raise InputError("need at least one pair")
    z = torch.cat([z_he, z_sim], dim=0)
    norms = z.norm(dim=1)
    if bool((norms < EPS_NORM).any()):
        raise NumericGuardError(
            f"embedding norm below {EPS_NORM}; cosine similarity undefined")
    zn = z / norms.unsqueeze(1)
    sim = zn @ zn.t() / tau
    sim.fill_diagonal_(float("-inf"))  # anchor never its own candidate
    pos = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)])
    log_denom = torch.logsumexp(sim, dim=1)
    return -(sim[torch.arange(2 * b), pos] - log_denom).mean()


def cross_recon_loss(z_he: torch.Tensor, z_sim: torch.Tensor,
                     v_he: torch.Tensor, v_sim: torch.Tensor,
                     decoder_he: Callable[[torch.Tensor], torch.Tensor],
                     decoder_sim: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Sum of the two cross-modal reconstruction MSEs (mean per element):
    decoder_he maps SIM embeddings to HE targets and vice versa."""
    if z_he.shape[0] != z_sim.shape[0] or z_he.shape[0] != v_he.shape[0] \
            or v_he.shape[0] != v_sim.shape[0]:
        raise InputError("batch dimensions of embeddings and targets must agree")
    he_hat = decoder_he(z_sim)
    sim_hat = decoder_sim(z_he)
    if he_hat.shape != v_he.shape:
        raise InputError(
            f"decoder_he output {tuple(he_hat.shape)} does not match target {tuple(v_he.shape)}")
    if sim_hat.shape != v_sim.shape:
        raise InputError(
            f"decoder_sim output {tuple(sim_hat.shape)} does not match target {tuple(v_sim.shape)}")
    return F.mse_loss(he_hat, v_he) + F.mse_loss(sim_hat, v_sim)


def total_loss(components: Mapping[str, torch.Tensor | float],
               weights: Sequence[float]):
    """Weighted sum of the four loss components in curriculum order
    (dino, domain, contrast, recon); missing components contribute zero."""
    if len(weights) != 4:
        raise InputError(f"expected 4 weights, got {len(weights)}")
    known = ("dino", "domain", "contrast", "recon")
    unknown = set(components) - set(known)
    if unknown:
        raise InputError(f"unknown loss components: {sorted(unknown)}")
    total = 0.0
    for name, lam in zip(known, weights):
        if lam != 0.0 and name in components:
            total = total + lam * components[name]
    return total
