"""Four-stage progressive training: DINO self-distillation, then domain
adversary, then paired contrastive, then cross-reconstruction.

Each stage inherits the previous stage's weights, optimizer moments, and RNG
stream bit-exactly through a Checkpoint. Losses whose stage weight is zero are
never forwarded, so their parameters receive no gradient (and therefore no
optimizer or weight-decay update) — the inactive-parameter invariant.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import torch

from .checkpoint import Checkpoint, build_bundle, fresh_checkpoint, load_checkpoint, save_checkpoint
from .config import GrlSchedule, RunConfig, StageSpec
from .data import MODALITIES, CorpusIndex, draw_paired, draw_unpaired
from .errors import InputError, SequencingError, TrainingDivergedError
from .losses import (cross_recon_loss, dino_loss, domain_loss,
                     paired_contrastive_loss, total_loss, update_center)
from .model import ModelBundle, ema_update, grad_reverse
from .views import batch_standardize, make_views

TRACE_COLUMNS = ("step", "stage", "l_dino", "l_domain", "l_contrast", "l_recon", "l_total")


def grl_coeff(step: int, schedule: GrlSchedule, total_steps: int) -> float:
    """Reversal strength at a given step of the current stage."""
    if step < 0:
        raise InputError(f"step must be >= 0, got {step}")
    if schedule.kind == "constant":
        return schedule.max_value
    if total_steps <= 0:
        return schedule.max_value
    p = step / total_steps
    return schedule.max_value * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def _build_view_batches(images: torch.Tensor, config: RunConfig, gen: torch.Generator
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-standardize the source patches, then multi-crop each of them.

    Standardization must happen at the source level: every crop of one patch
    shares one style draw, so crops of the same source stay consistent targets
    for self-distillation while first-order modality statistics are still
    scrambled across the batch. Standardizing crops independently flattens the
    teacher's same-source agreement and the distillation collapses to uniform.

    Returns view-major tensors: globals (M, B, 3, gs, gs), locals (N, B, 3, ls, ls).
    """
    vc = config.views
    images = batch_standardize(images, gen, vc.standardize_prob)
    g_all, l_all = [], []
    for img in images:
        vb = make_views(img, vc, gen)
        g_all.append(vb.global_views)
        l_all.append(vb.local_views)
    g = torch.stack(g_all, dim=1)  # (M, B, 3, gs, gs)
    l = torch.stack(l_all, dim=1)  # (N, B, 3, ls, ls)
    return g, l


def _student_view_logits(bundle: ModelBundle, g: torch.Tensor, l: torch.Tensor
                         ) -> tuple[torch.Tensor, torch.Tensor]:
    """DINO logits for all student views plus the flat global-crop features
    (reused by the domain head)."""
    m, b = g.shape[0], g.shape[1]
    g_feats = bundle.student["backbone"](g.reshape(m * b, *g.shape[2:]))
    g_logits = bundle.student["dino_head"](g_feats).reshape(m, b, -1)
    logits = [g_logits]
    if l.shape[0]:
        n = l.shape[0]
        l_feats = bundle.student["backbone"](l.reshape(n * b, *l.shape[2:]))
        logits.append(bundle.student["dino_head"](l_feats).reshape(n, b, -1))
    return torch.cat(logits, dim=0), g_feats


def train_stage(spec: StageSpec, data: CorpusIndex, init: Checkpoint, config: RunConfig,
                modalities: tuple[str, ...] = MODALITIES,
                trace_rows: list | None = None) -> Checkpoint:
    """Run one stage for spec.steps optimization steps starting from `init`."""
    if init.stage_id != spec.stage_id - 1:
        raise SequencingError(
            f"stage {spec.stage_id} must start from a stage-{spec.stage_id - 1} "
            f"checkpoint, got stage {init.stage_id}")
    if spec.data_mode == "paired" and len(modalities) < 2:
        raise InputError("paired stages need both modalities available")
    cur = config.curriculum
    bundle = build_bundle(init)
    bundle.train()
    gen = torch.Generator()
    if init.rng_state is not None:
        gen.set_state(init.rng_state)
    else:
        gen.manual_seed(cur.seed)
    optimizer = torch.optim.AdamW(
        bundle.parameter_groups(cur.optimizer.lr, cur.optimizer.head_lr_multiplier),
        lr=cur.optimizer.lr, weight_decay=cur.optimizer.weight_decay)
    if init.optimizer_state is not None:
        optimizer.load_state_dict(init.optimizer_state)
    lam = spec.weights.as_tuple()
    global_step = init.step

    for local_step in range(spec.steps):
        components: dict[str, torch.Tensor] = {}
        if spec.data_mode == "unpaired":
            images, dom_labels, _ = draw_unpaired(data, cur.batch_size, gen, modalities)
            he_batch = sim_batch = None
        else:
            he_batch, sim_batch, _ = draw_paired(data, cur.batch_size, gen)
            images = torch.cat([he_batch, sim_batch], dim=0)
            dom_labels = torch.cat([torch.zeros(cur.batch_size, dtype=torch.long),
                                    torch.ones(cur.batch_size, dtype=torch.long)])
        g_views, l_views = _build_view_batches(images, config, gen)

        with torch.no_grad():
            m, b = g_views.shape[0], g_views.shape[1]
            t_feats = bundle.teacher["backbone"](g_views.reshape(m * b, *g_views.shape[2:]))
            t_logits = bundle.teacher["dino_head"](t_feats).reshape(m, b, -1)
        s_logits, g_feats = _student_view_logits(bundle, g_views, l_views)
        components["dino"] = dino_loss(t_logits, s_logits, bundle.center, cur.temps)

        if lam[1] > 0.0:
            coeff = grl_coeff(local_step, cur.grl_schedule, spec.steps)
            dom_logits = bundle.domain(grad_reverse(g_feats, coeff))
            view_labels = dom_labels.repeat(m)
            components["domain"] = domain_loss(dom_logits, view_labels)

        if lam[2] > 0.0 or lam[3] > 0.0:
            e_he = bundle.student["backbone"](he_batch)
            e_sim = bundle.student["backbone"](sim_batch)
            if lam[2] > 0.0:
                z_he = bundle.student["contrast_head"](e_he)
                z_sim = bundle.student["contrast_head"](e_sim)
                components["contrast"] = paired_contrastive_loss(z_he, z_sim, cur.temps.tau_contrast)
            if lam[3] > 0.0:
                components["recon"] = cross_recon_loss(
                    e_he, e_sim, he_batch, sim_batch, bundle.dec_he, bundle.dec_sim)

        total = total_loss(components, lam)
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at stage {spec.stage_id} step {local_step}",
                diagnostics={"stage": spec.stage_id, "step": local_step,
                             **{k: float(v.detach()) for k, v in components.items()}})
        total.backward()
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
        with torch.no_grad():
            ema_update(bundle, cur.ema_momentum)
            bundle.center.copy_(update_center(bundle.center, t_logits, cur.center_momentum))

        global_step += 1
        if trace_rows is not None:
            vals = {k: float(v.detach()) for k, v in components.items()}
            trace_rows.append((global_step, spec.stage_id,
                               vals.get("dino", 0.0), vals.get("domain", 0.0),
                               vals.get("contrast", 0.0), vals.get("recon", 0.0),
                               float(total.detach())))

    return Checkpoint(model_state={k: v.detach().clone() for k, v in bundle.state_dict().items()},
                      stage_id=spec.stage_id, step=global_step, config=config,
                      optimizer_state=optimizer.state_dict(), rng_state=gen.get_state())


def append_trace(path, rows: list) -> None:
    path = Path(path)
    write_header = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def run_curriculum(config: RunConfig, data: CorpusIndex, out_dir=None,
                   through_stage: int = 4, modalities: tuple[str, ...] = MODALITIES,
                   resume: bool = False) -> list[Checkpoint]:
    """Train stages 1..through_stage sequentially, optionally persisting
    `stage{k}.ckpt` and a loss trace under out_dir. With resume=True, stages
    whose checkpoint already exists (and matches the config) are loaded
    instead of retrained."""
    config.validate()
    stages = [s for s in config.curriculum.stages if s.stage_id <= through_stage]
    if not stages or stages[-1].stage_id != through_stage:
        raise InputError(f"config defines no stage {through_stage}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    current = fresh_checkpoint(config)
    results: list[Checkpoint] = []
    for spec in stages:
        ckpt_path = out / f"stage{spec.stage_id}.ckpt" if out is not None else None
        if resume and ckpt_path is not None and ckpt_path.exists():
            loaded = load_checkpoint(ckpt_path)
            if loaded.config_hash != config.config_hash():
                raise SequencingError(
                    f"{ckpt_path} was trained with a different config; cannot resume")
            if loaded.stage_id != spec.stage_id:
                raise SequencingError(
                    f"{ckpt_path} holds stage {loaded.stage_id}, expected {spec.stage_id}")
            current = loaded
        else:
            rows: list | None = [] if out is not None else None
            current = train_stage(spec, data, current, config, modalities, rows)
            if out is not None:
                save_checkpoint(current, ckpt_path)
                append_trace(out / "loss_trace.csv", rows)
        results.append(current)
    return results
