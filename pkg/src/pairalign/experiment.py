"""End-to-end evaluation and the ablation sweep.

evaluate_checkpoint computes every downstream metric for one frozen encoder:
alignment metrics on the pretraining corpus (the corpus whose pairs the
curriculum aligned), and MIL / clustering metrics on a held-out evaluation
corpus. MIL accuracy is the mean test accuracy over several repeated
stratified slide splits, which gives the metric enough resolution to support
trend comparisons at desk scale.

run_ablation trains, per seed, the full four-stage curriculum plus a
single-modality stage-1 baseline, evaluates all five resulting encoders, and
emits a consolidated table.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .clustering import DEFAULT_COMPONENTS, gmm_assign, gmm_fit, match_clusters
from .config import RunConfig
from .curriculum import run_curriculum
from .data import MODALITIES, CorpusIndex, load_corpus, split_slides
from .embed import EmbeddingRecord, embed_corpus
from .errors import InputError
from .metrics import alignment_metrics, paired_matrices
from .mil import AbmilConfig, Bag, abmil_train, evaluate_bags

ABLATION_ROWS = ("sim_only", "joint_stage1", "plus_dann", "plus_nce", "plus_recon")
METRIC_COLUMNS = ("domain_probe_acc", "recall_at_1", "recall_at_5",
                  "mil_acc_he", "mil_auc_he", "mil_acc_sim", "mil_auc_sim",
                  "cluster_agreement", "cluster_mean_cosine")


def bags_by_modality(records: list[EmbeddingRecord], modality: str) -> list[Bag]:
    by_slide: dict[str, list[EmbeddingRecord]] = {}
    for rec in records:
        if rec.modality == modality:
            by_slide.setdefault(rec.slide_id, []).append(rec)
    bags = []
    for slide_id in sorted(by_slide):
        recs = sorted(by_slide[slide_id], key=lambda r: r.patch_id)
        bags.append(Bag(slide_id, np.stack([r.vector for r in recs]),
                        recs[0].bag_label))
    return bags


def mil_metrics(records: list[EmbeddingRecord], modality: str, n_splits: int = 5,
                seed: int = 0, config: AbmilConfig | None = None) -> dict:
    """Mean test accuracy/AUC over repeated stratified 70/15/15 slide splits."""
    bags = bags_by_modality(records, modality)
    if len(bags) < 3:
        raise InputError(f"need at least 3 {modality} bags for MIL evaluation")
    labels = {bag.slide_id: bag.label for bag in bags}
    by_id = {bag.slide_id: bag for bag in bags}
    accs, aucs = [], []
    for split_i in range(n_splits):
        train_ids, val_ids, test_ids = split_slides(labels, seed=seed + split_i)
        cfg = config or AbmilConfig(seed=seed + split_i)
        model = abmil_train([by_id[s] for s in train_ids], cfg,
                            [by_id[s] for s in val_ids] or None)
        result = evaluate_bags(model, [by_id[s] for s in test_ids])
        accs.append(result["accuracy"])
        aucs.append(result["auc"])
    return {"accuracy": float(np.mean(accs)), "auc": float(np.nanmean(aucs)),
            "per_split_accuracy": accs, "n_splits": n_splits}


def cluster_metrics(records: list[EmbeddingRecord], n_components: int = DEFAULT_COMPONENTS,
                    seed: int = 0) -> dict:
    """Per-modality GMMs on registered pairs, matched by the Hungarian
    assignment; agreement is the fraction of pairs landing in matched
    components."""
    he, sim, _ = paired_matrices(records)
    model_he = gmm_fit(he, n_components, seed)
    model_sim = gmm_fit(sim, n_components, seed)
    assign_he, _ = gmm_assign(model_he, he)
    assign_sim, _ = gmm_assign(model_sim, sim)
    match = match_clusters(model_he, model_sim, assign_he, assign_sim)
    return {"cluster_agreement": match.agreement,
            "cluster_mean_cosine": match.mean_cosine,
            "permutation": match.permutation.tolist(),
            "assignments_he": assign_he.tolist(),
            "assignments_sim": assign_sim.tolist()}


def evaluate_checkpoint(source, pretrain_corpus, eval_corpus, seed: int = 0,
                        n_mil_splits: int = 5) -> dict:
    """All downstream metrics for one checkpoint (path, Checkpoint, or bundle)."""
    pre_index = pretrain_corpus if isinstance(pretrain_corpus, CorpusIndex) \
        else load_corpus(pretrain_corpus)
    eval_index = eval_corpus if isinstance(eval_corpus, CorpusIndex) \
        else load_corpus(eval_corpus)
    pre_records = embed_corpus(source, pre_index)
    align = alignment_metrics(pre_records, seed)
    eval_records = embed_corpus(source, eval_index)
    mil_he = mil_metrics(eval_records, "he", n_mil_splits, seed)
    mil_sim = mil_metrics(eval_records, "sim", n_mil_splits, seed)
    clus = cluster_metrics(eval_records, seed=seed)
    return {
        "domain_probe_acc": align["domain_probe_acc"],
        "recall_at_1": align["recall_at_1"],
        "recall_at_5": align["recall_at_5"],
        "silhouette_by_modality": align["silhouette_by_modality"],
        "mil_acc_he": mil_he["accuracy"],
        "mil_auc_he": mil_he["auc"],
        "mil_acc_sim": mil_sim["accuracy"],
        "mil_auc_sim": mil_sim["auc"],
        "cluster_agreement": clus["cluster_agreement"],
        "cluster_mean_cosine": clus["cluster_mean_cosine"],
    }


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    raw = config.to_dict()
    raw["curriculum"]["seed"] = seed
    return RunConfig.from_dict(raw)


def run_ablation(config: RunConfig, pretrain_corpus, eval_corpus, out_dir,
                 seeds: tuple[int, ...], n_mil_splits: int = 5) -> list[dict]:
    """Train and evaluate all ablation rows for each seed.

    `pretrain_corpus` is a corpus path/index shared by all seeds, or a callable
    seed -> path/index when each replicate should pretrain on its own corpus.
    Results are cached per seed under out_dir and reused when the config hash
    matches.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_index = eval_corpus if isinstance(eval_corpus, CorpusIndex) else load_corpus(eval_corpus)
    table: list[dict] = []
    for seed in seeds:
        cfg = _with_seed(config, seed)
        seed_dir = out / f"seed{seed}"
        cache_path = seed_dir / "metrics.json"
        if cache_path.exists():
            cached = json.loads(cache_path.read_text())
            if cached.get("config_hash") == cfg.config_hash():
                table.extend(cached["rows"])
                continue
        corpus = pretrain_corpus(seed) if callable(pretrain_corpus) else pretrain_corpus
        pre_index = corpus if isinstance(corpus, CorpusIndex) else load_corpus(corpus)
        joint = run_curriculum(cfg, pre_index, seed_dir / "joint", through_stage=4, resume=True)
        sim_only = run_curriculum(cfg, pre_index, seed_dir / "sim_only", through_stage=1,
                                  modalities=("sim",), resume=True)
        row_sources = {
            "sim_only": sim_only[0],
            "joint_stage1": joint[0],
            "plus_dann": joint[1],
            "plus_nce": joint[2],
            "plus_recon": joint[3],
        }
        rows = []
        for name in ABLATION_ROWS:
            ckpt = row_sources[name]
            metrics = evaluate_checkpoint(ckpt, pre_index, eval_index, seed=seed,
                                          n_mil_splits=n_mil_splits)
            rows.append({"row": name, "seed": seed, "stage_id": ckpt.stage_id, **metrics})
        seed_dir.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps(
            {"config_hash": cfg.config_hash(), "rows": rows}, indent=2, sort_keys=True))
        table.extend(rows)
    write_ablation_table(table, out)
    return table


def write_ablation_table(table: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    columns = ("row", "seed", "stage_id") + METRIC_COLUMNS
    lines = [",".join(columns)]
    for row in table:
        lines.append(",".join(str(row.get(c, "")) for c in columns))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")


def median_by_row(table: list[dict], metric: str) -> dict[str, float]:
    """Median of one metric per ablation row across seeds."""
    out: dict[str, float] = {}
    for name in ABLATION_ROWS:
        vals = [row[metric] for row in table if row["row"] == name]
        if vals:
            out[name] = float(np.median(vals))
    return out


def composite_sim_score(row: dict) -> float:
    """The SIM-side composite used for trend checks: mean of MIL accuracy and
    matched-cluster agreement."""
    return 0.5 * (row["mil_acc_sim"] + row["cluster_agreement"])
