"""Command-line entry point.

Subcommands: synth (corpus generation), pretrain (staged curriculum), eval
(downstream tasks on one checkpoint), ablation (full sweep). Exit codes:
0 success, 2 usage error, 3 refusal (existing outputs without --force),
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, save_config
from .curriculum import run_curriculum
from .data import load_corpus
from .embed import embed_corpus, save_embeddings
from .errors import PipelineError
from .experiment import (bags_by_modality, cluster_metrics, evaluate_checkpoint,
                         mil_metrics, run_ablation)
from .figures import (save_ablation_figure, save_loss_trace_figure,
                      save_projection_figure)
from .metrics import alignment_metrics, project_2d
from .synthdata import generate_corpus

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_REFUSED = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairalign",
                                     description="Cross-modality self-supervised "
                                                 "pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic paired corpus")
    p_synth.add_argument("--slides", type=int, default=10)
    p_synth.add_argument("--patches", type=int, default=50)
    p_synth.add_argument("--seed", type=int, default=1)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--force", action="store_true",
                         help="overwrite an existing non-empty corpus directory")

    p_pre = sub.add_parser("pretrain", help="run the staged curriculum")
    p_pre.add_argument("--config", help="YAML config (defaults used when omitted)")
    p_pre.add_argument("--corpus", required=True)
    p_pre.add_argument("--out", required=True)
    p_pre.add_argument("--through-stage", type=int, default=4, choices=(1, 2, 3, 4))
    p_pre.add_argument("--modalities", default="he,sim",
                       help="comma-separated modality subset, e.g. 'sim' for the "
                            "single-modality baseline")
    p_pre.add_argument("--resume", action="store_true",
                       help="reuse existing stage checkpoints that match the config")
    p_pre.add_argument("--force", action="store_true",
                       help="retrain even if stage checkpoints already exist")

    p_eval = sub.add_parser("eval", help="evaluate one checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--task", required=True, choices=("mil", "cluster", "align"))
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--force", action="store_true")

    p_abl = sub.add_parser("ablation", help="train + evaluate all ablation rows")
    p_abl.add_argument("--config")
    p_abl.add_argument("--corpus", required=True,
                       help="pretraining corpus (shared across seeds)")
    p_abl.add_argument("--eval-corpus",
                       help="held-out corpus for MIL/clustering; generated under "
                            "--out when omitted")
    p_abl.add_argument("--seeds", default="1,2,3", help="comma-separated run seeds")
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--force", action="store_true")
    return parser


def _refuse(message: str) -> int:
    print(f"refused: {message}", file=sys.stderr)
    return EXIT_REFUSED


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_synth(args) -> int:
    out = Path(args.out)
    if (out / "manifest.jsonl").exists() and not args.force:
        return _refuse(f"{out} already holds a corpus; pass --force to regenerate")
    manifests = generate_corpus(args.slides, args.patches, args.seed, out, args.size)
    n_pairs = sum(len(m.patches) for m in manifests)
    print(f"wrote {len(manifests)} slides / {n_pairs} pairs to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _load_run_config(args.config)
    out = Path(args.out)
    existing = sorted(out.glob("stage*.ckpt"))
    if existing and not (args.resume or args.force):
        return _refuse(f"{out} already holds checkpoints ({existing[0].name}…); "
                       f"pass --resume to continue or --force to retrain")
    if args.force:
        for path in existing:
            path.unlink()
        trace = out / "loss_trace.csv"
        if trace.exists():
            trace.unlink()
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    modalities = tuple(m.strip() for m in args.modalities.split(",") if m.strip())
    index = load_corpus(args.corpus)
    checkpoints = run_curriculum(config, index, out, args.through_stage,
                                 modalities, resume=args.resume)
    trace = out / "loss_trace.csv"
    if trace.exists():
        save_loss_trace_figure(trace, out / "loss_trace.png")
    print(f"trained through stage {checkpoints[-1].stage_id}; "
          f"checkpoints in {out}")
    return EXIT_OK


def _eval_align(records, out: Path, seed: int) -> dict:
    report = alignment_metrics(records, seed)
    vectors = np.stack([r.vector for r in records])
    coords = project_2d(vectors, "pca", seed)
    save_projection_figure(coords, [r.modality for r in records],
                           out / "projection.png")
    return report


def _eval_mil(records, seed: int) -> dict:
    report = {}
    for modality in ("he", "sim"):
        bags = bags_by_modality(records, modality)
        if len(bags) < 3:
            continue
        report[modality] = mil_metrics(records, modality, seed=seed)
    return report


def _eval_cluster(records, out: Path, seed: int) -> dict:
    report = cluster_metrics(records, seed=seed)
    keys = [f"{r.slide_id}/{r.patch_id}" for r in records if r.modality == "he"]
    with open(out / "cluster_map.csv", "w") as f:
        f.write("patch,component_he,component_sim\n")
        for key, ch, cs in zip(keys, report["assignments_he"], report["assignments_sim"]):
            f.write(f"{key},{ch},{cs}\n")
    return report


def cmd_eval(args) -> int:
    out = Path(args.out)
    report_path = out / f"report_{args.task}.json"
    if report_path.exists() and not args.force:
        return _refuse(f"{report_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    index = load_corpus(args.corpus)
    records = embed_corpus(args.checkpoint, index)
    save_embeddings(records, out / "embeddings")
    if args.task == "align":
        report = _eval_align(records, out, args.seed)
    elif args.task == "mil":
        report = _eval_mil(records, args.seed)
    else:
        report = _eval_cluster(records, out, args.seed)
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    payload = {"task": args.task, "stage_id": ckpt.stage_id, "step": ckpt.step,
               "checkpoint": str(args.checkpoint), "metrics": report}
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    config = _load_run_config(args.config)
    out = Path(args.out)
    table_path = out / "ablation.json"
    if table_path.exists() and not args.force:
        return _refuse(f"{table_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        print("error: --seeds must name at least one seed", file=sys.stderr)
        return EXIT_USAGE
    if args.eval_corpus:
        eval_corpus = load_corpus(args.eval_corpus)
    else:
        eval_dir = out / "eval_corpus"
        if not (eval_dir / "manifest.jsonl").exists():
            generate_corpus(30, 30, seed=999, out_dir=eval_dir)
        eval_corpus = load_corpus(eval_dir)
    table = run_ablation(config, args.corpus, eval_corpus, out, seeds)
    for metric in ("mil_acc_sim", "cluster_agreement", "recall_at_1", "domain_probe_acc"):
        save_ablation_figure(table, metric, out / f"ablation_{metric}.png")
    print(f"wrote {table_path} ({len(table)} rows)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    handlers = {"synth": cmd_synth, "pretrain": cmd_pretrain,
                "eval": cmd_eval, "ablation": cmd_ablation}
    try:
        return handlers[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
