"""Command-line entry point: ``rsllm <subcommand> ...``.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime failure.
"""
from __future__ import annotations

import os
import sys

# Thread caps must be in place before numpy loads its BLAS.
if os.environ.get("RSLLM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["RSLLM_THREADS"]

import argparse
import json
import logging
from pathlib import Path

from .config import ConfigError, RunConfig

log = logging.getLogger("rsllm")


class UsageError(Exception):
    """Bad invocation, config, or missing input artifact (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path} (run `{hint}` first)")
    return path


# ---------------------------------------------------------------- subcommands

def cmd_prepare_data(args) -> None:
    from .data import (build_sequences, candidate_sets, compute_stats, dataset_hash, load_interactions,
                       split_leave_one_out, write_dataset)
    from .pipeline import write_json
    interactions, catalog, report = load_interactions(args.interactions, args.catalog, args.format)
    seqs, dropped = build_sequences(interactions, catalog, args.min_length)
    split = split_leave_one_out(seqs, args.max_history)
    out = Path(args.out)
    write_dataset(out, interactions, catalog)
    with open(out / "sequences.tsv", "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(f"{s.user_id}\t{' '.join(catalog.item_ids[i] for i in s.items)}\n")
    n = len(catalog)
    cands = {}
    for role, exs in (("validation", split.validation), ("test", split.test)):
        cs = candidate_sets(exs, n, args.candidate_seed, salt="val" if role == "validation" else "test")
        cands[role] = [{"user_id": e.user_id, "history": [catalog.item_ids[i] for i in e.history],
                        "target": catalog.item_ids[e.target], "candidates": [catalog.item_ids[i] for i in c.candidates],
                        "ground_truth_position": c.ground_truth_position} for e, c in zip(exs, cs)]
    write_json(out / "candidates.json", cands)
    stats = compute_stats(seqs, catalog).as_dict()
    stats.update({"dropped_users": dropped, "train_pairs": len(split.train),
                  "dataset_sha256": dataset_hash(seqs, catalog), "load_report": vars(report)})
    write_json(out / "stats.json", stats)
    print(json.dumps({k: stats[k] for k in ("sequences", "items", "interactions", "sparsity")}, sort_keys=True))


def cmd_gen_synthetic(args) -> None:
    from .data import SyntheticSpec, generate_synthetic, write_synthetic
    try:
        doc = json.loads(Path(args.spec).read_text())
    except OSError as e:
        raise UsageError(f"cannot read spec {args.spec}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"spec is not valid JSON: {e}") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    ds = generate_synthetic(SyntheticSpec.from_dict(doc))
    write_synthetic(args.out, ds)
    print(f"wrote {len(ds.interactions)} interactions over {len(ds.catalog)} items to {args.out}")


def _data(cfg: RunConfig):
    from .pipeline import prepare_data
    return prepare_data(cfg)


def cmd_train_backbone(args) -> None:
    from .backbones import save_backbone, save_item_embeddings
    from .pipeline import Timer, fit_backbone, manifest, write_json
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    timer = Timer()
    data = _data(cfg)
    with timer("train_backbone"):
        run = fit_backbone(cfg, data)
    out.mkdir(parents=True, exist_ok=True)
    save_backbone(out / "backbone.ckpt", run.model)
    save_item_embeddings(out / "item_emb.ckpt", run.table)
    doc = manifest(cfg, data, {"backbone": {"kind": run.table.kind, "train_loss": run.train_loss,
                                            "val_hit_ratio": run.val_hit_ratio, "test_hit_ratio": run.test_hit_ratio,
                                            "bayes_oracle": run.oracle, "item_emb_sha256": run.table.digest()}})
    write_json(out / "backbone_manifest.json", doc)
    write_json(out / "backbone_timings.json", timer.times)
    print(f"{run.table.kind} test HR@1 {run.test_hit_ratio:.4f}")


def cmd_pretrain_lm(args) -> None:
    from .lm import save_lm
    from .pipeline import Timer, manifest, pretrain_base, state_digest, write_json
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    timer = Timer()
    data = _data(cfg)
    with timer("pretrain_lm"):
        lm, vocab, losses = pretrain_base(cfg, data)
    out.mkdir(parents=True, exist_ok=True)
    save_lm(out / "lm_base.ckpt", lm)
    vocab.save(out / "vocab.tsv")
    write_json(out / "pretrain_manifest.json",
               manifest(cfg, data, {"pretrain_loss_last": losses[-1] if losses else None,
                                    "lm_sha256": state_digest(lm.state_dict("lm"))}))
    write_json(out / "pretrain_timings.json", timer.times)
    print(f"pretrained LM ({lm.num_parameters()} parameters), final loss {losses[-1] if losses else float('nan'):.4f}")


def cmd_train(args) -> None:
    from .backbones import load_item_embeddings
    from .lm import Vocabulary, load_lm
    from .pipeline import (PromptMode, Timer, apply_ablation, fit_rsllm, manifest, save_rec_model, stage_summary,
                           state_digest, write_json)
    cfg = _load_config(args)
    key = args.ablation or "full"
    if args.stage1_only:
        key = "stage1_only"
    elif args.stage2_only:
        key = "stage2_only"
    run_cfg, flags = apply_ablation(cfg, key)
    out = Path(cfg.output_dir)
    base = load_lm(_require(out / "lm_base.ckpt", "base LM checkpoint", "rsllm pretrain-lm --config F"))
    vocab = Vocabulary.load(_require(out / "vocab.tsv", "vocabulary", "rsllm pretrain-lm --config F"))
    table = None
    if not flags.stage1_only:
        table = load_item_embeddings(_require(out / "item_emb.ckpt", "backbone item-embedding export",
                                              "rsllm train-backbone --config F"))
    timer = Timer()
    data = _data(run_cfg)
    with timer("train"):
        fit = fit_rsllm(run_cfg, data, base, vocab, table, run_cfg.seed, flags)
    hashes = {"lm_base_sha256": state_digest(base.state_dict("lm"))}
    if table is not None:
        hashes["item_emb_sha256"] = table.digest()
    outputs = {}
    if fit.stage1_state is not None:
        final_state = fit.model.state()
        fit.model.load_state(fit.stage1_state)
        mode = fit.model.mode
        fit.model.mode = PromptMode.TEXT_ID
        save_rec_model(out / "stage1.ckpt", fit.model)
        outputs["stage1.ckpt"] = state_digest(fit.stage1_state)
        fit.model.load_state(final_state)
        fit.model.mode = mode
    if fit.stage2 is not None:
        save_rec_model(out / "stage2.ckpt", fit.model)
        outputs["stage2.ckpt"] = state_digest(fit.model.state())
    (out / "config.json").write_text(run_cfg.to_json())
    doc = manifest(run_cfg, data, {"ablation": key, "input_hashes": hashes, "output_sha256": outputs,
                                   "stage1": stage_summary(fit.stage1), "stage2": stage_summary(fit.stage2),
                                   "final_checkpoint": "stage2.ckpt" if fit.stage2 is not None else "stage1.ckpt"})
    write_json(out / "manifest.json", doc)
    write_json(out / "timings.json", timer.times)
    print(f"trained '{key}'; checkpoints in {out}")


def cmd_evaluate(args) -> None:
    from .eval import evaluate_generative, evaluate_ranking
    from .lm import Vocabulary
    from .pipeline import default_template, load_rec_model, prepare_data
    ckpt = Path(args.checkpoint)
    _require(ckpt, "checkpoint", "rsllm train --config F")
    run_dir = ckpt.parent
    cfg = RunConfig.load(_require(run_dir / "config.json", "run config", "rsllm train --config F"))
    vocab = Vocabulary.load(_require(run_dir / "vocab.tsv", "vocabulary", "rsllm pretrain-lm --config F"))
    if args.data:
        data_dir = Path(args.data)
        _require(data_dir / "interactions.tsv", "interactions file", "rsllm prepare-data or gen-synthetic")
        data = prepare_data(cfg, data_dir)
    else:
        data = prepare_data(cfg)
    model = load_rec_model(ckpt, vocab, data.titles, default_template(cfg))
    tag = ckpt.stem
    if args.mode == "generative":
        rep = evaluate_generative(model, data.test, data.test_cands, max_new_tokens=cfg.eval.max_new_tokens,
                                  dataset=data.name, tag=tag, seed=cfg.seed, batch_size=cfg.eval.batch_size)
    else:
        rep = evaluate_ranking(model, data.test, data.test_cands, dataset=data.name, tag=tag, seed=cfg.seed)
    out = Path(args.out) if args.out else run_dir
    rep.save(out, f"report_{tag}_{args.mode}")
    print(f"{tag} {args.mode}: HR@1 {rep.hit_ratio_at_1:.4f} ValidRatio {rep.valid_ratio:.4f}")


def _read_matrix(path) -> list[str]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read matrix {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"matrix is not valid JSON: {e}") from None
    keys = doc.get("ablations") if isinstance(doc, dict) else doc
    if not isinstance(keys, list) or not all(isinstance(k, str) for k in keys):
        raise UsageError("matrix must be a JSON list of ablation keys or {\"ablations\": [...]}")
    return keys


def cmd_ablate(args) -> None:
    from .eval import check_ablation
    from .pipeline import run_ablation_matrix, write_json
    cfg = _load_config(args)
    keys = _read_matrix(args.matrix)
    for k in keys:
        check_ablation(k)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [cfg.seed + i for i in range(args.seeds)]
    table, timings = run_ablation_matrix(cfg, keys, seeds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "ablation.txt").write_text(table.to_text())
    write_json(out / "ablation_runs.json", {k: [r.summary() for r in reps] for k, reps in table.reports.items()})
    write_json(out / "ablation_timings.json", timings)
    print(table.to_text(), end="")


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest(sys.stdout) else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsllm", description="RSLLM sequential recommendation pipeline")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare-data", help="sequences, splits, candidate sets and stats from raw logs")
    s.add_argument("--interactions", required=True)
    s.add_argument("--catalog", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["tsv", "ml-100k"], default="tsv")
    s.add_argument("--min-length", type=int, default=3)
    s.add_argument("--max-history", type=int, default=10)
    s.add_argument("--candidate-seed", type=int, default=0)
    s.set_defaults(fn=cmd_prepare_data)

    s = sub.add_parser("gen-synthetic", help="planted Markov dataset and its transitions.json")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gen_synthetic)

    for name, fn, text in (("train-backbone", cmd_train_backbone, "train a backbone and export item embeddings"),
                           ("pretrain-lm", cmd_pretrain_lm, "pretrain the base language model")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--output-dir")
        s.set_defaults(fn=fn)

    s = sub.add_parser("train", help="two-stage RSLLM tuning")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--stage1-only", action="store_true")
    g.add_argument("--stage2-only", action="store_true")
    g.add_argument("--ablation")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="HitRatio@1 / ValidRatio report for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--mode", choices=["generative", "ranking"], default="generative")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("ablate", help="ablation matrix over several seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--matrix", required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("selftest", help="gradient, InfoNCE and protocol invariant checks")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .alignment import MissingCheckpointError
    from .data import DataError
    from .eval import UnknownAblationError
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"rsllm: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(message)s")
    try:
        rc = args.fn(args)
        return int(rc or 0)
    except (UsageError, ConfigError, DataError, UnknownAblationError, MissingCheckpointError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"rsllm: error: {msg}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"rsllm: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
