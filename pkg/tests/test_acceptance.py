"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL verdict line (shown in the pytest terminal
summary) before asserting, so a failing criterion still reports its numbers.
Run directly with ``python tests/test_acceptance.py`` to get only the lines.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from rsllm.alignment import LossConfig, StageConfig, TrainSet, info_nce, run_stage, total_loss
from rsllm.backbones import BackboneTrainConfig, hit_ratio, init_backbone, train_backbone
from rsllm.cli import main
from rsllm.config import RunConfig
from rsllm.core import Tensor, finite_difference_check
from rsllm.core.gradcases import primitive_cases
from rsllm.data import (CandidateSet, DatasetStats, Example, SyntheticSpec, bayes_oracle, build_sequences,
                        candidate_sets, generate_synthetic, split_leave_one_out)
from rsllm.selftest import (CHI2_19_P01, TABLE3, candidate_protocol, infonce_equal_cosine, infonce_orthonormal,
                            infonce_permutation_gap, infonce_rescaling_gap, micro_model, objective_gradient_error)

try:
    from conftest import CRITERIA
except ImportError:  # run as a script
    CRITERIA = []


def verdict(n: int, ok: bool, text: str, status: str | None = None) -> bool:
    line = f"criterion {n}: {status or ('PASS' if ok else 'FAIL')} {text}"
    CRITERIA.append(line)
    print(line)
    return ok


def test_criterion_1_gradient_soundness():
    t = time.perf_counter()
    worst_prim, worst_name = 0.0, ""
    for name, params, f in primitive_cases(np.random.default_rng(0)):
        err = finite_difference_check(f, params, eps=1e-3, order=4)
        if err >= worst_prim:
            worst_prim, worst_name = err, name
    full = objective_gradient_error(seed=0, max_coords=40)
    elapsed = time.perf_counter() - t
    ok = worst_prim < 1e-6 and full < 1e-4 and elapsed < 120
    assert verdict(1, ok, f"worst primitive {worst_name} {worst_prim:.2e} (<1e-6), full objective {full:.2e} "
                          f"(<1e-4), {elapsed:.1f}s (<120s)")


def test_criterion_2_infonce_suite():
    equal = {N: infonce_equal_cosine(N) for N in (2, 4, 8)}
    single = abs(float(info_nce(Tensor([[1.0, 2.0]]), Tensor([[3.0, -1.0]]), 0.5).data))
    ortho = infonce_orthonormal()
    rescale = max(infonce_rescaling_gap(s) for s in range(5))
    perm = max(infonce_permutation_gap(s) for s in range(5))
    ok = (max(equal.values()) < 1e-10 and single < 1e-10 and abs(ortho - math.log1p(math.exp(-2))) < 1e-10
          and rescale < 1e-10 and perm < 1e-10)
    assert verdict(2, ok, f"|loss - ln N| max {max(equal.values()):.1e}, N=1 loss {single:.1e}, "
                          f"orthonormal {ortho:.5f} vs {math.log1p(math.exp(-2)):.5f}, rescale gap {rescale:.1e}, "
                          f"permutation gap {perm:.1e}")


def _nip_only_run(compute_zero_terms: bool):
    model, _ = micro_model(3)
    train = [Example("a", (0, 1), 3, 2), Example("b", (5,), 0, 1), Example("c", (2, 4), 1, 2),
             Example("d", (3,), 4, 1)]
    cands = [CandidateSet((2, 3, 4), 1), CandidateSet((1, 4, 0), 2), CandidateSet((1, 0, 5), 0),
             CandidateSet((4, 2, 1), 0)]
    data = TrainSet(train, cands, train[:2], cands[:2])
    res = run_stage(model, data, StageConfig(1, epochs=2, batch_size=2, lr=1e-2),
                    LossConfig(0.0, 0.0), seed=5, compute_zero_terms=compute_zero_terms)
    return res.step_losses, model.state()


def test_criterion_3_objective_composition():
    value = total_loss(1, 2, 3, LossConfig(0.3, 0.4))
    (la, a), (lb, b) = _nip_only_run(True), _nip_only_run(False)
    same = la == lb and a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    ok = value == 2.8 and same
    assert verdict(3, ok, f"total_loss(1,2,3) = {value!r} (== 2.8), gamma=beta=0 training matches NIP-only "
                          f"bit-for-bit: {same}")


def test_criterion_4_protocol_fidelity():
    p = candidate_protocol(n_users=2000, seed=0)
    sparsity = {k: round(DatasetStats(u, i, n).sparsity, 3) for k, (u, i, n, _) in TABLE3.items()}
    sparsity_ok = all(sparsity[k] == v[3] for k, v in TABLE3.items())
    ok = (p["n"] >= 2000 and p["violations"] == 0 and p["chi2"] < CHI2_19_P01
          and abs(p["random_hit_ratio"] - 0.05) <= 0.02 and sparsity_ok)
    assert verdict(4, ok, f"{p['n']} users, {p['violations']} invariant violations, chi2 {p['chi2']:.1f} "
                          f"(< {CHI2_19_P01}, p > 0.01), random HR@1 {p['random_hit_ratio']:.4f}, "
                          f"sparsity {sparsity}")


def test_criterion_5_backbone_learning():
    t = time.perf_counter()
    ds = generate_synthetic(SyntheticSpec())
    seqs, _ = build_sequences(ds.interactions, ds.catalog)
    split = split_leave_one_out(seqs)
    n = len(ds.catalog)
    vc = candidate_sets(split.validation, n, 0, salt="val")
    tc = candidate_sets(split.test, n, 0, salt="test")
    realised, expected = bayes_oracle(split.test, tc, ds.transitions)
    hrs = {}
    for kind in ("GRU4REC", "CASER", "SASREC"):
        model = init_backbone(kind, n, 64, seed=0, max_history=10)
        train_backbone(model, split.train, BackboneTrainConfig(epochs=5, lr=1e-3, batch_size=128),
                       split.validation, vc)
        hrs[kind] = hit_ratio(model, split.test, tc)
    elapsed = time.perf_counter() - t
    ok = min(hrs.values()) >= 0.15 and max(hrs.values()) <= realised and elapsed < 600
    pretty = ", ".join(f"{k} {v:.4f}" for k, v in hrs.items())
    assert verdict(5, ok, f"test HR@1 {pretty} (>= 0.15), Bayes oracle {realised:.4f} "
                          f"(expected {expected:.4f}), {elapsed:.0f}s (< 600s)")


# --------------------------------------------------------------- criterion 6

C6_KEYS = ("full", "wo_contrastive", "stage1_only", "wo_textual_feature")
C6_SEEDS = (0, 1, 2, 3, 4)


def test_criterion_6_directional_reproduction():
    from rsllm.pipeline import build_rec_model, evaluate_model, prepare_data, pretrain_base, run_ablation_matrix
    t = time.perf_counter()
    cfg = RunConfig.from_dict({"preset": "desk"})
    data = prepare_data(cfg)
    base, vocab, _ = pretrain_base(cfg, data)
    untuned = evaluate_model(cfg, data, build_rec_model(cfg, base, vocab, data.titles, None, seed=0),
                             "untuned", 0)
    table, _ = run_ablation_matrix(cfg, C6_KEYS, C6_SEEDS, data=data, base=(base, vocab))
    rows = {r.model: r for r in table.rows}
    stage1_valid = rows["stage1_only"].valid_ratio_mean
    elapsed = time.perf_counter() - t
    full = rows["full"].hit_ratio_at_1_mean
    others = {k: rows[k].hit_ratio_at_1_mean for k in C6_KEYS[1:]}
    ok = (all(full > v for v in others.values()) and stage1_valid >= 0.9 and untuned.valid_ratio < 0.2
          and elapsed < 45 * 60)
    pretty = ", ".join(f"{k} {v:.4f}" for k, v in others.items())
    assert verdict(6, ok, f"mean HR@1 full {full:.4f} vs {pretty}; ValidRatio stage-1 {stage1_valid:.3f} "
                          f"(>= 0.9), untuned {untuned.valid_ratio:.3f} (< 0.2); {elapsed / 60:.1f} min (< 45)")


# --------------------------------------------------------------- criterion 7

ML100K = os.environ.get("RSLLM_ML100K")


def test_criterion_7_movielens_baseline():
    if not ML100K or not (Path(ML100K) / "u.data").exists():
        verdict(7, False, "MovieLens-100k not found (set RSLLM_ML100K to the ml-100k directory)", "NOT RUN")
        pytest.skip("MovieLens-100k not available")
    from rsllm.pipeline import fit_backbone, manifest, prepare_data
    t = time.perf_counter()
    root = Path(ML100K)
    cfg = RunConfig.from_dict({"preset": "desk", "backbone": {"kind": "gru4rec"},
                               "data": {"interactions": str(root / "u.data"), "catalog": str(root / "u.item"),
                                        "format": "ml-100k", "max_history": 10, "train_pairs_per_user": 0,
                                        "validation_users": 0, "test_users": 0}})
    data = prepare_data(cfg)
    run = fit_backbone(cfg, data)
    elapsed = time.perf_counter() - t
    ok = abs(run.test_hit_ratio - 0.375) <= 0.08
    doc = manifest(cfg, data, {"test_hit_ratio": run.test_hit_ratio, "seconds": elapsed})
    verdict(7, ok, f"GRU4Rec HR@1 {run.test_hit_ratio:.4f} (target 0.375 +/- 0.08), {elapsed:.0f}s; "
                   f"manifest {json.dumps(doc, sort_keys=True)[:200]}")
    # band misses are reported, not blocking; the runtime bound is
    assert elapsed < 20 * 60


# --------------------------------------------------------------- criterion 8

DET = {
    "preset": "desk",
    "seed": 0,
    "data": {"synthetic": {"n_items": 40, "n_sequences": 80, "length_range": [5, 8], "seed": 3},
             "max_history": 3, "validation_users": 10, "test_users": 20},
    "backbone": {"kind": "sasrec", "d": 8, "epochs": 1},
    "lm": {"d_model": 16, "context": 256, "pretrain_steps": 8, "pretrain_batch_size": 4, "pretrain_prompts": 8,
           "lookup_sequences": 8, "short_list_steps": 2, "lora_rank": 2},
    "stage1": {"epochs": 1, "batch_size": 16},
    "stage2": {"epochs": 1, "batch_size": 16},
    "eval": {"max_new_tokens": 4},
}


def _run_chain(root: Path) -> dict[str, bytes]:
    out = root / "run"
    cfg = root / "config.json"
    cfg.write_text(json.dumps(dict(DET, output_dir=str(out))))
    for cmd in ("train-backbone", "pretrain-lm", "train"):
        assert main([cmd, "--config", str(cfg)]) == 0
    for mode in ("generative", "ranking"):
        assert main(["evaluate", "--checkpoint", str(out / "stage2.ckpt"), "--mode", mode,
                     "--out", str(out / "eval")]) == 0
    keep = ("manifest.json", "config.json")
    files = {p.name: p.read_bytes() for p in out.iterdir() if p.name in keep}
    files.update({f"eval/{p.name}": p.read_bytes() for p in (out / "eval").iterdir()})
    return files


def test_criterion_8_determinism(tmp_path):
    first = _run_chain(tmp_path)
    second = _run_chain(tmp_path)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = not differing and len(first) >= 6
    assert verdict(8, ok, f"{len(first)} manifest/report files byte-identical across reruns"
                          + (f"; differing: {differing}" if differing else ""))


if __name__ == "__main__":
    import tempfile
    for name, fn in list(globals().items()):
        if name.startswith("test_criterion"):
            try:
                if name == "test_criterion_8_determinism":
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except (AssertionError, pytest.skip.Exception):
                pass
