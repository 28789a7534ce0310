"""Invariant suite behind ``rsllm selftest``."""
from __future__ import annotations

import math
import sys
from typing import Callable

import numpy as np

from .alignment import LossConfig, RecModel, batch_loss, info_nce, total_loss
from .core import Parameter, Tensor, finite_difference_check, ops
from .core.gradcases import primitive_cases
from .data import (DatasetStats, Example, SyntheticSpec, build_sequences, candidate_sets, generate_synthetic,
                   split_leave_one_out)
from .eval import MatchRule, match_candidate
from .lm import LMConfig, TinyLM, apply_lora, build_vocabulary
from .prompting import AdapterRows, Projector, PromptMode, PromptTemplate, RenderOptions, build_prompt

CHI2_19_P01 = 36.191  # chi-square critical value, 19 degrees of freedom, upper 1%


def micro_model(seed: int = 0) -> tuple[RecModel, list]:
    """A miniature LM + projector + adapter with a two-example hybrid batch, every parameter trainable."""
    rng = np.random.default_rng(seed)
    titles = ["red fox", "blue owl", "green cat", "grey wolf", "old bear", "tall pine"]
    template = PromptTemplate.from_text("seen {history} . options {candidates} . pick")
    vocab = build_vocabulary(titles, template.text)
    lm = TinyLM(len(vocab), len(titles), LMConfig(d_model=8, n_layers=2, n_heads=2, context=64), seed=seed)
    lora = apply_lora(lm, rank=2, alpha=4.0, seed=seed)
    for pair in lora.blocks:
        pair.q_b.data = rng.normal(scale=0.3, size=pair.q_b.shape)
        pair.v_b.data = rng.normal(scale=0.3, size=pair.v_b.shape)
    adapter = AdapterRows(rng.normal(size=(len(titles), 5)), trainable=True)
    model = RecModel(lm, vocab, titles, template, Projector(5, 8, seed=seed, std=0.3), adapter,
                     RenderOptions(), PromptMode.HYBRID)
    for p in model.parameters().values():
        p.trainable = True
    streams = [build_prompt(PromptMode.HYBRID, (0, 1), (2, 3, 4), 3, template, vocab, titles),
               build_prompt(PromptMode.HYBRID, (5,), (1, 4, 0), 0, template, vocab, titles)]
    return model, streams


def objective_gradient_error(seed: int = 0, max_coords: int = 12) -> float:
    """Worst finite-difference error of the full objective over every parameter group."""
    model, streams = micro_model(seed)
    cfg = LossConfig()
    params = model.parameters()
    return finite_difference_check(lambda: batch_loss(model, streams, cfg)[0], params, eps=1e-3,
                                   max_coords=max_coords, seed=seed, order=4)


def infonce_equal_cosine(N: int) -> float:
    q = Tensor(np.ones((N, 3)))
    return abs(float(info_nce(q, Tensor(np.ones((N, 3))), 0.5).data) - math.log(N))


def infonce_orthonormal() -> float:
    e = Tensor(np.eye(2))
    return float(info_nce(e, e, 0.5).data)


def _rand(seed, N=6, d=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(N, d)), rng.normal(size=(N, d)), rng


def infonce_rescaling_gap(seed: int = 0) -> float:
    q, k, rng = _rand(seed)
    base = float(info_nce(Tensor(q), Tensor(k), 0.5).data)
    s = rng.uniform(0.1, 10.0, size=(q.shape[0], 1))
    t = rng.uniform(0.1, 10.0, size=(k.shape[0], 1))
    return abs(float(info_nce(Tensor(q * s), Tensor(k * t), 0.5).data) - base)


def infonce_permutation_gap(seed: int = 0) -> float:
    q, k, rng = _rand(seed)
    perm = rng.permutation(q.shape[0])
    base = float(info_nce(Tensor(q), Tensor(k), 0.5).data)
    return abs(float(info_nce(Tensor(q[perm]), Tensor(k[perm]), 0.5).data) - base)


def candidate_protocol(n_users: int = 2000, seed: int = 0) -> dict:
    """Invariant violations and ground-truth-position chi-square over seeded synthetic users."""
    ds = generate_synthetic(SyntheticSpec(n_sequences=n_users, seed=11))
    seqs, _ = build_sequences(ds.interactions, ds.catalog)
    split = split_leave_one_out(seqs)
    cands = candidate_sets(split.test, len(ds.catalog), seed, salt="test")
    bad = 0
    for e, c in zip(split.test, cands):
        ok = (len(c.candidates) == 20 and len(set(c.candidates)) == 20 and c.target == e.target
              and not (set(c.candidates) - {e.target}) & e.seen)
        bad += not ok
    counts = np.bincount([c.ground_truth_position for c in cands], minlength=20)
    expected = len(cands) / 20
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    rng = np.random.default_rng(seed)
    random_hr = float(np.mean([rng.integers(20) == c.ground_truth_position for c in cands]))
    again = candidate_sets(split.test[:50], len(ds.catalog), seed, salt="test")
    return {"violations": bad, "chi2": chi2, "random_hit_ratio": random_hr, "n": len(cands),
            "deterministic": again == cands[:50]}


TABLE3 = {"MovieLens": (943, 1682, 100_000, 0.937), "Steam": (11_938, 3_581, 274_726, 0.994),
          "LastFM": (1_220, 4_606, 73_510, 0.987)}


def _checks() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = []
    rng = np.random.default_rng(0)
    for name, params, f in primitive_cases(rng):
        def run(params=params, f=f):
            err = finite_difference_check(f, params, eps=1e-3, order=4)
            return err < 1e-6, f"rel err {err:.2e}"
        checks.append((f"grad.{name}", run))

    def objective():
        err = objective_gradient_error()
        return err < 1e-4, f"rel err {err:.2e}"
    checks.append(("grad.full_objective", objective))

    for N in (2, 4, 8):
        checks.append((f"infonce.equal_cosine_N{N}", lambda N=N: (infonce_equal_cosine(N) < 1e-10, "")))
    checks.append(("infonce.single_pair_zero",
                   lambda: (abs(float(info_nce(Tensor([[1.0, 2.0]]), Tensor([[3.0, -1.0]]), 0.5).data)) < 1e-15, "")))
    checks.append(("infonce.orthonormal_N2",
                   lambda: (abs(infonce_orthonormal() - math.log1p(math.exp(-2.0))) < 1e-12,
                            f"{infonce_orthonormal():.6f}")))
    checks.append(("infonce.rescaling", lambda: (infonce_rescaling_gap() < 1e-10, "")))
    checks.append(("infonce.permutation", lambda: (infonce_permutation_gap() < 1e-10, "")))
    checks.append(("loss.composition", lambda: (total_loss(1.0, 2.0, 3.0, LossConfig(0.3, 0.4)) == 2.8, "")))

    proto: dict = {}

    def protocol():
        if not proto:
            proto.update(candidate_protocol())
        return proto

    checks.append(("candidates.invariants", lambda: (protocol()["violations"] == 0, f"{protocol()['n']} users")))
    checks.append(("candidates.uniform_position",
                   lambda: (protocol()["chi2"] < CHI2_19_P01, f"chi2 {protocol()['chi2']:.1f}")))
    checks.append(("candidates.random_hit_ratio",
                   lambda: (abs(protocol()["random_hit_ratio"] - 0.05) <= 0.02, f"{protocol()['random_hit_ratio']:.3f}")))
    checks.append(("candidates.deterministic", lambda: (protocol()["deterministic"], "")))
    for name, (u, i, n, want) in TABLE3.items():
        checks.append((f"stats.sparsity_{name}",
                       lambda u=u, i=i, n=n, want=want: (round(DatasetStats(u, i, n).sparsity, 3) == want, "")))
    rule = MatchRule()
    checks.append(("match.normalization", lambda: (match_candidate("  La La Land ", ["x", "La La Land"]) == 1
                                                   and match_candidate("Lalaland", ["La La Land"]) is None, "")))
    checks.append(("match.idempotent",
                   lambda: (all(rule.normalize(rule.normalize(s)) == rule.normalize(s)
                                for s in ("  A  b .", "x!!", "Foo (1999) .", " . ")), "")))
    return checks


def run_selftest(out=sys.stdout) -> bool:
    passed = failed = 0
    for name, check in _checks():
        try:
            ok, detail = check()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        passed += bool(ok)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""), file=out)
    print(f"{passed} passed, {failed} failed", file=out)
    return failed == 0
