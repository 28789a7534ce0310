"""HitRatio@1 / ValidRatio evaluation and ablation tables."""
from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .alignment import RecModel
from .core import Tensor, no_grad
from .data import CandidateSet, EmptyDatasetError, Example
from .lm import generate_batch
from .prompting import PromptMode, answer_ids, strip_answer_id

_TERMINAL = set(string.punctuation)


class EvalMode(str, enum.Enum):
    GENERATIVE = "generative"
    RANKING = "ranking"


@dataclass(frozen=True)
class MatchRule:
    lowercase: bool = True

    def normalize(self, text: str) -> str:
        """Lowercase, trim, collapse whitespace and strip trailing punctuation (idempotent)."""
        s = text.lower() if self.lowercase else text
        while True:
            s2 = " ".join(s.split())
            while s2 and s2[-1] in _TERMINAL:
                s2 = s2[:-1]
            s2 = s2.strip()
            if s2 == s:
                return s
            s = s2


def candidate_matches(generated: str, titles: Sequence[str], rule: MatchRule = MatchRule()) -> list[int]:
    g = rule.normalize(generated)
    return [i for i, t in enumerate(titles) if rule.normalize(t) == g]


def match_candidate(generated: str, titles: Sequence[str], rule: MatchRule = MatchRule()) -> int | None:
    """Position of the candidate whose normalised title equals ``generated``; the lowest on ties."""
    hits = candidate_matches(generated, titles, rule)
    return hits[0] if hits else None


@dataclass
class UserRecord:
    user_id: str
    target: int
    generated: str
    matched: int | None     # candidate position
    matched_item: int | None
    correct: bool
    ambiguous: bool = False


@dataclass
class EvalReport:
    dataset: str
    model: str
    mode: EvalMode
    hit_ratio_at_1: float
    valid_ratio: float
    seed: int
    records: list[UserRecord] = field(default_factory=list)

    @property
    def hit_ratio_valid_only(self) -> float:
        """HitRatio@1 with only valid answers in the denominator."""
        n_valid = sum(r.matched is not None for r in self.records)
        return sum(r.correct for r in self.records) / n_valid if n_valid else 0.0

    def summary(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "mode": self.mode.value,
                "hit_ratio_at_1": self.hit_ratio_at_1, "hit_ratio_at_1_valid_only": self.hit_ratio_valid_only,
                "valid_ratio": self.valid_ratio, "seed": self.seed, "n_users": len(self.records),
                "n_ambiguous": sum(r.ambiguous for r in self.records)}

    def to_json(self) -> str:
        doc = self.summary()
        doc["records"] = [dataclasses.asdict(r) for r in self.records]
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        s = self.summary()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(s))
        w.writerow([s[k] for k in s])
        return buf.getvalue()

    def save(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pj, pc = out / f"{stem}.json", out / f"{stem}.csv"
        pj.write_text(self.to_json())
        pc.write_text(self.to_csv())
        return pj, pc


def _check(examples, cands):
    if not examples:
        raise EmptyDatasetError("evaluation set is empty")
    if len(examples) != len(cands):
        raise ValueError("examples and candidate sets differ in length")


def generate_answers(model: RecModel, examples: Sequence[Example], cands: Sequence[CandidateSet],
                     mode: PromptMode | None = None, max_new_tokens: int = 12, batch_size: int = 64) -> list[str]:
    """Greedy answers (EOS excluded) for each prompt."""
    out = []
    with no_grad():
        for s in range(0, len(examples), batch_size):
            streams = [model.stream(e, c, mode) for e, c in zip(examples[s:s + batch_size], cands[s:s + batch_size])]
            enc = model.encode(streams)
            emb = enc.embeddings.data
            prompts = [emb[b, :n] for b, n in enumerate(enc.lengths)]
            for ids in generate_batch(model.lm, prompts, max_new_tokens, model.vocab.eos):
                out.append(model.vocab.decode(strip_answer_id(ids, model.vocab)))
    return out


def evaluate_generative(model: RecModel, examples: Sequence[Example], cands: Sequence[CandidateSet],
                        mode: PromptMode | None = None, max_new_tokens: int = 12, dataset: str = "",
                        tag: str = "", seed: int = 0, rule: MatchRule = MatchRule(),
                        batch_size: int = 64) -> EvalReport:
    _check(examples, cands)
    answers = generate_answers(model, examples, cands, mode, max_new_tokens, batch_size)
    records = []
    for e, c, text in zip(examples, cands, answers):
        titles = [model.vocab.render(model.titles[i]) for i in c.candidates]
        hits = candidate_matches(text, titles, rule)
        pos = hits[0] if hits else None
        item = c.candidates[pos] if pos is not None else None
        records.append(UserRecord(e.user_id, e.target, text, pos, item, item == e.target, len(hits) > 1))
    n = len(records)
    return EvalReport(dataset, tag, EvalMode.GENERATIVE, sum(r.correct for r in records) / n,
                      sum(r.matched is not None for r in records) / n, seed, records)


def candidate_log_likelihoods(model: RecModel, example: Example, cset: CandidateSet,
                              mode: PromptMode | None = None) -> np.ndarray:
    """Sum of log-probabilities of each candidate's answer tokens (EOS excluded) after the prompt."""
    base = model.stream(example, cset, mode)
    eos = model.vocab.eos
    streams, titles = [], []
    for it in cset.candidates:
        t = answer_ids(model.vocab, model.titles, int(it), model.options)
        titles.append(t)
        streams.append(dataclasses.replace(base, target=int(it), target_ids=t + [eos]))
    with no_grad():
        enc = model.encode(streams, with_target=True)
        h = model.lm.hidden(enc.embeddings, enc.valid).data
        table = model.lm.table().data
        scores = np.empty(len(streams))
        for k, (t, m) in enumerate(zip(titles, enc.prompt_lengths)):
            z = h[k, m - 1:m - 1 + len(t)] @ table.T
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            scores[k] = logp[np.arange(len(t)), t].sum()
    return scores


def evaluate_ranking(model: RecModel, examples: Sequence[Example], cands: Sequence[CandidateSet],
                     mode: PromptMode | None = None, dataset: str = "", tag: str = "", seed: int = 0) -> EvalReport:
    _check(examples, cands)
    records = []
    for e, c in zip(examples, cands):
        scores = candidate_log_likelihoods(model, e, c, mode)
        pos = int(np.argmax(scores))  # first maximum: earliest position wins ties
        item = c.candidates[pos]
        records.append(UserRecord(e.user_id, e.target, model.titles[item], pos, item, item == e.target))
    n = len(records)
    return EvalReport(dataset, tag, EvalMode.RANKING, sum(r.correct for r in records) / n, 1.0, seed, records)


# ---------------------------------------------------------------- ablations

ABLATIONS: dict[str, str] = {
    "full": "RSLLM",
    "wo_textual_feature": "w/o Textual Feature",
    "wo_item_id": "w/o Item ID Representation",
    "wo_iid_tokens": "w/o IID Tokens",
    "wo_preload_embeddings": "w/o Pre-loading item Embeddings",
    "ui_only": "RSLLM (U-I Only)",
    "ii_only": "RSLLM (I-I Only)",
    "wo_contrastive": "w/o Contrastive Alignment",
    "stage1_only": "Stage1 only",
    "stage2_only": "Stage2 only",
}


class UnknownAblationError(KeyError):
    pass


def check_ablation(key: str) -> str:
    if key not in ABLATIONS:
        raise UnknownAblationError(f"unknown ablation {key!r}; valid keys: {', '.join(ABLATIONS)}")
    return key


@dataclass
class AblationRow:
    model: str
    dataset: str
    mode: str
    seed_count: int
    hit_ratio_at_1_mean: float
    hit_ratio_at_1_std: float
    valid_ratio_mean: float
    valid_ratio_std: float


COLUMNS = ["model", "dataset", "mode", "seed_count", "hit_ratio_at_1_mean", "hit_ratio_at_1_std",
           "valid_ratio_mean", "valid_ratio_std"]


@dataclass
class AblationTable:
    rows: list[AblationRow]
    reports: dict[str, list[EvalReport]]

    def row(self, key: str) -> AblationRow:
        return next(r for r in self.rows if r.model == key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else f"{getattr(r, c):.4f}"
                        for c in COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'ablation':<24}{'label':<34}{'HR@1':>16}{'ValidRatio':>16}"]
        for r in self.rows:
            lines.append(f"{r.model:<24}{ABLATIONS.get(r.model, r.model):<34}"
                         f"{r.hit_ratio_at_1_mean:>9.4f} ±{r.hit_ratio_at_1_std:.3f}"
                         f"{r.valid_ratio_mean:>9.4f} ±{r.valid_ratio_std:.3f}")
        return "\n".join(lines) + "\n"


def _sample_std(x: np.ndarray) -> float:
    return float(x.std(ddof=1)) if len(x) > 1 else 0.0


def aggregate(reports: dict[str, list[EvalReport]]) -> AblationTable:
    """Mean and sample standard deviation (ddof=1) over seeds, per ablation key."""
    rows = []
    for key, reps in reports.items():
        hr = np.array([r.hit_ratio_at_1 for r in reps])
        vr = np.array([r.valid_ratio for r in reps])
        rows.append(AblationRow(key, reps[0].dataset, reps[0].mode.value, len(reps), float(hr.mean()),
                                _sample_std(hr), float(vr.mean()), _sample_std(vr)))
    return AblationTable(rows, reports)


def run_ablation(runner: Callable[[str, int], EvalReport], keys: Sequence[str], seeds: Sequence[int]) -> AblationTable:
    """Call ``runner(key, seed)`` for every ablation key and seed and aggregate the reports."""
    for k in keys:
        check_ablation(k)
    return aggregate({k: [runner(k, s) for s in seeds] for k in keys})
