"""Interaction logs, chronological user sequences, splits and candidate sets."""
from __future__ import annotations

import hashlib
import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_SEQUENCE_LENGTH = 3
CANDIDATE_SIZE = 20


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float | None
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("interaction with empty user or item id")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


class ItemCatalog:
    """Item ids in catalog order; ``index`` is dense and stable from 0."""

    def __init__(self, item_ids: Sequence[str], titles: Sequence[str]):
        if len(item_ids) != len(titles):
            raise DataError("item ids and titles differ in length")
        self.item_ids = list(item_ids)
        self.titles = list(titles)
        self.index = {iid: i for i, iid in enumerate(self.item_ids)}
        if len(self.index) != len(self.item_ids):
            raise DataError("duplicate item ids in catalog")
        for iid, t in zip(self.item_ids, self.titles):
            if not t.strip():
                raise DataError(f"item {iid!r} has an empty title")

    def __len__(self) -> int:
        return len(self.item_ids)

    def title(self, index: int) -> str:
        return self.titles[index]


@dataclass
class UserSequence:
    user_id: str
    items: list[int]
    timestamps: list[int]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Example:
    """One (history, next item) pair. ``history`` is already truncated."""
    user_id: str
    history: tuple[int, ...]
    target: int
    position: int  # index of the target inside the user's full sequence
    seen: frozenset[int] = field(default=frozenset(), compare=False, repr=False)  # whole sequence
    prior: frozenset[int] = field(default=frozenset(), compare=False, repr=False)  # untruncated prefix


@dataclass
class Split:
    train: list[Example]
    validation: list[Example]
    test: list[Example]
    max_history: int


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[int, ...]
    ground_truth_position: int

    @property
    def target(self) -> int:
        return self.candidates[self.ground_truth_position]


@dataclass(frozen=True)
class DatasetStats:
    sequences: int
    items: int
    interactions: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.interactions / (self.sequences * self.items)

    def as_dict(self) -> dict:
        return {"sequences": self.sequences, "items": self.items,
                "interactions": self.interactions, "sparsity": self.sparsity}


@dataclass
class LoadReport:
    lines: int = 0
    dropped_unknown_items: int = 0


# ---------------------------------------------------------------- loading

def _parse_log_line(cols: list[str], lineno: int, path) -> Interaction:
    if len(cols) != 4:
        raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(cols)}")
    user, item, rating, ts = cols
    try:
        timestamp = int(ts)
    except ValueError:
        raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
    try:
        r = float(rating) if rating.strip() else None
    except ValueError:
        raise DataError(f"{path}:{lineno}: rating {rating!r} is not a number") from None
    try:
        return Interaction(user.strip(), item.strip(), r, timestamp)
    except DataError as exc:
        raise DataError(f"{path}:{lineno}: {exc}") from None


def load_catalog(path, fmt: str = "tsv") -> ItemCatalog:
    ids, titles = [], []
    if fmt == "tsv":
        text, sep = Path(path).read_text(encoding="utf-8"), "\t"
    elif fmt == "ml-100k":
        text, sep = Path(path).read_text(encoding="latin-1"), "|"
    else:
        raise DataError(f"unknown format {fmt!r} (expected 'tsv' or 'ml-100k')")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split(sep)
        if len(cols) < 2:
            raise DataError(f"{path}:{lineno}: expected item_id and title")
        ids.append(cols[0].strip())
        titles.append(cols[1].strip())
    if not ids:
        raise EmptyDatasetError(f"{path}: empty catalog")
    return ItemCatalog(ids, titles)


def load_interactions(path, catalog_path, fmt: str = "tsv") -> tuple[list[Interaction], ItemCatalog, LoadReport]:
    """Parse an interaction log and its catalog.

    ``fmt='tsv'`` reads ``user\\titem\\trating\\tts`` plus ``item\\ttitle``;
    ``fmt='ml-100k'`` reads the MovieLens-100k ``u.data`` / ``u.item`` pair,
    whose log already has that column order. Log items missing from the
    catalog are dropped and counted. Any malformed line fails the whole load.
    """
    catalog = load_catalog(catalog_path, fmt)
    text = Path(path).read_text(encoding="utf-8")
    report = LoadReport()
    out: list[Interaction] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        report.lines += 1
        it = _parse_log_line(line.split("\t"), lineno, path)
        if it.item_id not in catalog.index:
            report.dropped_unknown_items += 1
            continue
        out.append(it)
    if report.lines == 0:
        raise EmptyDatasetError(f"{path}: no interactions")
    if report.dropped_unknown_items:
        log.warning("dropped %d interactions with items missing from the catalog", report.dropped_unknown_items)
    return out, catalog, report


def write_dataset(directory, interactions: Iterable[Interaction], catalog: ItemCatalog) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "interactions.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for it in interactions:
            rating = "" if it.rating is None else repr(float(it.rating))
            fh.write(f"{it.user_id}\t{it.item_id}\t{rating}\t{it.timestamp}\n")
    with open(d / "catalog.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for iid, title in zip(catalog.item_ids, catalog.titles):
            fh.write(f"{iid}\t{title}\n")


# ---------------------------------------------------------------- sequences and splits

def build_sequences(interactions: Iterable[Interaction], catalog: ItemCatalog,
                    min_length: int = MIN_SEQUENCE_LENGTH) -> tuple[list[UserSequence], int]:
    """One sequence per user ordered by (timestamp, item index); returns (kept, n_dropped)."""
    per_user: dict[str, list[tuple[int, int]]] = {}
    for it in interactions:
        per_user.setdefault(it.user_id, []).append((it.timestamp, catalog.index[it.item_id]))
    kept, dropped = [], 0
    for user in sorted(per_user):
        events = sorted(per_user[user])
        if len(events) < min_length:
            dropped += 1
            continue
        kept.append(UserSequence(user, [i for _, i in events], [t for t, _ in events]))
    if dropped:
        log.info("dropped %d users with fewer than %d interactions", dropped, min_length)
    return kept, dropped


def split_leave_one_out(sequences: Sequence[UserSequence], max_history: int = 10) -> Split:
    """Leave-one-out roles per user.

    For ``[a, b, c, d]``: test is ``([a, b, c], d)``, validation ``([a, b], c)``,
    and training holds every pair whose target precedes the test target,
    ``([a], b)`` and ``([a, b], c)``. Histories keep the latest ``max_history`` items.
    """
    train, val, test = [], [], []
    for seq in sequences:
        if len(seq) < MIN_SEQUENCE_LENGTH:
            raise DataError(f"user {seq.user_id!r} has only {len(seq)} interactions")
        seen = frozenset(seq.items)
        items = seq.items

        def ex(pos):
            return Example(seq.user_id, tuple(items[max(0, pos - max_history):pos]), items[pos], pos, seen,
                           frozenset(items[:pos]))

        n = len(items)
        test.append(ex(n - 1))
        val.append(ex(n - 2))
        train.extend(ex(pos) for pos in range(1, n - 1))
    return Split(train, val, test, max_history)


def _stable_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def sample_candidates(example: Example, n_items: int, seed: int, size: int = CANDIDATE_SIZE,
                      salt: str = "") -> CandidateSet:
    """Ground truth plus ``size - 1`` items the user never interacted with, shuffled.

    Deterministic in (user_id, target position, seed, salt).
    """
    seen = example.seen or frozenset(example.history) | {example.target}
    eligible = np.array([i for i in range(n_items) if i not in seen and i != example.target], dtype=np.int64)
    if len(eligible) < size - 1:
        raise DataError(f"user {example.user_id!r}: need {size - 1} non-interacted items, "
                        f"only {len(eligible)} of {n_items} eligible")
    rng = np.random.default_rng(_stable_seed(seed, example.user_id, example.position, salt))
    picks = rng.choice(eligible, size=size - 1, replace=False)
    cands = np.concatenate([[example.target], picks])
    rng.shuffle(cands)
    cands = tuple(int(c) for c in cands)
    return CandidateSet(cands, cands.index(example.target))


def candidate_sets(examples: Sequence[Example], n_items: int, seed: int, size: int = CANDIDATE_SIZE,
                   salt: str = "") -> list[CandidateSet]:
    return [sample_candidates(e, n_items, seed, size, salt) for e in examples]


def compute_stats(sequences: Sequence[UserSequence], catalog: ItemCatalog | int) -> DatasetStats:
    n_items = catalog if isinstance(catalog, int) else len(catalog)
    return DatasetStats(len(sequences), n_items, int(sum(len(s) for s in sequences)))


def dataset_hash(sequences: Sequence[UserSequence], catalog: ItemCatalog) -> str:
    h = hashlib.sha256()
    for iid, t in zip(catalog.item_ids, catalog.titles):
        h.update(f"{iid}\t{t}\n".encode("utf-8"))
    for s in sequences:
        h.update(f"{s.user_id}:{','.join(map(str, s.items))}:{','.join(map(str, s.timestamps))}\n".encode())
    return h.hexdigest()


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    n_items: int = 200
    n_sequences: int = 2000
    length_range: tuple[int, int] = (5, 15)
    peak_probability: float | None = 0.9
    concentration: float | None = None
    transitions: list[list[float]] | None = None
    title_vocab_size: int = 400
    title_length_range: tuple[int, int] = (2, 4)
    seed: int = 7

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("length_range", "title_length_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticDataset:
    interactions: list[Interaction]
    catalog: ItemCatalog
    transitions: np.ndarray


def transition_matrix(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_items
    if spec.transitions is not None:
        T = np.asarray(spec.transitions, dtype=np.float64)
    elif spec.peak_probability is not None:
        # One dominant successor per item along a single random cycle, remainder spread uniformly.
        order = rng.permutation(n)
        succ = np.empty(n, dtype=np.int64)
        succ[order] = np.roll(order, -1)
        rest = (1.0 - spec.peak_probability) / (n - 1)
        T = np.full((n, n), rest)
        T[np.arange(n), succ] = spec.peak_probability
    elif spec.concentration is not None:
        T = rng.dirichlet(np.full(n, spec.concentration), size=n)
    else:
        T = np.full((n, n), 1.0 / n)
    if T.shape != (n, n) or np.any(T < 0) or np.max(np.abs(T.sum(axis=1) - 1.0)) > 1e-9:
        raise DataError("transition matrix must be row-stochastic with shape (n_items, n_items)")
    return T


def _pseudo_words(rng: np.random.Generator, count: int) -> list[str]:
    consonants, vowels = "bdfgklmnprstvz", "aeiou"
    words: set[str] = set()
    out = []
    while len(out) < count:
        n_syl = int(rng.integers(2, 4))
        w = "".join(consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
                    for _ in range(n_syl))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """First-order Markov walks over items with seeded pseudo-word titles."""
    rng = np.random.default_rng(spec.seed)
    T = transition_matrix(spec, rng)
    vocab = _pseudo_words(rng, spec.title_vocab_size)
    lo, hi = spec.title_length_range
    titles = []
    for i in range(spec.n_items):
        k = int(rng.integers(lo, hi + 1))
        words = [vocab[j] for j in rng.choice(len(vocab), size=k, replace=False)]
        titles.append(" ".join(words + [str(i)]).capitalize())
    catalog = ItemCatalog([f"i{i}" for i in range(spec.n_items)], titles)
    cdf = np.cumsum(T, axis=1)
    interactions = []
    width = len(str(spec.n_sequences))
    for u in range(spec.n_sequences):
        length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        cur = int(rng.integers(spec.n_items))
        t0 = int(rng.integers(0, 10_000)) * 100
        for step in range(length):
            interactions.append(Interaction(f"u{u:0{width}d}", f"i{cur}", None, t0 + step))
            cur = min(int(np.searchsorted(cdf[cur], rng.random(), side="right")), spec.n_items - 1)
    return SyntheticDataset(interactions, catalog, T)


def write_synthetic(directory, ds: SyntheticDataset) -> None:
    write_dataset(directory, ds.interactions, ds.catalog)
    Path(directory, "transitions.json").write_text(json.dumps(ds.transitions.tolist()), encoding="utf-8")


def load_transitions(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text(encoding="utf-8")), dtype=np.float64)


def bayes_posterior(example: Example, cset: CandidateSet, T: np.ndarray) -> np.ndarray:
    """Exact posterior over candidate positions for a Markov walk.

    Distractors are never drawn from the user's history, so a candidate that
    already appears in the prefix must be the ground truth; otherwise the
    posterior is proportional to the transition row of the last item.
    """
    prior = example.prior or frozenset(example.history)
    in_prefix = np.array([c in prior for c in cset.candidates])
    if in_prefix.any():
        return in_prefix / in_prefix.sum()
    p = T[example.history[-1], list(cset.candidates)]
    return p / p.sum()


def bayes_oracle(examples: Sequence[Example], cands: Sequence[CandidateSet], T: np.ndarray
                 ) -> tuple[float, float]:
    """(realised, expected) HitRatio@1 of the Bayes-optimal candidate picker.

    The expected value is the upper bound on any predictor's mean HitRatio@1.
    Ties go to the earliest candidate position.
    """
    hits, expected = 0, 0.0
    for e, c in zip(examples, cands):
        post = bayes_posterior(e, c, T)
        pick = int(np.argmax(post))
        hits += pick == c.ground_truth_position
        expected += float(post[pick])
    n = len(examples)
    return hits / n, expected / n


def bayes_hit_ratio(examples: Sequence[Example], cands: Sequence[CandidateSet], T: np.ndarray) -> float:
    return bayes_oracle(examples, cands, T)[0]


def bayes_catalog_accuracy(examples: Sequence[Example], T: np.ndarray) -> float:
    """Accuracy of ``argmax_j T[last, j]`` against the full catalog."""
    return float(np.mean([int(np.argmax(T[e.history[-1]])) == e.target for e in examples]))
