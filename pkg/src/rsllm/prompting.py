"""Text-ID and Hybrid prompts and their encoding into LM input embeddings.

An item mention renders as ``<title tokens> [DSR] <id marker>``. In Text-ID
mode the marker is the item's ``[IID{k}]`` token; in Hybrid mode it is an
item slot, filled at encoding time by the projected backbone embedding of
that item.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ContractError, Linear, Module, Parameter, Tensor, ops
from .lm import TinyLM, Vocabulary

DEFAULT_TEMPLATE = (
    "This user has watched {history} in the previous. Please predict the next {noun} this user will watch. "
    "The {noun} title candidates are {candidates}, recommend one {noun} for this user to watch next. "
    "The {noun} title you recommend is"
)


class PromptMode(str, enum.Enum):
    TEXT_ID = "TEXT_ID"
    HYBRID = "HYBRID"


class Role(enum.IntEnum):
    TEMPLATE = 0
    HISTORY_TEXT = 1
    HISTORY_SLOT = 2
    CANDIDATE_TEXT = 3
    CANDIDATE_SLOT = 4
    TARGET = 5


@dataclass(frozen=True)
class RenderOptions:
    """Ablation switches: drop titles, drop the ID part, or spell IDs as digits.

    ``answer_id`` makes the expected answer name the item's ID marker before
    its title (``[IID7] : <title>``); it has no effect when ``item_ids`` is off.
    """
    titles: bool = True
    item_ids: bool = True
    id_style: str = "iid"  # "iid" or "digits"
    answer_id: bool = False


@dataclass
class PromptTemplate:
    head: str
    middle: str
    tail: str
    separator: str = ","

    @classmethod
    def from_text(cls, text: str, noun: str = "movie") -> "PromptTemplate":
        text = text.replace("{noun}", noun)
        if text.count("{history}") != 1 or text.count("{candidates}") != 1:
            raise ValueError("template needs exactly one {history} and one {candidates} hole")
        head, rest = text.split("{history}")
        middle, tail = rest.split("{candidates}")
        if "{" in head + middle + tail:
            raise ValueError("template has unknown holes")
        return cls(head, middle, tail)

    @classmethod
    def default(cls, noun: str = "movie") -> "PromptTemplate":
        return cls.from_text(DEFAULT_TEMPLATE, noun)

    @classmethod
    def load(cls, path, noun: str = "movie") -> "PromptTemplate":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), noun)

    @property
    def text(self) -> str:
        return f"{self.head}{{history}}{self.middle}{{candidates}}{self.tail}"


@dataclass
class PromptTokenStream:
    """Parallel per-position arrays; ``slot_item[j] >= 0`` marks an ItemSlot."""
    ids: list[int]
    slot_item: list[int]
    roles: list[int]
    target: int
    target_ids: list[int]
    mode: PromptMode

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_slots(self) -> int:
        return sum(1 for s in self.slot_item if s >= 0)

    def elements(self) -> list[tuple[str, int]]:
        return [("slot", s) if s >= 0 else ("text", i) for i, s in zip(self.ids, self.slot_item)]


def _title_ids(vocab: Vocabulary, titles: Sequence[str], item: int) -> list[int]:
    try:
        return vocab.encode(titles[item])
    except IndexError:
        raise KeyError(f"unknown item index {item}") from None


def _id_tokens(vocab: Vocabulary, item: int, options: RenderOptions) -> list[int]:
    if options.id_style == "digits":
        return [vocab.ids[ch] for ch in str(item)]
    return [vocab.iid(item)]


def answer_ids(vocab: Vocabulary, titles: Sequence[str], item: int,
               options: RenderOptions = RenderOptions()) -> list[int]:
    """Expected answer tokens for ``item``, EOS excluded."""
    title = _title_ids(vocab, titles, item)
    if options.answer_id and options.item_ids:
        return _id_tokens(vocab, item, options) + [vocab.ids[":"]] + title
    return title


def strip_answer_id(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Drop a leading ``<id tokens> :`` from generated ids, if present."""
    ids = list(ids)
    colon = vocab.ids.get(":")
    if colon not in ids:
        return ids
    k = ids.index(colon)
    head = ids[:k]
    if head and all(vocab.is_iid(t) or vocab.tokens[t].isdigit() for t in head):
        return ids[k + 1:]
    return ids


def _build(history, candidates, target, template: PromptTemplate, vocab: Vocabulary, titles,
           mode: PromptMode, options: RenderOptions) -> PromptTokenStream:
    if target not in candidates:
        raise ValueError("target item must be among the candidates")
    ids, slots, roles = [vocab.bos], [-1], [int(Role.TEMPLATE)]

    def text(s: str, role=Role.TEMPLATE):
        for t in vocab.encode(s):
            ids.append(t)
            slots.append(-1)
            roles.append(int(role))

    def mention(item: int, text_role: Role, slot_role: Role):
        if not 0 <= item < vocab.n_items:
            raise KeyError(f"unknown item index {item}")
        if options.titles:
            for t in _title_ids(vocab, titles, item):
                ids.append(t)
                slots.append(-1)
                roles.append(int(text_role))
        if not options.item_ids:
            return
        ids.append(vocab.dsr)
        slots.append(-1)
        roles.append(int(text_role))
        if mode is PromptMode.HYBRID:
            ids.append(vocab.pad)
            slots.append(item)
            roles.append(int(slot_role))
        else:
            for t in _id_tokens(vocab, item, options):
                ids.append(t)
                slots.append(-1)
                roles.append(int(slot_role))

    def listing(items, text_role, slot_role):
        for k, it in enumerate(items):
            if k:
                text(template.separator)
            mention(int(it), text_role, slot_role)

    text(template.head)
    listing(history, Role.HISTORY_TEXT, Role.HISTORY_SLOT)
    text(template.middle)
    listing(candidates, Role.CANDIDATE_TEXT, Role.CANDIDATE_SLOT)
    text(template.tail)
    target_ids = answer_ids(vocab, titles, int(target), options) + [vocab.eos]
    return PromptTokenStream(ids, slots, roles, int(target), target_ids, mode)


def build_text_id_prompt(history, candidates, target, template: PromptTemplate, vocab: Vocabulary,
                         titles: Sequence[str], options: RenderOptions = RenderOptions()) -> PromptTokenStream:
    return _build(history, candidates, target, template, vocab, titles, PromptMode.TEXT_ID, options)


def build_hybrid_prompt(history, candidates, target, template: PromptTemplate, vocab: Vocabulary,
                        titles: Sequence[str], options: RenderOptions = RenderOptions()) -> PromptTokenStream:
    return _build(history, candidates, target, template, vocab, titles, PromptMode.HYBRID, options)


def build_prompt(mode: PromptMode, *args, **kwargs) -> PromptTokenStream:
    return _build_fn[PromptMode(mode)](*args, **kwargs)


_build_fn = {PromptMode.TEXT_ID: build_text_id_prompt, PromptMode.HYBRID: build_hybrid_prompt}


def item_stream(item: int, vocab: Vocabulary, titles: Sequence[str], mode: PromptMode,
                options: RenderOptions = RenderOptions()) -> PromptTokenStream:
    """``[BOS] <mention>`` for one item: the standalone target-item tower input."""
    ids, slots, roles = [vocab.bos], [-1], [int(Role.TEMPLATE)]
    if options.titles:
        t = _title_ids(vocab, titles, item)
        ids += t
        slots += [-1] * len(t)
        roles += [int(Role.CANDIDATE_TEXT)] * len(t)
    if options.item_ids:
        ids.append(vocab.dsr)
        slots.append(-1)
        roles.append(int(Role.CANDIDATE_TEXT))
        if mode is PromptMode.HYBRID:
            ids.append(vocab.pad)
            slots.append(item)
        else:
            d = _id_tokens(vocab, item, options)
            ids += d
            slots += [-1] * len(d)
        while len(roles) < len(ids):
            roles.append(int(Role.CANDIDATE_SLOT))
    return PromptTokenStream(ids, slots, roles, item, [], mode)


# ---------------------------------------------------------------- projector and encoding

class Projector(Module):
    """``e_p = W2 ReLU(W1 e_s + b1) + b2``."""

    def __init__(self, d_in: int, d_model: int, seed: int = 0, std: float = 0.02):
        rng = np.random.default_rng(seed)
        self.fc1 = Linear(d_in, d_model, rng, std=std)
        self.fc2 = Linear(d_model, d_model, rng, std=std)
        self._d_in = d_in
        self.calls = 0

    @property
    def d_in(self) -> int:
        return self._d_in

    def __call__(self, e_s: Tensor) -> Tensor:
        if e_s.shape[-1] != self._d_in:
            raise ContractError(f"projector: input size {e_s.shape[-1]} != {self._d_in}")
        self.calls += int(np.prod(e_s.shape[:-1]))
        return self.fc2(ops.relu(self.fc1(e_s)))


def project(e_s, projector: Projector) -> Tensor:
    return projector(e_s if isinstance(e_s, Tensor) else Tensor(np.asarray(e_s, dtype=np.float64)))


class AdapterRows:
    """Source of e_s rows: a frozen exported table, or a trainable Parameter."""

    def __init__(self, matrix, trainable: bool = False, name: str = "adapter.item_emb"):
        self.param = Parameter(np.asarray(matrix, dtype=np.float64), name=name, trainable=trainable)

    @property
    def d(self) -> int:
        return self.param.shape[1]

    @property
    def trainable(self) -> bool:
        return self.param.requires_grad

    def rows(self, items) -> Tensor:
        items = np.asarray(items, dtype=np.int64)
        if self.param.requires_grad:
            return ops.embedding(self.param, items)
        return Tensor(self.param.data[items])


@dataclass
class EncodedBatch:
    embeddings: Tensor      # [B, T, d]
    valid: np.ndarray       # [B, T] bool
    roles: np.ndarray       # [B, T] int, -1 on padding
    lengths: np.ndarray     # [B] prompt(+teacher-forced target) lengths
    prompt_lengths: np.ndarray
    target_ids: list[list[int]]


@dataclass
class EncodedPrompt:
    embeddings: Tensor      # [T, d]
    roles: np.ndarray       # [T]
    target_ids: list[int]
    mode: PromptMode

    def __len__(self) -> int:
        return self.roles.shape[0]


def encode_batch(streams: Sequence[PromptTokenStream], lm: TinyLM, projector: Projector | None = None,
                 adapter: AdapterRows | None = None, with_target: bool = False) -> EncodedBatch:
    """Embed a batch of streams (right-padded); slots get ``projector(adapter rows)``.

    With ``with_target`` the target tokens except the final one are appended
    for teacher forcing and tagged ``Role.TARGET``.
    """
    seqs, slot_lists, role_lists, plens = [], [], [], []
    for s in streams:
        ids, slots, roles = list(s.ids), list(s.slot_item), list(s.roles)
        plens.append(len(ids))
        if with_target:
            tail = s.target_ids[:-1]
            ids += tail
            slots += [-1] * len(tail)
            roles += [int(Role.TARGET)] * len(tail)
        seqs.append(ids)
        slot_lists.append(slots)
        role_lists.append(roles)
    B, T = len(seqs), max(len(x) for x in seqs)
    if T > lm.config.context:
        raise ContractError(f"encode: prompt of {T} tokens exceeds LM context {lm.config.context}")
    V = lm.vocab_size
    ids = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    roles = np.full((B, T), -1, dtype=np.int64)
    slot_items, slot_pos = [], []
    for b, (x, sl, rl) in enumerate(zip(seqs, slot_lists, role_lists)):
        n = len(x)
        ids[b, :n] = x
        valid[b, :n] = True
        roles[b, :n] = rl
        for t, it in enumerate(sl):
            if it >= 0:
                slot_pos.append((b, t))
                slot_items.append(it)
    table = lm.table()
    if slot_items:
        if projector is None or adapter is None:
            raise ContractError("HYBRID encoding needs a projector and an adapter table")
        proj = projector(adapter.rows(slot_items))
        table = ops.concat([table, proj], axis=0)
        for k, (b, t) in enumerate(slot_pos):
            ids[b, t] = V + k
    emb = ops.embedding(table, ids)
    return EncodedBatch(emb, valid, roles, valid.sum(axis=1), np.array(plens), [list(s.target_ids) for s in streams])


def encode_prompt(stream: PromptTokenStream, lm: TinyLM, projector: Projector | None = None,
                  adapter: AdapterRows | None = None, mode: PromptMode | None = None) -> EncodedPrompt:
    mode = PromptMode(mode or stream.mode)
    if mode is PromptMode.HYBRID and (projector is None or adapter is None):
        raise ContractError("HYBRID mode requires a projector and adapter table")
    if mode is PromptMode.TEXT_ID and stream.n_slots:
        raise ContractError("TEXT_ID encoding received a stream with item slots")
    enc = encode_batch([stream], lm, projector, adapter)
    return EncodedPrompt(ops.reshape(enc.embeddings, enc.embeddings.shape[1:]), enc.roles[0],
                         list(stream.target_ids), mode)


COPY_HEAD = "here is a list :"
LOOKUP_CUE = ". repeat"


def lookup_sequence(vocab: Vocabulary, titles: Sequence[str], items, query: int) -> list[int]:
    """Generic lookup text: ``here is a list : m1 , m2 ... . repeat [IIDq] : <title q>``."""
    ids = [vocab.bos] + vocab.encode(COPY_HEAD)
    for k, it in enumerate(items):
        if k:
            ids += vocab.encode(",")
        ids += item_stream(int(it), vocab, titles, PromptMode.TEXT_ID).ids[1:]
    return (ids + vocab.encode(LOOKUP_CUE) + [vocab.iid(query), vocab.ids[":"]] + _title_ids(vocab, titles, query)
            + [vocab.eos])


def pretraining_corpus(vocab: Vocabulary, titles: Sequence[str], template: PromptTemplate, n_prompts: int,
                       history_range: tuple[int, int], n_candidates: int, seed: int,
                       n_lookup: int = 0, lookup_range: tuple[int, int] = (2, 30)) -> list[list[int]]:
    """Base-LM corpus.

    Every item mention on its own; ``n_prompts`` recommendation prompts over
    random items that stop at the cue and then emit EOS (the base model learns
    the template's wording but never answers it); and ``n_lookup`` lookup
    texts in a different frame, which teach the model to find a listed item by
    its ID token and spell its title.
    """
    rng = np.random.default_rng(seed)
    corpus = []
    n = len(titles)
    for i in range(n):
        s = item_stream(i, vocab, titles, PromptMode.TEXT_ID)
        corpus.append(s.ids + [vocab.eos])
    for _ in range(n_prompts):
        k = int(rng.integers(history_range[0], history_range[1] + 1))
        items = rng.choice(n, size=k + n_candidates, replace=False)
        hist, cands = items[:k], items[k:]
        s = build_text_id_prompt(hist, cands, int(cands[0]), template, vocab, titles)
        corpus.append(s.ids + [vocab.eos])
    for _ in range(n_lookup):
        k = int(rng.integers(lookup_range[0], lookup_range[1] + 1))
        items = rng.choice(n, size=min(k, n), replace=False)
        corpus.append(lookup_sequence(vocab, titles, items, int(rng.choice(items))))
    return corpus
