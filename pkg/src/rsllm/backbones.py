"""Traditional sequential recommenders (GRU4Rec, Caser, SASRec).

They serve as standalone baselines and as the Adapter whose item embedding
table feeds the hybrid prompt encoder. All three score the next item as
``user_repr @ item_emb.T`` with the output head tied to the input table.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import AdamState, Linear, LayerNorm, Module, Parameter, Tensor, adam_step, backward, no_grad, ops
from .core import reset_graph
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.nn import normal
from .data import CandidateSet, Example

log = logging.getLogger(__name__)


class BackboneKind(str, enum.Enum):
    GRU4REC = "GRU4REC"
    CASER = "CASER"
    SASREC = "SASREC"


_KIND_CODE = {BackboneKind.GRU4REC: 0, BackboneKind.CASER: 1, BackboneKind.SASREC: 2}


def pad_histories(histories: Sequence[Sequence[int]], max_len: int, align: str = "right"):
    """Integer ids ``[B, L]`` (pad id 0), validity mask and lengths.

    ``align='right'`` puts items at positions ``0..len-1`` (padding after);
    ``'left'`` right-justifies them so the last item sits at ``L - 1``.
    """
    B = len(histories)
    ids = np.zeros((B, max_len), dtype=np.int64)
    mask = np.zeros((B, max_len), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for b, h in enumerate(histories):
        h = list(h)[-max_len:]
        if not h:
            raise ValueError("backbone_forward: empty history")
        n = len(h)
        lengths[b] = n
        if align == "right":
            ids[b, :n] = h
            mask[b, :n] = True
        else:
            ids[b, max_len - n:] = h
            mask[b, max_len - n:] = True
    return ids, mask, lengths


class Backbone(Module):
    kind: BackboneKind

    def __init__(self, n_items: int, d: int, max_history: int, rng: np.random.Generator):
        if d < 1:
            raise ValueError("embedding dimension must be >= 1")
        self._n_items, self._d, self._max_history = n_items, d, max_history
        self.item_emb = Parameter(normal(rng, (n_items, d)))

    @property
    def n_items(self) -> int:
        return self._n_items

    @property
    def d(self) -> int:
        return self._d

    @property
    def max_history(self) -> int:
        return self._max_history

    def _embed(self, ids, mask) -> Tensor:
        if ids.size and ids.max() >= self._n_items:
            raise ValueError(f"item index out of range for {self._n_items} items")
        return ops.mul(ops.embedding(self.item_emb, ids), mask[..., None].astype(np.float64))

    def encode(self, histories: Sequence[Sequence[int]], train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def forward(self, histories, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        user = self.encode(histories, train=train, rng=rng)
        return user, ops.matmul(user, ops.transpose(self.item_emb))


class GRU4Rec(Backbone):
    kind = BackboneKind.GRU4REC

    def __init__(self, n_items, d, max_history, rng, dropout: float = 0.0):
        super().__init__(n_items, d, max_history, rng)
        self.w_ih = Parameter(normal(rng, (d, 3 * d), 1.0 / math.sqrt(d)))
        self.w_hh = Parameter(normal(rng, (d, 3 * d), 1.0 / math.sqrt(d)))
        self.b_ih = Parameter(np.zeros(3 * d))
        self.b_hh = Parameter(np.zeros(3 * d))
        self._dropout = dropout

    def encode(self, histories, train=False, rng=None):
        ids, mask, _ = pad_histories(histories, self.max_history, "right")
        x = ops.dropout(self._embed(ids, mask), self._dropout, rng, train)
        B = ids.shape[0]
        h = Tensor(np.zeros((B, self.d)))
        for t in range(ids.shape[1]):
            m = mask[:, t]
            if not m.any():
                break
            h_new = ops.gru_cell(x[:, t], h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
            h = ops.add(h, ops.mul(ops.sub(h_new, h), m[:, None].astype(np.float64)))
        return h


class Caser(Backbone):
    """Horizontal filters of heights 1..L (``n_h`` each) plus ``n_v`` vertical filters."""

    kind = BackboneKind.CASER

    def __init__(self, n_items, d, max_history, rng, n_h: int = 4, n_v: int = 4, dropout: float = 0.0):
        super().__init__(n_items, d, max_history, rng)
        L = max_history
        self.h_filters = [Parameter(normal(rng, (n_h, h, d), 1.0 / math.sqrt(h * d))) for h in range(1, L + 1)]
        self.h_bias = [Parameter(np.zeros(n_h)) for _ in range(L)]
        self.v_filter = Parameter(normal(rng, (n_v, L, 1), 1.0 / math.sqrt(L)))
        self.fc = Linear(n_h * L + n_v * d, d, rng, std=1.0 / math.sqrt(n_h * L + n_v * d))
        self._dropout = dropout

    def encode(self, histories, train=False, rng=None):
        ids, mask, _ = pad_histories(histories, self.max_history, "left")
        E = self._embed(ids, mask)  # [B, L, d]
        B = ids.shape[0]
        feats = []
        for w, b in zip(self.h_filters, self.h_bias):
            c = ops.relu(ops.conv2d(E, w, b))  # [B, n_h, L-h+1, 1]
            c = ops.reshape(c, (B, c.shape[1], c.shape[2]))
            feats.append(ops.max(c, axis=2))
        v = ops.conv2d(E, self.v_filter)  # [B, n_v, 1, d]
        feats.append(ops.reshape(v, (B, -1)))
        z = ops.dropout(ops.concat(feats, axis=1), self._dropout, rng, train)
        return ops.relu(self.fc(z))


class _SASBlock(Module):
    def __init__(self, d, rng):
        std = 1.0 / math.sqrt(d)
        self.ln1 = LayerNorm(d)
        self.wq = Parameter(normal(rng, (d, d), std))
        self.wk = Parameter(normal(rng, (d, d), std))
        self.wv = Parameter(normal(rng, (d, d), std))
        self.wo = Parameter(normal(rng, (d, d), std))
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, d, rng, std=std)
        self.ff2 = Linear(d, d, rng, std=std)


class SASRec(Backbone):
    kind = BackboneKind.SASREC

    def __init__(self, n_items, d, max_history, rng, n_blocks: int = 2, n_heads: int = 2, dropout: float = 0.0):
        super().__init__(n_items, d, max_history, rng)
        self.pos_emb = Parameter(normal(rng, (max_history, d)))
        self.blocks = [_SASBlock(d, rng) for _ in range(n_blocks)]
        self.ln_f = LayerNorm(d)
        self._n_heads, self._dropout = n_heads, dropout

    def encode(self, histories, train=False, rng=None):
        ids, mask, lengths = pad_histories(histories, self.max_history, "right")
        B, L = ids.shape
        x = ops.add(ops.mul(self._embed(ids, mask), math.sqrt(self.d)), self.pos_emb)
        x = ops.dropout(x, self._dropout, rng, train)
        attn_mask = ops.causal_mask(L, valid=mask)
        for blk in self.blocks:
            a = ops.causal_self_attention(blk.ln1(x), blk.wq, blk.wk, blk.wv, blk.wo, self._n_heads, attn_mask)
            x = ops.add(x, ops.dropout(a, self._dropout, rng, train))
            f = blk.ff2(ops.relu(blk.ff1(blk.ln2(x))))
            x = ops.add(x, ops.dropout(f, self._dropout, rng, train))
        x = self.ln_f(x)
        return x[np.arange(B), lengths - 1]


_CLASSES = {BackboneKind.GRU4REC: GRU4Rec, BackboneKind.CASER: Caser, BackboneKind.SASREC: SASRec}


def init_backbone(kind: BackboneKind | str, n_items: int, d: int = 64, seed: int = 0,
                  max_history: int = 10, **kwargs) -> Backbone:
    kind = BackboneKind(kind)
    return _CLASSES[kind](n_items, d, max_history, np.random.default_rng(seed), **kwargs)


def backbone_forward(model: Backbone, history: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Representation ``[d]`` and logits ``[n_items]`` for one history."""
    if len(history) == 0:
        raise ValueError("backbone_forward: empty history")
    with no_grad():
        user, logits = model.forward([history])
    return user.data[0], logits.data[0]


def _rank_candidates(logits_row: np.ndarray, cset: CandidateSet) -> list[tuple[int, float]]:
    scored = [(int(c), float(logits_row[c])) for c in cset.candidates]
    return sorted(scored, key=lambda cs: (-cs[1], cs[0]))


def score_candidates(model: Backbone, history: Sequence[int], cset: CandidateSet) -> list[tuple[int, float]]:
    """Candidates sorted by descending score, ties by item index."""
    _, logits = backbone_forward(model, history)
    return _rank_candidates(logits, cset)


def hit_ratio(model: Backbone, examples: Sequence[Example], cands: Sequence[CandidateSet],
              batch_size: int = 512) -> float:
    if not examples:
        raise ValueError("hit_ratio: no examples")
    hits = 0
    with no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = examples[s:s + batch_size]
            _, logits = model.forward([e.history for e in chunk])
            for row, e, c in zip(logits.data, chunk, cands[s:s + batch_size]):
                hits += _rank_candidates(row, c)[0][0] == e.target
    return hits / len(examples)


@dataclass
class BackboneTrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.0
    patience: int = 2
    seed: int = 0


@dataclass
class BackboneHistory:
    train_loss: list[float] = field(default_factory=list)
    val_hit_ratio: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -1.0


def train_backbone(model: Backbone, train: Sequence[Example], config: BackboneTrainConfig,
                   validation: Sequence[Example] | None = None,
                   val_cands: Sequence[CandidateSet] | None = None) -> tuple[Backbone, BackboneHistory]:
    """Full-softmax next-item cross-entropy with Adam; keeps the best-validation weights."""
    if not train:
        raise ValueError("train_backbone: empty training set")
    rng = np.random.default_rng(config.seed)
    params = model.registry("backbone")
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay,
                      total_steps=steps_per_epoch * config.epochs)
    hist = BackboneHistory()
    best_state = model.state_dict("backbone")
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(train), config.batch_size):
            batch = [train[i] for i in order[s:s + config.batch_size]]
            reset_graph()
            model.zero_grad()
            _, logits = model.forward([e.history for e in batch], train=True, rng=rng)
            loss = ops.cross_entropy(logits, np.array([e.target for e in batch]))
            backward(loss, params)
            adam_step(params, state)
            total += float(loss.data) * len(batch)
        reset_graph()
        hist.train_loss.append(total / len(train))
        if validation:
            hr = hit_ratio(model, validation, val_cands)
            hist.val_hit_ratio.append(hr)
            log.info("%s epoch %d loss %.4f val HR@1 %.4f", model.kind.value, epoch, hist.train_loss[-1], hr)
            if hr > hist.best_val:
                hist.best_val, hist.best_epoch, stale = hr, epoch, 0
                best_state = model.state_dict("backbone")
            else:
                stale += 1
                if stale > config.patience:
                    break
        else:
            hist.best_epoch = epoch
            best_state = model.state_dict("backbone")
    model.load_state_dict(best_state, "backbone")
    model.zero_grad()
    return model, hist


@dataclass(frozen=True)
class ItemEmbeddingTable:
    """Frozen copy of a backbone's item table; row i is item i."""
    matrix: np.ndarray
    kind: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def row(self, i: int) -> np.ndarray:
        return self.matrix[i]

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()


def export_item_embeddings(model: Backbone) -> ItemEmbeddingTable:
    m = np.array(model.item_emb.data, copy=True)
    m.setflags(write=False)
    return ItemEmbeddingTable(m, model.kind.value)


def save_backbone(path, model: Backbone) -> None:
    tensors = {"backbone.kind": np.array(float(_KIND_CODE[model.kind])),
               "backbone.n_items": np.array(float(model.n_items)),
               "backbone.d": np.array(float(model.d)),
               "backbone.max_history": np.array(float(model.max_history))}
    tensors.update(model.state_dict("backbone"))
    save_checkpoint(path, tensors)


def load_backbone(path) -> Backbone:
    t = load_checkpoint(path)
    code = int(t["backbone.kind"])
    kind = {v: k for k, v in _KIND_CODE.items()}[code]
    model = init_backbone(kind, int(t["backbone.n_items"]), int(t["backbone.d"]), 0, int(t["backbone.max_history"]))
    model.load_state_dict({k: v for k, v in t.items() if k in model.registry("backbone")}, "backbone")
    return model


def save_item_embeddings(path, table: ItemEmbeddingTable) -> None:
    save_checkpoint(path, {"backbone.kind": np.array(float(_KIND_CODE[BackboneKind(table.kind)])),
                           "adapter.item_emb": table.matrix})


def load_item_embeddings(path) -> ItemEmbeddingTable:
    t = load_checkpoint(path)
    kind = {v: k for k, v in _KIND_CODE.items()}[int(t["backbone.kind"])]
    m = t["adapter.item_emb"]
    m.setflags(write=False)
    return ItemEmbeddingTable(m, kind.value)
