"""A tiny pre-norm causal transformer LM with LoRA adapters.

Token ids are split in two blocks: word-level text tokens first, then one
``[IID{k}]`` token per catalog item. The two blocks live in separate
embedding tables (``tok_emb`` and ``iid_emb``) so that stage-1 fine-tuning can
train item-ID rows without touching the text rows. The output head is tied
to their concatenation.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (AdamState, ContractError, LayerNorm, Linear, Module, Parameter, Tensor, adam_step,
                   backward, no_grad, ops, reset_graph)
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.nn import normal

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, DSR = "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[DSR]"
SPECIALS = (PAD, BOS, EOS, UNK, DSR)
_WORD = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, text_tokens: Sequence[str], n_items: int):
        self.tokens = list(text_tokens) + [f"[IID{i}]" for i in range(n_items)]
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.ids:
                raise ValueError(f"special token {s} missing")
        self.n_text = len(text_tokens)
        self.n_items = n_items
        self.pad, self.bos, self.eos, self.unk, self.dsr = (self.ids[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.tokens)

    def iid(self, item: int) -> int:
        if not 0 <= item < self.n_items:
            raise KeyError(f"item index {item} outside catalog of {self.n_items}")
        return self.n_text + item

    def is_iid(self, token_id: int) -> bool:
        return token_id >= self.n_text

    def encode(self, text: str) -> list[int]:
        return [self.ids.get(w, self.unk) for w in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = [self.tokens[i] for i in ids if i not in (self.pad, self.bos, self.eos)]
        return " ".join(words)

    def render(self, text: str) -> str:
        """The string a perfect generator would emit for ``text``."""
        return self.decode(self.encode(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, t in enumerate(self.tokens):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = [line.rsplit("\t", 1) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        toks = [t for t, _ in sorted(rows, key=lambda r: int(r[1]))]
        n_items = sum(1 for t in toks if re.fullmatch(r"\[IID\d+\]", t))
        return cls(toks[:len(toks) - n_items], n_items)


def build_vocabulary(titles: Sequence[str], template_text: str = "") -> Vocabulary:
    """Sorted lowercase words from titles and template plus digits, after the special tokens."""
    words = set(split_words(template_text))
    for t in titles:
        words.update(split_words(t))
    words.update("0123456789")
    words.add(",")
    words -= {s.lower() for s in SPECIALS}
    return Vocabulary(list(SPECIALS) + sorted(words), len(titles))


# ---------------------------------------------------------------- model

class _Block(Module):
    def __init__(self, d, rng):
        self.ln1 = LayerNorm(d)
        self.wq = Parameter(normal(rng, (d, d)))
        self.wk = Parameter(normal(rng, (d, d)))
        self.wv = Parameter(normal(rng, (d, d)))
        self.wo = Parameter(normal(rng, (d, d), 0.02 / math.sqrt(2)))
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, 4 * d, rng)
        self.ff2 = Linear(4 * d, d, rng, std=0.02 / math.sqrt(2))


class _LoRAPair(Module):
    def __init__(self, d, rank, rng):
        self.q_a = Parameter(normal(rng, (d, rank)))
        self.q_b = Parameter(np.zeros((rank, d)))
        self.v_a = Parameter(normal(rng, (d, rank)))
        self.v_b = Parameter(np.zeros((rank, d)))


class LoRAAdapter(Module):
    """Low-rank deltas on every block's query and value projections."""

    def __init__(self, n_blocks: int, d: int, rank: int, alpha: float, rng):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.blocks = [_LoRAPair(d, rank, rng) for _ in range(n_blocks)]
        self._rank, self._alpha = rank, alpha
        self.enabled = True

    @property
    def scaling(self) -> float:
        return self._alpha / self._rank

    @property
    def rank(self) -> int:
        return self._rank


@dataclass
class LMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context: int = 256
    dropout: float = 0.0


class TinyLM(Module):
    def __init__(self, vocab_size: int, n_items: int, config: LMConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.tok_emb = Parameter(normal(rng, (vocab_size - n_items, d)))
        self.iid_emb = Parameter(normal(rng, (n_items, d)))
        self.pos_emb = Parameter(normal(rng, (config.context, d)))
        self.blocks = [_Block(d, rng) for _ in range(config.n_layers)]
        self.ln_f = LayerNorm(d)
        self._config = config
        self._lora: LoRAAdapter | None = None

    @property
    def config(self) -> LMConfig:
        return self._config

    @property
    def lora(self) -> LoRAAdapter | None:
        return self._lora

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.shape[0] + self.iid_emb.shape[0]

    def table(self) -> Tensor:
        return ops.concat([self.tok_emb, self.iid_emb], axis=0)

    def embed_ids(self, ids) -> Tensor:
        return ops.embedding(self.table(), ids)

    def _weights(self, i: int):
        blk = self.blocks[i]
        wq, wv = blk.wq, blk.wv
        lora = self._lora
        if lora is not None and lora.enabled:
            pair = lora.blocks[i]
            wq = ops.add(wq, ops.mul(ops.matmul(pair.q_a, pair.q_b), lora.scaling))
            wv = ops.add(wv, ops.mul(ops.matmul(pair.v_a, pair.v_b), lora.scaling))
        return wq, blk.wk, wv, blk.wo

    def hidden(self, emb: Tensor, valid=None, train: bool = False, rng=None) -> Tensor:
        if emb.ndim == 2:
            emb = ops.reshape(emb, (1,) + emb.shape)
        B, T, d = emb.shape
        if T > self._config.context:
            raise ContractError(f"lm_forward: sequence length {T} exceeds context {self._config.context}")
        if d != self._config.d_model:
            raise ContractError(f"lm_forward: embedding size {d} != d_model {self._config.d_model}")
        p = self._config.dropout
        x = ops.add(emb, self.pos_emb[:T])
        x = ops.dropout(x, p, rng, train)
        mask = ops.causal_mask(T, valid=valid)
        for i, blk in enumerate(self.blocks):
            wq, wk, wv, wo = self._weights(i)
            a = ops.causal_self_attention(blk.ln1(x), wq, wk, wv, wo, self._config.n_heads, mask)
            x = ops.add(x, ops.dropout(a, p, rng, train))
            f = blk.ff2(ops.gelu(blk.ff1(blk.ln2(x))))
            x = ops.add(x, ops.dropout(f, p, rng, train))
        return self.ln_f(x)

    def logits(self, hidden: Tensor) -> Tensor:
        return ops.matmul(hidden, ops.transpose(self.table()))


def lm_forward(model: TinyLM, emb: Tensor, valid=None, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Final-layer-norm hidden states ``[B, T, d]`` and next-token logits ``[B, T, V]``."""
    h = model.hidden(emb, valid, train, rng)
    return h, model.logits(h)


def apply_lora(model: TinyLM, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> LoRAAdapter:
    """Attach adapters (A ~ N(0, 0.02), B = 0) and freeze every base parameter."""
    if model.lora is not None:
        raise ValueError("LoRA already applied; call remove_lora first")
    cfg = model.config
    adapter = LoRAAdapter(cfg.n_layers, cfg.d_model, rank, alpha, np.random.default_rng(seed))
    model.set_trainable(False)
    model._lora = adapter
    return adapter


def remove_lora(model: TinyLM) -> None:
    model._lora = None


# ---------------------------------------------------------------- generation

def _np_layer_norm(x: np.ndarray, ln: LayerNorm) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + ln._eps)
    return xc * inv * ln.gain.data + ln.shift.data


class _KVCache:
    """Per-layer key/value buffers ``[B, H, L, dh]`` plus a filled-slot mask."""

    def __init__(self, n_layers, B, H, L, dh):
        self.k = [np.zeros((B, H, L, dh)) for _ in range(n_layers)]
        self.v = [np.zeros((B, H, L, dh)) for _ in range(n_layers)]
        self.filled = np.zeros((B, L), dtype=bool)


def _cached_forward(model: TinyLM, weights, x: np.ndarray, pos: np.ndarray, cache: _KVCache) -> np.ndarray:
    """Forward ``x[B, t, d]`` whose tokens sit at absolute positions ``pos[B, t]``.

    Keys and values are written into ``cache`` at those positions; every query
    sees the filled slots at or before its own position.
    """
    cfg = model.config
    B, t, d = x.shape
    H = cfg.n_heads
    dh = d // H
    rows = np.arange(B)[:, None]
    x = x + model.pos_emb.data[pos]
    cache.filled[rows, pos] = True
    L = cache.filled.shape[1]
    allowed = cache.filled[:, None, :] & (np.arange(L)[None, None, :] <= pos[:, :, None])  # [B, t, L]
    scale = 1.0 / math.sqrt(dh)
    for i, blk in enumerate(model.blocks):
        wq, wk, wv, wo = weights[i]
        h = _np_layer_norm(x, blk.ln1)
        q, k, v = (np.swapaxes((h @ w).reshape(B, t, H, dh), 1, 2) for w in (wq, wk, wv))
        K, V = cache.k[i], cache.v[i]
        K[rows, :, pos] = np.swapaxes(k, 1, 2)
        V[rows, :, pos] = np.swapaxes(v, 1, 2)
        sc = (q @ np.swapaxes(K, -1, -2)) * scale
        sc = np.where(allowed[:, None], sc, -1e30)
        sc = sc - sc.max(axis=-1, keepdims=True)
        p = np.exp(sc)
        p /= p.sum(axis=-1, keepdims=True)
        o = np.swapaxes(p @ V, 1, 2).reshape(B, t, d)
        x = x + o @ wo
        f = ops.gelu(Tensor(_np_layer_norm(x, blk.ln2) @ blk.ff1.weight.data + blk.ff1.bias.data)).data
        x = x + f @ blk.ff2.weight.data + blk.ff2.bias.data
    return _np_layer_norm(x, model.ln_f)


def generate_batch(model: TinyLM, prompts: Sequence[np.ndarray], max_new_tokens: int, eos: int) -> list[list[int]]:
    """Greedy decoding for several prompts given as ``[T_i, d]`` embedding arrays.

    Argmax ties resolve to the lowest token id. New tokens are embedded with the
    token table only. Keys and values are cached, so each new token costs one
    single-position pass.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    ctx = model.config.context
    lens = np.array([p.shape[0] for p in prompts])
    if lens.max() + max_new_tokens > ctx:
        raise ContractError(f"generate: prompt of {lens.max()} tokens + {max_new_tokens} new exceeds context {ctx}")
    cfg = model.config
    B, d, T = len(prompts), cfg.d_model, int(lens.max())
    L = T + max_new_tokens
    buf = np.zeros((B, T, d))
    for b, p in enumerate(prompts):
        buf[b, :len(p)] = p
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with no_grad():
        table = model.table().data
        weights = [tuple(w.data for w in model._weights(i)) for i in range(cfg.n_layers)]
    cache = _KVCache(cfg.n_layers, B, cfg.n_heads, L, d // cfg.n_heads)
    pos = np.broadcast_to(np.arange(T), (B, T)).copy()
    h = _cached_forward(model, weights, buf, pos, cache)
    # padding slots were written during the prompt pass; only real tokens count as filled
    cache.filled[:] = np.arange(L)[None, :] < lens[:, None]
    last = h[np.arange(B), lens - 1]
    for step in range(max_new_tokens):
        nxt = np.argmax(last @ table.T, axis=-1)
        for b in np.flatnonzero(~done):
            tok = int(nxt[b])
            out[b].append(tok)
            if tok == eos:
                done[b] = True
        if done.all() or step == max_new_tokens - 1:
            break
        x = table[nxt][:, None, :]
        last = _cached_forward(model, weights, x, lens[:, None], cache)[:, 0]
        lens = lens + 1
    return out


def generate(model: TinyLM, prompt: np.ndarray, max_new_tokens: int, vocab: Vocabulary) -> tuple[list[int], str]:
    ids = generate_batch(model, [np.asarray(prompt)], max_new_tokens, vocab.eos)[0]
    return ids, vocab.decode(ids)


# ---------------------------------------------------------------- pretraining and checkpoints

@dataclass
class PretrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 3e-3
    warmup_fraction: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0
    bucket_pool: int = 1    # >1: draw pool * batch_size texts, train on a run of similar lengths


def pad_token_batch(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        valid[b, :len(s)] = True
    return ids, valid


def pretrain_lm(model: TinyLM, corpus: Sequence[Sequence[int]], config: PretrainConfig, pad: int) -> list[float]:
    """Plain next-token training of every base parameter on ``corpus`` token lists."""
    if model.lora is not None:
        raise ValueError("pretrain_lm runs on the base model; remove LoRA first")
    model.set_trainable(True)
    params = model.registry("lm")
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr, warmup_fraction=config.warmup_fraction, total_steps=config.steps,
                      weight_decay=config.weight_decay)
    losses = []
    B = min(config.batch_size, len(corpus))
    pool = min(len(corpus) // B, max(1, config.bucket_pool)) * B
    for step in range(config.steps):
        idx = rng.choice(len(corpus), size=pool, replace=False)
        if pool > B:
            idx = idx[np.argsort([len(corpus[i]) for i in idx], kind="stable")]
            start = B * int(rng.integers(0, pool // B))  # aligned chunks keep every text equally likely
            idx = idx[start:start + B]
        batch = [corpus[i] for i in idx]
        ids, valid = pad_token_batch(batch, pad)
        reset_graph()
        model.zero_grad()
        h = model.hidden(model.embed_ids(ids[:, :-1]), valid[:, :-1], train=True, rng=rng)
        tgt_mask = valid[:, 1:]
        b_idx, t_idx = np.nonzero(tgt_mask)
        logits = model.logits(h[b_idx, t_idx])
        loss = ops.cross_entropy(logits, ids[:, 1:][b_idx, t_idx])
        backward(loss, params)
        adam_step(params, state)
        losses.append(float(loss.data))
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    reset_graph()
    model.zero_grad()
    return losses


def lm_state(model: TinyLM) -> dict[str, np.ndarray]:
    state = model.state_dict("lm")
    if model.lora is not None:
        state.update(model.lora.state_dict("lora"))
    return state


def save_lm(path, model: TinyLM) -> None:
    cfg = model.config
    meta = {"meta.lm.d_model": cfg.d_model, "meta.lm.n_layers": cfg.n_layers, "meta.lm.n_heads": cfg.n_heads,
            "meta.lm.context": cfg.context, "meta.lm.vocab_size": model.vocab_size,
            "meta.lm.n_items": model.iid_emb.shape[0]}
    if model.lora is not None:
        meta["meta.lora.rank"] = model.lora.rank
        meta["meta.lora.alpha"] = model.lora._alpha
    tensors = {k: np.array(float(v)) for k, v in meta.items()}
    tensors.update(lm_state(model))
    save_checkpoint(path, tensors)


def load_lm(path) -> TinyLM:
    t = load_checkpoint(path)
    cfg = LMConfig(int(t["meta.lm.d_model"]), int(t["meta.lm.n_layers"]), int(t["meta.lm.n_heads"]),
                   int(t["meta.lm.context"]))
    model = TinyLM(int(t["meta.lm.vocab_size"]), int(t["meta.lm.n_items"]), cfg)
    model.load_state_dict({k: v for k, v in t.items() if k.startswith("lm.")}, "lm")
    if "meta.lora.rank" in t:
        apply_lora(model, int(t["meta.lora.rank"]), float(t["meta.lora.alpha"]))
        model.lora.load_state_dict({k: v for k, v in t.items() if k.startswith("lora.")}, "lora")
    return model
