"""Training objective and the two-stage fine-tuning procedure.

The objective per batch is ``L = L_N + gamma * L_I + beta * L_U``:

* ``L_N`` next-item prediction, the summed negative log-likelihood of the
  target title tokens, averaged over examples;
* ``L_I`` InfoNCE between the target item encoded alone (``g_I``) and the
  target tokens inside the full prompt (``g_I|U``);
* ``L_U`` InfoNCE between ``g_I`` and the pooled user history (``g_U``).

Stage 1 optimises it on Text-ID prompts (LoRA + item-ID token rows trainable),
stage 2 on Hybrid prompts (LoRA + projector trainable).
"""
from __future__ import annotations

import copy
import logging
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import AdamState, ContractError, Parameter, Tensor, adam_step, backward, ops, reset_graph
from .data import CandidateSet, Example
from .lm import TinyLM, Vocabulary, apply_lora
from .prompting import (AdapterRows, EncodedBatch, Projector, PromptMode, PromptTemplate, PromptTokenStream,
                        RenderOptions, Role, build_prompt, encode_batch, item_stream)

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    gamma: float = 0.3
    beta: float = 0.4
    tau: float = 0.5
    symmetric_infonce: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")


# ---------------------------------------------------------------- losses

@dataclass
class NIPBatch:
    """Per example: positions whose next-token logits predict the target tokens."""
    positions: list[np.ndarray]
    targets: list[list[int]]

    @classmethod
    def from_encoded(cls, enc: EncodedBatch) -> "NIPBatch":
        pos = [np.arange(m - 1, m - 1 + len(t)) for m, t in zip(enc.prompt_lengths, enc.target_ids)]
        return cls(pos, enc.target_ids)


def _nip_from_flat(logits: Tensor, batch: NIPBatch) -> Tensor:
    targets = np.concatenate([np.asarray(t, dtype=np.int64) for t in batch.targets])
    return ops.mul(ops.cross_entropy(logits, targets, reduction="sum"), 1.0 / len(batch.targets))


def _gather_index(batch: NIPBatch, T: int | None = None):
    for p, t in zip(batch.positions, batch.targets):
        if len(p) != len(t):
            raise ContractError(f"nip_loss: {len(t)} targets but {len(p)} prediction positions")
        if T is not None and len(p) and p.max() >= T:
            raise ContractError("nip_loss: prediction position beyond the logits")
    b = np.concatenate([np.full(len(p), i) for i, p in enumerate(batch.positions)])
    t = np.concatenate(batch.positions)
    return b.astype(np.int64), t.astype(np.int64)


def nip_loss(logits: Tensor, batch: NIPBatch) -> Tensor:
    """Summed target-token NLL per example, averaged over the batch; ``logits`` is ``[B, T, V]``."""
    b, t = _gather_index(batch, logits.shape[1])
    return _nip_from_flat(logits[b, t], batch)


def nip_loss_from_hidden(lm: TinyLM, hidden: Tensor, batch: NIPBatch) -> Tensor:
    """Same value as :func:`nip_loss` but projects only the needed positions onto the vocabulary."""
    b, t = _gather_index(batch, hidden.shape[1])
    return _nip_from_flat(lm.logits(hidden[b, t]), batch)


def info_nce(queries: Tensor, keys: Tensor, tau: float, symmetric: bool = False) -> Tensor:
    """``-(1/N) sum_i log softmax_j(cos(q_j, k_i) / tau)[j = i]``.

    The normaliser runs over queries for a fixed key. ``symmetric=True``
    switches to the usual form that runs over keys for a fixed query.
    """
    if queries.shape != keys.shape or queries.ndim != 2:
        raise ContractError(f"info_nce: expected matching [N, d] inputs, got {queries.shape} and {keys.shape}")
    N = queries.shape[0]
    sims = ops.mul(ops.cosine_matrix(queries, keys), 1.0 / tau)  # [j, i] = cos(q_j, k_i)
    logp = ops.log_softmax(sims, axis=1 if symmetric else 0)
    diag = logp[np.arange(N), np.arange(N)]
    return ops.mul(ops.sum(diag), -1.0 / N)


@dataclass
class TowerFeatures:
    g_item: Tensor        # [N, d] target item encoded alone
    g_item_user: Tensor   # [N, d] target tokens inside the full prompt
    g_user: Tensor        # [N, d] user-history span


def item_contrastive_loss(f: TowerFeatures, tau: float, symmetric: bool = False) -> Tensor:
    return info_nce(f.g_item_user, f.g_item, tau, symmetric)


def user_contrastive_loss(f: TowerFeatures, tau: float, symmetric: bool = False) -> Tensor:
    return info_nce(f.g_user, f.g_item, tau, symmetric)


def total_loss(l_nip, l_item, l_user, config: LossConfig):
    """``L_N + gamma * L_I + beta * L_U``; zero-weight terms may be passed as None.

    Plain numbers are combined exactly and rounded once, so e.g.
    ``total_loss(1, 2, 3)`` with (0.3, 0.4) is exactly 2.8.
    """
    if not any(isinstance(x, Tensor) for x in (l_nip, l_item, l_user)):
        exact = Fraction(l_nip)
        if config.gamma:
            exact += Fraction(config.gamma) * Fraction(l_item)
        if config.beta:
            exact += Fraction(config.beta) * Fraction(l_user)
        return float(exact)
    out = l_nip
    if config.gamma:
        out = out + config.gamma * l_item
    if config.beta:
        out = out + config.beta * l_user
    return out


def tower_features(lm: TinyLM, hidden: Tensor, roles: np.ndarray, item_hidden: Tensor,
                   item_valid: np.ndarray) -> TowerFeatures:
    """Mean-pool the towers from full-prompt and standalone-item hidden states.

    ``item_valid`` masks the standalone encodings; position 0 (BOS) is excluded
    from ``g_I``.
    """
    user_mask = np.isin(roles, (int(Role.HISTORY_TEXT), int(Role.HISTORY_SLOT)))
    target_mask = roles == int(Role.TARGET)
    item_mask = item_valid.copy()
    item_mask[:, 0] = False
    return TowerFeatures(ops.span_mean(item_hidden, item_mask), ops.span_mean(hidden, target_mask),
                         ops.span_mean(hidden, user_mask))


# ---------------------------------------------------------------- model bundle

@dataclass
class RecModel:
    """Everything needed to build, encode and score prompts."""
    lm: TinyLM
    vocab: Vocabulary
    titles: list[str]
    template: PromptTemplate
    projector: Projector | None = None
    adapter: AdapterRows | None = None
    options: RenderOptions = RenderOptions()
    mode: PromptMode = PromptMode.TEXT_ID

    def stream(self, example: Example, cset: CandidateSet, mode: PromptMode | None = None) -> PromptTokenStream:
        return build_prompt(mode or self.mode, example.history, cset.candidates, example.target, self.template,
                            self.vocab, self.titles, self.options)

    def encode(self, streams, with_target=False) -> EncodedBatch:
        return encode_batch(streams, self.lm, self.projector, self.adapter, with_target=with_target)

    def parameters(self) -> dict[str, Parameter]:
        reg = dict(self.lm.registry("lm"))
        if self.lm.lora is not None:
            reg.update(self.lm.lora.registry("lora"))
        if self.projector is not None:
            reg.update(self.projector.registry("projector"))
        if self.adapter is not None:
            reg[self.adapter.param.name] = self.adapter.param
        return reg

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            if k in state:
                p.data = state[k].copy()


def batch_loss(model: RecModel, streams: Sequence[PromptTokenStream], loss_cfg: LossConfig,
               train: bool = False, rng=None, compute_zero_terms: bool = False) -> tuple[Tensor, dict[str, float]]:
    """Combined objective on a batch of prompt streams."""
    enc = model.encode(streams, with_target=True)
    hidden = model.lm.hidden(enc.embeddings, enc.valid, train=train, rng=rng)
    nb = NIPBatch.from_encoded(enc)
    l_n = nip_loss_from_hidden(model.lm, hidden, nb)
    parts = {"nip": float(l_n.data)}
    need_towers = compute_zero_terms or loss_cfg.gamma or loss_cfg.beta
    l_i = l_u = None
    if need_towers:
        items = [item_stream(s.target, model.vocab, model.titles, s.mode, model.options) for s in streams]
        ienc = model.encode(items)
        ih = model.lm.hidden(ienc.embeddings, ienc.valid, train=train, rng=rng)
        feats = tower_features(model.lm, hidden, enc.roles, ih, ienc.valid)
        l_i = item_contrastive_loss(feats, loss_cfg.tau, loss_cfg.symmetric_infonce)
        l_u = user_contrastive_loss(feats, loss_cfg.tau, loss_cfg.symmetric_infonce)
        parts["item"], parts["user"] = float(l_i.data), float(l_u.data)
    if compute_zero_terms:
        loss = l_n + loss_cfg.gamma * l_i + loss_cfg.beta * l_u
    else:
        loss = total_loss(l_n, l_i, l_u, loss_cfg)
    parts["total"] = float(loss.data)
    return loss, parts


# ---------------------------------------------------------------- two-stage procedure

@dataclass
class StageConfig:
    stage: int
    epochs: int = 3
    patience: int = 1
    lr: float = 1e-3
    batch_size: int = 32
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_lora: bool = True

    @property
    def mode(self) -> PromptMode:
        return PromptMode.TEXT_ID if self.stage == 1 else PromptMode.HYBRID


@dataclass
class TrainSet:
    train: list[Example]
    train_cands: list[CandidateSet]
    validation: list[Example]
    val_cands: list[CandidateSet]


@dataclass
class StageResult:
    stage: int
    epochs_run: int = 0
    best_epoch: int = -1
    best_val_hit_ratio: float = -1.0
    train_loss: list[float] = field(default_factory=list)
    nip_loss: list[float] = field(default_factory=list)
    val_hit_ratio: list[float] = field(default_factory=list)
    val_valid_ratio: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


class MissingCheckpointError(RuntimeError):
    pass


def _stage_trainables(model: RecModel, cfg: StageConfig, train_item_embeddings: bool) -> dict[str, Parameter]:
    for p in model.parameters().values():
        p.trainable = False
    chosen: dict[str, Parameter] = {}
    lora = model.lm.lora
    if cfg.train_lora and lora is not None:
        for n, p in lora.registry("lora").items():
            p.trainable = True
            chosen[n] = p
    if cfg.stage == 1:
        if model.options.item_ids and model.options.id_style == "iid":
            model.lm.iid_emb.trainable = True
            chosen["lm.iid_emb"] = model.lm.iid_emb
    else:
        if model.projector is not None and model.options.item_ids:
            for n, p in model.projector.registry("projector").items():
                p.trainable = True
                chosen[n] = p
        if train_item_embeddings and model.adapter is not None and model.options.item_ids:
            model.adapter.param.trainable = True
            chosen[model.adapter.param.name] = model.adapter.param
    return chosen


def run_stage(model: RecModel, data: TrainSet, cfg: StageConfig, loss_cfg: LossConfig, seed: int,
              train_item_embeddings: bool = False, val_fn=None, compute_zero_terms: bool = False) -> StageResult:
    """Optimise the objective for up to ``cfg.epochs`` epochs with early stopping.

    ``val_fn(model) -> (hit_ratio, valid_ratio)`` scores the validation set after
    every epoch; the best-scoring weights are restored at the end.
    """
    model.mode = cfg.mode
    params = _stage_trainables(model, cfg, train_item_embeddings)
    res = StageResult(cfg.stage)
    if cfg.epochs <= 0 or not params:
        return res
    rng = np.random.default_rng([seed, cfg.stage])
    streams = [model.stream(e, c, cfg.mode) for e, c in zip(data.train, data.train_cands)]
    steps_per_epoch = math.ceil(len(streams) / cfg.batch_size)
    state = AdamState(lr=cfg.lr, warmup_fraction=cfg.warmup_fraction, total_steps=steps_per_epoch * cfg.epochs,
                      weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    best = {k: p.data.copy() for k, p in params.items()}
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(streams))
        tot = nip = 0.0
        for s in range(0, len(streams), cfg.batch_size):
            batch = [streams[i] for i in order[s:s + cfg.batch_size]]
            reset_graph()
            for p in params.values():
                p.grad = None
            loss, parts = batch_loss(model, batch, loss_cfg, train=True, rng=rng,
                                     compute_zero_terms=compute_zero_terms)
            backward(loss, params)
            adam_step(params, state)
            tot += parts["total"] * len(batch)
            nip += parts["nip"] * len(batch)
            res.step_losses.append(parts["total"])
        reset_graph()
        for p in params.values():
            p.grad = None
        res.epochs_run = epoch + 1
        res.train_loss.append(tot / len(streams))
        res.nip_loss.append(nip / len(streams))
        if val_fn is None:
            best = {k: p.data.copy() for k, p in params.items()}
            res.best_epoch = epoch
            continue
        hr, vr = val_fn(model)
        res.val_hit_ratio.append(hr)
        res.val_valid_ratio.append(vr)
        log.info("stage %d epoch %d loss %.4f val HR@1 %.4f valid %.4f", cfg.stage, epoch, res.train_loss[-1], hr, vr)
        if hr > res.best_val_hit_ratio:
            res.best_val_hit_ratio, res.best_epoch, stale = hr, epoch, 0
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale > cfg.patience:
                break
    for k, p in params.items():
        p.data = best[k]
    return res


@dataclass
class TwoStageFlags:
    stage1_only: bool = False
    stage2_only: bool = False
    train_item_embeddings: bool = False


def train_two_stage(model: RecModel, data: TrainSet, stage1: StageConfig, stage2: StageConfig,
                    loss_cfg: LossConfig, seed: int, flags: TwoStageFlags = TwoStageFlags(),
                    lora_rank: int = 4, lora_alpha: float = 8.0, val_fn=None,
                    stage1_state: dict | None = None) -> tuple[RecModel, dict]:
    """Stage 1 on Text-ID prompts, then stage 2 on Hybrid prompts, from a pretrained LM.

    ``stage1_state`` resumes stage 2 from a saved stage-1 result. Returns the
    model and a dict of per-stage results.
    """
    if flags.stage1_only and flags.stage2_only:
        raise ValueError("stage1_only and stage2_only are mutually exclusive")
    if model.lm.lora is None:
        apply_lora(model.lm, lora_rank, lora_alpha, seed=seed)
    results: dict[str, StageResult | None] = {"stage1": None, "stage2": None}
    if stage1_state is not None:
        model.load_state(stage1_state)
    elif not flags.stage2_only:
        results["stage1"] = run_stage(model, data, stage1, loss_cfg, seed, val_fn=val_fn)
    if flags.stage1_only:
        model.mode = PromptMode.TEXT_ID
        return model, results
    if model.projector is None or model.adapter is None:
        raise MissingCheckpointError("stage 2 needs a projector and an exported backbone embedding table")
    if results["stage1"] is None and stage1_state is None and not flags.stage2_only:
        raise MissingCheckpointError("stage 2 requires a stage-1 checkpoint (or the stage2_only flag)")
    results["stage2"] = run_stage(model, data, stage2, loss_cfg, seed,
                                  train_item_embeddings=flags.train_item_embeddings, val_fn=val_fn)
    model.mode = PromptMode.HYBRID
    return model, results
