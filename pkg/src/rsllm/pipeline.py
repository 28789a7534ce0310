"""End-to-end runs: data, backbone, base LM, two-stage tuning, evaluation."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import (LossConfig, RecModel, StageResult, TrainSet, TwoStageFlags, MissingCheckpointError,
                        run_stage, train_two_stage)
from .backbones import (Backbone, BackboneTrainConfig, ItemEmbeddingTable, export_item_embeddings, hit_ratio,
                        init_backbone, train_backbone)
from .config import RunConfig
from .core import Parameter
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.nn import normal
from .data import (CandidateSet, DatasetStats, Example, ItemCatalog, Split, SyntheticSpec, UserSequence,
                   bayes_oracle, build_sequences, candidate_sets, compute_stats, dataset_hash, generate_synthetic,
                   load_interactions, split_leave_one_out)
from .eval import EvalReport, check_ablation, evaluate_generative
from .lm import LMConfig, PretrainConfig, TinyLM, Vocabulary, apply_lora, build_vocabulary, pretrain_lm
from .prompting import (COPY_HEAD, LOOKUP_CUE, AdapterRows, Projector, PromptMode, PromptTemplate, RenderOptions,
                        pretraining_corpus)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- data

@dataclass
class PreparedData:
    name: str
    catalog: ItemCatalog
    sequences: list[UserSequence]
    split: Split
    lm_train: list[Example]
    lm_train_cands: list[CandidateSet]
    validation: list[Example]
    val_cands: list[CandidateSet]
    test: list[Example]
    test_cands: list[CandidateSet]
    digest: str
    stats: DatasetStats
    transitions: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def titles(self) -> list[str]:
        return list(self.catalog.titles)

    def train_set(self) -> TrainSet:
        return TrainSet(self.lm_train, self.lm_train_cands, self.validation, self.val_cands)


def recent_pairs(split: Split, per_user: int) -> list[Example]:
    """The ``per_user`` latest training pairs of each user, leaving out the validation pair.

    ``per_user == 0`` returns the whole training split.
    """
    if per_user == 0:
        return list(split.train)
    held = {(e.user_id, e.position) for e in split.validation}
    by_user: dict[str, list[Example]] = {}
    for e in split.train:
        if (e.user_id, e.position) not in held:
            by_user.setdefault(e.user_id, []).append(e)
    out = []
    for u in sorted(by_user):
        out.extend(by_user[u][-per_user:])
    return out


def prepare_data(cfg: RunConfig, data_dir=None) -> PreparedData:
    """Build sequences, splits and candidate sets.

    ``data_dir`` (holding ``interactions.tsv`` and ``catalog.tsv``) overrides
    the config's data source.
    """
    d = cfg.data
    transitions = None
    if data_dir is not None:
        root = Path(data_dir)
        interactions, catalog, _ = load_interactions(root / "interactions.tsv", root / "catalog.tsv", "tsv")
        name = root.name
        tpath = root / "transitions.json"
        if tpath.exists():
            transitions = np.asarray(json.loads(tpath.read_text()), dtype=np.float64)
    elif d.synthetic is not None:
        spec = SyntheticSpec.from_dict(d.synthetic)
        ds = generate_synthetic(spec)
        interactions, catalog, transitions = ds.interactions, ds.catalog, ds.transitions
        name = f"synthetic-{spec.seed}"
    else:
        interactions, catalog, _ = load_interactions(d.interactions, d.catalog, d.format)
        name = Path(d.interactions).stem
    sequences, _ = build_sequences(interactions, catalog, d.min_length)
    split = split_leave_one_out(sequences, d.max_history)
    n = len(catalog)
    lm_train = recent_pairs(split, d.train_pairs_per_user)
    val = split.validation[:d.validation_users or None]
    test = split.test[:d.test_users or None]
    return PreparedData(
        name, catalog, sequences, split, lm_train,
        candidate_sets(lm_train, n, d.candidate_seed, salt="train"),
        val, candidate_sets(val, n, d.candidate_seed, salt="val"),
        test, candidate_sets(test, n, d.candidate_seed, salt="test"),
        dataset_hash(sequences, catalog), compute_stats(sequences, catalog), transitions)


# ---------------------------------------------------------------- backbone

@dataclass
class BackboneRun:
    model: Backbone
    table: ItemEmbeddingTable
    train_loss: list[float]
    val_hit_ratio: list[float]
    test_hit_ratio: float
    oracle: tuple[float, float] | None


def fit_backbone(cfg: RunConfig, data: PreparedData, seed: int | None = None) -> BackboneRun:
    seed = cfg.seed if seed is None else seed
    b = cfg.backbone
    model = init_backbone(b.kind.upper(), data.n_items, b.d, seed, cfg.data.max_history)
    vc = candidate_sets(data.split.validation, data.n_items, cfg.data.candidate_seed, salt="val")
    tcfg = BackboneTrainConfig(b.epochs, b.lr, b.batch_size, b.weight_decay, b.patience, seed)
    model, hist = train_backbone(model, data.split.train, tcfg, data.split.validation, vc)
    test_hr = hit_ratio(model, data.test, data.test_cands)
    oracle = bayes_oracle(data.test, data.test_cands, data.transitions) if data.transitions is not None else None
    return BackboneRun(model, export_item_embeddings(model), hist.train_loss, hist.val_hit_ratio, test_hr, oracle)


# ---------------------------------------------------------------- base language model

def default_template(cfg: RunConfig) -> PromptTemplate:
    return PromptTemplate.default(cfg.data.noun)


def vocabulary_for(data: PreparedData, template: PromptTemplate) -> Vocabulary:
    return build_vocabulary(data.titles, " ".join([template.text, COPY_HEAD, LOOKUP_CUE]))


def lm_config(cfg: RunConfig) -> LMConfig:
    s = cfg.lm
    return LMConfig(s.d_model, s.n_layers, s.n_heads, s.context, s.dropout)


def pretrain_base(cfg: RunConfig, data: PreparedData) -> tuple[TinyLM, Vocabulary, list[float]]:
    """Train the base LM from scratch on generic text over the catalog."""
    s = cfg.lm
    template = default_template(cfg)
    vocab = vocabulary_for(data, template)
    hist = (1, cfg.data.max_history)
    lm = TinyLM(len(vocab), data.n_items, lm_config(cfg), seed=s.pretrain_seed)
    losses: list[float] = []
    # short lists first: the lookup skill forms quickly there and then transfers to long lists
    phases = [(s.short_list_steps, 0, min(s.short_list_max, s.list_max)),
              (s.pretrain_steps, s.pretrain_prompts, s.list_max)]
    for k, (steps, n_prompts, longest) in enumerate(phases):
        if not steps:
            continue
        corpus = pretraining_corpus(vocab, data.titles, template, n_prompts, hist, 19, seed=s.pretrain_seed + k,
                                    n_lookup=s.lookup_sequences, lookup_range=(2, longest))
        pcfg = PretrainConfig(steps, s.pretrain_batch_size, s.pretrain_lr, seed=s.pretrain_seed + k,
                              bucket_pool=s.pretrain_bucket_pool)
        losses += pretrain_lm(lm, corpus, pcfg, vocab.pad)
    return lm, vocab, losses


# ---------------------------------------------------------------- RSLLM

def apply_ablation(cfg: RunConfig, key: str) -> tuple[RunConfig, TwoStageFlags]:
    """Config delta for one ablation row."""
    check_ablation(key)
    cfg = copy.deepcopy(cfg)
    flags = TwoStageFlags(train_item_embeddings=cfg.train_item_embeddings)
    if key == "wo_textual_feature":
        cfg.titles = False
    elif key == "wo_item_id":
        cfg.item_ids = False
    elif key == "wo_iid_tokens":
        cfg.id_style = "digits"
    elif key == "wo_preload_embeddings":
        cfg.train_item_embeddings = flags.train_item_embeddings = True
    elif key == "ui_only":
        cfg.loss = dataclasses.replace(cfg.loss, gamma=0.0)
    elif key == "ii_only":
        cfg.loss = dataclasses.replace(cfg.loss, beta=0.0)
    elif key == "wo_contrastive":
        cfg.loss = dataclasses.replace(cfg.loss, gamma=0.0, beta=0.0)
    elif key == "stage1_only":
        flags.stage1_only = True
    elif key == "stage2_only":
        flags.stage2_only = True
    return cfg, flags


def build_rec_model(cfg: RunConfig, base: TinyLM, vocab: Vocabulary, titles, table: ItemEmbeddingTable | None,
                    seed: int, random_adapter: bool = False) -> RecModel:
    lm = copy.deepcopy(base)
    apply_lora(lm, cfg.lm.lora_rank, cfg.lm.lora_alpha, seed=seed)
    projector = adapter = None
    if table is not None:
        m = table.matrix
        if random_adapter:
            m = normal(np.random.default_rng([seed, 17]), m.shape)
        adapter = AdapterRows(m, trainable=False)
        projector = Projector(m.shape[1], cfg.lm.d_model, seed=seed)
    options = RenderOptions(titles=cfg.titles, item_ids=cfg.item_ids, id_style=cfg.id_style,
                            answer_id=cfg.answer_id)
    return RecModel(lm, vocab, list(titles), default_template(cfg), projector, adapter, options)


def validation_fn(cfg: RunConfig, data: PreparedData):
    def score(model: RecModel):
        r = evaluate_generative(model, data.validation, data.val_cands, max_new_tokens=cfg.eval.max_new_tokens,
                                batch_size=cfg.eval.batch_size)
        return r.hit_ratio_at_1, r.valid_ratio
    return score


def _stage1_key(cfg: RunConfig, seed: int) -> str:
    doc = {"seed": seed, "loss": dataclasses.asdict(cfg.loss), "stage1": dataclasses.asdict(cfg.stage1),
           "titles": cfg.titles, "item_ids": cfg.item_ids, "id_style": cfg.id_style,
           "answer_id": cfg.answer_id}
    return json.dumps(doc, sort_keys=True)


@dataclass
class FitResult:
    model: RecModel
    stage1: StageResult | None
    stage2: StageResult | None
    stage1_state: dict | None = None


def fit_rsllm(cfg: RunConfig, data: PreparedData, base: TinyLM, vocab: Vocabulary,
              table: ItemEmbeddingTable | None, seed: int, flags: TwoStageFlags = TwoStageFlags(),
              stage1_cache: dict | None = None) -> FitResult:
    """Two-stage tuning from ``base`` (copied).

    ``stage1_cache`` maps a stage-1 signature to a finished (state, result)
    pair; runs sharing an identical stage 1 reuse it instead of retraining.
    """
    if not flags.stage1_only and table is None:
        raise MissingCheckpointError("hybrid prompting needs a backbone item-embedding export")
    model = build_rec_model(cfg, base, vocab, data.titles, table, seed, random_adapter=flags.train_item_embeddings)
    ts = data.train_set()
    val = validation_fn(cfg, data)
    s1_state, s1_res = None, None
    if not flags.stage2_only:
        key = _stage1_key(cfg, seed)
        if stage1_cache is not None and key in stage1_cache:
            s1_state, s1_res = stage1_cache[key]
            model.load_state(s1_state)
        else:
            s1_res = run_stage(model, ts, cfg.stage1, cfg.loss, seed, val_fn=val)
            s1_state = model.state()
            if stage1_cache is not None:
                stage1_cache[key] = (s1_state, s1_res)
    if flags.stage1_only:
        model.mode = PromptMode.TEXT_ID
        return FitResult(model, s1_res, None, s1_state)
    s2_res = run_stage(model, ts, cfg.stage2, cfg.loss, seed, train_item_embeddings=flags.train_item_embeddings,
                       val_fn=val)
    model.mode = PromptMode.HYBRID
    return FitResult(model, s1_res, s2_res, s1_state)


def evaluate_model(cfg: RunConfig, data: PreparedData, model: RecModel, tag: str, seed: int) -> EvalReport:
    return evaluate_generative(model, data.test, data.test_cands, max_new_tokens=cfg.eval.max_new_tokens,
                               dataset=data.name, tag=tag, seed=seed, batch_size=cfg.eval.batch_size)


# ---------------------------------------------------------------- checkpoints and manifests

_MODE_CODE = {PromptMode.TEXT_ID: 0.0, PromptMode.HYBRID: 1.0}


def state_digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def save_rec_model(path, model: RecModel) -> None:
    lm = model.lm
    meta = {"meta.mode": _MODE_CODE[model.mode], "meta.titles": float(model.options.titles),
            "meta.item_ids": float(model.options.item_ids),
            "meta.digits": float(model.options.id_style == "digits"),
            "meta.answer_id": float(model.options.answer_id),
            "meta.lm.d_model": lm.config.d_model, "meta.lm.n_layers": lm.config.n_layers,
            "meta.lm.n_heads": lm.config.n_heads, "meta.lm.context": lm.config.context,
            "meta.lm.vocab_size": lm.vocab_size, "meta.lm.n_items": lm.iid_emb.shape[0],
            "meta.lora.rank": lm.lora.rank, "meta.lora.alpha": lm.lora._alpha,
            "meta.has_projector": float(model.projector is not None)}
    tensors = {k: np.array(float(v)) for k, v in meta.items()}
    tensors.update(model.state())
    save_checkpoint(path, tensors)


def load_rec_model(path, vocab: Vocabulary, titles, template: PromptTemplate) -> RecModel:
    t = load_checkpoint(path)
    cfg = LMConfig(int(t["meta.lm.d_model"]), int(t["meta.lm.n_layers"]), int(t["meta.lm.n_heads"]),
                   int(t["meta.lm.context"]))
    lm = TinyLM(int(t["meta.lm.vocab_size"]), int(t["meta.lm.n_items"]), cfg)
    apply_lora(lm, int(t["meta.lora.rank"]), float(t["meta.lora.alpha"]))
    projector = adapter = None
    if t["meta.has_projector"]:
        e = t["adapter.item_emb"]
        adapter = AdapterRows(e)
        projector = Projector(e.shape[1], cfg.d_model)
    options = RenderOptions(bool(t["meta.titles"]), bool(t["meta.item_ids"]),
                            "digits" if t["meta.digits"] else "iid", bool(t.get("meta.answer_id", 0.0)))
    mode = PromptMode.HYBRID if t["meta.mode"] else PromptMode.TEXT_ID
    model = RecModel(lm, vocab, list(titles), template, projector, adapter, options, mode)
    names = set(model.parameters())
    missing = names - set(t)
    if missing:
        raise ValueError(f"checkpoint {path} lacks {sorted(missing)[:3]}")
    model.load_state({k: v for k, v in t.items() if k in names})
    return model


def stage_summary(res: StageResult | None) -> dict | None:
    if res is None:
        return None
    d = dataclasses.asdict(res)
    d.pop("step_losses")
    return d


def manifest(cfg: RunConfig, data: PreparedData, extra: dict) -> dict:
    doc = {"code_version": __version__, "config": cfg.to_dict(), "seed": cfg.seed,
           "inputs": {"dataset": data.name, "dataset_sha256": data.digest}}
    doc.update(extra)
    return doc


def write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


class Timer:
    """Wall-clock timings, kept apart from manifests so those stay reproducible."""

    def __init__(self):
        self.times: dict[str, float] = {}

    def __call__(self, name: str):
        timer = self

        class _Span:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + time.perf_counter() - self.t

        return _Span()


# ---------------------------------------------------------------- ablation sweeps

def run_ablation_matrix(cfg: RunConfig, keys, seeds, data: PreparedData | None = None,
                        base: tuple[TinyLM, Vocabulary] | None = None):
    """Train and evaluate every (ablation, seed) pair.

    The base LM is pretrained once and shared by all rows (it plays the part of
    a fixed pretrained model); each seed trains its own backbone. Returns the
    aggregated table and wall-clock timings.
    """
    from .eval import run_ablation
    timer = Timer()
    data = data or prepare_data(cfg)
    if base is None:
        with timer("pretrain_lm"):
            lm, vocab, _ = pretrain_base(cfg, data)
    else:
        lm, vocab = base
    tables: dict[int, ItemEmbeddingTable] = {}
    stage1_cache: dict = {}

    def runner(key: str, seed: int) -> EvalReport:
        run_cfg, flags = apply_ablation(cfg, key)
        run_cfg.seed = seed
        table = None
        if not flags.stage1_only:
            if seed not in tables:
                with timer("backbones"):
                    tables[seed] = fit_backbone(run_cfg, data, seed).table
            table = tables[seed]
        with timer(f"fit.{key}"):
            fit = fit_rsllm(run_cfg, data, lm, vocab, table, seed, flags, stage1_cache)
        with timer(f"eval.{key}"):
            rep = evaluate_model(run_cfg, data, fit.model, key, seed)
        log.info("ablation %s seed %d: HR@1 %.4f valid %.4f", key, seed, rep.hit_ratio_at_1, rep.valid_ratio)
        return rep

    return run_ablation(runner, keys, seeds), timer.times
