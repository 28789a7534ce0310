import numpy as np
import pytest

from rsllm.core import ContractError, Tensor, no_grad
from rsllm.lm import (LMConfig, PretrainConfig, TinyLM, Vocabulary, apply_lora, build_vocabulary, generate_batch,
                      lm_forward, load_lm, pretrain_lm, remove_lora, save_lm, split_words)


@pytest.fixture
def vocab():
    return build_vocabulary(["Star Wars (1977)", "Fargo (1996)"], "the user watched {history}")


def test_vocabulary_round_trip(vocab, tmp_path):
    ids = vocab.encode("Fargo (1996)")
    assert vocab.decode(ids) == "fargo ( 1996 )"
    assert vocab.render("Fargo (1996)") == "fargo ( 1996 )"
    assert vocab.is_iid(vocab.iid(1)) and not vocab.is_iid(ids[0])
    vocab.save(tmp_path / "v.tsv")
    back = Vocabulary.load(tmp_path / "v.tsv")
    assert back.encode("star wars") == vocab.encode("star wars") and len(back) == len(vocab)


def test_split_words():
    assert split_words("Hello, World!") == ["hello", ",", "world", "!"]


def test_unknown_words_map_to_unk(vocab):
    assert vocab.encode("zzzz") == [vocab.unk]


def test_forward_shapes_and_context_limit(vocab):
    lm = TinyLM(len(vocab), 2, LMConfig(d_model=16, context=12), seed=0)
    h, logits = lm_forward(lm, lm.embed_ids(np.array([[1, 2, 3]])))
    assert h.shape == (1, 3, 16) and logits.shape == (1, 3, len(vocab))
    with pytest.raises(ContractError, match="context"):
        lm_forward(lm, lm.embed_ids(np.zeros((1, 13), dtype=int)))


def test_lora_parameter_count_and_freeze(vocab):
    lm = TinyLM(len(vocab), 2, LMConfig(), seed=0)
    lora = apply_lora(lm)
    assert lora.num_parameters() == 2 * 2 * (64 * 4 + 4 * 64)
    assert not any(p.trainable for p in lm.registry("lm").values())
    with pytest.raises(ValueError):
        apply_lora(lm)
    remove_lora(lm)
    with pytest.raises(ValueError):
        apply_lora(lm, rank=0)


def test_zero_lora_is_identity(vocab):
    lm = TinyLM(len(vocab), 2, LMConfig(d_model=16), seed=0)
    emb = lm.embed_ids(np.array([[4, 5, 6, 7]]))
    with no_grad():
        before = lm.hidden(emb).data
        apply_lora(lm, rank=2, alpha=4)
        after = lm.hidden(emb).data
    np.testing.assert_array_equal(before, after)


def _naive_greedy(lm, prompt, n, eos):
    x, out = prompt.copy(), []
    table = lm.table().data
    with no_grad():
        for _ in range(n):
            t = int(np.argmax(lm.hidden(Tensor(x[None])).data[0, -1] @ table.T))
            out.append(t)
            if t == eos:
                break
            x = np.vstack([x, table[t]])
    return out


def test_cached_generation_matches_full_recompute(vocab):
    lm = TinyLM(len(vocab), 2, LMConfig(d_model=16), seed=3)
    apply_lora(lm, rank=2, alpha=4, seed=1)
    for pair in lm.lora.blocks:
        pair.q_b.data = np.random.default_rng(0).normal(scale=0.1, size=pair.q_b.shape)
    table = lm.table().data
    prompts = [table[[1, 5, 6, 7]], table[[1, 8]], table[[1, 9, 10, 4, 4, 5]]]
    got = generate_batch(lm, prompts, 6, vocab.eos)
    assert got == [_naive_greedy(lm, p, 6, vocab.eos) for p in prompts]


def test_generation_respects_context(vocab):
    lm = TinyLM(len(vocab), 2, LMConfig(d_model=16, context=8), seed=0)
    with pytest.raises(ContractError, match="context"):
        generate_batch(lm, [lm.table().data[[1, 2, 3, 4]]], 5, vocab.eos)


def test_pretraining_learns_a_fixed_sentence(vocab):
    lm = TinyLM(len(vocab), 2, LMConfig(d_model=16), seed=0)
    sent = [vocab.bos] + vocab.encode("the user watched star wars ( 1977 )") + [vocab.eos]
    losses = pretrain_lm(lm, [sent], PretrainConfig(steps=60, batch_size=1, lr=1e-2), vocab.pad)
    assert losses[-1] < 0.1 * losses[0]
    out = generate_batch(lm, [lm.table().data[sent[:3]]], 12, vocab.eos)[0]
    assert out == sent[3:]


def test_checkpoint_round_trip(vocab, tmp_path):
    lm = TinyLM(len(vocab), 2, LMConfig(d_model=16), seed=0)
    apply_lora(lm, rank=2, alpha=4, seed=5)
    save_lm(tmp_path / "lm.ckpt", lm)
    back = load_lm(tmp_path / "lm.ckpt")
    emb = np.array([[1, 2, 3]])
    with no_grad():
        np.testing.assert_array_equal(lm.hidden(lm.embed_ids(emb)).data, back.hidden(back.embed_ids(emb)).data)
    assert back.lora.rank == 2 and back.lora.scaling == 2.0
