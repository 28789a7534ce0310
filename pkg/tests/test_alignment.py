import itertools
import math

import numpy as np
import pytest

from rsllm.alignment import (LossConfig, MissingCheckpointError, NIPBatch, StageConfig, TowerFeatures, TrainSet,
                             TwoStageFlags, batch_loss, info_nce, item_contrastive_loss, nip_loss,
                             nip_loss_from_hidden, run_stage, total_loss, tower_features, train_two_stage,
                             user_contrastive_loss)
from rsllm.core import ContractError, Tensor, backward, reset_graph
from rsllm.data import CandidateSet, Example
from rsllm.prompting import PromptMode, Role
from rsllm.selftest import micro_model


def _ce_oracle(logits, targets):
    m = logits.max()
    return -(logits[targets] - (m + np.log(np.exp(logits - m).sum())))


def test_nip_uniform_and_confident():
    V = 9
    batch = NIPBatch([np.array([1, 2, 3])], [[4, 5, 6]])
    flat = nip_loss(Tensor(np.zeros((1, 5, V))), batch)
    assert abs(float(flat.data) - 3 * math.log(V)) < 1e-12
    sharp = np.full((1, 5, V), -50.0)
    for p, t in zip([1, 2, 3], [4, 5, 6]):
        sharp[0, p, t] = 50.0
    assert float(nip_loss(Tensor(sharp), batch).data) < 1e-30


def test_nip_matches_direct_cross_entropy():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 6, 11))
    batch = NIPBatch([np.array([2, 3]), np.array([4, 5])], [[7, 1], [0, 10]])
    want = np.mean([sum(_ce_oracle(logits[b, p], t) for p, t in zip(pos, tg))
                    for b, (pos, tg) in enumerate(zip(batch.positions, batch.targets))])
    assert abs(float(nip_loss(Tensor(logits), batch).data) - want) < 1e-10


def test_nip_misaligned_targets():
    with pytest.raises(ContractError):
        nip_loss(Tensor(np.zeros((1, 4, 5))), NIPBatch([np.array([1, 2])], [[1, 2, 3]]))
    with pytest.raises(ContractError):
        nip_loss(Tensor(np.zeros((1, 4, 5))), NIPBatch([np.array([3, 4])], [[1, 2]]))


def test_nip_from_hidden_equals_full_logits():
    model, streams = micro_model(1)
    enc = model.encode(streams, with_target=True)
    h = model.lm.hidden(enc.embeddings, enc.valid)
    nb = NIPBatch.from_encoded(enc)
    a = float(nip_loss(model.lm.logits(h), nb).data)
    b = float(nip_loss_from_hidden(model.lm, h, nb).data)
    assert abs(a - b) < 1e-12
    # the first predicted token is read off the last prompt position
    assert [int(p[0]) for p in nb.positions] == [len(s) - 1 for s in streams]


def _brute_info_nce(q, k, tau):
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    kn = k / np.linalg.norm(k, axis=1, keepdims=True)
    N = len(q)
    total = 0.0
    for i in range(N):
        num = math.exp(float(qn[i] @ kn[i]) / tau)
        den = sum(math.exp(float(qn[j] @ kn[i]) / tau) for j in range(N))
        total += math.log(num / den)
    return -total / N


@pytest.mark.parametrize("N", [2, 4, 8])
def test_info_nce_equal_cosines_is_log_n(N):
    x = Tensor(np.tile([[0.3, -1.0, 2.0]], (N, 1)))
    assert abs(float(info_nce(x, x, 0.5).data) - math.log(N)) < 1e-10


def test_info_nce_single_pair_and_orthonormal():
    assert float(info_nce(Tensor([[1.0, 0.0]]), Tensor([[0.2, 5.0]]), 0.5).data) == 0.0
    e = Tensor(np.eye(2))
    assert abs(float(info_nce(e, e, 0.5).data) - 0.12692801104297263) < 1e-12


def test_info_nce_literal_form_and_symmetric_flag():
    rng = np.random.default_rng(7)
    q, k = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    lit = float(info_nce(Tensor(q), Tensor(k), 0.5).data)
    assert abs(lit - _brute_info_nce(q, k, 0.5)) < 1e-12
    sym = float(info_nce(Tensor(q), Tensor(k), 0.5, symmetric=True).data)
    assert abs(sym - _brute_info_nce(k, q, 0.5)) < 1e-12
    assert abs(lit - sym) > 1e-6


def test_info_nce_invariances():
    rng = np.random.default_rng(8)
    q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    base = float(info_nce(Tensor(q), Tensor(k), 0.5).data)
    assert abs(float(info_nce(Tensor(3 * q), Tensor(3 * k), 0.5).data) - base) < 1e-10
    s = rng.uniform(0.2, 5, size=(6, 1))
    assert abs(float(info_nce(Tensor(q * s), Tensor(k / s), 0.5).data) - base) < 1e-10
    perm = rng.permutation(6)
    assert abs(float(info_nce(Tensor(q[perm]), Tensor(k[perm]), 0.5).data) - base) < 1e-10
    assert base >= 0


def test_info_nce_errors():
    with pytest.raises(ContractError):
        info_nce(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 0.5)
    with pytest.raises(ContractError):
        info_nce(Tensor([[0.0, 0.0], [1.0, 0.0]]), Tensor(np.eye(2)), 0.5)


@pytest.mark.parametrize("which", ["item", "user"])
def test_aligned_orthogonal_batch_is_minimal_over_permutations(which):
    g = np.eye(4)[:, :4] * np.array([[1.0], [2.0], [0.5], [3.0]])
    fn = item_contrastive_loss if which == "item" else user_contrastive_loss
    vals = []
    for perm in itertools.permutations(range(4)):
        shuffled = Tensor(g[list(perm)])
        f = TowerFeatures(Tensor(g), shuffled, shuffled)
        vals.append(float(fn(f, 0.5).data))
    assert vals[0] == min(vals)
    f = TowerFeatures(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))
    assert abs(float(fn(f, 0.5).data) - math.log(4)) < 1e-12


def test_total_loss_composition():
    assert total_loss(1, 2, 3, LossConfig(0.3, 0.4)) == 2.8
    assert total_loss(1.5, 2, 3, LossConfig(0.0, 0.0)) == 1.5
    assert total_loss(1.0, None, None, LossConfig(0.0, 0.0)) == 1.0
    a, b, c = (Tensor(np.array(v), requires_grad=True) for v in (1.0, 2.0, 3.0))
    out = total_loss(a, b, c, LossConfig(0.3, 0.4))
    assert abs(float(out.data) - 2.8) < 1e-15
    backward(out)
    assert (float(a.grad), float(b.grad), float(c.grad)) == (1.0, 0.3, 0.4)
    reset_graph()


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(gamma=-0.1)


def test_tower_pooling_single_and_pair():
    h = np.random.default_rng(0).normal(size=(1, 4, 3))
    roles = np.array([[int(Role.TEMPLATE), int(Role.HISTORY_TEXT), int(Role.HISTORY_SLOT), int(Role.TARGET)]])
    item_h = np.random.default_rng(1).normal(size=(1, 3, 3))
    f = tower_features(None, Tensor(h), roles, Tensor(item_h), np.ones((1, 3), dtype=bool))
    np.testing.assert_array_equal(f.g_item_user.data[0], h[0, 3])
    np.testing.assert_allclose(f.g_user.data[0], (h[0, 1] + h[0, 2]) / 2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(f.g_item.data[0], item_h[0, 1:].mean(axis=0), rtol=0, atol=1e-15)


def test_batch_loss_features_have_model_width():
    model, streams = micro_model(0)
    loss, parts = batch_loss(model, streams, LossConfig())
    assert set(parts) == {"nip", "item", "user", "total"}
    assert abs(parts["total"] - (parts["nip"] + 0.3 * parts["item"] + 0.4 * parts["user"])) < 1e-12
    reset_graph()


def _micro_data():
    train = [Example("a", (0, 1), 3, 2), Example("b", (5,), 0, 1), Example("c", (2, 4), 1, 2),
             Example("d", (3,), 4, 1)]
    cands = [CandidateSet((2, 3, 4), 1), CandidateSet((1, 4, 0), 2), CandidateSet((1, 0, 5), 0),
             CandidateSet((4, 2, 1), 0)]
    return TrainSet(train, cands, train[:2], cands[:2])


def _fresh():
    model, _ = micro_model(3)
    for p in model.parameters().values():
        p.trainable = False
    model.adapter.param.trainable = False
    return model


def test_zero_weights_reduce_to_nip_bit_for_bit():
    runs = []
    for compute in (False, True):
        model = _fresh()
        res = run_stage(model, _micro_data(), StageConfig(1, epochs=2, batch_size=2, lr=1e-2),
                        LossConfig(0.0, 0.0), seed=5, compute_zero_terms=compute)
        runs.append((res.step_losses, model.state()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_stage_isolation_and_zero_budget():
    model = _fresh()
    data = _micro_data()
    before = model.state()
    train_two_stage(model, data, StageConfig(1, epochs=0), StageConfig(2, epochs=0), LossConfig(), seed=0)
    after = model.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)

    res = run_stage(model, data, StageConfig(1, epochs=1, batch_size=2), LossConfig(), seed=0)
    s1 = model.state()
    assert res.epochs_run == 1
    assert all(np.array_equal(s1[k], before[k]) for k in before if k.startswith("projector."))
    assert not np.array_equal(s1["lm.iid_emb"], before["lm.iid_emb"])
    assert np.array_equal(s1["lm.tok_emb"], before["lm.tok_emb"])
    run_stage(model, data, StageConfig(2, epochs=1, batch_size=2), LossConfig(), seed=0)
    s2 = model.state()
    assert np.array_equal(s2["adapter.item_emb"], before["adapter.item_emb"])
    assert not np.array_equal(s2["projector.fc1.weight"], s1["projector.fc1.weight"])
    assert np.array_equal(s2["lm.iid_emb"], s1["lm.iid_emb"])


def test_train_item_embeddings_flag_unfreezes_adapter():
    model = _fresh()
    before = model.adapter.param.data.copy()
    run_stage(model, _micro_data(), StageConfig(2, epochs=1, batch_size=2), LossConfig(), seed=0,
              train_item_embeddings=True)
    assert not np.array_equal(model.adapter.param.data, before)


def test_stage_flags():
    model = _fresh()
    data = _micro_data()
    _, res = train_two_stage(model, data, StageConfig(1, epochs=1), StageConfig(2, epochs=1), LossConfig(), 0,
                             TwoStageFlags(stage1_only=True))
    assert res["stage2"] is None and model.mode is PromptMode.TEXT_ID
    model = _fresh()
    _, res = train_two_stage(model, data, StageConfig(1, epochs=1), StageConfig(2, epochs=1), LossConfig(), 0,
                             TwoStageFlags(stage2_only=True))
    assert res["stage1"] is None and res["stage2"].epochs_run == 1
    with pytest.raises(ValueError):
        train_two_stage(model, data, StageConfig(1), StageConfig(2), LossConfig(), 0, TwoStageFlags(True, True))
    model = _fresh()
    model.projector = None
    with pytest.raises(MissingCheckpointError):
        train_two_stage(model, data, StageConfig(1, epochs=0), StageConfig(2, epochs=1), LossConfig(), 0)


def test_early_stopping_restores_best():
    model = _fresh()
    scores = iter([0.5, 0.2, 0.1, 0.9])
    snapshots = []

    def val_fn(m):
        snapshots.append(m.lm.iid_emb.data.copy())
        return next(scores), 1.0

    res = run_stage(model, _micro_data(), StageConfig(1, epochs=4, patience=1, batch_size=2), LossConfig(),
                    seed=0, val_fn=val_fn)
    assert res.epochs_run == 3 and res.best_epoch == 0
    np.testing.assert_array_equal(model.lm.iid_emb.data, snapshots[0])
