import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hanrock import autodiff as ad
from hanrock.corpus import TaskKind
from hanrock.models import HanModel, ModelConfig, compute_loss, load_checkpoint, save_checkpoint


def _ids(rng, B, L, T, vocab=9):
    ids = rng.integers(1, vocab, size=(B, L, T))
    lengths = rng.integers(1, T + 1, size=(B, L))
    return np.where(np.arange(T) < lengths[..., None], ids, 0)


def _cfg(variant="rock", task=None, **kw):
    base = dict(P=3, capacity=5, L=3, T=5, embed_dim=4, fusion_dim=3, task=task or TaskKind.classification(),
                dtype="float64")
    base.update(kw)
    if variant == "flat":
        base.pop("capacity")
    return ModelConfig(variant, **base)


@pytest.mark.parametrize("variant", ["rock", "flat"])
@pytest.mark.parametrize("task", [TaskKind.classification(), TaskKind.regression(1, 5)])
def test_output_shapes(variant, task):
    model = HanModel(_cfg(variant, task), 9, seed=0)
    preds, rec = model.forward(_ids(np.random.default_rng(0), 4, 3, 5))
    out = task.output_dim
    assert preds.primary.shape == (4, out)
    assert preds.rank.shape == (8, 4, 1)
    assert preds.shift.shape == (8, 4, out)
    assert rec.turn.shape == ((17 if variant == "rock" else 1), 4, 3)
    assert (rec.task is None) == (variant == "flat")


def test_capacity_split_validation():
    with pytest.raises(ValueError, match="capacity"):
        ModelConfig("rock", P=33, capacity=33)
    assert ModelConfig("rock", P=32, capacity=33).A == 1
    assert ModelConfig("flat", P=32).A is None


def _np_log_softmax(x):
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.booleans())
def test_loss_matches_numpy_oracle(seed, classification):
    rng = np.random.default_rng(seed)
    task = TaskKind.classification() if classification else TaskKind.regression(-1, 1)
    model = HanModel(_cfg("rock", task), 9, seed=seed)
    B = 3
    preds, _ = model.forward(_ids(rng, B, 3, 5))
    w = rng.dirichlet(np.ones(17))
    if classification:
        y = rng.integers(4, size=B)
        aux = np.hstack([rng.random((B, 8)), rng.integers(4, size=(B, 8))])
        pri = -_np_log_softmax(preds.primary.data)[np.arange(B), y].mean()
        shift = np.array([-_np_log_softmax(preds.shift.data[j])[np.arange(B), aux[:, 8 + j].astype(int)].mean()
                          for j in range(8)])
    else:
        y = rng.uniform(-1, 1, B)
        aux = rng.uniform(-1, 1, (B, 16))
        pri = ((preds.primary.data[:, 0] - y) ** 2).mean()
        shift = ((preds.shift.data[..., 0] - aux[:, 8:].T) ** 2).mean(1)
    rank = ((preds.rank.data[..., 0] - aux[:, :8].T) ** 2).mean(1)
    total, losses = compute_loss(preds, y, aux, w)
    np.testing.assert_allclose(losses.data, np.r_[pri, rank, shift], rtol=1e-12)
    assert total.data == pytest.approx(w @ np.r_[pri, rank, shift], rel=1e-12)


def test_padding_tokens_do_not_change_outputs():
    rng = np.random.default_rng(3)
    model = HanModel(_cfg("rock", T=5), 9, seed=1)
    ids = _ids(rng, 2, 3, 5)
    wide = HanModel(_cfg("rock", T=8), 9, seed=1)
    wide.load_state(model.state())
    padded = np.concatenate([ids, np.zeros((2, 3, 3), dtype=ids.dtype)], axis=-1)
    np.testing.assert_allclose(model.forward(ids)[0].primary.data, wide.forward(padded)[0].primary.data,
                               atol=1e-12)


def test_empty_history_slots_get_no_turn_attention():
    model = HanModel(_cfg("rock"), 9, seed=2)
    ids = _ids(np.random.default_rng(4), 2, 3, 5)
    ids[0, :2] = 0
    _, rec = model.forward(ids)
    assert np.all(rec.turn[:, 0, :2] == 0)
    np.testing.assert_allclose(rec.turn[:, 0, 2], 1.0)


def test_rock_aux_loss_leaves_primary_branch_untouched():
    rng = np.random.default_rng(5)
    model = HanModel(_cfg("rock"), 9, seed=3)
    ids = _ids(rng, 3, 3, 5)
    aux = np.hstack([rng.random((3, 8)), rng.integers(4, size=(3, 8))])
    with ad.GradientTape() as tape:
        preds, _ = model.forward(ids)
        loss, _ = compute_loss(preds, rng.integers(4, size=3), aux, np.r_[0.0, np.full(16, 1 / 16)])
    g = ad.backward(loss, tape, model.trainable)
    assert all(not np.any(g[k]) for k in model.primary_branch_names())
    assert np.any(g["embedding"])


def test_l2_masks_cover_weights_of_weighted_heads_only():
    model = HanModel(_cfg("rock"), 9, seed=0)
    w = np.r_[1.0, np.zeros(16)]
    masks = model.l2_masks(w)
    assert "embedding" not in masks and "pri.word.fwd.b_z" not in masks and "fusion.u" not in masks
    assert masks["head.primary.W"] == 1.0
    assert not np.any(masks["head.rank.W"]) and not np.any(masks["head.shift.W"])
    w2 = np.r_[0.5, np.full(8, 0.5 / 8), np.zeros(8)]
    assert np.all(model.l2_masks(w2)["head.rank.W"] == 1)


def test_checkpoint_roundtrip(tmp_path):
    cfg = _cfg("rock", dtype="float32")
    model = HanModel(cfg, 9, seed=4)
    save_checkpoint(model, tmp_path / "ck", vocab_digest="abc")
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["vocab_hash"] == "abc" and back.cfg == cfg
    for k, t in model.params.items():
        np.testing.assert_array_equal(back.params[k].data, t.data)
    ids = _ids(np.random.default_rng(0), 2, 3, 5)
    np.testing.assert_array_equal(back.forward(ids)[0].primary.data, model.forward(ids)[0].primary.data)


def test_checkpoint_detects_corruption(tmp_path):
    save_checkpoint(HanModel(_cfg("flat", dtype="float32"), 9), tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    blob[0] ^= 1
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "ck")


def test_seeded_initialisation_is_reproducible():
    a, b = HanModel(_cfg("rock"), 9, seed=7), HanModel(_cfg("rock"), 9, seed=7)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
