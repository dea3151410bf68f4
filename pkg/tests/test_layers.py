import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hanrock import autodiff as ad
from hanrock.layers import (AttentionParams, DropoutSpec, GruParams, attend, bigru_encode, build_embedding_matrix,
                            gru_sequence, gru_step)

F64 = np.float64


def _sig(x):
    return 1 / (1 + np.exp(-x))


def gru_oracle(p: GruParams, xs, mask, reverse=False):
    """Plain-numpy GRU, one sequence step at a time."""
    W = {k: getattr(p, k).data for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}
    N, T, _ = xs.shape
    out = np.zeros((N, T, p.hidden))
    for n in range(N):
        h = np.zeros(p.hidden)
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            x = xs[n, t]
            z = _sig(W["W_z"] @ x + W["U_z"] @ h + W["b_z"])
            r = _sig(W["W_r"] @ x + W["U_r"] @ h + W["b_r"])
            c = np.tanh(W["W_h"] @ x + W["U_h"] @ (r * h) + W["b_h"])
            if mask[n, t]:
                h = (1 - z) * h + z * c
            out[n, t] = h
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_gru_matches_numpy_oracle(seed, reverse):
    rng = np.random.default_rng(seed)
    d, h, n, t = rng.integers(1, 5, size=4)
    p = GruParams.init(int(d), int(h), rng, dtype=F64)
    xs = rng.normal(size=(n, t, d))
    mask = rng.random((n, t)) < 0.7
    got = gru_sequence(p, ad.Tensor(xs, dtype=F64), mask, reverse=reverse).data
    np.testing.assert_allclose(got, gru_oracle(p, xs, mask, reverse), atol=1e-12)


def test_gru_step_matches_first_sequence_step():
    rng = np.random.default_rng(1)
    p = GruParams.init(3, 2, rng, dtype=F64)
    xs = rng.normal(size=(1, 1, 3))
    step = gru_step(p, xs[0, 0], np.zeros(2)).data
    np.testing.assert_allclose(step, gru_sequence(p, ad.Tensor(xs, dtype=F64), np.ones((1, 1), bool)).data[0, 0])


def test_stacked_gru_equals_independent_grus():
    rng = np.random.default_rng(2)
    stacked = GruParams.init(3, 2, rng, stack=4, dtype=F64)
    xs = rng.normal(size=(2, 5, 3))
    mask = np.ones((2, 5), bool)
    got = gru_sequence(stacked, ad.Tensor(xs, dtype=F64), mask).data
    for s in range(4):
        single = GruParams(*(ad.Tensor(t.data[s], dtype=F64) for t in stacked.tensors()))
        np.testing.assert_allclose(got[s], gru_oracle(single, xs, mask), atol=1e-12)


def test_bigru_output_is_concatenation():
    rng = np.random.default_rng(3)
    f, b = GruParams.init(2, 3, rng, dtype=F64), GruParams.init(2, 3, rng, dtype=F64)
    xs = rng.normal(size=(4, 2))
    out = bigru_encode(f, b, xs, np.ones(4, bool)).data
    assert out.shape == (4, 6)
    np.testing.assert_allclose(out[:, :3], gru_oracle(f, xs[None], np.ones((1, 4), bool))[0])
    np.testing.assert_allclose(out[:, 3:], gru_oracle(b, xs[None], np.ones((1, 4), bool), reverse=True)[0])


def test_attention_oracle_and_masking():
    rng = np.random.default_rng(4)
    a = AttentionParams.init(4, 3, rng, dtype=F64)
    states = rng.normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    alpha, pooled = attend(a, states, mask)
    u = np.maximum(states @ a.W.data.T + a.b.data, 0)
    logits = np.where(mask, u @ a.u.data, -np.inf)
    expect = np.exp(logits - logits.max(1, keepdims=True))
    expect /= expect.sum(1, keepdims=True)
    np.testing.assert_allclose(alpha.data, expect, atol=1e-12)
    np.testing.assert_allclose(pooled.data, np.einsum("nt,ntk->nk", expect, u), atol=1e-12)
    assert np.all(alpha.data[0, 3:] == 0)


def test_attend_rejects_fully_masked_rows():
    a = AttentionParams.init(2, 2, np.random.default_rng(0), dtype=F64)
    with pytest.raises(ValueError):
        attend(a, np.ones((1, 3, 2)), np.zeros((1, 3), bool))


def test_dropout_train_mode_changes_output_eval_does_not():
    rng = np.random.default_rng(5)
    p = GruParams.init(3, 4, rng, dtype=F64)
    xs = ad.Tensor(rng.normal(size=(2, 6, 3)), dtype=F64)
    mask = np.ones((2, 6), bool)
    base = gru_sequence(p, xs, mask).data
    train = DropoutSpec(0.5, 0.5, "train")
    dropped = gru_sequence(p, xs, mask, train, np.random.default_rng(0)).data
    assert not np.allclose(base, dropped)
    np.testing.assert_array_equal(gru_sequence(p, xs, mask, DropoutSpec(0.5, 0.5, "eval")).data, base)


def test_embedding_matrix_uses_pretrained_rows_and_zero_pad():
    mat = build_embedding_matrix(["<pad>", "<unk>", "hi"], 2, {"hi": np.array([1.0, 2.0])}, seed=0)
    np.testing.assert_array_equal(mat[0], 0)
    np.testing.assert_array_equal(mat[2], [1.0, 2.0])
    assert np.all(np.abs(mat[1]) <= 0.1)
