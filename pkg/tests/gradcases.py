"""Seeded layer and model compositions for gradient checks (float64)."""

from __future__ import annotations

import numpy as np

from hanrock import autodiff as ad
from hanrock.corpus import TaskKind
from hanrock.layers import (AttentionParams, DenseParams, GruParams, attend, bigru_encode, dense, embed,
                            gru_sequence)
from hanrock.models import HanModel, ModelConfig, compute_loss

F64 = np.float64


def _mask(rng, n, t):
    m = rng.random((n, t)) < 0.75
    m[:, 0] = True
    # valid steps form a prefix, as in padded token rows
    return np.cumprod(m, axis=1).astype(bool)


def _collect(*groups):
    out = {}
    for g in groups:
        for t in g.tensors():
            out[t.name] = t
    return out


def gru_case(seed):
    rng = np.random.default_rng(seed)
    d, h, n, t = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3), rng.integers(1, 5)
    p = GruParams.init(int(d), int(h), rng, "g", dtype=F64)
    x = ad.Tensor(rng.normal(size=(n, t, d)), name="x", requires_grad=True, dtype=F64)
    mask = _mask(rng, n, t)
    r = rng.normal(size=(n, t, h))
    reverse = bool(rng.integers(2))
    params = {**_collect(p), "x": x}
    return (lambda: ad.sum(ad.mul(gru_sequence(p, x, mask, reverse=reverse), r))), params


def bigru_attend_case(seed, stack=None):
    rng = np.random.default_rng(seed)
    d, h, t = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    n = int(rng.integers(1, 3))
    fwd = GruParams.init(d, h, rng, "f", stack, F64)
    bwd = GruParams.init(d, h, rng, "b", stack, F64)
    att = AttentionParams.init(2 * h, 2 * h, rng, "a", stack, F64)
    x = ad.Tensor(rng.normal(size=(n, t, d)), name="x", requires_grad=True, dtype=F64)
    mask = _mask(rng, n, t)
    r = rng.normal(size=((stack,) if stack else ()) + (n, 2 * h))
    params = {**_collect(fwd, bwd, att), "x": x}

    def fn():
        states = bigru_encode(fwd, bwd, x, mask)
        _, pooled = attend(att, states, mask)
        return ad.sum(ad.mul(pooled, r))
    return fn, params


def dense_loss_case(seed):
    rng = np.random.default_rng(seed)
    d, c, n = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    p = DenseParams.init(d, c, rng, "d", dtype=F64)
    x = ad.Tensor(rng.normal(size=(n, d)), name="x", requires_grad=True, dtype=F64)
    y = rng.integers(c, size=n)
    onehot = np.eye(c)[y]
    if seed % 2:
        def fn():
            logp = ad.log_softmax(dense(p.W, p.b, x), axis=-1)
            return ad.neg(ad.mean(ad.sum(ad.mul(logp, onehot), axis=-1)))
    else:
        target = rng.normal(size=(n, c))

        def fn():
            diff = ad.sub(ad.tanh(dense(p.W, p.b, x)), target)
            return ad.mean(ad.mul(diff, diff))
    return fn, {**_collect(p), "x": x}


def embed_pool_case(seed):
    rng = np.random.default_rng(seed)
    v, e, n, t = int(rng.integers(3, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(2, 5))
    emb = ad.Tensor(rng.normal(size=(v, e)), name="emb", requires_grad=True, dtype=F64)
    ids = rng.integers(0, v, size=(n, t))
    ids[:, 0] = np.maximum(ids[:, 0], 1)
    mask = ids != 0
    u = ad.Tensor(rng.normal(size=(e,)), name="u", requires_grad=True, dtype=F64)
    r = rng.normal(size=(n, e))

    def fn():
        x = embed(emb, ids)
        alpha = ad.masked_softmax(ad.sum(ad.mul(x, u), axis=-1), mask)
        return ad.sum(ad.mul(ad.weighted_sum(alpha, x), r))
    return fn, {"emb": emb, "u": u}


def model_case(seed, variant, hidden=None):
    rng = np.random.default_rng(seed)
    hidden = int(rng.integers(1, 4)) if hidden is None else hidden
    task = TaskKind.classification() if seed % 2 == 0 else TaskKind.regression(-1.0, 1.0)
    if variant == "rock":
        cfg = ModelConfig("rock", P=hidden, capacity=hidden + 1, L=int(rng.integers(1, 4)), T=4, embed_dim=2,
                          fusion_dim=2, task=task, dtype="float64")
    else:
        cfg = ModelConfig("flat", P=hidden, L=int(rng.integers(1, 4)), T=4, embed_dim=2, task=task, dtype="float64")
    vocab = 6
    model = HanModel(cfg, vocab, seed=seed)
    B = 2
    ids = rng.integers(1, vocab, size=(B, cfg.L, cfg.T))
    lengths = rng.integers(1, cfg.T + 1, size=(B, cfg.L))
    ids = np.where(np.arange(cfg.T) < lengths[..., None], ids, 0)
    if cfg.L > 1:
        ids[0, 0] = 0        # a window starting at the first talkturn
    if task.is_classification:
        y = rng.integers(4, size=B)
        aux = np.hstack([rng.random((B, 8)), rng.integers(4, size=(B, 8))])
    else:
        y = rng.uniform(-1, 1, size=B)
        aux = rng.uniform(-1, 1, size=(B, 16))
    w = rng.random(17) + 0.1
    w /= w.sum()

    def fn():
        preds, _ = model.forward(ids)
        return compute_loss(preds, y, aux, w)[0]
    return fn, model.trainable


def all_cases():
    """(name, fn, params) for 50 compositions, two of them full HAN-ROCK models."""
    cases = []
    for s in range(16):
        cases.append((f"gru-{s}",) + gru_case(100 + s))
    for s in range(10):
        cases.append((f"bigru-attend-{s}",) + bigru_attend_case(200 + s))
    for s in range(5):
        cases.append((f"stacked-bigru-attend-{s}",) + bigru_attend_case(300 + s, stack=2 + s % 2))
    for s in range(8):
        cases.append((f"dense-loss-{s}",) + dense_loss_case(400 + s))
    for s in range(6):
        cases.append((f"embed-pool-{s}",) + embed_pool_case(500 + s))
    for s in range(3):
        cases.append((f"flat-model-{s}",) + model_case(600 + s, "flat"))
    for s in range(2):
        cases.append((f"rock-model-{s}",) + model_case(700 + s, "rock", hidden=1 + s))
    return cases
