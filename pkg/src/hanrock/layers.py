"""Embedding lookup, GRU cells, bidirectional encoders, additive attention, heads.

All layers accept parameters with an optional leading *stack* axis ``K`` so
that several independent encoders (one per auxiliary task) run as a single
batched computation.  A stacked weight ``W`` has shape ``(K, out, in)`` and a
stacked bias ``(K, out)``; unstacked shapes drop the first axis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class DropoutSpec:
    input_rate: float = 0.0
    recurrent_rate: float = 0.0
    mode: str = "eval"

    def __post_init__(self):
        for rate in (self.input_rate, self.recurrent_rate):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode == "train" and (self.input_rate > 0 or self.recurrent_rate > 0)

    def mask(self, rate: float, shape, rng: np.random.Generator, dtype) -> np.ndarray | None:
        """Inverted-dropout mask, or None when dropout is off."""
        if self.mode != "train" or rate == 0.0:
            return None
        keep = rng.random(shape) >= rate
        return (keep / (1.0 - rate)).astype(dtype)


EVAL = DropoutSpec()


@dataclass
class GruParams:
    """Gate weights in (hidden x input) / (hidden x hidden) layout."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng, prefix: str = "gru", stack: int | None = None,
             dtype=ad.DEFAULT_DTYPE) -> "GruParams":
        if hidden < 1:
            raise ValueError("hidden size must be >= 1")
        lead = (stack,) if stack else ()
        parts = {}
        for gate in "zrh":
            parts[f"W_{gate}"] = ad.tensor_init(lead + (hidden, input_dim), "glorot", seed=rng,
                                                dtype=dtype, name=f"{prefix}.W_{gate}", requires_grad=True)
            parts[f"U_{gate}"] = ad.tensor_init(lead + (hidden, hidden), "glorot", seed=rng,
                                                dtype=dtype, name=f"{prefix}.U_{gate}", requires_grad=True)
            parts[f"b_{gate}"] = ad.tensor_init(lead + (hidden,), "zeros", dtype=dtype,
                                                name=f"{prefix}.b_{gate}", requires_grad=True)
        return cls(**parts)

    @property
    def hidden(self) -> int:
        return self.W_z.shape[-2]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[-1]

    @property
    def stacked(self) -> bool:
        return self.W_z.ndim == 3

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class AttentionParams:
    W: Tensor
    b: Tensor
    u: Tensor

    @classmethod
    def init(cls, input_dim: int, proj: int, rng, prefix: str = "att", stack: int | None = None,
             dtype=ad.DEFAULT_DTYPE) -> "AttentionParams":
        lead = (stack,) if stack else ()
        return cls(
            W=ad.tensor_init(lead + (proj, input_dim), "glorot", seed=rng, dtype=dtype,
                             name=f"{prefix}.W", requires_grad=True),
            b=ad.tensor_init(lead + (proj,), "zeros", dtype=dtype, name=f"{prefix}.b", requires_grad=True),
            u=ad.tensor_init(lead + (proj,), "uniform", low=-0.1, high=0.1, seed=rng, dtype=dtype,
                             name=f"{prefix}.u", requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.W, self.b, self.u]


@dataclass
class DenseParams:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, input_dim: int, out: int, rng, prefix: str = "dense", stack: int | None = None,
             dtype=ad.DEFAULT_DTYPE) -> "DenseParams":
        lead = (stack,) if stack else ()
        return cls(
            W=ad.tensor_init(lead + (out, input_dim), "glorot", seed=rng, dtype=dtype,
                             name=f"{prefix}.W", requires_grad=True),
            b=ad.tensor_init(lead + (out,), "zeros", dtype=dtype, name=f"{prefix}.b", requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.W, self.b]


def _bias(b: Tensor, extra_axes: int) -> Tensor:
    # (K, H) -> (K, 1, ..., 1, H) so it broadcasts over the batch axes
    if b.ndim == 1:
        return b
    return ad.reshape(b, (b.shape[0],) + (1,) * extra_axes + (b.shape[-1],))


def _project(x: Tensor, W: Tensor, b: Tensor | None, x_stacked: bool = False) -> Tensor:
    """Affine map ``x @ W^T + b`` over the last axis of ``x``.

    With a stacked ``W`` the result gains a leading ``K`` axis; pass
    ``x_stacked=True`` when ``x`` already carries that axis (one input per
    stacked layer).
    """
    if x.shape[-1] != W.shape[-1]:
        raise ShapeError(f"input dim {x.shape[-1]} does not match weight {W.shape}")
    stacked = W.ndim == 3
    if stacked and x_stacked:
        if x.shape[0] != W.shape[0]:
            raise ShapeError(f"stack size {x.shape[0]} does not match weight {W.shape}")
        lead, rest = (x.shape[0],), x.shape[1:-1]
    else:
        lead, rest = (), x.shape[:-1]
    flat = ad.reshape(x, lead + (int(np.prod(rest, dtype=int)), x.shape[-1]))
    out = ad.matmul(flat, ad.transpose(W))
    if b is not None:
        out = ad.add(out, _bias(b, 1))
    out_lead = (W.shape[0],) if stacked else ()
    return ad.reshape(out, out_lead + rest + (W.shape[-2],))


# ---------------------------------------------------------------------------
# embedding


def embed(matrix: Tensor, token_ids) -> Tensor:
    """Row lookup; id 0 is padding and always maps to the zero vector."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {matrix.shape[0]}")
    rows = ad.take_rows(matrix, ids)
    keep = (ids != 0)[..., None].astype(matrix.dtype)
    return ad.mul(rows, keep)


def read_embedding_file(path, dim: int | None = None) -> dict[str, np.ndarray]:
    """Parse a whitespace-separated text file of ``token v1 ... vd`` rows."""
    table: dict[str, np.ndarray] = {}
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p != ""]
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            table[token] = np.asarray(values, dtype=np.float32)
    return table


def build_embedding_matrix(vocab_tokens: list[str], dim: int, pretrained: dict | None = None,
                           seed=None, dtype=ad.DEFAULT_DTYPE) -> np.ndarray:
    """Embedding matrix aligned with ``vocab_tokens`` (index = id).

    Tokens missing from ``pretrained`` are drawn from uniform(-0.1, 0.1); row 0
    (padding) is zero.
    """
    rng = np.random.default_rng(seed)
    mat = rng.uniform(-0.1, 0.1, size=(len(vocab_tokens), dim))
    if pretrained:
        for i, tok in enumerate(vocab_tokens):
            row = pretrained.get(tok)
            if row is not None:
                if row.shape != (dim,):
                    raise ShapeError(f"pretrained row for {tok!r} has shape {row.shape}, expected ({dim},)")
                mat[i] = row
    mat[0] = 0.0
    return mat.astype(dtype)


# ---------------------------------------------------------------------------
# GRU


def _cell(p: GruParams, xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor, Ut: tuple,
          rmask: np.ndarray | None) -> Tensor:
    hd = ad.mul(h, rmask) if rmask is not None else h
    Uz, Ur, Uh = Ut
    z = ad.sigmoid(ad.add(xz, ad.matmul(hd, Uz)))
    r = ad.sigmoid(ad.add(xr, ad.matmul(hd, Ur)))
    cand = ad.tanh(ad.add(xh, ad.matmul(ad.mul(r, hd), Uh)))
    # (1 - z) * h + z * cand
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


def gru_step(p: GruParams, x_t, h_prev, dropout: DropoutSpec = EVAL, rng=None,
             masks: tuple | None = None) -> Tensor:
    """One GRU update ``h_t = (1 - z) * h_prev + z * tanh(W_h x + U_h (r * h_prev) + b_h)``.

    ``x_t`` is (..., input) and ``h_prev`` (..., hidden).  ``masks`` optionally
    supplies fixed (input, recurrent) dropout masks; otherwise they are drawn
    from ``rng`` when ``dropout`` is in train mode.
    """
    x_t = ad.as_tensor(x_t, like=p.W_z)
    h_prev = ad.as_tensor(h_prev, like=p.W_z)
    if x_t.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden:
        raise ShapeError(f"gru_step: x {x_t.shape} / h {h_prev.shape} do not match "
                         f"input {p.input_dim}, hidden {p.hidden}")
    if masks is None:
        rng = rng if rng is not None else np.random.default_rng()
        masks = (dropout.mask(dropout.input_rate, x_t.shape, rng, x_t.dtype),
                 dropout.mask(dropout.recurrent_rate, h_prev.shape, rng, h_prev.dtype))
    imask, rmask = masks
    if imask is not None:
        x_t = ad.mul(x_t, imask)
    single = h_prev.ndim == 1
    if single:
        x_t, h_prev = ad.reshape(x_t, (1, -1)), ad.reshape(h_prev, (1, -1))
    xz, xr, xh = (_affine_vec(x_t, W, b) for W, b in ((p.W_z, p.b_z), (p.W_r, p.b_r), (p.W_h, p.b_h)))
    Ut = tuple(ad.transpose(U) for U in (p.U_z, p.U_r, p.U_h))
    h = _cell(p, xz, xr, xh, h_prev, Ut, rmask)
    return ad.reshape(h, (p.hidden,)) if single else h


def _affine_vec(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        out = ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), ad.transpose(W)), W.shape[:-2] + (W.shape[-2],))
        return ad.add(out, b)
    return _project(x, W, b, x_stacked=W.ndim == 3 and x.ndim == 3)


def gru_sequence(p: GruParams, xs: Tensor, mask: np.ndarray, dropout: DropoutSpec = EVAL, rng=None,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over ``xs`` of shape (..., N, T, D); returns (..., N, T, H).

    Masked positions leave the state unchanged.  Dropout masks are drawn once
    per sequence and reused at every step.
    """
    mask = np.asarray(mask, dtype=bool)
    N, T = xs.shape[-3], xs.shape[-2]
    rng = rng if rng is not None else np.random.default_rng()
    stacked = p.stacked
    lead = (p.W_z.shape[0],) if stacked else xs.shape[:-3]

    if dropout.mode == "train" and dropout.input_rate > 0:
        shape = lead + (N, 1, xs.shape[-1])
        xs = ad.mul(xs, dropout.mask(dropout.input_rate, shape, rng, xs.dtype))
    rmask = dropout.mask(dropout.recurrent_rate, lead + (N, p.hidden), rng, xs.dtype)

    x_stacked = stacked and xs.ndim == 4
    Xz, Xr, Xh = (_project(xs, W, b, x_stacked) for W, b in ((p.W_z, p.b_z), (p.W_r, p.b_r), (p.W_h, p.b_h)))
    Ut = tuple(ad.transpose(U) for U in (p.U_z, p.U_r, p.U_h))
    full = bool(mask.all())
    h = Tensor(np.zeros(lead + (N, p.hidden), dtype=xs.dtype))
    outputs = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        idx = (Ellipsis, t, slice(None))
        h_new = _cell(p, Xz[idx], Xr[idx], Xh[idx], h, Ut, rmask)
        if full:
            h = h_new
        else:
            m = mask[..., t, None].astype(xs.dtype)
            h = ad.add(h, ad.mul(m, ad.sub(h_new, h)))
        outputs[t] = h
    return ad.stack(outputs, axis=-2)


def bigru_encode(fwd: GruParams, bwd: GruParams, xs, mask, dropout: DropoutSpec = EVAL, rng=None,
                 allow_empty: bool = False) -> Tensor:
    """Concatenated forward/backward GRU states at every position.

    ``xs`` is (T, D) for one sequence or (..., N, T, D) for a batch; the output
    replaces D with 2 * hidden.
    """
    xs = ad.as_tensor(xs, like=fwd.W_z)
    mask = np.asarray(mask, dtype=bool)
    single = xs.ndim == 2
    if single:
        xs = ad.reshape(xs, (1,) + xs.shape)
        mask = mask[None]
    if mask.shape != xs.shape[-3:-1] and mask.shape != xs.shape[:-1]:
        raise ShapeError(f"mask {mask.shape} does not match sequence {xs.shape[:-1]}")
    if not allow_empty and not mask.any(axis=-1).all():
        raise ValueError("bigru_encode: sequence has no unmasked position")
    rng = rng if rng is not None else np.random.default_rng()
    f = gru_sequence(fwd, xs, mask, dropout, rng)
    b = gru_sequence(bwd, xs, mask, dropout, rng, reverse=True)
    out = ad.concat([f, b], axis=-1)
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# attention and heads


def attend(a: AttentionParams, states, mask, allow_empty: bool = False) -> tuple[Tensor, Tensor]:
    """Additive attention pooling over the second-last axis of ``states``.

    ``u_t = relu(W h_t + b)``, ``alpha = softmax_t(u_t . u)`` over unmasked
    positions and the pooled vector is ``sum_t alpha_t u_t`` (the projected
    vectors, not the raw states).  Returns ``(alpha, pooled)``.
    """
    states = ad.as_tensor(states, like=a.W)
    mask = np.asarray(mask, dtype=bool)
    single = states.ndim == 2
    if single:
        states = ad.reshape(states, (1,) + states.shape)
        mask = mask[None]
    if not allow_empty and not mask.any(axis=-1).all():
        raise ValueError("attend: all positions are masked")
    u = ad.relu(_project(states, a.W, a.b, x_stacked=a.W.ndim == 3 and states.ndim == 4))
    ctx = a.u if a.u.ndim == 1 else ad.reshape(a.u, (a.u.shape[0], 1, 1, a.u.shape[-1]))
    logits = ad.sum(ad.mul(u, ctx), axis=-1)
    alpha = ad.masked_softmax(logits, mask, axis=-1)
    pooled = ad.weighted_sum(alpha, u)
    if single:
        alpha = ad.reshape(alpha, alpha.shape[1:])
        pooled = ad.reshape(pooled, pooled.shape[1:])
    return alpha, pooled


def dense(W: Tensor, b: Tensor, x, activation: str = "linear") -> Tensor:
    """``W x + b`` over the last axis of ``x``, optionally softmax-normalised."""
    x = ad.as_tensor(x, like=W)
    out = _affine_vec(x, W, b)
    if activation == "softmax":
        return ad.softmax(out, axis=-1)
    if activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return out
