"""Token embeddings, dense layers and the bidirectional LSTM encoder."""

from __future__ import annotations

import math

import numpy as np

from . import tensorcore as tc
from .tensorcore import ParamStore, Tensor


class VocabError(ValueError):
    pass


def init_embedding(params: ParamStore, name: str, vocab_size: int, d_emb: int) -> Tensor:
    table = params.normal(name, (vocab_size, d_emb))
    table.data[0] = 0.0
    return table


def embed(table: Tensor, tokens) -> Tensor:
    """Look up rows of ``table``; id 0 (padding) maps to a zero vector."""
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.size == 0:
        raise tc.ContractError("embed needs at least one token")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise VocabError(f"token id {bad} outside vocabulary of size {table.shape[0]}")
    return tc.take(table, ids, mask=ids != 0)


def init_linear(params: ParamStore, prefix: str, d_in: int, d_out: int) -> None:
    bound = 1.0 / math.sqrt(d_in)
    params.uniform(f"{prefix}.w", (d_in, d_out), bound)
    params.uniform(f"{prefix}.b", (d_out,), bound)


def linear(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return tc.add(tc.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def init_mlp(params: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
    """FC(d_hidden)-ReLU-FC(d_out)."""
    init_linear(params, f"{prefix}.fc1", d_in, d_hidden)
    init_linear(params, f"{prefix}.fc2", d_hidden, d_out)


def mlp(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return linear(tc.relu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def init_birnn(params: ParamStore, prefix: str, d_in: int, d_out: int, init_key: str | None = None) -> None:
    """One bidirectional layer with ``d_out // 2`` hidden units per direction.

    Encoders given the same ``init_key`` start from identical weights.
    """
    if d_out % 2:
        raise ValueError(f"bidirectional output width must be even, got {d_out}")
    h = d_out // 2
    bound = 1.0 / math.sqrt(h)
    for direction in ("fwd", "bwd"):
        for part, shape in (("w_in", (d_in, 4 * h)), ("w_rec", (h, 4 * h)), ("bias", (4 * h,))):
            key = None if init_key is None else f"{init_key}.{direction}.{part}"
            params.uniform(f"{prefix}.{direction}.{part}", shape, bound, key=key)


def _reverse_index(B: int, T: int, lengths: np.ndarray) -> np.ndarray:
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    rev = np.where(t < L, L - 1 - t, t)
    return np.arange(B)[:, None] * T + rev


def birnn_encode(x: Tensor, params: ParamStore, prefix: str, lengths=None) -> Tensor:
    """Encode ``(n, d_in)`` or padded ``(B, T, d_in)`` into ``(..., d_out)``.

    Each timestep's output is ``[forward state; backward state]``. With
    ``lengths`` the backward direction starts at each sequence's last valid
    step; outputs past a sequence's length are not meaningful.
    """
    single = x.ndim == 2
    if single:
        x = tc.reshape(x, (1,) + x.shape)
    B, T, D = x.shape
    if T == 0:
        raise tc.EmptySequenceError(f"{prefix}: empty sequence")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.intp)
    if lengths.min() < 1 or lengths.max() > T:
        raise tc.ContractError(f"{prefix}: lengths must lie in 1..{T}")

    def run(inp, direction):
        p = f"{prefix}.{direction}"
        return tc.lstm(inp, params[f"{p}.w_in"], params[f"{p}.w_rec"], params[f"{p}.bias"])

    fwd = run(x, "fwd")
    idx = _reverse_index(B, T, lengths)
    x_rev = tc.take(tc.reshape(x, (B * T, D)), idx)
    h_rev = run(x_rev, "bwd")
    bwd = tc.take(tc.reshape(h_rev, (B * T, h_rev.shape[-1])), idx)
    out = tc.concat([fwd, bwd], axis=-1)
    return tc.reshape(out, out.shape[1:]) if single else out


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the time axis of ``(B, T, d)`` counting only valid steps."""
    m = np.asarray(mask, dtype=float)
    w = m / m.sum(axis=-1, keepdims=True)
    return tc.sum(tc.mul(x, w[..., None]), axis=-2)
