"""Heterogeneous reasoning: dot-product attention units, the combined
context descriptor, per-modality answer heads and logit blending."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .encoder import birnn_encode, init_birnn, init_mlp, mlp
from .tensorcore import EmptySequenceError, ParamStore, Tensor

N_ANSWERS = 5


@dataclass
class HeterogeneousContext:
    """Transformed contexts with column blocks [self; hypothesis; other context]."""

    V_tilde: Tensor
    S_tilde: Tensor
    v_mask: np.ndarray | None = None
    s_mask: np.ndarray | None = None


def dot_attention(X: Tensor, Y: Tensor, y_mask=None, return_weights: bool = False):
    """Describe each row of ``X`` as a convex combination of the rows of ``Y``.

    Similarity is the unscaled dot product ``X Y^T``; the softmax runs over
    ``Y``'s rows (masked rows excluded). Works on ``(m, d)`` or batched
    ``(..., m, d)`` inputs.
    """
    if X.shape[-1] != Y.shape[-1]:
        raise tc.DimensionError(f"dot_attention: feature widths differ, {X.shape} vs {Y.shape}")
    mask = None if y_mask is None else np.asarray(y_mask, dtype=bool)[..., None, :]
    weights = tc.softmax(tc.matmul(X, tc.transpose(Y)), mask=mask)
    out = tc.matmul(weights, Y)
    return (out, weights) if return_weights else out


def self_attend(X: Tensor, mask=None) -> Tensor:
    return dot_attention(X, X, mask)


def _require_rows(name: str, x: Tensor, mask) -> None:
    if x.shape[-2] == 0 or (mask is not None and not np.asarray(mask).any(axis=-1).all()):
        raise EmptySequenceError(f"build_ham: {name} stream is empty")


def build_ham(
    V: Tensor,
    S: Tensor,
    H: Tensor,
    v_mask=None,
    s_mask=None,
    h_mask=None,
    group: int = 1,
    use_sa: bool = True,
    use_c2c: bool = True,
) -> HeterogeneousContext:
    """Self-attend each stream, then describe V and S in hypothesis and
    cross-context space and concatenate.

    ``V`` and ``S`` may carry one row of the batch per record while ``H``
    carries ``group`` hypotheses per record (``H.shape[0] == group *
    V.shape[0]``); context-only work is done once per record and repeated.
    Without C2C the outputs are ``[C; C^H]`` (width 2d).
    """
    _require_rows("video", V, v_mask)
    _require_rows("subtitle", S, s_mask)
    _require_rows("hypothesis", H, h_mask)
    if use_sa:
        V = self_attend(V, v_mask)
        S = self_attend(S, s_mask)
        H = self_attend(H, h_mask)
    if use_c2c:
        VS = dot_attention(V, S, s_mask)
        SV = dot_attention(S, V, v_mask)
    if group > 1:
        rep = np.repeat(np.arange(V.shape[0]), group)
        V, S = tc.take(V, rep), tc.take(S, rep)
        if use_c2c:
            VS, SV = tc.take(VS, rep), tc.take(SV, rep)
        v_mask = None if v_mask is None else np.asarray(v_mask)[rep]
        s_mask = None if s_mask is None else np.asarray(s_mask)[rep]
    VH = dot_attention(V, H, h_mask)
    SH = dot_attention(S, H, h_mask)
    v_blocks = [V, VH, VS] if use_c2c else [V, VH]
    s_blocks = [S, SH, SV] if use_c2c else [S, SH]
    return HeterogeneousContext(tc.concat_feature(v_blocks), tc.concat_feature(s_blocks), v_mask, s_mask)


def init_heads(params: ParamStore, d: int, width_blocks: int = 3, head_mode: str = "scalar") -> None:
    out = 1 if head_mode == "scalar" else N_ANSWERS
    for mod in ("video", "subtitle"):
        init_birnn(params, f"hrn.{mod}.rnn", width_blocks * d, d)
        init_mlp(params, f"hrn.{mod}.cls", d, d, out)


def _head(x: Tensor, mask, params: ParamStore, mod: str, head_mode: str) -> Tensor:
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    lengths = np.asarray(mask).sum(axis=-1)
    h = birnn_encode(x, params, f"hrn.{mod}.rnn", lengths=lengths)
    out = mlp(tc.maxpool_time(h, mask), params, f"hrn.{mod}.cls")
    if head_mode == "scalar":
        return tc.reshape(out, (-1, N_ANSWERS))
    # FC(5) reading: hypothesis k contributes the k-th of its five outputs
    n = out.shape[0]
    pick = np.arange(n) * N_ANSWERS + np.arange(n) % N_ANSWERS
    return tc.reshape(tc.take(tc.reshape(out, (-1,)), pick), (-1, N_ANSWERS))


def predict_logits(ctx: HeterogeneousContext, params: ParamStore, head_mode: str = "scalar"):
    """Per-modality answer scores ``(B, 5)`` from contexts of ``B * 5`` hypotheses.

    Row ``5 b + k`` of the context holds record ``b`` paired with hypothesis
    ``k``; each hypothesis is scored independently.
    """
    if ctx.V_tilde.shape[0] % N_ANSWERS:
        raise tc.ContractError("context batch must hold five hypotheses per record")
    lv = _head(ctx.V_tilde, ctx.v_mask, params, "video", head_mode)
    ls = _head(ctx.S_tilde, ctx.s_mask, params, "subtitle", head_mode)
    return lv, ls


def blend_logits(l_v, l_s, beta):
    """``beta * l_v + (1 - beta) * l_s``; ``beta`` is a float or ``(B, 1)`` Tensor."""
    return beta * l_v + (1.0 - beta) * l_s


def ce_loss(logits: Tensor, gt_answer) -> Tensor:
    """Cross-entropy of the gold answer under softmax of the blended scores."""
    logits = tc.as_tensor(logits)
    if logits.ndim == 1:
        logits = tc.reshape(logits, (1, -1))
    return tc.cross_entropy(logits, np.atleast_1d(gt_answer))
