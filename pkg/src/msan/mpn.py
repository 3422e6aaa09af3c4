"""Moment proposal: sliding-window candidates, per-modality moment scores,
question-conditioned modulation, cross-modal ranking loss and metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .datamodel import ConfigError
from .encoder import birnn_encode, init_birnn, init_mlp, mlp
from .hrn import dot_attention
from .tensorcore import ParamStore, Tensor

MODES = ("additive", "multiplicative", "residual")
_EPS = 1e-9


@dataclass
class MoICandidate:
    span: tuple[float, float]
    shots: tuple[int, ...]
    sentences: tuple[int, ...]
    m_v: float = math.nan
    m_s: float = math.nan
    label: str = "unset"  # positive | negative | unset

    @property
    def length(self) -> float:
        return self.span[1] - self.span[0]


def _check_span(span, what: str = "span") -> tuple[float, float]:
    s, e = float(span[0]), float(span[1])
    if not s < e:
        raise tc.ContractError(f"degenerate {what} {span!r}: start must be < end")
    return s, e


def temporal_iou(a, b) -> float:
    """Overlap over hull length, clamped below at 0."""
    s1, e1 = _check_span(a)
    s2, e2 = _check_span(b)
    raw = (min(e1, e2) - max(s1, s2)) / (max(e1, e2) - min(s1, s2))
    return max(0.0, raw)


def coverage(pred, gt) -> float:
    """Fraction of ``gt`` overlapped by ``pred``, clamped to [0, 1]."""
    s1, e1 = _check_span(pred, "prediction")
    s2, e2 = _check_span(gt, "ground-truth span")
    return min(1.0, max(0.0, (min(e1, e2) - max(s1, s2)) / (e2 - s2)))


def overlapping(spans: Sequence[tuple[float, float]], span) -> tuple[int, ...]:
    s, e = span
    return tuple(i for i, (a, b) in enumerate(spans) if min(b, e) - max(a, s) > _EPS)


def window_lengths(fractions: Sequence[float], timeline_length: float) -> list[float]:
    return [f * timeline_length for f in fractions]


def generate_candidates(clip, windows: Sequence[float], stride_fraction: float = 0.5) -> list[MoICandidate]:
    """Slide each window length over the timeline.

    Starts are multiples of ``window * stride_fraction``; the last window per
    length is right-aligned to the timeline end. Windows longer than the
    timeline are skipped with a warning.
    """
    if not windows:
        raise tc.ContractError("at least one window length is required")
    if not 0 < stride_fraction <= 1:
        raise tc.ContractError(f"stride_fraction must be in (0, 1], got {stride_fraction}")
    T = clip.timeline_length
    shot_spans = [s.span for s in clip.shots]
    sent_spans = [s.span for s in clip.sentences]
    seen: set[tuple[float, float]] = set()
    out: list[MoICandidate] = []
    for w in windows:
        if w > T + _EPS:
            warnings.warn(f"window length {w} exceeds timeline {T}; skipped", stacklevel=2)
            continue
        if w <= 0:
            raise tc.ContractError(f"window length must be positive, got {w}")
        step = max(_EPS, w * stride_fraction)
        starts = []
        k = 0
        while k * step + w <= T + _EPS:
            starts.append(k * step)
            k += 1
        if not starts or starts[-1] + w < T - _EPS:
            starts.append(T - w)
        for s in starts:
            span = (round(s, 9), round(min(s + w, T), 9))
            if span in seen:
                continue
            seen.add(span)
            out.append(
                MoICandidate(span, overlapping(shot_spans, span), overlapping(sent_spans, span))
            )
    return out


def label_candidates(cands: Sequence[MoICandidate], gt_moment) -> list[MoICandidate]:
    """Positive iff IoU >= 0.5; if none qualifies the best-IoU candidate is promoted."""
    ious = [temporal_iou(c.span, gt_moment) for c in cands]
    for c, iou in zip(cands, ious):
        c.label = "positive" if iou >= 0.5 else "negative"
    if cands and not any(c.label == "positive" for c in cands):
        cands[int(np.argmax(ious))].label = "positive"
    return list(cands)


def modulate(m, alpha, mode: str):
    """Apply one modulation function; works on floats, arrays and Tensors."""
    if mode == "additive":
        return m + alpha
    if mode == "multiplicative":
        return m * alpha
    if mode == "residual":
        return m + m * alpha
    raise ConfigError(f"unknown modulation mode {mode!r}; expected one of {MODES}")


def modulate_moment_scores(m_v, m_s, alpha, mode: str):
    """Boost one modality and suppress the other: ``(F(m_v, a), F(m_s, 1 - a))``."""
    return modulate(m_v, alpha, mode), modulate(m_s, 1.0 - alpha, mode)


def init_mim_gate(params: ParamStore, prefix: str, d: int) -> None:
    init_mlp(params, prefix, d, d, 1)


def mim_alpha(q: Tensor, params: ParamStore, prefix: str = "mim.mpn") -> Tensor:
    """``sigmoid(MLP(q))`` for pooled question features ``(d,)`` or ``(B, d)``."""
    single = q.ndim == 1
    if single:
        q = tc.reshape(q, (1, -1))
    a = tc.sigmoid(mlp(q, params, prefix))
    return tc.reshape(a, (-1,) if not single else ())


def sample_balanced(labels: Sequence[bool], rng: np.random.Generator | None):
    """Equal numbers of positive and negative indices (all of the smaller side)."""
    labels = np.asarray(labels, dtype=bool)
    pos = np.flatnonzero(labels)
    neg = np.flatnonzero(~labels)
    k = min(len(pos), len(neg))
    if rng is not None:
        pos = np.sort(rng.choice(pos, k, replace=False)) if k else pos[:0]
        neg = np.sort(rng.choice(neg, k, replace=False)) if k else neg[:0]
    else:
        pos, neg = pos[:k], neg[:k]
    return pos, neg


def cmr_pairs(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All (positive, negative) index pairs."""
    p, n = np.meshgrid(pos, neg, indexing="ij")
    return p.reshape(-1), n.reshape(-1)


def cmr_loss(pos_scores: Tensor, neg_scores: Tensor, margin: float = 0.2) -> Tensor | None:
    """Mean of ``max(0, b + p_neg - p_pos)`` over all pooled score pairs.

    Inputs are the modulated video and subtitle scores of the sampled
    positive and negative candidates, pooled into one vector per side.
    Returns None when either side is empty.
    """
    pos_scores, neg_scores = tc.as_tensor(pos_scores), tc.as_tensor(neg_scores)
    if pos_scores.data.size == 0 or neg_scores.data.size == 0:
        return None
    pi, ni = cmr_pairs(np.arange(pos_scores.data.size), np.arange(neg_scores.data.size))
    p = tc.take(tc.reshape(pos_scores, (-1,)), pi)
    n = tc.take(tc.reshape(neg_scores, (-1,)), ni)
    return tc.mean(tc.relu(tc.add(tc.sub(n, p), margin)))


def expand_span(span, fraction: float, timeline_length: float) -> tuple[float, float]:
    s, e = span
    grow = fraction * (e - s)
    return max(0.0, s - grow), min(timeline_length, e + grow)


def select_moment(
    cands: Sequence[MoICandidate], expand_fraction: float = 0.0, timeline_length: float | None = None
) -> tuple[float, float]:
    """Pick the candidate whose larger modulated score is highest, then widen it."""
    if not cands:
        raise tc.ContractError("select_moment needs at least one candidate")
    best = max(range(len(cands)), key=lambda i: (max(cands[i].m_v, cands[i].m_s), -cands[i].span[0], -i))
    T = timeline_length if timeline_length is not None else max(c.span[1] for c in cands)
    return expand_span(cands[best].span, expand_fraction, T)


def winner_index(m_v: np.ndarray, m_s: np.ndarray, starts: np.ndarray) -> int:
    """Index of the highest ``max(m_v, m_s)``; ties go to the earliest start."""
    score = np.maximum(m_v, m_s)
    top = np.flatnonzero(score == score.max())
    return int(top[np.argmin(starts[top])])


# ---------------------------------------------------------------------------
# scoring network


def init_mpn(params: ParamStore, d: int) -> None:
    for mod in ("video", "subtitle"):
        init_birnn(params, f"mpn.{mod}.rnn", 2 * d, d)
    init_mlp(params, "mpn.regressor", d, d, 1)


def moment_features(
    ctx: Tensor, ctx_mask: np.ndarray, query: Tensor, query_mask: np.ndarray, params: ParamStore, modality: str
) -> Tensor:
    """C2Q attention, ``[C; C^H]``, bidirectional LSTM, temporal max-pool: ``(B, d)``."""
    attended = dot_attention(ctx, query, query_mask)
    x = tc.concat_feature([ctx, attended])
    lengths = np.asarray(ctx_mask).sum(axis=-1)
    h = birnn_encode(x, params, f"mpn.{modality}.rnn", lengths=lengths)
    return tc.maxpool_time(h, ctx_mask)


def regress_score(f: Tensor, params: ParamStore) -> Tensor:
    """Shared FC(d)-ReLU-FC(1)-sigmoid regressor: ``(B, d) -> (B,)``."""
    return tc.reshape(tc.sigmoid(mlp(f, params, "mpn.regressor")), (-1,))


def score_candidate(cand: MoICandidate, V: Tensor, S: Tensor, H: Tensor, params: ParamStore,
                    shot_rows: Sequence[Sequence[int]], sentence_rows: Sequence[Sequence[int]]):
    """Moment scores ``(m_v, m_s)`` of one candidate.

    ``V``, ``S`` and ``H`` are encoded ``(n, d)`` sequences; ``shot_rows[i]``
    lists the rows of ``V`` belonging to shot ``i`` (likewise for sentences).
    A modality with no member rows is scored from a single zero row.
    """
    scores = []
    for seq, rows_of, members, mod in (
        (V, shot_rows, cand.shots, "video"),
        (S, sentence_rows, cand.sentences, "subtitle"),
    ):
        rows = [r for m in members for r in rows_of[m]]
        if rows:
            ctx = tc.take(seq, np.array(rows)[None, :])
        else:
            ctx = tc.Tensor(np.zeros((1, 1, seq.shape[-1])))
        mask = np.ones(ctx.shape[:2], dtype=bool)
        hq = tc.reshape(H, (1,) + H.shape)
        f = moment_features(ctx, mask, hq, np.ones(hq.shape[:2], dtype=bool), params, mod)
        scores.append(regress_score(f, params))
    return scores[0], scores[1]
