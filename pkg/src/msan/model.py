"""Batched forward pass joining moment proposal and answer reasoning."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .datamodel import ClipRecord
from .encoder import birnn_encode, embed, init_birnn, init_embedding, masked_mean, mlp
from .hrn import N_ANSWERS, blend_logits, build_ham, ce_loss, init_heads, predict_logits
from .mpn import (
    MODES,
    MoICandidate,
    expand_span,
    generate_candidates,
    init_mim_gate,
    init_mpn,
    label_candidates,
    mim_alpha,
    moment_features,
    modulate_moment_scores,
    overlapping,
    regress_score,
    sample_balanced,
    cmr_pairs,
    winner_index,
    window_lengths,
)
from .tensorcore import ParamStore, Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    d_emb: int = 64
    windows: tuple[float, ...] = (0.25, 0.5, 1.0)  # fractions of the timeline
    stride_fraction: float = 0.5
    expand_fraction: float = 0.25
    margin: float = 0.2
    modulation: str = "multiplicative"
    use_mpn: bool = True
    gt_moment: bool = False
    use_sa: bool = True
    use_c2c: bool = True
    mim_mpn: bool = True
    mim_hrn: bool = True
    use_actions: bool = True
    head_mode: str = "scalar"  # scalar | fc5
    tied_init: bool = True  # stream encoders start from identical weights
    cmr_weight: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        self.windows = tuple(self.windows)
        if self.modulation not in MODES:
            from .datamodel import ConfigError

            raise ConfigError(f"unknown modulation mode {self.modulation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = list(self.windows)
        return d


def build_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    params = ParamStore(rng_seed=seed)
    init_embedding(params, "embedding", cfg.vocab_size, cfg.d_emb)
    for stream in ("video", "subtitle", "hyp"):
        init_birnn(params, f"enc.{stream}", cfg.d_emb, cfg.d, init_key="enc" if cfg.tied_init else None)
    if cfg.use_mpn:
        init_mpn(params, cfg.d)
        if cfg.mim_mpn:
            init_mim_gate(params, "mim.mpn", cfg.d)
    init_heads(params, cfg.d, 3 if cfg.use_c2c else 2, cfg.head_mode)
    if cfg.mim_hrn:
        init_mim_gate(params, "mim.hrn", cfg.d)
    return params


def _token_range(offsets: np.ndarray, members: Sequence[int]) -> tuple[int, int]:
    if not members:
        return 0, 0
    return int(offsets[min(members)]), int(offsets[max(members) + 1])


@dataclass
class Example:
    """A record flattened into token arrays, with its labelled candidates."""

    record: ClipRecord
    vid: np.ndarray
    vid_off: np.ndarray
    shot_spans: list
    sub: np.ndarray
    sub_off: np.ndarray
    sent_spans: list
    question: np.ndarray
    hyps: list
    cands: list[MoICandidate] = field(default_factory=list)
    cand_v: np.ndarray | None = None
    cand_s: np.ndarray | None = None
    positive: np.ndarray | None = None
    cand_group: np.ndarray | None = None  # window-length bucket per candidate

    def vrange(self, span) -> tuple[int, int]:
        return _token_range(self.vid_off, overlapping(self.shot_spans, span))

    def srange(self, span) -> tuple[int, int]:
        return _token_range(self.sub_off, overlapping(self.sent_spans, span))


def prepare(rec: ClipRecord, cfg: ModelConfig) -> Example:
    shot_tokens = [s.tokens if cfg.use_actions else list(s.concepts) for s in rec.shots]
    vid_off = np.cumsum([0] + [len(t) for t in shot_tokens])
    sub_off = np.cumsum([0] + [len(s.tokens) for s in rec.sentences])
    ex = Example(
        record=rec,
        vid=np.array([t for ts in shot_tokens for t in ts], dtype=np.intp),
        vid_off=vid_off,
        shot_spans=[s.span for s in rec.shots],
        sub=np.array([t for s in rec.sentences for t in s.tokens], dtype=np.intp),
        sub_off=sub_off,
        sent_spans=[s.span for s in rec.sentences],
        question=np.array(rec.question, dtype=np.intp),
        hyps=[np.array(h, dtype=np.intp) for h in rec.hypotheses()],
    )
    if cfg.use_mpn:
        cands = generate_candidates(rec, window_lengths(cfg.windows, rec.timeline_length), cfg.stride_fraction)
        label_candidates(cands, rec.gt_moment)
        ex.cands = cands
        ex.cand_v = np.array([_token_range(vid_off, c.shots) for c in cands], dtype=np.intp)
        ex.cand_s = np.array([_token_range(sub_off, c.sentences) for c in cands], dtype=np.intp)
        ex.positive = np.array([c.label == "positive" for c in cands])
        lengths = window_lengths(cfg.windows, rec.timeline_length)
        ex.cand_group = np.array([int(np.argmin([abs(c.length - w) for w in lengths])) for c in cands])
    return ex


def _pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.intp)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def gather_ranges(X: Tensor, rows: np.ndarray, ranges: np.ndarray):
    """Slice token ranges ``[a, b)`` of record ``rows[i]`` out of padded ``X``.

    Returns ``(n, L, d)`` features and the valid-step mask. Empty ranges
    become a single zero row.
    """
    B, L, d = X.shape
    lengths = ranges[:, 1] - ranges[:, 0]
    width = max(1, int(lengths.max()))
    t = np.arange(width)[None, :]
    filled = t < lengths[:, None]
    idx = np.where(filled, rows[:, None] * L + ranges[:, :1] + t, 0)
    out = tc.take(tc.reshape(X, (B * L, d)), idx, mask=filled)
    valid = t < np.maximum(lengths, 1)[:, None]
    return out, valid


def _bucketed_scores(params, group, rec, X, ranges, Q, q_mask, modality) -> Tensor:
    """Moment scores of all candidates, batching candidates of one window length together."""
    B, Lq, d = Q.shape
    Q2 = tc.reshape(Q, (B * Lq, d))
    parts, order = [], []
    for g in np.unique(group):
        sel = np.flatnonzero(group == g)
        r = rec[sel]
        ctx, ctx_mask = gather_ranges(X, r, ranges[sel])
        Qc = tc.take(Q2, r[:, None] * Lq + np.arange(Lq)[None, :])
        parts.append(regress_score(moment_features(ctx, ctx_mask, Qc, q_mask[r], params, modality), params))
        order.append(sel)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return tc.take(tc.concat(parts, axis=0), inverse)


@dataclass
class Output:
    loss: Tensor
    cmr: Tensor | None
    ce: Tensor
    logits: np.ndarray
    l_v: np.ndarray
    l_s: np.ndarray
    alpha: np.ndarray | None
    beta: np.ndarray | None
    m_v: list = field(default_factory=list)  # modulated scores per record
    m_s: list = field(default_factory=list)
    winner: list = field(default_factory=list)  # unexpanded winning span per record
    hrn_span: list = field(default_factory=list)


def forward(params: ParamStore, cfg: ModelConfig, batch: Sequence[Example], train: bool = False,
            rng: np.random.Generator | None = None) -> Output:
    """Full forward pass and joint loss for a batch of prepared records.

    With ``train`` the answer head sees the ground-truth moment widened by
    ``expand_fraction``; otherwise it sees the widened winning candidate.
    """
    B = len(batch)
    emb = params["embedding"]

    vid_ids, vid_mask = _pad([ex.vid for ex in batch])
    sub_ids, sub_mask = _pad([ex.sub for ex in batch])
    q_ids, q_mask = _pad([ex.question for ex in batch])
    h_ids, h_mask = _pad([h for ex in batch for h in ex.hyps])
    V = birnn_encode(embed(emb, vid_ids), params, "enc.video", vid_mask.sum(1))
    S = birnn_encode(embed(emb, sub_ids), params, "enc.subtitle", sub_mask.sum(1))
    Q = birnn_encode(embed(emb, q_ids), params, "enc.hyp", q_mask.sum(1))
    H = birnn_encode(embed(emb, h_ids), params, "enc.hyp", h_mask.sum(1))
    q = masked_mean(Q, q_mask)

    cmr = None
    alpha = None
    out_mv, out_ms, winners = [], [], []
    if cfg.use_mpn:
        counts = [len(ex.cands) for ex in batch]
        rec = np.repeat(np.arange(B), counts)
        group = np.concatenate([ex.cand_group for ex in batch])
        m_v = _bucketed_scores(params, group, rec, V, np.concatenate([ex.cand_v for ex in batch]),
                               Q, q_mask, "video")
        m_s = _bucketed_scores(params, group, rec, S, np.concatenate([ex.cand_s for ex in batch]),
                               Q, q_mask, "subtitle")
        if cfg.mim_mpn:
            alpha = mim_alpha(q, params, "mim.mpn")
            m_v, m_s = modulate_moment_scores(m_v, m_s, tc.take(alpha, rec), cfg.modulation)
        C = len(rec)
        pooled = tc.concat([m_v, m_s], axis=0)
        pi_all, ni_all, w_all = [], [], []
        start = 0
        per_record = []
        for b, ex in enumerate(batch):
            pos, neg = sample_balanced(ex.positive, rng)
            if len(pos):
                pos, neg = pos + start, neg + start
                pi, ni = cmr_pairs(np.concatenate([pos, pos + C]), np.concatenate([neg, neg + C]))
                per_record.append((pi, ni))
            start += counts[b]
        for pi, ni in per_record:
            pi_all.append(pi)
            ni_all.append(ni)
            w_all.append(np.full(len(pi), 1.0 / (len(pi) * len(per_record))))
        if per_record:
            pi, ni = np.concatenate(pi_all), np.concatenate(ni_all)
            hinge = tc.relu(tc.add(tc.sub(tc.take(pooled, ni), tc.take(pooled, pi)), cfg.margin))
            cmr = tc.sum(tc.mul(hinge, np.concatenate(w_all)))
        mv, ms = m_v.data, m_s.data
        start = 0
        for b, ex in enumerate(batch):
            sl = slice(start, start + counts[b])
            start += counts[b]
            out_mv.append(mv[sl].copy())
            out_ms.append(ms[sl].copy())
            starts = np.array([c.span[0] for c in ex.cands])
            winners.append(ex.cands[winner_index(mv[sl], ms[sl], starts)].span)

    spans = []
    for b, ex in enumerate(batch):
        r = ex.record
        if not cfg.use_mpn:
            span = (0.0, r.timeline_length)
        elif train or cfg.gt_moment:
            span = expand_span(r.gt_moment, cfg.expand_fraction, r.timeline_length)
        else:
            span = expand_span(winners[b], cfg.expand_fraction, r.timeline_length)
        spans.append(span)
    rows = np.arange(B)
    V_sel, v_sel_mask = gather_ranges(V, rows, np.array([ex.vrange(sp) for ex, sp in zip(batch, spans)]))
    S_sel, s_sel_mask = gather_ranges(S, rows, np.array([ex.srange(sp) for ex, sp in zip(batch, spans)]))
    ctx = build_ham(V_sel, S_sel, H, v_sel_mask, s_sel_mask, h_mask,
                    group=N_ANSWERS, use_sa=cfg.use_sa, use_c2c=cfg.use_c2c)
    l_v, l_s = predict_logits(ctx, params, cfg.head_mode)
    beta = None
    if cfg.mim_hrn:
        beta = tc.sigmoid(mlp(q, params, "mim.hrn"))
        logits = blend_logits(l_v, l_s, beta)
    else:
        logits = tc.add(l_v, l_s)
    ce = ce_loss(logits, [ex.record.gt_answer for ex in batch])
    loss = tc.mul(ce, cfg.ce_weight)
    if cmr is not None:
        loss = tc.add(loss, tc.mul(cmr, cfg.cmr_weight))
    return Output(
        loss=loss,
        cmr=cmr,
        ce=ce,
        logits=logits.data.copy(),
        l_v=l_v.data.copy(),
        l_s=l_s.data.copy(),
        alpha=None if alpha is None else alpha.data.copy(),
        beta=None if beta is None else beta.data.reshape(-1).copy(),
        m_v=out_mv,
        m_s=out_ms,
        winner=winners,
        hrn_span=spans,
    )
