"""Clip/subtitle/QA records, shot segmentation and the synthetic generator.

Token ids live in one integer space with disjoint ranges for words, visual
concepts and action concepts; id 0 is padding.
"""

from __future__ import annotations

import gc
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import chain
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensorcore import ContractError

LABELS = ("SS", "SV", "VS", "VV")  # (localization modality, answer modality)
QUESTION_TYPES = ("who", "what", "where", "when", "why", "how")
N_ANSWERS = 5
MAX_ACTIONS = 5
_SPAN_TOL = 1e-9


class ConfigError(ValueError):
    pass


class ValidationError(ValueError):
    def __init__(self, index: int, field_path: str, message: str):
        self.index = index
        self.field = field_path
        super().__init__(f"record {index} (line {index + 1}): field {field_path!r}: {message}")


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    index: int
    concepts: tuple[int, ...]


@dataclass
class Shot:
    span: tuple[float, float]
    concepts: list[int]
    action_concepts: list[int] = field(default_factory=list)
    frames: tuple[int, int] = (0, 0)  # first and last frame index, inclusive

    @property
    def tokens(self) -> list[int]:
        """Visual concepts followed by action concepts."""
        return list(self.concepts) + list(self.action_concepts)


@dataclass
class SubtitleSentence:
    span: tuple[float, float]
    tokens: list[int]


@dataclass
class ClipRecord:
    clip_id: str
    timeline_length: float
    frames: list[list[int]]
    shots: list[Shot]
    sentences: list[SubtitleSentence]
    question: list[int]
    question_type: str
    answers: list[list[int]]
    gt_answer: int
    gt_moment: tuple[float, float]
    modality_label: str

    def hypotheses(self) -> list[list[int]]:
        return [list(self.question) + list(a) for a in self.answers]

    def to_dict(self) -> dict:
        """JSON-ready dict; key order matches the field order."""
        return {
            "clip_id": self.clip_id,
            "timeline_length": self.timeline_length,
            "frames": [list(f) for f in self.frames],
            "shots": [
                {
                    "span": list(s.span),
                    "concepts": list(s.concepts),
                    "action_concepts": list(s.action_concepts),
                    "frames": list(s.frames),
                }
                for s in self.shots
            ],
            "sentences": [{"span": list(s.span), "tokens": list(s.tokens)} for s in self.sentences],
            "question": list(self.question),
            "question_type": self.question_type,
            "answers": [list(a) for a in self.answers],
            "gt_answer": self.gt_answer,
            "gt_moment": list(self.gt_moment),
            "modality_label": self.modality_label,
        }


@dataclass(frozen=True)
class Vocab:
    """Token id layout: ``0`` pad, then words, visual concepts, actions.

    The word range starts with the fixed question vocabulary (question-type
    tags, two answer-modality verbs, two localization markers).
    """

    n_background_words: int = 60
    n_cue_words: int = 40
    n_background_concepts: int = 60
    n_cue_concepts: int = 40
    n_actions: int = 20

    @property
    def n_fixed_words(self) -> int:
        return len(QUESTION_TYPES) + 4

    def qtype_id(self, qtype: str) -> int:
        return 1 + QUESTION_TYPES.index(qtype)

    def verb_id(self, modality: str) -> int:
        return 1 + len(QUESTION_TYPES) + "SV".index(modality)

    def marker_id(self, modality: str) -> int:
        return 3 + len(QUESTION_TYPES) + "SV".index(modality)

    @property
    def background_words(self) -> range:
        s = 1 + self.n_fixed_words
        return range(s, s + self.n_background_words)

    @property
    def cue_words(self) -> range:
        s = self.background_words.stop
        return range(s, s + self.n_cue_words)

    @property
    def background_concepts(self) -> range:
        s = self.cue_words.stop
        return range(s, s + self.n_background_concepts)

    @property
    def cue_concepts(self) -> range:
        s = self.background_concepts.stop
        return range(s, s + self.n_cue_concepts)

    @property
    def actions(self) -> range:
        s = self.cue_concepts.stop
        return range(s, s + self.n_actions)

    @property
    def words(self) -> range:
        return range(1, self.cue_words.stop)

    @property
    def concepts(self) -> range:
        return range(self.background_concepts.start, self.cue_concepts.stop)

    @property
    def size(self) -> int:
        return self.actions.stop


@dataclass
class GeneratorConfig:
    n_clips: int = 2000
    timeline_length: float = 12.0
    n_frames: int = 24
    n_sentences: int = 12
    words_per_sentence: int = 3
    concepts_per_shot: int = 2
    max_shot_frames: int = 4
    frame_noise: float = 0.1
    action_prob: float = 0.3
    gt_length: tuple[float, float] = (0.25, 0.34)  # fraction of the timeline
    answer_copies: int = 4  # elements inside the moment that carry the answer cue
    distractor_margin: float = 0.25  # keep distractors this many GT lengths away
    label_mix: dict[str, float] = field(default_factory=lambda: {k: 0.25 for k in LABELS})
    vocab: Vocab = field(default_factory=Vocab)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        if "vocab" in d:
            bad = set(d["vocab"]) - set(Vocab.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown vocab keys: {sorted(bad)}")
            d["vocab"] = Vocab(**d["vocab"])
        if "gt_length" in d:
            d["gt_length"] = tuple(d["gt_length"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gt_length"] = list(self.gt_length)
        return d

    @property
    def sentence_duration(self) -> float:
        return self.timeline_length / self.n_sentences

    @property
    def frame_duration(self) -> float:
        return self.timeline_length / self.n_frames

    def gt_units(self) -> tuple[int, int]:
        lo = math.ceil(self.gt_length[0] * self.n_sentences - 1e-9)
        hi = math.floor(self.gt_length[1] * self.n_sentences + 1e-9)
        return lo, hi

    def check(self) -> None:
        v = self.vocab
        if self.n_clips < 0 or self.n_frames < 1 or self.n_sentences < 1:
            raise ConfigError("n_clips, n_frames and n_sentences must be positive")
        if self.n_frames % self.n_sentences:
            raise ConfigError("n_frames must be a multiple of n_sentences")
        if self.answer_copies < 1:
            raise ConfigError("answer_copies must be at least 1")
        if self.words_per_sentence < 2:
            raise ConfigError("words_per_sentence must be at least 2")
        lo, hi = self.gt_units()
        if lo < 1 or hi < lo or hi > self.n_sentences:
            raise ConfigError(f"gt_length {self.gt_length} admits no whole-sentence moment")
        if min(v.n_cue_words, v.n_cue_concepts) < N_ANSWERS + 1:
            raise ConfigError(
                f"need at least {N_ANSWERS + 1} cue tokens per modality to keep cues unique"
            )
        if v.n_background_concepts < 2 * self.concepts_per_shot + 2:
            raise ConfigError("background concept vocabulary too small for disjoint shots")
        if v.n_background_words < 1 or v.n_actions < 1:
            raise ConfigError("vocabulary ranges must be non-empty")
        if set(self.label_mix) - set(LABELS) or not math.isclose(sum(self.label_mix.values()), 1.0):
            raise ConfigError(f"label_mix must be a distribution over {LABELS}")


# ---------------------------------------------------------------------------
# shots


def set_iou(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def segment_shots(
    frames: Sequence[Frame], threshold: float = 0.3, frame_duration: float = 1.0
) -> list[Shot]:
    """Greedy left-to-right shot segmentation.

    A frame joins the current shot when the IoU between its concept set and
    the union of the shot's concepts so far exceeds ``threshold``.
    """
    if not frames:
        raise EmptyInputError("segment_shots needs at least one frame")
    groups: list[list[Frame]] = [[frames[0]]]
    union = set(frames[0].concepts)
    for fr in frames[1:]:
        if set_iou(fr.concepts, union) > threshold:
            groups[-1].append(fr)
            union |= set(fr.concepts)
        else:
            groups.append([fr])
            union = set(fr.concepts)
    shots = []
    for g in groups:
        seen: dict[int, None] = {}
        for fr in g:
            for c in fr.concepts:
                seen.setdefault(c, None)
        span = (g[0].index * frame_duration, (g[-1].index + 1) * frame_duration)
        shots.append(Shot(span=span, concepts=list(seen), frames=(g[0].index, g[-1].index)))
    return shots


def attach_action_concepts(shots: Sequence[Shot], labels: Sequence[Sequence[int]]) -> list[Shot]:
    """Copy of ``shots`` with one action label list (at most five ids) each."""
    if len(labels) != len(shots):
        raise ContractError(f"{len(labels)} label lists for {len(shots)} shots")
    out = []
    for shot, lab in zip(shots, labels):
        if len(lab) > MAX_ACTIONS:
            raise ContractError(f"at most {MAX_ACTIONS} action concepts per shot, got {len(lab)}")
        out.append(Shot(shot.span, list(shot.concepts), list(lab), shot.frames))
    return out


# ---------------------------------------------------------------------------
# synthetic generation


def _inside(span, lo, hi) -> bool:
    return span[0] >= lo - _SPAN_TOL and span[1] <= hi + _SPAN_TOL


def _outside(span, lo, hi) -> bool:
    return span[1] <= lo + _SPAN_TOL or span[0] >= hi - _SPAN_TOL


def _make_frames(cfg: GeneratorConfig, rng: np.random.Generator, cuts: set[int]) -> list[Frame]:
    """Frame concept lists with disjoint concept sets on either side of each planned cut."""
    pool = list(cfg.vocab.background_concepts)
    frames: list[Frame] = []
    prev_union: set[int] = set()
    base: list[int] = []
    run = 0
    target = 0
    for i in range(cfg.n_frames):
        if i == 0 or i in cuts or run >= target:
            choices = [c for c in pool if c not in prev_union]
            base = [int(c) for c in rng.choice(choices, cfg.concepts_per_shot, replace=False)]
            prev_union = set(base)
            run = 0
            target = int(rng.integers(1, cfg.max_shot_frames + 1))
        concepts = list(base)
        if run > 0 and rng.random() < cfg.frame_noise:
            extra = [c for c in pool if c not in prev_union]
            concepts[int(rng.integers(len(concepts)))] = int(rng.choice(extra))
        prev_union |= set(concepts)
        frames.append(Frame(i, tuple(sorted(concepts))))
        run += 1
    return frames


def _generate_one(cfg: GeneratorConfig, rng: np.random.Generator, idx: int) -> ClipRecord:
    v = cfg.vocab
    T = cfg.timeline_length
    label = str(rng.choice(list(cfg.label_mix), p=list(cfg.label_mix.values())))
    loc_mod, ans_mod = label[0], label[1]
    qtype = str(rng.choice(QUESTION_TYPES))

    lo, hi = cfg.gt_units()
    k = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, cfg.n_sentences - k + 1))
    su = cfg.sentence_duration
    gt = (start * su, (start + k) * su)
    fps = cfg.n_frames // cfg.n_sentences
    frames = _make_frames(cfg, rng, {start * fps, (start + k) * fps})
    shots = segment_shots(frames, frame_duration=cfg.frame_duration)
    frame_lists = [list(f.concepts) for f in frames]

    words = np.asarray(v.background_words)
    sentences = [
        SubtitleSentence((i * su, (i + 1) * su), rng.choice(words, cfg.words_per_sentence).tolist())
        for i in range(cfg.n_sentences)
    ]
    actions: list[list[int]] = [
        [int(rng.choice(v.actions))] if rng.random() < cfg.action_prob else [] for _ in shots
    ]

    pools = {"S": np.array(v.cue_words), "V": np.array(v.cue_concepts)}
    if loc_mod == ans_mod:
        picks = rng.choice(pools[loc_mod], N_ANSWERS + 1, replace=False)
        loc_cue, ans_cues = int(picks[0]), [int(c) for c in picks[1:]]
    else:
        loc_cue = int(rng.choice(pools[loc_mod]))
        ans_cues = [int(c) for c in rng.choice(pools[ans_mod], N_ANSWERS, replace=False)]
    answer_cue, distractors = ans_cues[0], ans_cues[1:]
    cue_set = {loc_cue, *ans_cues}

    def put(mod: str, elem: int, cue: int) -> bool:
        if mod == "S":
            free = [p for p, w in enumerate(sentences[elem].tokens) if w not in cue_set]
            if not free:
                return False
            sentences[elem].tokens[free[int(rng.integers(len(free)))]] = cue
            return True
        shot = shots[elem]
        if cue not in shot.concepts:
            shot.concepts.append(cue)
            for fi in range(shot.frames[0], shot.frames[1] + 1):
                frame_lists[fi].append(cue)
        # action labels track the planted visual cue
        actions[elem] = [int(v.actions[(cue - v.cue_concepts.start) % v.n_actions])]
        return True

    def elements(mod: str) -> list:
        return [s.span for s in (sentences if mod == "S" else shots)]

    inside = {m: [i for i, sp in enumerate(elements(m)) if _inside(sp, *gt)] for m in "SV"}
    for m in "SV":
        assert inside[m], "moment boundaries are always element boundaries"

    for e in inside[loc_mod]:
        put(loc_mod, e, loc_cue)
    candidates = list(inside[ans_mod])
    rng.shuffle(candidates)
    placed = 0
    for e in candidates:
        if placed < cfg.answer_copies and put(ans_mod, e, answer_cue):
            placed += 1
    if not placed:
        raise ConfigError("no room for the answer cue inside the moment")

    margin = cfg.distractor_margin * (gt[1] - gt[0])
    far = [i for i, sp in enumerate(elements(ans_mod)) if _outside(sp, gt[0] - margin, gt[1] + margin)]
    near = [i for i, sp in enumerate(elements(ans_mod)) if _outside(sp, *gt)]
    for cue in distractors:
        for pool in (far, near):
            order = list(pool)
            rng.shuffle(order)
            if any(put(ans_mod, e, cue) for e in order):
                break
        else:
            raise ConfigError("no room for distractor cues outside the moment")

    shots = attach_action_concepts(shots, actions)
    gt_answer = int(rng.integers(N_ANSWERS))
    others = iter(distractors)
    answers = [[answer_cue] if i == gt_answer else [next(others)] for i in range(N_ANSWERS)]
    question = [v.qtype_id(qtype), v.verb_id(ans_mod), v.marker_id(loc_mod), loc_cue]
    return ClipRecord(
        clip_id=f"clip{idx:06d}",
        timeline_length=float(T),
        frames=frame_lists,
        shots=shots,
        sentences=sentences,
        question=question,
        question_type=qtype,
        answers=answers,
        gt_answer=gt_answer,
        gt_moment=gt,
        modality_label=label,
    )


def generate_synthetic(cfg: GeneratorConfig, seed: int = 0) -> list[ClipRecord]:
    """Plant a moment, localization cue, answer cue and distractors per record.

    Output is a pure function of ``(cfg, seed)``; record ``i`` draws from its
    own generator keyed by ``(seed, i)``.
    """
    cfg.check()
    return [
        _generate_one(cfg, np.random.default_rng([seed, i]), i) for i in range(cfg.n_clips)
    ]


# ---------------------------------------------------------------------------
# persistence and validation


def _fail(i: int, path: str, msg: str):
    raise ValidationError(i, path, msg)


def _need(d: dict, key: str, typ, i: int, prefix: str = ""):
    path = f"{prefix}{key}"
    if not isinstance(d, dict) or key not in d:
        _fail(i, path, "missing")
    val = d[key]
    if typ is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            _fail(i, path, f"expected a finite number, got {val!r}")
        return float(val)
    if typ is int:
        if isinstance(val, bool) or not isinstance(val, int):
            _fail(i, path, f"expected an integer, got {val!r}")
        return val
    if not isinstance(val, typ):
        _fail(i, path, f"expected {typ.__name__}, got {type(val).__name__}")
    return val


def _span(val, i: int, path: str) -> tuple[float, float]:
    if type(val) is list and len(val) == 2 and type(val[0]) is float and type(val[1]) is float:
        s, e = val
        if s < e and math.isfinite(s) and math.isfinite(e):
            return s, e
    if (
        not isinstance(val, list)
        or len(val) != 2
        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val)
    ):
        _fail(i, path, f"expected [start, end], got {val!r}")
    s, e = float(val[0]), float(val[1])
    if not (math.isfinite(s) and math.isfinite(e)) or s >= e:
        _fail(i, path, f"span must satisfy start < end, got {val!r}")
    return s, e


_INT_ONLY = frozenset([int])
_LIST_ONLY = frozenset([list])


def _tokens(val, i: int, path: str, allow_empty: bool = False) -> list[int]:
    if type(val) is list and val and _INT_ONLY.issuperset(map(type, val)) and min(val) > 0:
        return val
    if not isinstance(val, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in val):
        _fail(i, path, "expected a list of integer token ids")
    if not val and not allow_empty:
        _fail(i, path, "must not be empty")
    if any(t <= 0 for t in val):
        _fail(i, path, "token ids must be positive (0 is padding)")
    return list(val)


def _check_track(spans: list[tuple[float, float]], T: float, i: int, path: str) -> None:
    pos = 0.0
    for j, (s, e) in enumerate(spans):
        if abs(s - pos) > 1e-6:
            _fail(i, f"{path}[{j}].span", f"track must be contiguous from 0; expected start {pos}")
        pos = e
    if abs(pos - T) > 1e-6:
        _fail(i, path, f"track ends at {pos}, timeline_length is {T}")


def _ok_span(v) -> bool:
    return (type(v) is list and len(v) == 2 and type(v[0]) is float and type(v[1]) is float
            and v[0] < v[1] and math.isfinite(v[0]) and math.isfinite(v[1]))


def _ok_tokens(v, allow_empty: bool = False) -> bool:
    if type(v) is not list:
        return False
    if not v:
        return allow_empty
    return _INT_ONLY.issuperset(map(type, v)) and min(v) > 0


def _fast_shot(s) -> Shot | None:
    # well-formed input skips the per-field error bookkeeping; anything else falls through
    if type(s) is not dict or len(s) != 4:
        return None
    span, concepts, acts, fr = s.get("span"), s.get("concepts"), s.get("action_concepts"), s.get("frames")
    if not (_ok_span(span) and _ok_tokens(concepts) and len(set(concepts)) == len(concepts)
            and _ok_tokens(acts, True) and len(acts) <= MAX_ACTIONS
            and type(fr) is list and len(fr) == 2 and type(fr[0]) is int and type(fr[1]) is int and fr[0] <= fr[1]):
        return None
    return Shot((span[0], span[1]), concepts, acts, (fr[0], fr[1]))


def _fast_sentence(s) -> SubtitleSentence | None:
    if type(s) is not dict or len(s) != 2:
        return None
    span, tokens = s.get("span"), s.get("tokens")
    if not (_ok_span(span) and _ok_tokens(tokens)):
        return None
    return SubtitleSentence((span[0], span[1]), tokens)


def record_from_dict(d, i: int = 0) -> ClipRecord:
    """Validate a decoded JSON object and build a ClipRecord."""
    if not isinstance(d, dict):
        _fail(i, "<record>", "expected a JSON object")
    clip_id = _need(d, "clip_id", str, i)
    T = _need(d, "timeline_length", float, i)
    if T <= 0:
        _fail(i, "timeline_length", "must be positive")
    frames = _need(d, "frames", list, i)
    if not (_LIST_ONLY.issuperset(map(type, frames)) and all(frames)
            and _INT_ONLY.issuperset(map(type, flat := list(chain.from_iterable(frames))))
            and min(flat, default=1) > 0):
        for j, fr in enumerate(frames):
            _tokens(fr, i, f"frames[{j}]")
    shots = []
    for j, s in enumerate(_need(d, "shots", list, i)):
        fast = _fast_shot(s)
        if fast is not None:
            shots.append(fast)
            continue
        p = f"shots[{j}]."
        span = _span(_need(s, "span", list, i, p), i, p + "span")
        concepts = _tokens(_need(s, "concepts", list, i, p), i, p + "concepts")
        if len(set(concepts)) != len(concepts):
            _fail(i, p + "concepts", "concepts must be deduplicated")
        acts = _tokens(_need(s, "action_concepts", list, i, p), i, p + "action_concepts", True)
        if len(acts) > MAX_ACTIONS:
            _fail(i, p + "action_concepts", f"at most {MAX_ACTIONS} action concepts")
        fr = _need(s, "frames", list, i, p)
        if len(fr) != 2 or not all(isinstance(x, int) for x in fr) or fr[0] > fr[1]:
            _fail(i, p + "frames", "expected [first, last] frame indices")
        shots.append(Shot(span, concepts, acts, (fr[0], fr[1])))
    if not shots:
        _fail(i, "shots", "must not be empty")
    sentences = []
    for j, s in enumerate(_need(d, "sentences", list, i)):
        fast = _fast_sentence(s)
        if fast is not None:
            sentences.append(fast)
            continue
        p = f"sentences[{j}]."
        span = _span(_need(s, "span", list, i, p), i, p + "span")
        sentences.append(SubtitleSentence(span, _tokens(_need(s, "tokens", list, i, p), i, p + "tokens")))
    if not sentences:
        _fail(i, "sentences", "must not be empty")
    _check_track([s.span for s in shots], T, i, "shots")
    _check_track([s.span for s in sentences], T, i, "sentences")
    question = _tokens(_need(d, "question", list, i), i, "question")
    qtype = _need(d, "question_type", str, i)
    if qtype not in QUESTION_TYPES:
        _fail(i, "question_type", f"expected one of {QUESTION_TYPES}")
    answers = _need(d, "answers", list, i)
    if len(answers) != N_ANSWERS:
        _fail(i, "answers", f"expected exactly {N_ANSWERS} answers, got {len(answers)}")
    answers = [_tokens(a, i, f"answers[{j}]") for j, a in enumerate(answers)]
    gt_answer = _need(d, "gt_answer", int, i)
    if not 0 <= gt_answer < N_ANSWERS:
        _fail(i, "gt_answer", f"must be in 0..{N_ANSWERS - 1}")
    gt = _span(_need(d, "gt_moment", list, i), i, "gt_moment")
    if gt[0] < -1e-9 or gt[1] > T + 1e-9:
        _fail(i, "gt_moment", f"must lie within [0, {T}]")
    label = _need(d, "modality_label", str, i)
    if label not in LABELS:
        _fail(i, "modality_label", f"expected one of {LABELS}")
    return ClipRecord(clip_id, T, frames, shots, sentences, question, qtype, answers, gt_answer, gt, label)


def dumps_record(rec: ClipRecord) -> str:
    return json.dumps(rec.to_dict(), separators=(",", ":"))


def save_dataset(records: Sequence[ClipRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def load_dataset(path) -> list[ClipRecord]:
    out = []
    # records hold no cycles; collector passes over the growing heap only cost time
    paused = gc.isenabled()
    gc.disable()
    try:
        with open(Path(path), encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(i, "<line>", f"invalid JSON: {exc.msg}") from None
                out.append(record_from_dict(d, i))
    finally:
        if paused:
            gc.enable()
    return out


def max_token_id(records: Iterable[ClipRecord]) -> int:
    m = 0
    for r in records:
        for s in r.shots:
            m = max(m, *s.tokens)
        for s in r.sentences:
            m = max(m, *s.tokens)
        m = max(m, *r.question, *(t for a in r.answers for t in a))
    return m
