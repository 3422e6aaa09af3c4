"""Training, evaluation and ablation runs."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .datamodel import (
    LABELS,
    QUESTION_TYPES,
    ClipRecord,
    ConfigError,
    GeneratorConfig,
    generate_synthetic,
    max_token_id,
)
from .model import ModelConfig, build_params, forward, prepare
from .mpn import MODES, coverage, expand_span, temporal_iou
from .tensorcore import ParamStore

log = logging.getLogger(__name__)

# named random substreams under the root seed
DATA_STREAM, SHUFFLE_STREAM, SAMPLE_STREAM = 0, 1, 2


class TrainingDivergence(RuntimeError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 3e-4
    max_epochs: int = 10
    early_stop_patience: int = 2
    seed: int = 0
    modulation: str = "multiplicative"
    margin: float = 0.2
    windows: tuple[float, ...] = (0.25, 0.5, 1.0)
    stride_fraction: float = 0.5
    expand_fraction: float = 0.25
    d: int = 64
    d_emb: int = 64
    cmr_weight: float = 1.0
    ce_weight: float = 1.0
    use_mpn: bool = True
    gt_moment: bool = False
    use_sa: bool = True
    use_c2c: bool = True
    mim_mpn: bool = True
    mim_hrn: bool = True
    use_actions: bool = True
    head_mode: str = "scalar"
    tied_init: bool = True
    vocab_size: int | None = None  # inferred from the data when unset
    eval_batch_size: int = 64

    def __post_init__(self):
        self.windows = tuple(self.windows)
        for name in ("batch_size", "max_epochs", "early_stop_patience", "d", "d_emb", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.modulation not in MODES:
            raise ConfigError(f"unknown modulation mode {self.modulation!r}; expected one of {MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = list(self.windows)
        return d

    def model_config(self, vocab_size: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        return ModelConfig(vocab_size=self.vocab_size or vocab_size, **{n: getattr(self, n) for n in names})


class Adam:
    def __init__(self, params: ParamStore, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in self.params.items():
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ParamStore
    model_cfg: ModelConfig
    log: list[dict]
    best_epoch: int
    best_valid_accuracy: float


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def make_datasets(seed: int, n_train: int = 2000, n_valid: int = 400, gen_cfg: GeneratorConfig | None = None):
    """Independent train and validation sets drawn from the data substream of ``seed``."""
    gen_cfg = gen_cfg or GeneratorConfig()
    train_seed, valid_seed = (int(x) for x in np.random.SeedSequence([seed, DATA_STREAM]).generate_state(2))
    train_set = generate_synthetic(replace(gen_cfg, n_clips=n_train), seed=train_seed)
    valid_set = generate_synthetic(replace(gen_cfg, n_clips=n_valid), seed=valid_seed)
    return train_set, valid_set


def train(cfg: TrainConfig, train_set: Sequence[ClipRecord], valid_set: Sequence[ClipRecord]) -> TrainResult:
    """Adam with early stopping on validation answer accuracy.

    Keeps the parameters of the best validation epoch. Every random choice
    (init, shuffling, positive/negative sampling) comes from ``cfg.seed``.
    """
    vocab = max(max_token_id(train_set), max_token_id(valid_set)) + 1
    mcfg = cfg.model_config(vocab)
    params = build_params(mcfg, cfg.seed)
    train_ex = [prepare(r, mcfg) for r in train_set]
    valid_ex = [prepare(r, mcfg) for r in valid_set]
    opt = Adam(params, lr=cfg.learning_rate)
    shuffle_rng = _stream(cfg.seed, SHUFFLE_STREAM)
    sample_rng = _stream(cfg.seed, SAMPLE_STREAM)

    history: list[dict] = []
    best_acc, best_epoch, best_snap = -1.0, 0, params.snapshot()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_ex))
        totals = np.zeros(3)
        steps = 0
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_ex[j] for j in order[i : i + cfg.batch_size]]
            out = forward(params, mcfg, batch, train=True, rng=sample_rng)
            loss = out.loss.item()
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            params.zero_grads()
            tc.backward(out.loss, params)
            opt.step()
            totals += [loss, out.ce.item(), out.cmr.item() if out.cmr is not None else 0.0]
            steps += 1
        report, _ = evaluate_examples(params, mcfg, valid_ex, cfg.eval_batch_size)
        improved = report.accuracy > best_acc
        if improved:
            best_acc, best_epoch, best_snap = report.accuracy, epoch, params.snapshot()
            stale = 0
        else:
            stale += 1
        entry = {
            "epoch": epoch,
            "train_loss": totals[0] / steps,
            "train_ce": totals[1] / steps,
            "train_cmr": totals[2] / steps,
            "valid_accuracy": report.accuracy,
            "valid_iou": report.iou,
            "valid_cov": report.cov,
            "best": improved,
        }
        history.append(entry)
        log.info("epoch %d loss %.4f valid acc %.4f iou %s", epoch, entry["train_loss"], report.accuracy, _fmt(report.iou))
        if stale >= cfg.early_stop_patience:
            break
    params.restore(best_snap)
    return TrainResult(params, mcfg, history, best_epoch, best_acc)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    n: int
    accuracy: float
    # localization means are None when no record went through moment proposal
    iou: float | None  # winning candidate vs ground truth
    cov: float | None
    iou_expanded: float | None  # widened span actually passed to the answer head
    cov_expanded: float | None
    by_question_type: dict = field(default_factory=dict)
    by_label: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _group(traces: list[dict], key: str, names: Sequence[str]) -> dict:
    out = {}
    for name in names:
        rows = [t for t in traces if t[key] == name]
        entry = {"n": len(rows), "accuracy": _mean([t["correct"] for t in rows])}
        for gate in ("alpha", "beta"):
            vals = [t[gate] for t in rows if t[gate] is not None]
            entry[f"mean_{gate}"] = _mean(vals) if vals else None
        out[name] = entry
    return out


def _fmt(v, digits: int = 6) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else 0.0


def report_from_traces(traces: list[dict]) -> EvalReport:
    """Aggregate per-record traces; every number is recomputable from them."""
    loc = [t for t in traces if t["iou"] is not None]
    return EvalReport(
        n=len(traces),
        accuracy=_mean([t["correct"] for t in traces]),
        iou=_mean([t["iou"] for t in loc]) if loc else None,
        cov=_mean([t["cov"] for t in loc]) if loc else None,
        iou_expanded=_mean([t["iou_expanded"] for t in loc]) if loc else None,
        cov_expanded=_mean([t["cov_expanded"] for t in loc]) if loc else None,
        by_question_type=_group(traces, "question_type", QUESTION_TYPES),
        by_label=_group(traces, "modality_label", LABELS),
    )


def evaluate_examples(params: ParamStore, mcfg: ModelConfig, examples, batch_size: int = 64):
    traces = []
    for i in range(0, len(examples), batch_size):
        batch = examples[i : i + batch_size]
        out = forward(params, mcfg, batch, train=False)
        for b, ex in enumerate(batch):
            r = ex.record
            pred = int(np.argmax(out.logits[b]))
            t = {
                "clip_id": r.clip_id,
                "modality_label": r.modality_label,
                "question_type": r.question_type,
                "gt_answer": r.gt_answer,
                "predicted_answer": pred,
                "correct": int(pred == r.gt_answer),
                "alpha": None if out.alpha is None else float(out.alpha[b]),
                "beta": None if out.beta is None else float(out.beta[b]),
                "gt_moment": list(r.gt_moment),
                "chosen_span": None,
                "hrn_span": list(out.hrn_span[b]),
                "iou": None,
                "cov": None,
                "iou_expanded": None,
                "cov_expanded": None,
                "l_v": out.l_v[b].tolist(),
                "l_s": out.l_s[b].tolist(),
                "logits": out.logits[b].tolist(),
            }
            if out.winner:
                w = out.winner[b]
                wide = expand_span(w, mcfg.expand_fraction, r.timeline_length)
                t.update(
                    chosen_span=list(w),
                    iou=temporal_iou(w, r.gt_moment),
                    cov=coverage(w, r.gt_moment),
                    iou_expanded=temporal_iou(wide, r.gt_moment),
                    cov_expanded=coverage(wide, r.gt_moment),
                )
            traces.append(t)
    return report_from_traces(traces), traces


def evaluate(params: ParamStore, mcfg: ModelConfig, dataset: Sequence[ClipRecord], batch_size: int = 64):
    """Deterministic evaluation: ``(EvalReport, per-record traces)``."""
    if dataset and max_token_id(dataset) >= mcfg.vocab_size:
        raise CompatibilityError(
            f"dataset uses token id {max_token_id(dataset)} but the model vocabulary has {mcfg.vocab_size}"
        )
    return evaluate_examples(params, mcfg, [prepare(r, mcfg) for r in dataset], batch_size)


def save_checkpoint(path, params: ParamStore, mcfg: ModelConfig) -> None:
    params.save(path, meta={"model": mcfg.to_dict()})


def load_checkpoint(path, expect: TrainConfig | None = None) -> tuple[ParamStore, ModelConfig]:
    params, meta = ParamStore.load(path)
    mcfg = ModelConfig(**meta["model"])
    if expect is not None:
        for name in ("d", "d_emb"):
            if getattr(expect, name) != getattr(mcfg, name):
                raise CompatibilityError(
                    f"checkpoint has {name}={getattr(mcfg, name)}, config asks for {getattr(expect, name)}"
                )
    return params, mcfg


def write_traces(path, traces: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t, separators=(",", ":")) + "\n")


def write_report(prefix, report: EvalReport) -> None:
    """``<prefix>.json`` with the full report, ``<prefix>.csv`` with one row per group."""
    prefix = Path(prefix)
    prefix.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(prefix.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "name", "n", "accuracy", "mean_alpha", "mean_beta"])
        w.writerow(["overall", "all", report.n, f"{report.accuracy:.6f}", "", ""])
        for kind, groups in (("question_type", report.by_question_type), ("modality_label", report.by_label)):
            for name, g in groups.items():
                w.writerow([kind, name, g["n"], f"{g['accuracy']:.6f}", _fmt(g["mean_alpha"]), _fmt(g["mean_beta"])])


def write_localization_report(prefix, traces: list[dict], modulation: str | None = None) -> dict:
    """``<prefix>.csv`` with one chosen span per record and ``<prefix>.json``
    with the same rows plus aggregate means. Returns the JSON payload."""
    prefix = Path(prefix)
    rows = [
        {
            "clip_id": t["clip_id"],
            "modality_label": t["modality_label"],
            "start": t["chosen_span"][0],
            "end": t["chosen_span"][1],
            "iou": t["iou"],
            "cov": t["cov"],
            "iou_expanded": t["iou_expanded"],
            "cov_expanded": t["cov_expanded"],
            "alpha": t["alpha"],
        }
        for t in traces
        if t["chosen_span"] is not None
    ]
    summary = {"modulation": modulation, "n": len(rows)}
    for key in ("iou", "cov", "iou_expanded", "cov_expanded"):
        summary[f"mean_{key}"] = _mean([r[key] for r in rows])
    payload = {"summary": summary, "records": rows}
    prefix.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(prefix.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "modality_label", "start", "end", "iou", "cov", "alpha"])
        for r in rows:
            alpha = "" if r["alpha"] is None else f"{r['alpha']:.6f}"
            w.writerow([r["clip_id"], r["modality_label"], r["start"], r["end"], f"{r['iou']:.6f}", f"{r['cov']:.6f}", alpha])
    return payload


# ---------------------------------------------------------------------------
# ablations

VARIANTS = {
    "full": {},
    "no-mpn": {"use_mpn": False},
    "gt-moment": {"gt_moment": True},
    "no-sa": {"use_sa": False},
    "no-c2c": {"use_c2c": False},
    "no-mim-mpn": {"mim_mpn": False},
    "no-mim-hrn": {"mim_hrn": False},
    "additive": {"modulation": "additive"},
    "multiplicative": {"modulation": "multiplicative"},
    "residual": {"modulation": "residual"},
    "no-actions": {"use_actions": False},
}


@dataclass
class AblationRow:
    variant: str
    accuracy: float
    iou: float | None
    cov: float | None
    iou_expanded: float | None
    cov_expanded: float | None
    best_epoch: int


def ablate(cfg: TrainConfig, train_set, valid_set, variants: Sequence[str], results: dict | None = None) -> list[AblationRow]:
    """Train and evaluate one model per variant under the same seed.

    Variants whose effective config coincides share a single run. ``results``
    (variant name -> TrainResult) is filled in when given.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; valid names: {sorted(VARIANTS)}")
    cache: dict[str, tuple] = {}
    rows = []
    for name in variants:
        vcfg = replace(cfg, **VARIANTS[name])
        key = json.dumps(vcfg.to_dict(), sort_keys=True)
        if key not in cache:
            res = train(vcfg, train_set, valid_set)
            rep, _ = evaluate(res.params, res.model_cfg, valid_set, cfg.eval_batch_size)
            cache[key] = (res, rep)
        res, rep = cache[key]
        if results is not None:
            results[name] = res
        rows.append(AblationRow(name, rep.accuracy, rep.iou, rep.cov, rep.iou_expanded, rep.cov_expanded, res.best_epoch))
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in fields(AblationRow)])
        for r in rows:
            w.writerow([r.variant, _fmt(r.accuracy), _fmt(r.iou), _fmt(r.cov), _fmt(r.iou_expanded), _fmt(r.cov_expanded), r.best_epoch])
