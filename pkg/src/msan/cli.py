"""Command-line entry point: ``msan <subcommand> [--config PATH] [--seed N] [--out PATH] ...``.

Failures print one line ``error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .datamodel import ConfigError, EmptyInputError, GeneratorConfig, ValidationError, generate_synthetic
from .datamodel import load_dataset, save_dataset
from .tensorcore import ContractError, DeterminismError, DimensionError

EXIT_FAILURE = 1
EXIT_USAGE = 2

_CATEGORIES = (
    (ConfigError, "config"),
    (ValidationError, "validation"),
    (EmptyInputError, "validation"),
    (harness.CompatibilityError, "compatibility"),
    (harness.TrainingDivergence, "divergence"),
    (DeterminismError, "determinism"),
    (DimensionError, "dimension"),
    (ContractError, "contract"),
    (OSError, "io"),
    (json.JSONDecodeError, "config"),
)


class GradcheckFailed(RuntimeError):
    pass


def _read_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _train_config(args) -> harness.TrainConfig:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    return harness.TrainConfig.from_dict(d)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> None:
    d = _read_json(args.config)
    seed = args.seed if args.seed is not None else d.pop("seed", 0)
    d.pop("seed", None)
    cfg = GeneratorConfig.from_dict(d)
    if args.n is not None:
        cfg.n_clips = args.n
    out = Path(args.out or "data.jsonl")
    save_dataset(generate_synthetic(cfg, seed=seed), out)
    print(f"wrote {cfg.n_clips} records to {out}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    res = harness.train(cfg, load_dataset(args.train), load_dataset(args.valid))
    out = _out_dir(args)
    harness.save_checkpoint(out / "checkpoint.npz", res.params, res.model_cfg)
    (out / "train_log.json").write_text(json.dumps(res.log, indent=2) + "\n")
    print(f"best epoch {res.best_epoch}, validation accuracy {res.best_valid_accuracy:.4f}; wrote {out}")


def cmd_eval(args) -> None:
    expect = _train_config(args) if args.config else None
    params, mcfg = harness.load_checkpoint(args.checkpoint, expect)
    report, traces = harness.evaluate(params, mcfg, load_dataset(args.data))
    out = _out_dir(args)
    harness.write_report(out / "report", report)
    harness.write_traces(out / "traces.jsonl", traces)
    loc = "" if report.iou is None else f" IoU {report.iou:.4f} Cov {report.cov:.4f}"
    print(f"accuracy {report.accuracy:.4f}{loc}; wrote {out}")


def cmd_ablate(args) -> None:
    cfg = _train_config(args)
    variants = [v for v in args.variants.split(",") if v]
    rows = harness.ablate(cfg, load_dataset(args.train), load_dataset(args.valid), variants)
    out = Path(args.out or "ablation.csv")
    harness.write_ablation_csv(out, rows)
    print(f"wrote {len(rows)} rows to {out}")


def cmd_localize(args) -> None:
    params, mcfg = harness.load_checkpoint(args.checkpoint)
    if not mcfg.use_mpn:
        raise ConfigError("checkpoint was trained without the moment proposal stage")
    _, traces = harness.evaluate(params, mcfg, load_dataset(args.data))
    out = Path(args.out or "localization")
    payload = harness.write_localization_report(out, traces, mcfg.modulation)
    summary = payload["summary"]
    print(f"mean IoU {summary['mean_iou']:.4f} Cov {summary['mean_cov']:.4f}; wrote {out.with_suffix('.csv')} and .json")


def cmd_gradcheck(args) -> None:
    from .checks import run_gradchecks

    seed = args.seed if args.seed is not None else 0
    reports = run_gradchecks(seed, tol=args.tol)
    rows = {name: {"passed": r.passed, "worst": r.worst} for name, r in reports.items()}
    for name, r in rows.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'} {name} max_rel_error={r['worst']:.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    failed = [n for n, r in rows.items() if not r["passed"]]
    if failed:
        raise GradcheckFailed(f"{len(failed)} case(s) above tol {args.tol}: {','.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="msan", description="Moment proposal and answer reasoning on synthetic video QA.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic JSONL dataset")
    p.add_argument("--n", type=int, help="number of records (overrides the config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoint.npz + train_log.json")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint; writes report.{json,csv} and traces.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train one model per variant and write a CSV table")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--variants", default="full,no-mpn,gt-moment", help=f"comma list from {','.join(harness.VARIANTS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("localize", parents=[common], help="write the chosen moment per record as <out>.csv and <out>.json")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the full model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except GradcheckFailed as e:
        print(f"error: gradcheck: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:  # noqa: BLE001 - map every failure to one category line
        for kind, category in _CATEGORIES:
            if isinstance(e, kind):
                break
        else:
            category = "internal"
        msg = " ".join(str(e).split())
        print(f"error: {category}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
