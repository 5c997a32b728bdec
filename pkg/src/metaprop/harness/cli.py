"""Command-line entry point.

Subcommands: train, eval, gradcheck, propagate, export-embeddings, bench.
Report-producing paths write a PNG next to their delimited output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_flag_overrides, load_config
from .gradsuite import run_gradient_suite


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="configuration file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--episodes", type=int,
                        help="override the evaluation episode count")
    parser.add_argument("--resume", type=Path, help="checkpoint to load")
    parser.add_argument("--first-order", action="store_true",
                        help="disable second-order gradients in the outer loop")
    parser.add_argument("--no-modulation", action="store_true",
                        help="bypass the modulator (gamma fixed to ones)")
    parser.add_argument("--no-pseudo", action="store_true",
                        help="support-only adaptation baseline (plain MAML wiring)")


def _effective_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig().validate()
    return apply_flag_overrides(
        config, seed=args.seed, out=str(args.out) if args.out else None,
        episodes=args.episodes, first_order=args.first_order,
        no_modulation=args.no_modulation, no_pseudo=args.no_pseudo)


def _cmd_train(args) -> int:
    from .run import train

    if args.resume and args.config:
        raise ConfigError("--resume restores its own config; do not pass --config too")
    cfg = _effective_config(args) if not args.resume else None
    out_dir = Path(args.out) if args.out else Path(cfg.run.out if cfg else "runs/resumed")
    result = train(cfg, out_dir, resume=args.resume)
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    if result.final_eval is not None:
        s = result.final_eval.summary()
        print(f"final eval: accuracy {s['accuracy']:.4f} ± {s['ci95']:.4f} "
              f"({s['episodes']} episodes)")
    return 0


def _cmd_eval(args) -> int:
    from .run import evaluate, load_model

    if not args.resume:
        raise ConfigError("eval needs --resume CHECKPOINT")
    model = load_model(args.resume)
    count = args.episodes if args.episodes else model.cfg.run.eval_episodes
    out_dir = Path(args.out) if args.out else Path("eval-out")
    report = evaluate(model, count, args.seed, out_dir)
    s = report.summary()
    print(f"accuracy: {s['accuracy']:.4f} ± {s['ci95']:.4f} over {s['episodes']} episodes")
    if s["pseudo_accuracy"] is not None:
        print(f"pseudo-label accuracy: {s['pseudo_accuracy']:.4f} ± {s['pseudo_ci95']:.4f}")
    print(f"report: {out_dir / 'eval_report.json'}")
    return 0


def _cmd_gradcheck(args) -> int:
    failures = 0
    for name, report in run_gradient_suite():
        status = "PASS" if report.passed else "FAIL"
        print(f"[{status}] {name}: max rel err {report.max_rel_error:.3e} "
              f"(tol {report.tol:.0e})")
        failures += 0 if report.passed else 1
    if failures:
        print(f"{failures} gradient check(s) failed")
    return 1 if failures else 0


def _cmd_propagate(args) -> int:
    from ..autodiff import Tensor
    from ..propagation import AlphaParam, run_propagation

    logits = np.loadtxt(args.logits, delimiter=",", ndmin=2)
    labels = np.loadtxt(args.labels, delimiter=",", dtype=np.int64, ndmin=1)
    if labels.shape[0] != logits.shape[0]:
        raise ConfigError(
            f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    is_support = labels >= 0
    n_support = int(is_support.sum())
    if not np.array_equal(is_support, np.arange(len(labels)) < n_support):
        raise ConfigError("support rows (label >= 0) must precede query rows (-1)")
    n_classes = logits.shape[1]
    if args.sigma:
        sigma = np.loadtxt(args.sigma, delimiter=",", ndmin=1)
    else:
        sigma = np.ones(logits.shape[0])
    k = args.k if args.k else min(20, logits.shape[0] - 1)
    result = run_propagation(Tensor(logits), Tensor(sigma), labels[:n_support],
                             n_classes, AlphaParam.from_effective(args.alpha), k=k)
    out_path = Path(args.out) if args.out else Path("propagated.csv")
    if out_path.is_dir():
        out_path = out_path / "propagated.csv"
    np.savetxt(out_path, result.scores.data, delimiter=",", fmt="%.12g")
    print(f"scores: {out_path}")
    print(f"pseudo labels: {' '.join(str(int(c)) for c in result.pseudo_labels)}")
    return 0


def _cmd_export_embeddings(args) -> int:
    from .run import export_embeddings, load_model

    if not args.resume:
        raise ConfigError("export-embeddings needs --resume CHECKPOINT")
    model = load_model(args.resume)
    count = args.episodes if args.episodes else 10
    out_dir = Path(args.out) if args.out else Path("embeddings-out")
    csv_path = export_embeddings(model, count, args.seed, out_dir)
    print(f"embeddings: {csv_path}")
    return 0


def _cmd_bench(args) -> int:
    from .run import bench

    cfg = _effective_config(args)
    out_dir = Path(args.out) if args.out else Path("bench-out")
    report = bench(cfg, args.iterations, out_dir)
    print(f"modulated:  {report['modulated_mean_ms']:.2f} ms "
          f"± {report['modulated_std_ms']:.2f}")
    print(f"bypassed:   {report['bypassed_mean_ms']:.2f} ms "
          f"± {report['bypassed_std_ms']:.2f}")
    print(f"overhead:   {report['overhead_pct']:.2f}%")
    print(f"report: {out_dir / 'bench.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaprop",
        description="Transductive meta-learning with task-conditioned label propagation")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("train", _cmd_train), ("eval", _cmd_eval),
                     ("gradcheck", _cmd_gradcheck),
                     ("export-embeddings", _cmd_export_embeddings)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("propagate",
                       help="run label propagation on CSV logits/labels")
    p.add_argument("--logits", type=Path, required=True,
                   help="CSV of logit rows (n x N)")
    p.add_argument("--labels", type=Path, required=True,
                   help="CSV of per-row labels; class id for support, -1 for query")
    p.add_argument("--sigma", type=Path, help="CSV of per-row length scales")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="effective propagation strength in (0,1)")
    p.add_argument("--k", type=int, help="neighbors kept per row")
    p.add_argument("--out", type=Path, help="output CSV path")
    p.set_defaults(fn=_cmd_propagate)

    p = sub.add_parser("bench", help="measure modulation overhead")
    _add_common(p)
    p.add_argument("--iterations", type=int, default=20,
                   help="measured iterations (5 warm-ups excluded)")
    p.set_defaults(fn=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
