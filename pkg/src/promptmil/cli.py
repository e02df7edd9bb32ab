"""Command-line entry points.

Exit codes: 0 success, 2 validation/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import AdamError, GraphError, NonFiniteError
from .dataio import (FormatError, ManifestError, SyntheticConfig,
                     generate_synthetic, load_manifest)
from .encoders import EncodingError
from .harness import (ExperimentConfig, NumericsError, evaluate, load_run,
                      match_report, run_ablation_matrix, run_baseline,
                      run_experiment, run_gradcheck, write_match_report)
from .layers import BankError
from .losses import LossError
from .metrics import MetricError
from .model import ConfigError
from .prompts import PromptError

_VALIDATION_ERRORS = (ConfigError, ManifestError, FormatError, PromptError,
                      BankError, LossError, MetricError, EncodingError,
                      ValueError, FileNotFoundError, json.JSONDecodeError)
_NUMERIC_ERRORS = (NumericsError, NonFiniteError, AdamError, GraphError)


def _cmd_gen(args) -> int:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if "synthetic" in doc:
        doc = doc["synthetic"]
    cfg = SyntheticConfig.from_dict(doc)
    manifest = generate_synthetic(cfg, args.out)
    load_manifest(manifest)  # self-check the emitted tree
    print(f"wrote {manifest}")
    return 0


def _cmd_train(args) -> int:
    exp = ExperimentConfig.from_json(args.config)
    run = run_experiment(exp)
    print(f"{run.method}/{run.variant} K={run.shots} seeds={len(run.per_seed)}")
    for key, stats in run.aggregate.items():
        print(f"  {key}: {stats['mean']:.4f} +- {stats['std']:.4f}")
    print(f"  digest: {run.digest()}")
    return 0


def _cmd_eval(args) -> int:
    run_dir = Path(args.run)
    seeds = sorted(int(p.stem.split("seed")[1])
                   for p in run_dir.glob("params_seed*.npz"))
    if not seeds:
        raise ConfigError(f"no checkpoints under {run_dir}")
    results = {}
    for seed in seeds:
        model, _, manifest = load_run(run_dir, seed)
        results[seed] = evaluate(model, manifest, args.split)
        line = ", ".join(f"{k}={v:.4f}" for k, v in results[seed].items())
        print(f"seed {seed}: {line}")
    out = run_dir / f"eval_{args.split}.json"
    out.write_text(json.dumps({str(k): v for k, v in results.items()},
                              indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


def _cmd_baseline(args) -> int:
    exp = ExperimentConfig.from_json(args.config)
    run = run_baseline(args.name, exp)
    for key, stats in run.aggregate.items():
        print(f"{args.name} {key}: {stats['mean']:.4f} +- {stats['std']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    exp = ExperimentConfig.from_json(args.config)
    table = run_ablation_matrix(exp)
    shots = exp.ablation_shots
    print(f"{'variant':24s} " + " ".join(f"{s}-shot" for s in shots))
    for variant, per in table.items():
        cells = []
        for s in shots:
            metric = per[s]
            key = "auc" if "auc" in metric else next(iter(sorted(metric)))
            cells.append(f"{metric[key]:.4f}")
        print(f"{variant:24s} " + " ".join(f"{c:>7s}" for c in cells))
    print(f"wrote {Path(exp.out_dir) / 'ablation_table.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(trials=args.trials, tol=args.tol, h=args.h,
                            seed=args.seed)
    ok = True
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"trial {r['trial']:2d} d={r['dim']:2d} n={r['patches']} "
              f"U={r['classes']} backend={r['backend']:6s} "
              f"worst={r['worst']:.3e} {status}")
        ok = ok and r["passed"]
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} "
          f"({sum(r['passed'] for r in results)}/{len(results)} trials)")
    if not ok:
        raise NumericsError("gradient check failed")
    return 0


def _cmd_match_report(args) -> int:
    run_dir = Path(args.run)
    seeds = sorted(int(p.stem.split("seed")[1])
                   for p in run_dir.glob("params_seed*.npz"))
    if not seeds:
        raise ConfigError(f"no checkpoints under {run_dir}")
    for seed in seeds:
        model, _, manifest = load_run(run_dir, seed)
        rows = match_report(model, manifest, top_k=args.top_k)
        write_match_report(rows, run_dir, tag=f"seed{seed}")
    print(f"wrote match reports for seeds {seeds} under {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmil",
        description="Few-shot multi-instance prompt learning over "
                    "precomputed embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="train and evaluate over all seeds")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("baseline", help="run one named baseline")
    p.add_argument("--name", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_baseline)

    p = sub.add_parser("ablate", help="run the full ablation matrix")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("match-report", help="retrieval/interpretability report")
    p.add_argument("--run", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(fn=_cmd_match_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
