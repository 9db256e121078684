"""Command-line front end.

Subcommands: ``train`` (fit one model), ``spectrum`` (measure a trained
checkpoint), ``plan`` (run a multi-variant experiment plan), ``oracle``
(reference-path checks), ``plot`` (CSV/SVG emission). Exit codes:
0 success, 1 variant/check failure, 2 invalid plan or arguments.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ..models import BatchNormState, ModelSpec, ParamVector, param_layout
from ..sharpness import report_to_json
from ..slq import spectrum_from_json, spectrum_to_json
from ..training import TrainConfig, history_to_csv, train
from .plans import (
    ExperimentPlan,
    PlanError,
    SpectrumSettings,
    builtin_plan,
    compute_spectrum_report,
    dataset_id,
    load_dataset_source,
    run_plan,
    _write_atomic,
)
from .oracles import oracle_suite
from .plotting import history_series_csv, spectrum_stem_csv, spectrum_stem_svg


def _load_json(path: str):
    with open(path) as f:
        return json.load(f)


def _bn_to_doc(bn: BatchNormState):
    return {
        "running_mean": [None if m is None else list(map(float, m)) for m in bn.running_mean],
        "running_var": [None if v is None else list(map(float, v)) for v in bn.running_var],
        "momentum": bn.momentum,
    }


def _bn_from_doc(doc: dict) -> BatchNormState:
    return BatchNormState(
        [None if m is None else np.asarray(m, dtype=np.float64) for m in doc["running_mean"]],
        [None if v is None else np.asarray(v, dtype=np.float64) for v in doc["running_var"]],
        momentum=float(doc.get("momentum", 0.1)),
    )


def cmd_train(args) -> int:
    spec = ModelSpec.from_json(json.dumps(_load_json(args.model_spec)))
    cfg = TrainConfig.from_dict(_load_json(args.config))
    train_ds, val_ds = load_dataset_source(_load_json(args.dataset))
    result = train(spec, train_ds, cfg, val_ds)
    os.makedirs(args.out, exist_ok=True)
    _write_atomic(os.path.join(args.out, "history.csv"), history_to_csv(result.history))
    checkpoint = {
        "model": json.loads(spec.to_json()),
        "config": cfg.to_dict(),
        "params": [float(x) for x in result.params.flat],
        "averaged_params": None
        if result.averaged_params is None
        else [float(x) for x in result.averaged_params.flat],
        "bn": _bn_to_doc(result.bn_state),
        "bn_averaged": None
        if result.averaged_bn_state is None
        else _bn_to_doc(result.averaged_bn_state),
    }
    _write_atomic(
        os.path.join(args.out, "checkpoint.json"),
        json.dumps(checkpoint, sort_keys=True) + "\n",
    )
    final = result.history[-1]
    print(
        f"trained {cfg.optimizer} for {cfg.epochs} epochs: "
        f"train_loss={final['train_loss']:.6g} val_acc={final['test_acc']:.4g}"
    )
    return 0


def cmd_spectrum(args) -> int:
    doc = _load_json(args.checkpoint)
    spec = ModelSpec.from_json(json.dumps(doc["model"]))
    layout = param_layout(spec)
    use_avg = args.use_averaged and doc.get("averaged_params") is not None
    flat = doc["averaged_params"] if use_avg else doc["params"]
    params = ParamVector(np.asarray(flat, dtype=np.float64), layout)
    bn_doc = doc["bn_averaged"] if use_avg and doc.get("bn_averaged") else doc["bn"]
    bn_state = _bn_from_doc(bn_doc)
    dataset_doc = _load_json(args.dataset)
    train_ds, _ = load_dataset_source(dataset_doc)
    settings = SpectrumSettings(
        m=args.m,
        num_seeds=args.num_seeds,
        operator=args.operator,
        bn_mode=args.bn_mode,
        probe=args.probe,
        seed=args.seed,
        batch_size=args.batch_size,
        include_l2=args.include_l2,
    )
    mu = float(doc["config"].get("mu_l2", 0.0))
    os.makedirs(args.out, exist_ok=True)
    context = {"dataset": dataset_id(dataset_doc), "averaged": use_avg}
    for mode in settings.modes:
        spectrum, report = compute_spectrum_report(
            spec, params, bn_state, train_ds, settings, mode, mu, context
        )
        _write_atomic(
            os.path.join(args.out, f"spectrum_{mode}.json"),
            spectrum_to_json(spectrum) + "\n",
        )
        _write_atomic(
            os.path.join(args.out, f"report_{mode}.json"),
            report_to_json(report) + "\n",
        )
        print(
            f"{mode}: lambda_max={report.lambda_max:.6g} trace={report.trace:.6g} "
            f"frobenius={report.frobenius:.6g} degeneracy={report.degeneracy_ratio:.4g}"
        )
    return 0


def cmd_plan(args) -> int:
    try:
        if args.plan:
            plan = ExperimentPlan.from_dict(_load_json(args.plan))
        else:
            plan = builtin_plan(
                args.builtin,
                mnist_images=args.mnist_images,
                mnist_labels=args.mnist_labels,
                output_dir=args.out or "runs",
            )
    except (PlanError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid plan: {exc}", file=sys.stderr)
        return 2
    artifacts = run_plan(plan, args.out)
    failed = [a for a in artifacts if a.failed]
    for art in artifacts:
        status = f"FAILED ({art.error})" if art.failed else "ok"
        print(f"variant {art.variant}: {status}")
    return 1 if failed else 0


def cmd_oracle(args) -> int:
    report = oracle_suite()
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        for check in report["checks"]:
            flag = "PASS" if check["passed"] else "FAIL"
            print(
                f"{flag} {check['name']}: error={check['max_error']:.3g} "
                f"(tol {check['tolerance']:.3g})"
            )
    return 0 if report["passed"] else 1


def cmd_plot(args) -> int:
    wrote = []
    if args.spectrum:
        with open(args.spectrum) as f:
            spectrum = spectrum_from_json(f.read())
        if args.csv:
            _write_atomic(args.csv, spectrum_stem_csv(spectrum))
            wrote.append(args.csv)
        if args.svg:
            title = os.path.basename(args.spectrum)
            _write_atomic(args.svg, spectrum_stem_svg(spectrum, title=title))
            wrote.append(args.svg)
    elif args.history:
        rows = []
        with open(args.history) as f:
            header = f.readline().strip().split(",")
            for line in f:
                vals = line.strip().split(",")
                rows.append({k: float(v) for k, v in zip(header, vals)})
        if not args.csv:
            print("plot --history needs --csv", file=sys.stderr)
            return 2
        _write_atomic(args.csv, history_series_csv(rows))
        wrote.append(args.csv)
    else:
        print("plot needs --spectrum or --history", file=sys.stderr)
        return 2
    for path in wrote:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hesslens",
        description="Train small classifiers and measure Hessian sharpness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from config files")
    p.add_argument("--model-spec", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("spectrum", help="measure a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--operator", choices=("hessian", "ggn"), default="hessian")
    p.add_argument("--bn-mode", choices=("train", "eval", "both"), default="train")
    p.add_argument("--probe", choices=("rademacher", "gaussian"), default="rademacher")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--include-l2", action="store_true")
    p.add_argument("--use-averaged", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("plan", help="run an experiment plan")
    p.add_argument("--plan")
    p.add_argument("--builtin", choices=("l2-sharpness", "bn-mode"))
    p.add_argument("--mnist-images")
    p.add_argument("--mnist-labels")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("oracle", help="run reference-path checks")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plot", help="emit CSV/SVG plot data")
    p.add_argument("--spectrum")
    p.add_argument("--history")
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "plan" and not (args.plan or args.builtin):
        print("plan: need --plan FILE or --builtin NAME", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
