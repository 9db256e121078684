"""Experiment plans: train variants, measure spectra, persist artifacts.

A plan bundles one model, one dataset source and a list of training
variants (e.g. an L2 grid). Running it produces, per variant, a history
CSV, spectrum JSON(s) and a sharpness report JSON, plus a comparison
table across variants. Reports reference spectra by content hash and
everything except the wall-clock sidecar is bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..curvature import CurvatureContext, GGNOperator, HessianOperator
from ..models import Dataset, ModelSpec, ParamVector, param_count
from ..sharpness import rank_bound_for_spec, report_to_json, sharpness_report
from ..slq import spectral_density, spectrum_to_json
from ..training import TrainConfig, history_to_csv, train
from .datasets import load_mnist_idx, split_train_val, subset_first_k, synth_blobs

__all__ = [
    "ExperimentPlan",
    "PlanError",
    "RunArtifact",
    "builtin_plan",
    "load_dataset_source",
    "run_plan",
]


class PlanError(ValueError):
    """The plan document is invalid."""


@dataclass
class SpectrumSettings:
    m: int = 100
    num_seeds: int = 1
    operator: str = "hessian"  # hessian | ggn
    bn_mode: str = "train"  # train | eval | both
    probe: str = "rademacher"
    seed: int = 0
    batch_size: int | None = None
    include_l2: bool = False
    use_averaged: bool = True  # evaluate averaged weights when available

    def __post_init__(self):
        if self.m < 1 or self.num_seeds < 1:
            raise PlanError("spectrum m and num_seeds must be >= 1")
        if self.operator not in ("hessian", "ggn"):
            raise PlanError(f"unknown operator {self.operator!r}")
        if self.bn_mode not in ("train", "eval", "both"):
            raise PlanError(f"unknown bn_mode {self.bn_mode!r}")

    @property
    def modes(self):
        return ("train", "eval") if self.bn_mode == "both" else (self.bn_mode,)


@dataclass
class ExperimentPlan:
    name: str
    spec: ModelSpec
    dataset: dict
    variants: list  # of (name, TrainConfig)
    spectrum: SpectrumSettings
    output_dir: str

    def validate(self):
        names = [name for name, _ in self.variants]
        if len(set(names)) != len(names):
            raise PlanError("variant names must be unique")
        if not names:
            raise PlanError("plan needs at least one variant")
        if self.dataset.get("kind") == "mnist_idx":
            for key in ("images", "labels"):
                path = self.dataset.get(key)
                if not (path and os.path.exists(path)):
                    raise PlanError(f"dataset file missing: {key}={path!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPlan":
        try:
            spec = ModelSpec(
                input_dim=int(doc["model"]["input_dim"]),
                hidden_widths=tuple(doc["model"].get("hidden_widths", ())),
                output_dim=int(doc["model"]["output_dim"]),
                activation=doc["model"].get("activation", "relu"),
                batch_norm=tuple(doc["model"].get("batch_norm", ())),
            )
            variants = [
                (v["name"], TrainConfig.from_dict(v["config"]))
                for v in doc["variants"]
            ]
            plan = cls(
                name=doc["name"],
                spec=spec,
                dataset=dict(doc["dataset"]),
                variants=variants,
                spectrum=SpectrumSettings(**doc.get("spectrum", {})),
                output_dir=doc.get("output_dir", "runs"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"invalid plan document: {exc}") from exc
        plan.validate()
        return plan

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        return cls.from_dict(json.loads(text))


@dataclass
class RunArtifact:
    variant: str
    config: dict
    history_csv: str
    spectrum_paths: list
    report_paths: list
    spectrum_hashes: list
    failed: bool = False
    error: str = ""


def dataset_id(desc: dict) -> str:
    items = ",".join(f"{k}={desc[k]}" for k in sorted(desc))
    return f"{desc.get('kind', '?')}({items})"


def load_dataset_source(desc: dict):
    """Build (train, val) datasets from a plan's dataset description."""
    kind = desc.get("kind")
    if kind == "blobs":
        ds = synth_blobs(
            d_x=int(desc["d_x"]),
            d_y=int(desc["d_y"]),
            n_per_class=int(desc["n_per_class"]),
            separation=float(desc["separation"]),
            seed=int(desc.get("seed", 0)),
        )
    elif kind == "mnist_idx":
        ds = load_mnist_idx(
            desc["images"], desc["labels"], standardize=bool(desc.get("standardize", False))
        )
        if desc.get("subset_k"):
            ds = subset_first_k(ds, int(desc["subset_k"]), int(desc.get("seed", 0)))
    else:
        raise PlanError(f"unknown dataset kind {kind!r}")
    n_val = int(desc.get("n_val", max(1, ds.n // 10)))
    return split_train_val(ds, n_val, int(desc.get("seed", 0)))


def _write_atomic(path: str, text: str):
    tmp = os.path.join(os.path.dirname(path), f".{os.path.basename(path)}.tmp")
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _json_dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def compute_spectrum_report(
    spec: ModelSpec,
    params: ParamVector,
    bn_state,
    train_ds: Dataset,
    settings: SpectrumSettings,
    mode: str,
    mu: float,
    context: dict,
):
    """One (spectrum, report) pair for a trained model."""
    ctx = CurvatureContext(
        spec,
        params,
        bn_state,
        train_ds,
        mode=mode,
        mu=mu if settings.include_l2 else 0.0,
        batch_size=settings.batch_size,
    )
    op = HessianOperator(ctx) if settings.operator == "hessian" else GGNOperator(ctx)
    spectrum = spectral_density(
        op,
        settings.m,
        num_seeds=settings.num_seeds,
        probe=settings.probe,
        seed=settings.seed,
    )
    ctx_doc = dict(context)
    ctx_doc.update(
        bn_mode=mode,
        operator=settings.operator,
        mu=mu,
        l2_in_hessian=bool(settings.include_l2),
    )
    report = sharpness_report(
        spectrum,
        rank_bound_for_spec(spec, param_count(spec)),
        context=ctx_doc,
    )
    return spectrum, report


def run_variant(plan: ExperimentPlan, name: str, cfg: TrainConfig, data, out_dir: str):
    train_ds, val_ds = data
    result = train(plan.spec, train_ds, cfg, val_ds)
    use_avg = (
        plan.spectrum.use_averaged and result.averaged_params is not None
    )
    params = result.averaged_params if use_avg else result.params
    bn_state = result.averaged_bn_state if use_avg else result.bn_state

    history_path = os.path.join(out_dir, f"{name}_history.csv")
    _write_atomic(history_path, history_to_csv(result.history))

    final = result.history[-1]
    base_context = {
        "variant": name,
        "dataset": dataset_id(plan.dataset),
        "epoch": cfg.epochs,
        "optimizer": cfg.optimizer,
        "averaged": use_avg,
        "val_acc": final["test_acc"],
        "val_loss": final["test_loss"],
        "train_loss": final["train_loss"],
        "train_acc": final["train_acc"],
        "weight_norm": float(np.linalg.norm(params.flat)),
    }

    spectrum_paths, report_paths, hashes = [], [], []
    for mode in plan.spectrum.modes:
        if not any(plan.spec.batch_norm) and mode == "eval" and plan.spectrum.bn_mode == "both":
            continue  # without BN the two modes coincide
        spectrum, report = compute_spectrum_report(
            plan.spec, params, bn_state, train_ds, plan.spectrum, mode,
            cfg.mu_l2, base_context,
        )
        spec_text = spectrum_to_json(spectrum) + "\n"
        digest = hashlib.sha256(spec_text.encode()).hexdigest()
        report.context["spectrum_sha256"] = digest
        spath = os.path.join(out_dir, f"{name}_spectrum_{mode}.json")
        rpath = os.path.join(out_dir, f"{name}_report_{mode}.json")
        _write_atomic(spath, spec_text)
        _write_atomic(rpath, report_to_json(report) + "\n")
        spectrum_paths.append(spath)
        report_paths.append(rpath)
        hashes.append(digest)

    return RunArtifact(
        variant=name,
        config=cfg.to_dict(),
        history_csv=history_path,
        spectrum_paths=spectrum_paths,
        report_paths=report_paths,
        spectrum_hashes=hashes,
    )


def run_plan(plan: ExperimentPlan, out_dir: str | None = None) -> list:
    """Run every variant; failures are isolated and reported in the summary."""
    plan.validate()
    out_dir = out_dir or plan.output_dir
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    data = load_dataset_source(plan.dataset)

    artifacts = []
    for name, cfg in plan.variants:
        try:
            artifacts.append(run_variant(plan, name, cfg, data, out_dir))
        except Exception as exc:  # isolate per-variant failures
            artifacts.append(
                RunArtifact(
                    variant=name,
                    config=cfg.to_dict(),
                    history_csv="",
                    spectrum_paths=[],
                    report_paths=[],
                    spectrum_hashes=[],
                    failed=True,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )

    table = []
    for art in sorted(artifacts, key=lambda a: a.variant):
        if art.failed:
            table.append({"variant": art.variant, "failed": True, "error": art.error})
            continue
        for rpath in art.report_paths:
            with open(rpath) as f:
                rep = json.load(f)
            table.append(
                {
                    "variant": art.variant,
                    "failed": False,
                    "bn_mode": rep["context"]["bn_mode"],
                    "optimizer": art.config["optimizer"],
                    "mu_l2": art.config["mu_l2"],
                    "lambda_decoupled": art.config["lambda_decoupled"],
                    "lr": art.config["lr"],
                    "val_acc": rep["context"]["val_acc"],
                    "train_loss": rep["context"]["train_loss"],
                    "weight_norm": rep["context"]["weight_norm"],
                    "lambda_max": rep["lambda_max"],
                    "trace": rep["trace"],
                    "frobenius": rep["frobenius"],
                    "mean_eigenvalue": rep["mean_eigenvalue"],
                    "degeneracy_ratio": rep["degeneracy_ratio"],
                }
            )

    _write_atomic(os.path.join(out_dir, "comparison.json"), _json_dumps(table))
    if table:
        cols = [c for c in table[0] if c != "failed"]
        lines = [",".join(cols)]
        for row in table:
            lines.append(",".join(repr(row.get(c, "")) for c in cols))
        _write_atomic(os.path.join(out_dir, "comparison.csv"), "\n".join(lines) + "\n")

    def rel(path):
        return os.path.relpath(path, out_dir) if path else path

    summary = {
        "plan": plan.name,
        "variants": [
            {
                "variant": a.variant,
                "failed": a.failed,
                "error": a.error,
                "history_csv": rel(a.history_csv),
                "spectrum_paths": [rel(p) for p in a.spectrum_paths],
                "report_paths": [rel(p) for p in a.report_paths],
                "spectrum_sha256": a.spectrum_hashes,
                "config": a.config,
            }
            for a in sorted(artifacts, key=lambda a: a.variant)
        ],
    }
    _write_atomic(os.path.join(out_dir, "summary.json"), _json_dumps(summary))
    # wall-clock sidecar: the one file allowed to differ between reruns
    _write_atomic(
        os.path.join(out_dir, "runmeta.json"),
        _json_dumps({"started_unix": started, "elapsed_s": time.time() - started}),
    )
    return artifacts


def builtin_plan(
    name: str,
    mnist_images: str | None = None,
    mnist_labels: str | None = None,
    output_dir: str = "runs",
) -> ExperimentPlan:
    """Preset desk-scale plans.

    ``l2-sharpness``: logistic regression, L2 grid {0, 1e-4, 5e-4},
    50 epochs. Uses MNIST (5k subset, 4.5k/0.5k split) when IDX paths are
    given, otherwise a synthetic-blob stand-in.
    ``bn-mode``: batch-norm MLP, one variant, spectra in both BN modes.
    """
    if mnist_images and mnist_labels:
        dataset = {
            "kind": "mnist_idx",
            "images": mnist_images,
            "labels": mnist_labels,
            "subset_k": 5000,
            "n_val": 500,
            "seed": 7,
        }
        d_x, d_y = 784, 10
    else:
        dataset = {
            "kind": "blobs",
            "d_x": 40,
            "d_y": 3,
            "n_per_class": 1400,
            "separation": 1.4,
            "seed": 7,
            "n_val": 3600,
        }
        d_x, d_y = 40, 3

    if name == "l2-sharpness":
        doc = {
            "name": name,
            "model": {"input_dim": d_x, "hidden_widths": [], "output_dim": d_y},
            "dataset": dataset,
            "variants": [
                {
                    "name": f"mu{mu:g}",
                    "config": {
                        "optimizer": "sgd",
                        "lr": 0.1,
                        "momentum": 0.9,
                        "mu_l2": mu,
                        "epochs": 50,
                        "batch_size": 32,
                        "seed": 11,
                    },
                }
                for mu in (0.0, 1e-4, 5e-4)
            ],
            "spectrum": {"m": 60, "num_seeds": 10, "operator": "hessian"},
            "output_dir": output_dir,
        }
    elif name == "bn-mode":
        doc = {
            "name": name,
            "model": {
                "input_dim": d_x,
                "hidden_widths": [32],
                "output_dim": d_y,
                "activation": "relu",
                "batch_norm": [True],
            },
            "dataset": dataset,
            "variants": [
                {
                    "name": "bn-run",
                    "config": {
                        "optimizer": "sgd",
                        "lr": 0.1,
                        "momentum": 0.9,
                        "mu_l2": 5e-4,
                        "epochs": 40,
                        "batch_size": 32,
                        "seed": 11,
                    },
                }
            ],
            "spectrum": {"m": 60, "num_seeds": 4, "bn_mode": "both", "batch_size": 256},
            "output_dir": output_dir,
        }
    else:
        raise PlanError(f"unknown builtin plan {name!r}")
    return ExperimentPlan.from_dict(doc)
