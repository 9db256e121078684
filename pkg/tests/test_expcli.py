import json
import os

import numpy as np
import pytest

from hesslens.expcli.cli import main
from hesslens.expcli.oracles import oracle_suite
from hesslens.expcli.plans import (
    ExperimentPlan,
    PlanError,
    builtin_plan,
    load_dataset_source,
    run_plan,
)
from hesslens.expcli.plotting import (
    degeneracy_series_csv,
    history_series_csv,
    spectrum_stem_csv,
    spectrum_stem_svg,
)
from hesslens.curvature import DiagonalOperator
from hesslens.sharpness import sharpness_report
from hesslens.slq import spectral_density


def _tiny_plan_doc(out_dir, epochs=3, variants=None):
    if variants is None:
        variants = [
            {"name": "mu0", "config": {"optimizer": "sgd", "lr": 0.1, "mu_l2": 0.0,
                                        "epochs": epochs, "batch_size": 32, "seed": 5}},
            {"name": "mu5e-3", "config": {"optimizer": "sgd", "lr": 0.1, "mu_l2": 5e-3,
                                           "epochs": epochs, "batch_size": 32, "seed": 5}},
        ]
    return {
        "name": "tiny",
        "model": {"input_dim": 6, "hidden_widths": [], "output_dim": 2},
        "dataset": {"kind": "blobs", "d_x": 6, "d_y": 2, "n_per_class": 80,
                     "separation": 2.0, "seed": 3, "n_val": 40},
        "variants": variants,
        "spectrum": {"m": 12, "num_seeds": 2, "operator": "hessian"},
        "output_dir": out_dir,
    }


class TestPlanValidation:
    def test_duplicate_variant_names_rejected(self, tmp_path):
        doc = _tiny_plan_doc(str(tmp_path))
        doc["variants"][1]["name"] = "mu0"
        with pytest.raises(PlanError, match="unique"):
            ExperimentPlan.from_dict(doc)

    def test_missing_dataset_file_rejected(self, tmp_path):
        doc = _tiny_plan_doc(str(tmp_path))
        doc["dataset"] = {"kind": "mnist_idx", "images": "/nope.idx", "labels": "/nope2.idx"}
        with pytest.raises(PlanError, match="missing"):
            ExperimentPlan.from_dict(doc)

    def test_bad_config_rejected(self, tmp_path):
        doc = _tiny_plan_doc(str(tmp_path))
        doc["variants"][0]["config"]["optimizer"] = "lion"
        with pytest.raises(PlanError):
            ExperimentPlan.from_dict(doc)

    def test_unknown_dataset_kind(self):
        with pytest.raises(PlanError, match="kind"):
            load_dataset_source({"kind": "imagenet"})


class TestRunPlan:
    def test_artifacts_written(self, tmp_path):
        out = str(tmp_path / "out")
        plan = ExperimentPlan.from_dict(_tiny_plan_doc(out))
        artifacts = run_plan(plan, out)
        assert len(artifacts) == 2 and not any(a.failed for a in artifacts)
        for art in artifacts:
            assert os.path.exists(art.history_csv)
            for p in art.spectrum_paths + art.report_paths:
                assert os.path.exists(p)
        with open(os.path.join(out, "comparison.json")) as f:
            table = json.load(f)
        assert [row["variant"] for row in table] == sorted(row["variant"] for row in table)
        assert os.path.exists(os.path.join(out, "comparison.csv"))
        assert os.path.exists(os.path.join(out, "summary.json"))

    def test_report_references_spectrum_hash(self, tmp_path):
        out = str(tmp_path / "out")
        plan = ExperimentPlan.from_dict(_tiny_plan_doc(out))
        artifacts = run_plan(plan, out)
        art = artifacts[0]
        with open(art.report_paths[0]) as f:
            rep = json.load(f)
        assert rep["context"]["spectrum_sha256"] == art.spectrum_hashes[0]

    def test_rerun_bit_identical_except_runmeta(self, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        run_plan(ExperimentPlan.from_dict(_tiny_plan_doc(out1)), out1)
        run_plan(ExperimentPlan.from_dict(_tiny_plan_doc(out2)), out2)
        names = sorted(os.listdir(out1))
        assert names == sorted(os.listdir(out2))
        for name in names:
            if name == "runmeta.json":
                continue
            with open(os.path.join(out1, name), "rb") as f1, open(
                os.path.join(out2, name), "rb"
            ) as f2:
                assert f1.read() == f2.read(), name

    def test_variant_failure_isolated(self, tmp_path):
        out = str(tmp_path / "out")
        variants = [
            {"name": "ok", "config": {"optimizer": "sgd", "lr": 0.1, "epochs": 2,
                                       "batch_size": 32, "seed": 5}},
            {"name": "diverges", "config": {"optimizer": "sgd", "lr": 1e30, "epochs": 2,
                                             "batch_size": 32, "seed": 5}},
        ]
        plan = ExperimentPlan.from_dict(_tiny_plan_doc(out, variants=variants))
        with np.errstate(all="ignore"):
            artifacts = run_plan(plan, out)
        by_name = {a.variant: a for a in artifacts}
        assert not by_name["ok"].failed
        assert by_name["diverges"].failed and "Divergence" in by_name["diverges"].error
        with open(os.path.join(out, "summary.json")) as f:
            summary = json.load(f)
        flags = {v["variant"]: v["failed"] for v in summary["variants"]}
        assert flags == {"ok": False, "diverges": True}

    def test_builtin_plans_construct(self):
        plan = builtin_plan("l2-sharpness")
        assert [name for name, _ in plan.variants] == ["mu0", "mu0.0001", "mu0.0005"]
        plan = builtin_plan("bn-mode")
        assert plan.spectrum.bn_mode == "both"
        with pytest.raises(PlanError):
            builtin_plan("nope")


class TestPlotting:
    def _spectrum(self):
        d = np.zeros(40)
        d[:4] = 1.0
        return spectral_density(DiagonalOperator(d), m=6, num_seeds=2, seed=1)

    def test_stem_csv(self):
        spec = self._spectrum()
        csv = spectrum_stem_csv(spec)
        lines = csv.strip().split("\n")
        assert lines[0] == "node,weight"
        assert len(lines) == spec.nodes.size + 1

    def test_stem_svg_deterministic(self):
        spec = self._spectrum()
        svg1 = spectrum_stem_svg(spec)
        svg2 = spectrum_stem_svg(spec)
        assert svg1 == svg2
        assert svg1.startswith("<svg") and "steelblue" in svg1

    def test_history_series(self):
        history = [
            {"epoch": 0, "test_acc": 0.8, "weight_norm": 3.0},
            {"epoch": 1, "test_acc": 0.9, "weight_norm": 2.5},
        ]
        csv = history_series_csv(history)
        assert csv.startswith("epoch,test_error,weight_norm")
        assert "0,0.19999999999999996,3.0" in csv

    def test_degeneracy_series(self):
        spec = self._spectrum()
        rep = sharpness_report(spec)
        csv = degeneracy_series_csv([(0, rep), (1, rep)])
        assert csv.startswith("epoch,degeneracy_ratio,degeneracy_node_value")
        assert len(csv.strip().split("\n")) == 3


class TestCli:
    def _write_inputs(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(
            {"input_dim": 6, "hidden_widths": [4], "output_dim": 2}
        ))
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"optimizer": "sgd", "lr": 0.1, "epochs": 3, "batch_size": 32, "seed": 2}
        ))
        data_path = tmp_path / "data.json"
        data_path.write_text(json.dumps(
            {"kind": "blobs", "d_x": 6, "d_y": 2, "n_per_class": 60,
             "separation": 2.5, "seed": 4, "n_val": 30}
        ))
        return str(spec_path), str(cfg_path), str(data_path)

    def test_train_then_spectrum_then_plot(self, tmp_path, capsys):
        spec_path, cfg_path, data_path = self._write_inputs(tmp_path)
        out = str(tmp_path / "run")
        rc = main(["train", "--model-spec", spec_path, "--config", cfg_path,
                   "--dataset", data_path, "--out", out])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "checkpoint.json"))
        rc = main(["spectrum", "--checkpoint", os.path.join(out, "checkpoint.json"),
                   "--dataset", data_path, "--out", out, "--m", "10",
                   "--num-seeds", "2"])
        assert rc == 0
        spath = os.path.join(out, "spectrum_train.json")
        assert os.path.exists(spath)
        assert os.path.exists(os.path.join(out, "report_train.json"))
        csv_path = os.path.join(out, "stem.csv")
        svg_path = os.path.join(out, "stem.svg")
        rc = main(["plot", "--spectrum", spath, "--csv", csv_path, "--svg", svg_path])
        assert rc == 0 and os.path.exists(csv_path) and os.path.exists(svg_path)
        rc = main(["plot", "--history", os.path.join(out, "history.csv"),
                   "--csv", os.path.join(out, "hist_series.csv")])
        assert rc == 0

    def test_plan_command_and_exit_codes(self, tmp_path):
        out = str(tmp_path / "planout")
        plan_path = tmp_path / "plan.json"
        plan_path.write_text(json.dumps(_tiny_plan_doc(out, epochs=2)))
        assert main(["plan", "--plan", str(plan_path), "--out", out]) == 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"name": "x"}))
        assert main(["plan", "--plan", str(bad), "--out", out]) == 2
        assert main(["plan", "--out", out]) == 2

    def test_plan_exit_code_on_variant_failure(self, tmp_path):
        out = str(tmp_path / "failout")
        doc = _tiny_plan_doc(out, variants=[
            {"name": "diverges", "config": {"optimizer": "sgd", "lr": 1e30,
                                             "epochs": 2, "batch_size": 32, "seed": 5}},
        ])
        plan_path = tmp_path / "plan.json"
        plan_path.write_text(json.dumps(doc))
        with np.errstate(all="ignore"):
            assert main(["plan", "--plan", str(plan_path), "--out", out]) == 1


class TestOracleSuite:
    def test_all_oracles_pass(self):
        report = oracle_suite()
        assert report["passed"], report
        names = {c["name"] for c in report["checks"]}
        assert "gradient_vs_finite_differences" in names
        assert "lanczos_full_m_vs_dense" in names
