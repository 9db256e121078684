import json

import numpy as np
import pytest

from hesslens.curvature import DiagonalOperator
from hesslens.linalg import Rng, gaussian
from hesslens.models import ModelSpec
from hesslens.sharpness import (
    RankBoundInput,
    degeneracy_ratio,
    rank_bound,
    rank_bound_for_spec,
    report_csv_header,
    report_csv_row,
    report_to_json,
    sharpness_report,
)
from hesslens.slq import RitzSpectrum, spectral_density


def _atoms(nodes, weights, dim=100):
    nodes = np.asarray(nodes, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(nodes, kind="stable")
    return RitzSpectrum(
        results=[],
        nodes=nodes[order],
        weights=weights[order],
        dim=dim,
        m=nodes.size,
        num_seeds=1,
        probe="rademacher",
        base_seed=0,
    )


class TestRankBound:
    def test_paper_scale_numbers(self):
        bound, floor = rank_bound(
            RankBoundInput(d_x=1024, d_y=10, neuron_counts=(13416,), num_params=16_000_000)
        )
        assert bound == 4 * 10 * (13416 + 1024) == 577_600
        assert floor == 0.9639  # exact in float64

    def test_desk_mlp_numbers(self):
        inp = RankBoundInput(d_x=20, d_y=2, neuron_counts=(30, 30, 2), num_params=1622)
        bound, floor = rank_bound(inp)
        assert bound == 8 * 82 == 656
        assert floor == pytest.approx(1.0 - 656.0 / 1622.0, abs=1e-15)

    def test_vacuous_bound_floor_zero(self):
        bound, floor = rank_bound(
            RankBoundInput(d_x=4, d_y=3, neuron_counts=(5, 3), num_params=20)
        )
        assert bound >= 20 and floor == 0.0

    def test_from_spec_includes_output_layer(self):
        spec = ModelSpec(20, (30, 30), 2)
        inp = rank_bound_for_spec(spec, 1622)
        assert inp.neuron_counts == (30, 30, 2)
        assert rank_bound(inp)[0] == 656


class TestDegeneracyRatio:
    def test_single_nearest_node(self):
        spec = _atoms([0.0, 5.0], [0.97, 0.03])
        ratio, node = degeneracy_ratio(spec, merge=False)
        assert ratio == pytest.approx(0.97) and node == 0.0

    def test_merge_combines_two_nearest(self):
        spec = _atoms([-0.01, 0.02, 3.0], [0.40, 0.45, 0.15])
        ratio, node = degeneracy_ratio(spec, merge=True)
        assert ratio == pytest.approx(0.85, abs=1e-12)
        assert node == pytest.approx((-0.01 * 0.40 + 0.02 * 0.45) / 0.85, rel=1e-12)

    def test_merge_never_smaller_than_single(self):
        rng = Rng(5)
        for k in range(20):
            n = 3 + int(rng.integers(1, 6)[0])
            nodes = gaussian(rng, n)
            w = np.abs(gaussian(rng, n)) + 1e-3
            w /= w.sum()
            spec = _atoms(nodes, w)
            r_merge, _ = degeneracy_ratio(spec, merge=True)
            r_single, _ = degeneracy_ratio(spec, merge=False)
            assert r_merge >= r_single - 1e-15

    def test_tie_breaks_toward_negative(self):
        spec = _atoms([-1.0, 1.0, 4.0], [0.2, 0.3, 0.5])
        ratio, node = degeneracy_ratio(spec, merge=False)
        assert node == -1.0 and ratio == pytest.approx(0.2)

    def test_single_atom_spectrum(self):
        ratio, node = degeneracy_ratio(_atoms([2.0], [1.0]), merge=True)
        assert ratio == 1.0 and node == 2.0


class TestSharpnessReport:
    def test_identity_operator_report(self):
        spec = spectral_density(DiagonalOperator(np.ones(50)), m=5, num_seeds=2)
        rep = sharpness_report(spec)
        assert rep.lambda_max == pytest.approx(1.0, abs=1e-12)
        assert rep.trace == pytest.approx(50.0, abs=1e-9)
        assert rep.frobenius == pytest.approx(np.sqrt(50.0), rel=1e-9)
        assert rep.mean_eigenvalue == pytest.approx(1.0, abs=1e-12)
        # the nearest-origin node sits at 1.0: no mass at the origin
        assert rep.degeneracy_ratio == 0.0
        assert not rep.trace_caveat

    def test_degenerate_operator_report(self):
        d = np.zeros(200)
        d[:20] = 2.0
        spec = spectral_density(DiagonalOperator(d), m=12, num_seeds=5, seed=3)
        rep = sharpness_report(spec)
        assert 0.85 <= rep.degeneracy_ratio <= 0.95
        assert abs(rep.degeneracy_node_value) < 1e-8
        # merging would have swallowed the atom at 2.0; the report must
        # have fallen back to the single nearest-origin node
        assert not rep.merged

    def test_trace_caveat_for_indefinite_spectrum(self):
        spec = _atoms([-1.0, 0.0, 4.0], [0.1, 0.6, 0.3])
        rep = sharpness_report(spec)
        assert rep.trace_caveat
        psd = _atoms([0.0, 4.0], [0.6, 0.4])
        assert not sharpness_report(psd).trace_caveat

    def test_merge_defaults_by_operator(self):
        spec = _atoms([-0.01, 0.02, 3.0], [0.4, 0.45, 0.15])
        rep_h = sharpness_report(spec, context={"operator": "hessian"})
        rep_g = sharpness_report(spec, context={"operator": "ggn"})
        assert rep_h.merged and not rep_g.merged
        assert rep_h.degeneracy_ratio >= rep_g.degeneracy_ratio

    def test_rank_bound_fields(self):
        spec = _atoms([0.0, 1.0], [0.5, 0.5], dim=1622)
        inp = RankBoundInput(20, 2, (30, 30, 2), 1622)
        rep = sharpness_report(spec, bound_inp=inp)
        assert rep.rank_bound == 656
        assert rep.degeneracy_floor == pytest.approx(1 - 656 / 1622)

    def test_json_round_trip_and_context(self):
        spec = _atoms([0.0, 2.0], [0.7, 0.3])
        rep = sharpness_report(spec, context={"operator": "ggn", "mu": 5e-4})
        doc = json.loads(report_to_json(rep))
        assert doc["context"]["mu"] == 5e-4
        assert doc["P"] == 100
        assert doc["frobenius"] == rep.frobenius

    def test_csv_row(self):
        spec = _atoms([0.0, 2.0], [0.7, 0.3])
        rep = sharpness_report(spec)
        header = report_csv_header()
        row = report_csv_row(rep, epoch=12)
        assert header.startswith("epoch,lambda_max")
        assert row.startswith("12,")
        assert len(row.split(",")) == len(header.split(","))
