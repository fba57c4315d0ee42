"""Generator contracts: geodesic paths, planted blocks, grids, serialization."""

import csv
import json

import numpy as np
import pytest

from covscan import simulate as sim
from covscan.geometry import log_map
from covscan.regression import fit_lcglm


class TestSimConfig:
    def test_valid(self):
        cfg = sim.SimConfig(p=10, p_t=3, n=16, runs=2, seed=1)
        assert cfg.timepoints == 4

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"p": 1, "p_t": 0, "n": 16},
            {"p": 10, "p_t": 11, "n": 16},
            {"p": 10, "p_t": 1, "n": 16},
            {"p": 10, "p_t": 3, "n": 16, "timepoints": 1},
            {"p": 10, "p_t": 3, "n": 16, "runs": 0},
            {"p": 10, "p_t": 3, "n": 1},
            {"p": 10, "p_t": 3, "n": 16, "signal_scale": -0.5},
        ],
    )
    def test_invalid(self, kwargs):
        kwargs.setdefault("runs", 1)
        with pytest.raises(ValueError):
            sim.SimConfig(**kwargs)


class TestGenSpdPath:
    def test_zero_scale_constant_path(self):
        path = sim.gen_spd_path(4, 5, seed=3, signal_scale=0.0)
        for mat in path[1:]:
            assert np.allclose(mat, path[0], atol=1e-14)

    def test_points_lie_on_one_geodesic(self):
        path = sim.gen_spd_path(4, 4, seed=9, signal_scale=0.8)
        # logs at the base must be collinear: Log(b, path[t]) == t * V
        v = log_map(path[0], path[1])
        for t in (2, 3):
            step = log_map(path[0], path[t])
            assert np.linalg.norm(step - t * v) < 1e-9 * max(1.0, t * np.linalg.norm(v))
        fit = fit_lcglm(np.stack(path), np.arange(4.0))
        assert fit.residual_sse < 1e-10

    def test_outputs_spd(self):
        for mat in sim.gen_spd_path(5, 4, seed=11, signal_scale=1.5):
            assert np.allclose(mat, mat.T)
            assert np.linalg.eigvalsh(mat).min() > 0

    def test_deterministic(self):
        a = sim.gen_spd_path(3, 4, seed=21)
        b = sim.gen_spd_path(3, 4, seed=21)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestBlockTangent:
    def test_equal_magnitudes_and_norm(self, rng):
        out = sim._block_tangent(rng, 9, 4, 1.5)
        blk = out[:4, :4]
        off = np.abs(blk[np.triu_indices(4, 1)])
        assert np.allclose(off, off[0])
        assert np.allclose(np.diag(blk), 0.0)
        assert abs(np.linalg.norm(out) - 1.5) < 1e-12
        assert np.allclose(out[4:, :], 0.0) and np.allclose(out[:, 4:], 0.0)

    def test_zero_scale_zero(self, rng):
        assert np.allclose(sim._block_tangent(rng, 6, 3, 0.0), 0.0)


class TestGenGroupData:
    def test_planted_bookkeeping(self):
        cfg = sim.SimConfig(p=8, p_t=3, n=16, runs=1, seed=5)
        run = sim.gen_group_data(cfg, 0)
        assert run.planted_features == (0, 1, 2)
        null_cfg = sim.SimConfig(p=8, p_t=0, n=16, runs=1, seed=5)
        assert sim.gen_group_data(null_cfg, 0).planted_features == ()
        faint = sim.SimConfig(p=8, p_t=3, n=16, runs=1, seed=5, signal_scale=0.0)
        assert sim.gen_group_data(faint, 0).planted_features == ()

    def test_deterministic_given_seed(self):
        cfg = sim.SimConfig(p=6, p_t=2, n=12, runs=1, seed=44)
        a = sim.gen_group_data(cfg, 3)
        b = sim.gen_group_data(cfg, 3)
        assert np.array_equal(a.data.features, b.data.features)
        c = sim.gen_group_data(cfg, 4)
        assert not np.array_equal(a.data.features, c.data.features)

    def test_background_paths_identical_across_groups(self):
        cfg = sim.SimConfig(p=7, p_t=3, n=16, runs=1, seed=8, signal_scale=2.0)
        run = sim.gen_group_data(cfg, 0)
        for m1, m2 in zip(*run.group_paths):
            assert np.allclose(m1[3:, 3:], m2[3:, 3:], atol=1e-12)
            # cross block stays exactly zero: the difference cannot smear
            assert np.allclose(m1[:3, 3:], 0.0, atol=1e-12)
            assert np.allclose(m2[:3, 3:], 0.0, atol=1e-12)

    def test_zero_signal_paths_coincide(self):
        cfg = sim.SimConfig(p=6, p_t=2, n=12, runs=1, seed=2, signal_scale=0.0)
        run = sim.gen_group_data(cfg, 0)
        for m1, m2 in zip(*run.group_paths):
            assert np.allclose(m1, m2, atol=1e-14)

    def test_longitudinal_layout(self):
        cfg = sim.SimConfig(p=6, p_t=2, n=10, runs=1, seed=2)
        run = sim.gen_group_data(cfg, 0)
        data = run.data
        # n rows per group-timepoint cell, every subject seen at every visit
        groups_per_row = data.subject_group[data.row_subject]
        for g in (0, 1):
            for t in range(4):
                mask = (data.row_time_index == t) & (groups_per_row == g)
                assert int(mask.sum()) == 10
        assert data.n_subjects == 20
        for s in range(data.n_subjects):
            visits = data.row_time_index[data.row_subject == s]
            assert sorted(visits) == [0, 1, 2, 3]

    def test_large_n_sample_covariance_matches_path(self):
        cfg = sim.SimConfig(p=4, p_t=2, n=25_000, runs=1, seed=13, signal_scale=1.0)
        run = sim.gen_group_data(cfg, 0)
        data = run.data
        groups_per_row = data.subject_group[data.row_subject]
        for g in (0, 1):
            for t in range(4):
                mask = (data.row_time_index == t) & (groups_per_row == g)
                emp = np.cov(data.features[mask], rowvar=False, ddof=1)
                truth = run.group_paths[g][t]
                rel = np.linalg.norm(emp - truth) / np.linalg.norm(truth)
                assert rel < 0.02


class TestOracleGraphFromData:
    def test_deterministic(self):
        cfg = sim.SimConfig(p=12, p_t=4, n=24, runs=1, seed=31, signal_scale=2.0)
        run = sim.gen_group_data(cfg, 0)
        g1, lam1 = sim.oracle_graph_from_data(run.data, 0.10)
        g2, lam2 = sim.oracle_graph_from_data(run.data, 0.10)
        assert g1.edges == g2.edges and lam1 == lam2

    def test_explicit_lambda_respected(self):
        cfg = sim.SimConfig(p=10, p_t=3, n=24, runs=1, seed=31)
        run = sim.gen_group_data(cfg, 0)
        graph, lam = sim.oracle_graph_from_data(run.data, 0.10, lam=0.5)
        assert lam == 0.5

    def test_density_tuning_hits_target(self):
        cfg = sim.SimConfig(p=12, p_t=4, n=40, runs=1, seed=7, signal_scale=2.0)
        run = sim.gen_group_data(cfg, 0)
        graph, _ = sim.oracle_graph_from_data(run.data, 0.15)
        total = 12 * 11 // 2
        # the edge count is a step function of the penalty, so the bisection
        # can land a few edges off the target when several enter at once
        assert abs(graph.edge_count / total - 0.15) <= 3.0 / total


class TestDetectionGrid:
    def small_cfg(self, **kw):
        kw.setdefault("p", 10)
        kw.setdefault("p_t", 3)
        kw.setdefault("n", 20)
        kw.setdefault("runs", 3)
        kw.setdefault("seed", 17)
        kw.setdefault("signal_scale", 4.0)
        return sim.SimConfig(**kw)

    def test_grid_outputs_and_serialization(self, tmp_path):
        csv_path = tmp_path / "grid.csv"
        json_path = tmp_path / "grid.json"
        results = sim.run_detection_grid(
            [self.small_cfg()],
            n_perm=19,
            csv_path=str(csv_path),
            json_path=str(json_path),
        )
        (cell,) = results
        assert 0.0 <= cell.detection_rate <= 1.0
        assert cell.n_detected == sum(r["reject"] for r in cell.per_run)
        for r in cell.per_run:
            assert 0 <= r["block_edges_in_graph"] <= 3
            assert r["graph_contains_block"] == (r["block_edges_in_graph"] == 3)

        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert float(rows[0]["detection_rate"]) == cell.detection_rate
        payload = json.loads(json_path.read_text())
        assert payload["meta"]["n_perm"] == 19
        assert payload["cells"][0]["config"]["p"] == 10
        assert len(payload["cells"][0]["per_run"]) == 3

    def test_grid_deterministic_across_worker_counts(self):
        cfg = self.small_cfg(runs=3)
        kw = dict(n_perm=9, max_radius=1)
        seq = sim.run_detection_grid([cfg], workers=1, **kw)
        par = sim.run_detection_grid([cfg], workers=2, **kw)
        assert seq[0].per_run == par[0].per_run
        assert seq[0].detection_rate == par[0].detection_rate

    def test_localization_requires_planted_coverage(self):
        cfg = self.small_cfg()
        (cell,) = sim.run_detection_grid([cfg], n_perm=19)
        for r in cell.per_run:
            if r["localized"]:
                assert r["reject"]
                assert set(range(3)) <= set(r["identified"])


class TestNullCalibrationSmoke:
    def test_null_config_rejection_rate_near_alpha(self):
        # p_t = 0 wipes the perturbation: groups identically distributed.
        # 40 runs at exact level 1/20 keeps this a smoke check (3 sigma).
        cfg = sim.SimConfig(p=12, p_t=0, n=24, runs=40, seed=23)
        (cell,) = sim.run_detection_grid([cfg], n_perm=19, max_radius=1)
        se = np.sqrt(0.05 * 0.95 / cfg.runs)
        assert cell.detection_rate <= 0.05 + 3 * se

    def test_empty_graph_counts_as_non_detection(self):
        # a penalty above every entry magnitude empties the graph
        cfg = sim.SimConfig(p=8, p_t=0, n=16, runs=1, seed=4)
        r = sim._grid_single_run(
            cfg,
            run=0,
            lam=1e6,
            alpha=0.05,
            n_perm=9,
            mode="trajectory",
            covariance_kind="sample",
            max_radius=1,
            target_density=0.10,
            karcher_max_iter=60,
            karcher_tol=1e-7,
        )
        assert r["graph_edges"] == 0
        assert r["reject"] is False and r["observed_max"] is None


class TestBaselineComparison:
    def test_rows_per_method_and_applicability(self, tmp_path):
        cfg = sim.SimConfig(p=8, p_t=3, n=24, runs=3, seed=29, signal_scale=3.0)
        csv_path = tmp_path / "base.csv"
        rows = sim.run_baseline_comparison(
            [cfg], n_perm=19, csv_path=str(csv_path)
        )
        methods = {r["method"] for r in rows}
        assert methods == {"scan", "naive_glm", "interaction_glm"}
        for r in rows:
            if r["n_applicable"]:
                assert 0.0 <= r["rejection_rate"] <= 1.0
            else:
                assert r["rejection_rate"] is None
        with open(csv_path, newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 3

    def test_naive_glm_opts_out_below_three_timepoints(self):
        # two timepoints leave no residual dof for a per-entry linear fit;
        # the baseline must opt out rather than fabricate a rate
        cfg = sim.SimConfig(p=8, p_t=3, n=8, runs=2, seed=3, timepoints=2)
        rows = sim.run_baseline_comparison([cfg], n_perm=9, max_radius=1)
        naive = next(r for r in rows if r["method"] == "naive_glm")
        assert naive["n_applicable"] == 0
        assert naive["rejection_rate"] is None
        glm = next(r for r in rows if r["method"] == "interaction_glm")
        assert glm["n_applicable"] == 2
