import numpy as np
import pytest

from weightpath import evalkit, ppo, svdcodec, tipl
from weightpath.evalkit import (EvalError, EvalReport, EvalRow, forward_eval,
                                merge_reports, read_report_csv, repw,
                                scatter_table, wpe, write_report)


class TestWpe:
    def test_identity_zero(self):
        v = np.random.default_rng(0).standard_normal(10)
        assert wpe(v, v) == 0.0

    def test_symmetry(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([0.5, -1.0, 2.0])
        assert wpe(a, b) == wpe(b, a)

    def test_hand_value(self):
        assert wpe(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(EvalError, match="mismatch"):
            wpe(np.zeros(3), np.zeros(4))

    def test_matches_codec_projection_residual(self):
        corpus = np.random.default_rng(1).standard_normal((20, 8))
        basis = svdcodec.fit_basis(corpus, 3)
        phi = np.random.default_rng(2).standard_normal(8)
        rec = svdcodec.decode(basis, svdcodec.encode(basis, phi))
        resid = phi - basis.v_d @ (basis.v_d.T @ phi)
        assert wpe(phi, rec) == pytest.approx(np.mean(resid ** 2), abs=1e-12)


class TestRepw:
    def test_equal_zero(self):
        assert repw(123.4, 123.4) == 0.0

    def test_hand_value_and_symmetry(self):
        assert repw(500.0, 450.0) == 50.0
        assert repw(450.0, 500.0) == 50.0


def _pointmass_fixture():
    traj = ppo.run_trial("pointmass", seed=0, total_steps=2048,
                         snapshot_every=2)
    basis = svdcodec.fit_basis(traj.snapshots, 3, layout=traj.layout)
    cfg = tipl.TiplConfig(d_token=3, context_len=4, embed_dim=8, layers=1,
                          heads=1, dropout=0.0)
    model = tipl.init_model(cfg, 0)
    return traj, basis, model


class TestForwardEval:
    def test_too_short_trajectory(self):
        traj, basis, model = _pointmass_fixture()
        with pytest.raises(EvalError, match="snapshots"):
            forward_eval(model, basis, traj, prefix_len=5, k=10)

    def test_row_count_and_step_range(self):
        traj, basis, model = _pointmass_fixture()
        rep = forward_eval(model, basis, traj, prefix_len=2, k=2,
                           episodes=2, prefix_stride=1, max_prefixes=3)
        assert len(rep.rows) == 3 * 2  # prefixes x k
        assert {r.step for r in rep.rows} == {1, 2}
        assert all(r.wpe >= 0 and r.repw >= 0 for r in rep.rows)

    def test_truth_stub_reduces_to_codec_residual(self):
        traj, basis, model = _pointmass_fixture()
        prefix_len, k = 2, 2

        def truth_rollout(_model, b, prefix, steps):
            # locate the prefix in the trajectory, return the coded truth
            start = next(i for i in range(traj.n_snapshots)
                         if np.array_equal(traj.snapshots[i], prefix[0]))
            future = traj.snapshots[start + len(prefix):
                                    start + len(prefix) + steps]
            return svdcodec.decode(b, svdcodec.encode(b, future))

        rep = forward_eval(model, basis, traj, prefix_len, k, episodes=2,
                           prefix_stride=2, max_prefixes=3,
                           rollout_fn=truth_rollout)
        for row in rep.rows:
            base = rep.baseline_wpe[row.step]
            assert row.wpe == pytest.approx(min(base), abs=1e-15) or \
                row.wpe in [pytest.approx(b, abs=1e-15) for b in base]

    def test_exact_truth_gives_zero_repw(self):
        traj, basis, model = _pointmass_fixture()

        def exact_rollout(_model, _b, prefix, steps):
            start = next(i for i in range(traj.n_snapshots)
                         if np.array_equal(traj.snapshots[i], prefix[0]))
            return traj.snapshots[start + len(prefix):
                                  start + len(prefix) + steps].copy()

        rep = forward_eval(model, basis, traj, prefix_len=2, k=2, episodes=2,
                           prefix_stride=2, max_prefixes=2,
                           rollout_fn=exact_rollout)
        assert all(r.repw == 0.0 for r in rep.rows)  # paired eval seeds
        assert all(r.wpe == 0.0 for r in rep.rows)

    def test_determinism(self):
        traj, basis, model = _pointmass_fixture()
        kw = dict(prefix_len=2, k=2, episodes=2, seed=5, prefix_stride=2,
                  max_prefixes=2)
        r1 = forward_eval(model, basis, traj, **kw)
        r2 = forward_eval(model, basis, traj, **kw)
        assert [vars(a) for a in r1.rows] == [vars(b) for b in r2.rows]


class TestScatter:
    def test_identity_diagonal(self):
        rep = EvalReport(rows=[EvalRow(1, 0, i, 0, 0, v, v)
                               for i, v in enumerate([1.0, 2.0, 5.0])])
        pts, pearson, spearman = scatter_table(rep)
        assert pearson == pytest.approx(1.0) and spearman == pytest.approx(1.0)

    def test_hand_linear_relation(self):
        rep = EvalReport(rows=[EvalRow(1, 0, i, 0, 0, t, p)
                               for i, (t, p) in enumerate([(1, 2), (2, 4), (3, 6)])])
        _, pearson, _ = scatter_table(rep)
        assert pearson == pytest.approx(1.0)

    def test_constant_column_undefined(self):
        rep = EvalReport(rows=[EvalRow(1, 0, i, 0, 0, v, 3.0)
                               for i, v in enumerate([1.0, 2.0, 5.0])])
        _, pearson, spearman = scatter_table(rep)
        assert pearson is None and spearman is None

    def test_too_few_points(self):
        rep = EvalReport(rows=[EvalRow(1, 0, 0, 0, 0, 1.0, 1.0)])
        with pytest.raises(EvalError, match=">= 2"):
            scatter_table(rep)


class TestReportIo:
    def test_empty_report_header_only(self, tmp_path):
        p = tmp_path / "r.csv"
        write_report(EvalReport(), p)
        assert p.read_text().strip() == "step,trial,snapshot,wpe,repw,j_true,j_pred"

    def test_roundtrip_and_summary_keys(self, tmp_path):
        rows = [EvalRow(s, 0, 10 + s, 0.125 * s, 2.0 * s, 100.0 + s, 99.0 - s)
                for s in range(1, 4)]
        rep = EvalReport(rows=rows, baseline_wpe={1: [0.1], 2: [0.2], 3: [0.3]})
        csv_p, json_p = tmp_path / "r.csv", tmp_path / "r.json"
        write_report(rep, csv_p, json_p)
        back = read_report_csv(csv_p)
        assert [vars(a) for a in back.rows] == [vars(b) for b in rows]
        import json
        summary = json.loads(json_p.read_text())
        for key in ("pearson", "spearman", "median_wpe_per_step",
                    "median_repw_per_step", "median_baseline_wpe_per_step"):
            assert key in summary

    def test_nine_significant_digits(self, tmp_path):
        val = 0.123456789123456
        rep = EvalReport(rows=[EvalRow(1, 0, 0, val, 0.0, 0.0, 0.0)])
        p = tmp_path / "r.csv"
        write_report(rep, p)
        assert "0.123456789" in p.read_text()

    def test_merge(self):
        r1 = EvalReport(rows=[EvalRow(1, 0, 0, 1, 1, 1, 1)],
                        baseline_wpe={1: [0.5]})
        r2 = EvalReport(rows=[EvalRow(1, 1, 0, 2, 2, 2, 2)],
                        baseline_wpe={1: [0.7]})
        m = merge_reports([r1, r2])
        assert len(m.rows) == 2 and m.baseline_wpe[1] == [0.5, 0.7]
