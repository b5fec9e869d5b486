import numpy as np
import pytest

from poisson_deconv.harness import (
    ExperimentSpec,
    RiskTable,
    builtin_configuration,
    run_risk_experiment,
    run_runtime_comparison,
)


class TestBuiltinConfiguration:
    def test_grid_k4(self):
        mu = builtin_configuration("grid", 4)
        expected = {(0.2, 0.2), (0.2, 0.8), (0.8, 0.2), (0.8, 0.8)}
        got = {tuple(np.round(a, 12)) for a in mu.atoms}
        assert got == expected

    def test_grid_k16(self):
        mu = builtin_configuration("grid", 16)
        assert mu.k == 16
        xs = np.unique(np.round(mu.atoms[:, 0], 12))
        assert np.allclose(xs, [0.2, 0.4, 0.6, 0.8])

    def test_grid_requires_square(self):
        with pytest.raises(ValueError):
            builtin_configuration("grid", 5)

    def test_corners(self):
        mu = builtin_configuration("corners", 8)
        assert mu.k == 8
        got = {tuple(np.round(a, 12)) for a in mu.atoms}
        assert got == {(0.2, 0.2), (0.2, 0.8), (0.8, 0.2), (0.8, 0.8)}
        with pytest.raises(ValueError):
            builtin_configuration("corners", 6)

    def test_u_shape_distinct(self):
        mu = builtin_configuration("u-shape", 9)
        assert mu.k == 9
        d = np.linalg.norm(mu.atoms[:, None] - mu.atoms[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 0
        # endpoints are top corners of the U
        assert (np.round(mu.atoms[0], 12) == (0.2, 0.8)).all()
        assert (np.round(mu.atoms[-1], 12) == (0.8, 0.8)).all()

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            builtin_configuration("ring", 4)


def small_spec(**overrides):
    base = dict(
        configuration="grid", k=4, sigma=0.05, resolutions=(20,),
        t_values=(1e4,), replicates=3, seed=5, estimators=("mm", "em"),
        em_max_iterations=10, jobs=1,
    )
    base.update(overrides)
    return ExperimentSpec(**base)


class TestRunRiskExperiment:
    def test_all_cells_present(self):
        spec = small_spec(t_values=(1e3, 1e4), resolutions=(10, 20))
        table = run_risk_experiment(spec)
        assert len(table.rows) == 2 * 2 * 2  # estimators x t x m
        for row in table.rows:
            assert row["n"] == 3
            assert row["mean_w1"] >= 0
            assert row["stderr_w1"] >= 0

    def test_deterministic_given_seed(self, tmp_path):
        spec = small_spec()
        a = run_risk_experiment(spec)
        b = run_risk_experiment(spec)
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        a.to_csv(pa)
        b.to_csv(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_mean_permutation_invariant(self):
        spec = small_spec(replicates=4)
        table = run_risk_experiment(spec)
        row = table.lookup("mm", 1e4, 400)
        samples = [s for s in row["w1_samples"] if s is not None]
        assert row["mean_w1"] == pytest.approx(np.mean(sorted(samples)))

    def test_noiseless_row(self):
        spec = small_spec(t_values=(np.inf,), replicates=5)
        table = run_risk_experiment(spec)
        row = table.lookup("em", np.inf, 400)
        assert row["n"] == 5
        assert row["stderr_w1"] == 0.0

    def test_noiseless_bounds_finite_t(self):
        spec = small_spec(t_values=(1e3, np.inf), replicates=4, seed=7)
        table = run_risk_experiment(spec)
        noiseless_row = table.lookup("em", np.inf, 400)
        noisy_row = table.lookup("em", 1e3, 400)
        assert (
            noiseless_row["mean_w1"]
            <= noisy_row["mean_w1"] + 2 * noisy_row["stderr_w1"]
        )


class TestRiskTableOutputs:
    def test_csv_excludes_timing(self, tmp_path):
        table = run_risk_experiment(small_spec())
        path = tmp_path / "risk.csv"
        table.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert "time" not in header
        assert "mean_w1" in header

    def test_timing_csv_and_summary(self, tmp_path):
        table = run_risk_experiment(small_spec())
        table.timing_to_csv(tmp_path / "timing.csv")
        table.summary_json(tmp_path / "summary.json")
        assert "mean_time_s" in (tmp_path / "timing.csv").read_text()
        import json

        payload = json.loads((tmp_path / "summary.json").read_text())
        assert len(payload) == len(table.rows)

    def test_dat_files(self, tmp_path):
        spec = small_spec(t_values=(1e3, 1e4))
        table = run_risk_experiment(spec)
        paths = table.write_dat_files(tmp_path)
        assert len(paths) == 2  # one per estimator at single m
        body = open(paths[0]).read().splitlines()
        assert body[0].startswith("#")
        assert len(body) == 3  # header + two t values


class TestRuntimeComparison:
    def test_report_flags(self):
        spec = small_spec(replicates=2)
        table = run_runtime_comparison(spec)
        flags = [r.get("mm_faster_than_em") for r in table.rows]
        assert all(isinstance(f, bool) for f in flags)
        for row in table.rows:
            assert row["mean_time_s"] >= 0


class TestSpecValidation:
    def test_bad_configuration(self):
        with pytest.raises(ValueError):
            small_spec(configuration="blob")

    def test_custom_needs_atoms(self):
        with pytest.raises(ValueError):
            small_spec(configuration="custom")

    def test_bad_estimator(self):
        with pytest.raises(ValueError):
            small_spec(estimators=("mm", "nn"))

    def test_custom_atoms_roundtrip(self):
        spec = small_spec(
            configuration="custom", atoms=((0.3, 0.3), (0.7, 0.7)), k=2
        )
        assert spec.truth().k == 2
