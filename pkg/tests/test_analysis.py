"""Tests for metrics, configuration loading, experiments, sweeps and the stability probe"""

import json
from pathlib import Path

import numpy as np
import pytest

from src.core.exceptions import ConfigError, ExperimentError
from src.core.models import ExperimentConfig, ModelKind, Provenance, SolveMethod, SweepParameter
from src.services import analysis
from src.services.fem_core import ScalarFieldP0, VectorFieldP1
from src.services.forward_sim import ForwardDataset
from src.services.inverse_core import assemble_system, build_tv, solve
from src.services.tensor_algebra import model_basis
from src.utils import export

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestErrors:
    def test_relative_l2(self, unit_square):
        truth = ScalarFieldP0.constant(unit_square, 1.0)
        assert analysis.rel_l2_error(ScalarFieldP0.constant(unit_square, 2.0), truth) == pytest.approx(1.0)
        recon = ScalarFieldP0(unit_square, np.array([1.0, 3.0]))
        assert analysis.rel_l2_error(recon, truth) == pytest.approx(np.sqrt(2.0))
        assert analysis.rel_l2_error(truth, truth) == 0.0

    def test_linf(self, unit_square):
        truth = ScalarFieldP0.constant(unit_square, 1.0)
        assert analysis.linf_error(ScalarFieldP0(unit_square, np.array([0.5, 3.0])), truth) == 2.0

    def test_zero_truth_rejected(self, unit_square):
        zero = ScalarFieldP0.constant(unit_square, 0.0)
        with pytest.raises(ValueError):
            analysis.rel_l2_error(ScalarFieldP0.constant(unit_square, 1.0), zero)

    def test_mesh_mismatch_rejected(self, unit_square, grid_mesh):
        with pytest.raises(ValueError):
            analysis.rel_l2_error(ScalarFieldP0.constant(unit_square, 1.0), ScalarFieldP0.constant(grid_mesh, 1.0))


class TestConfig:
    def test_overrides(self):
        assert analysis.parse_overrides(["NOISE=0.01", " seed = 4"]) == {"noise": "0.01", "seed": "4"}
        with pytest.raises(ConfigError):
            analysis.parse_overrides(["noise"])
        with pytest.raises(ConfigError):
            analysis.parse_overrides(["=1"])

    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text("# comment\nPHANTOM=layers\nMODEL=lame\nEPS_TV=1e-4,1e-3\nSEED=5\n")
        cfg = analysis.load_config(str(path), {"seed": "9"})
        assert cfg.phantom.value == "layers"
        assert cfg.model == ModelKind.LAME
        assert cfg.eps_tv == [1e-4, 1e-3]
        assert cfg.seed == 9

    def test_shipped_configs_are_valid(self):
        for path in sorted(CONFIG_DIR.glob("*.env")):
            assert isinstance(analysis.load_config(str(path)), ExperimentConfig)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text("PHANTOM=disc\nCOLOUR=blue\n")
        with pytest.raises(ConfigError, match="colour"):
            analysis.load_config(str(path))

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            analysis.load_config(None, {"noise": "-1"})
        with pytest.raises(ConfigError):
            analysis.load_config(None, {"h_forward": "0.1", "h_inverse": "0.05"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            analysis.load_config(str(tmp_path / "absent.env"))

    def test_reg_params(self, quick_config):
        reg = quick_config.reg_params()
        assert reg.max_iter == 300
        assert reg.per_coefficient(2)[1].tolist() == [1.0, 1.0]


class TestExperiment:
    def test_writes_artifacts(self, quick_config):
        result = analysis.run_experiment(quick_config)
        out = Path(quick_config.output_dir)
        for name in ("reconstruction.vtk", "reconstruction.csv", "displacements.csv", "system.mtx",
                     "metrics.json", "provenance.json", "report.json", "config.json", "run.log"):
            assert (out / name).is_file(), name
        assert result.output_dir == out
        assert result.metrics.rel_l2[0] < 1.0
        assert np.all(result.report.solution >= quick_config.mu_min)

        table = export.read_table(out / "reconstruction.csv")
        assert len(table) == result.dataset.mesh.n_triangles
        assert {"truth_0", "recon_0", "area"} <= set(table.columns)
        mesh, cells, points = export.read_vtk(out / "reconstruction.vtk")
        assert np.array_equal(mesh.triangles, result.dataset.mesh.triangles)
        assert np.array_equal(cells["recon_0"], result.report.solution[0])
        assert np.array_equal(points["u_1"], result.dataset.displacements[1].values)

    def test_deterministic(self, quick_config, tmp_path):
        analysis.run_experiment(quick_config)
        again = quick_config.model_copy(update={"output_dir": str(tmp_path / "again")})
        analysis.run_experiment(again)
        for name in ("metrics.json", "report.json", "provenance.json", "reconstruction.csv"):
            first = (Path(quick_config.output_dir) / name).read_text()
            assert first == (tmp_path / "again" / name).read_text(), name

    def test_replay_from_written_provenance(self, quick_config):
        result = analysis.run_experiment(quick_config)
        prov = export.read_json(Path(quick_config.output_dir) / "provenance.json", Provenance)
        replayed = analysis.replay(prov)
        for a, b in zip(replayed.displacements, result.dataset.displacements):
            assert np.array_equal(a.values, b.values)

    def test_null_space_method(self, quick_config):
        cfg = quick_config.model_copy(update={"method": SolveMethod.NULLSPACE})
        result = analysis.run_experiment(cfg, write=False)
        assert result.output_dir is None
        assert len(result.metrics.sigma) == 2
        assert result.metrics.sigma[0] <= result.metrics.sigma[1]

    def test_failing_stage_is_tagged(self, quick_config):
        cfg = quick_config.model_copy(update={"h_inverse": 2.0})
        with pytest.raises(ExperimentError) as info:
            analysis.run_experiment(cfg, write=False)
        assert info.value.stage == "dataset"

    def test_metrics_invariant_under_renumbering(self, quick_config):
        ds = analysis.build_dataset(quick_config)
        rng = np.random.default_rng(0)
        node_perm = rng.permutation(ds.mesh.n_nodes)
        tri_perm = rng.permutation(ds.mesh.n_triangles)
        mesh = ds.mesh.renumbered(node_perm, tri_perm)
        fields = [VectorFieldP1(mesh, u.values[node_perm]) for u in ds.displacements]
        shuffled = ForwardDataset(mesh, fields, ds.provenance)

        rows = []
        for d in (ds, shuffled):
            sys = assemble_system(d, model_basis(quick_config.model))
            tv = build_tv(d.mesh)
            report = solve(sys, tv, quick_config.reg_params())
            rows.append(analysis.compute_metrics(report, analysis.truth_fields(d), tv))
        assert rows[1].rel_l2 == pytest.approx(rows[0].rel_l2, rel=1e-6)
        assert rows[1].tv == pytest.approx(rows[0].tv, rel=1e-6)

    def test_dataset_and_system_export(self, quick_config, tmp_path):
        ds = analysis.build_dataset(quick_config)
        sys = assemble_system(ds, model_basis(quick_config.model))
        analysis.write_dataset(ds, tmp_path)
        paths = analysis.export_system(sys, tmp_path)
        assert len(paths) == 1 + ds.n_loads
        assert abs(export.read_matrix(tmp_path / "system.mtx") - sys.matrix).max() == 0.0
        assert abs(export.read_matrix(tmp_path / "block_1_0.mtx") - sys.blocks[1][0]).max() == 0.0
        assert json.loads((tmp_path / "provenance.json").read_text())["seed"] == quick_config.seed


class TestSweeps:
    def test_single_value_rejected(self, quick_config):
        for fn in (analysis.sweep_tv, analysis.sweep_elas, analysis.sweep_n):
            with pytest.raises(ConfigError):
                fn(quick_config, [1])

    def test_counts_out_of_range(self, quick_config):
        with pytest.raises(ConfigError):
            analysis.sweep_n(quick_config, [1, 5])

    def test_tv_sweep_sorted_and_written(self, quick_config):
        rows = analysis.run_sweep(quick_config, SweepParameter.TV, [1e-3, 1e-5])
        assert [r.parameter for r in rows] == [1e-5, 1e-3]
        table = export.read_table(Path(quick_config.output_dir) / "sweep_tv.csv")
        assert table["parameter"].tolist() == [1e-5, 1e-3]
        assert "rel_l2_0" in table.columns

    def test_elas_sweep(self, quick_config):
        rows = analysis.sweep_elas(quick_config, [1e-3, 0.0])
        assert [r.parameter for r in rows] == [0.0, 1e-3]

    def test_n_sweep_uses_nested_subsets(self, quick_config):
        rows = analysis.sweep_n(quick_config, [2, 1])
        assert [r.parameter for r in rows] == [1.0, 2.0]
        assert all(len(r.rel_l2) == 1 for r in rows)


class TestStabilityProbe:
    def test_requires_shear(self, quick_config):
        with pytest.raises(ConfigError):
            analysis.stability_probe(quick_config.model_copy(update={"model": ModelKind.LAME}), [1e-3, 1e-2])

    def test_drift_grows_with_amplitude(self, quick_config):
        result = analysis.stability_probe(quick_config, [0.0, 1e-3, 1e-2])
        assert result.errors[0] == pytest.approx(0.0, abs=1e-8)
        assert 0 < result.errors[1] < result.errors[2]
        assert not result.degenerate
        assert np.isfinite(result.slope)
        assert len(result.mean_normalized_errors) == 3

    def test_smooth_direction_is_seeded(self, grid_mesh):
        a = analysis.smooth_direction(grid_mesh, 3)
        assert a.shape == (grid_mesh.n_nodes, 2)
        assert np.array_equal(a, analysis.smooth_direction(grid_mesh, 3))
        assert not np.array_equal(a, analysis.smooth_direction(grid_mesh, 4))


@pytest.mark.slow
class TestDeskScaleReconstruction:
    """Runs at the default mesh sizes; minutes each"""

    def test_shear_disc(self, tmp_path):
        cfg = ExperimentConfig(phantom="disc", model="shear", n_loads=1, eps_tv=[1e-4], eps_elas=1e-5,
                               noise=0.0, output_dir=str(tmp_path))
        result = analysis.run_experiment(cfg, write=False)
        assert result.metrics.rel_l2[0] <= 0.15

    def test_tv_sweep_trend(self, tmp_path):
        cfg = ExperimentConfig(phantom="disc", model="shear", n_loads=1, noise=0.01, output_dir=str(tmp_path))
        rows = {r.parameter: r for r in analysis.sweep_tv(cfg, [1e-6, 1e-4, 1e-3])}
        assert rows[1e-4].rel_l2[0] <= rows[1e-6].rel_l2[0]
        assert rows[1e-3].tv[0] < rows[1e-4].tv[0]

    def test_lame_improves_with_measurements(self, tmp_path):
        cfg = ExperimentConfig(phantom="layers", model="lame", eps_tv=[1e-4], eps_elas=1e-4,
                               output_dir=str(tmp_path))
        rows = {int(r.parameter): np.mean(r.rel_l2) for r in analysis.sweep_n(cfg, [1, 2, 4])}
        assert rows[4] <= rows[2] * 1.05
        assert rows[2] <= rows[1] * 1.05

    def test_anisotropic_four_measurements(self, tmp_path):
        cfg = ExperimentConfig(phantom="two_discs", model="aniso", n_loads=4, eps_tv=[1e-4], eps_elas=1e-4,
                               output_dir=str(tmp_path))
        result = analysis.run_experiment(cfg, write=False)
        assert max(result.metrics.rel_l2) <= 0.2
        assert result.metrics.converged

    def test_stability_slope(self):
        cfg = ExperimentConfig(phantom="disc", model="shear", n_loads=2)
        result = analysis.stability_probe(cfg, list(np.geomspace(1e-4, 1e-2, 5)))
        assert 0.8 <= result.slope <= 1.2
        assert result.r_squared >= 0.9
