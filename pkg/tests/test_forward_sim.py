"""Tests for phantoms, forward solves and the synthetic measurement pipeline"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.exceptions import MeshError, SingularSystemError
from src.core.models import (
    BoundaryLoad, BoundarySegment, Disc, DomainSpec, IsoParams, ModelKind, Phantom, PhantomId,
    Provenance, Side,
)
from src.services.fem_core import VectorFieldP0, VectorFieldP1, assemble_elastic_stiffness, strain_divergence
from src.services.forward_sim import (
    ForwardDataset, ForwardOperator, assemble_traction, baseline_algebraic, dataset_from_provenance,
    default_loads, generate_measurements, make_dataset, phantom_library, rasterize, solve_forward,
)
from src.services.mesh import Mesh, build_structured
from src.services.tensor_algebra import compose_tensor, make_isotropic, model_basis

ZERO_LOAD = BoundaryLoad(label="zero", knots=[0.0], values=[(0.0, 0.0)])


@pytest.fixture
def shear_tensor():
    return make_isotropic(IsoParams(mu=1.0, lam=0.0))


@pytest.fixture
def small_dataset():
    return make_dataset(phantom_library(PhantomId.DISC), default_loads(2), h_forward=0.1, h_inverse=0.2,
                        noise=0.01, eps_elas=1e-5, seed=11)


class TestPhantoms:
    def test_library_sizes(self):
        assert phantom_library(PhantomId.DISC).n_coefficients == 1
        assert phantom_library(PhantomId.LAYERS, ModelKind.LAME).n_coefficients == 2
        assert phantom_library(PhantomId.TWO_DISCS, ModelKind.ANISO).n_coefficients == 3

    def test_background_only(self, grid_mesh):
        ph = Phantom(background=[2.5])
        [field] = rasterize(ph, grid_mesh)
        assert np.all(field.values == 2.5)

    def test_disc_area(self):
        m = build_structured(DomainSpec(), 0.03, jitter=0.2, seed=2)
        [field] = rasterize(phantom_library(PhantomId.DISC), m)
        inside = m.areas[field.values == 10.0].sum()
        assert inside == pytest.approx(np.pi * 0.4 ** 2, rel=0.05)
        assert set(np.unique(field.values)) == {1.0, 10.0}

    def test_last_shape_wins(self, grid_mesh):
        [field] = rasterize(phantom_library(PhantomId.LAYERS), grid_mesh)
        c = grid_mesh.centroids
        corner = (c[:, 1] >= 0.3) & (c[:, 0] + c[:, 1] >= 1.2)
        assert corner.any()
        assert np.all(field.values[corner] == 4.0)
        assert np.all(field.values[c[:, 1] <= -0.4] == 2.0)

    def test_unset_values_inherit(self, grid_mesh):
        mu, lam = rasterize(phantom_library(PhantomId.DISC, ModelKind.LAME), grid_mesh)
        c = grid_mesh.centroids
        in_box = (c[:, 0] >= -0.55) & (c[:, 0] <= 0.15) & (c[:, 1] >= -0.65) & (c[:, 1] <= -0.15)
        assert np.all(lam.values[in_box] == 3.0)
        assert np.all(lam.values[~in_box] == 1.0)
        assert np.all(mu.values[in_box & (np.hypot(c[:, 0], c[:, 1]) > 0.4)] == 1.0)

    def test_rejects_values_below_floor(self):
        with pytest.raises(ValidationError):
            Phantom(background=[1.0], shapes=[Disc(center=(0, 0), radius=0.2, values=[0.5])])


class TestTraction:
    def test_total_force(self, jittered_mesh):
        normal, ramp = default_loads(3)[1:]
        assert assemble_traction(jittered_mesh, normal).reshape(-1, 2).sum(axis=0) == pytest.approx([0.0, -2.0])
        assert assemble_traction(jittered_mesh, ramp).reshape(-1, 2).sum(axis=0) == pytest.approx([0.0, -1.0])

    def test_only_neumann_nodes_loaded(self, jittered_mesh):
        b = assemble_traction(jittered_mesh, default_loads(1)[0]).reshape(-1, 2)
        loaded = np.flatnonzero(np.abs(b).sum(axis=1))
        assert np.allclose(jittered_mesh.nodes[loaded, 1], 1.0)

    def test_partial_segment(self):
        spec = DomainSpec(neumann=BoundarySegment(side=Side.TOP, start=0.0, end=0.5))
        m = build_structured(spec, 0.25)
        b = assemble_traction(m, default_loads(2)[1]).reshape(-1, 2)
        assert b.sum(axis=0) == pytest.approx([0.0, -1.0])
        assert np.all(m.nodes[np.abs(b).sum(axis=1) > 0, 0] <= 0.0 + 1e-12)

    def test_requires_domain(self, unit_square):
        bare = Mesh.from_arrays(unit_square.nodes, unit_square.triangles)
        with pytest.raises(MeshError):
            assemble_traction(bare, ZERO_LOAD)

    def test_load_count_limits(self):
        assert [ld.label for ld in default_loads(4)] == ["oblique", "normal", "ramp", "lateral_sine"]
        with pytest.raises(ValueError):
            default_loads(5)


class TestSolveForward:
    def test_zero_load(self, jittered_mesh, shear_tensor):
        u = solve_forward(jittered_mesh, shear_tensor, ZERO_LOAD)
        assert np.all(u.values == 0.0)

    def test_clamped_side_stays_fixed(self, jittered_mesh, shear_tensor):
        u = solve_forward(jittered_mesh, shear_tensor, default_loads(1)[0])
        bottom = np.isclose(jittered_mesh.nodes[:, 1], -1.0)
        assert np.all(u.values[bottom] == 0.0)
        assert np.abs(u.values).max() > 0

    def test_affine_solution_reproduced(self, jittered_mesh):
        m = jittered_mesh
        exact = VectorFieldP1.from_function(m, lambda x, y: (0.1 + 0.3 * x - 0.2 * y, -0.4 + 0.5 * x + 0.25 * y))
        nodes = np.unique(m.boundary_edges.ravel())
        c = make_isotropic(IsoParams(mu=1.3, lam=2.1))
        u = solve_forward(m, c, ZERO_LOAD, dirichlet_nodes=nodes, dirichlet_values=exact.values[nodes])
        assert np.allclose(u.values, exact.values, atol=1e-10)

    def test_energy_positive(self, jittered_mesh, shear_tensor):
        load = default_loads(1)[0]
        u = solve_forward(jittered_mesh, shear_tensor, load)
        b = assemble_traction(jittered_mesh, load)
        k = assemble_elastic_stiffness(jittered_mesh, shear_tensor)
        assert u.flat @ b > 0
        assert u.flat @ (k @ u.flat) == pytest.approx(u.flat @ b, rel=1e-10)

    def test_reciprocity(self, jittered_mesh):
        m = jittered_mesh
        mu = rasterize(phantom_library(PhantomId.TWO_DISCS), m)[0].values
        op = ForwardOperator(m, compose_tensor([mu], model_basis(ModelKind.SHEAR)))
        b1, b2 = (assemble_traction(m, ld) for ld in default_loads(4)[::3])
        u1, u2 = op.solve(b1), op.solve(b2)
        assert u1.flat @ b2 == pytest.approx(u2.flat @ b1, rel=1e-10)

    @pytest.mark.parametrize("s", [0.5, 4.0])
    def test_scaling(self, jittered_mesh, shear_tensor, s):
        load = default_loads(2)[1]
        u = solve_forward(jittered_mesh, shear_tensor, load)
        us = solve_forward(jittered_mesh, s * shear_tensor, load)
        assert np.allclose(us.values, u.values / s, rtol=1e-10, atol=1e-14)

    def test_no_dirichlet_is_singular(self, jittered_mesh, shear_tensor):
        with pytest.raises(SingularSystemError):
            ForwardOperator(jittered_mesh, shear_tensor, dirichlet_nodes=np.array([], dtype=int))


class TestMeasurements:
    def test_deterministic(self, small_dataset):
        again = make_dataset(phantom_library(PhantomId.DISC), default_loads(2), h_forward=0.1, h_inverse=0.2,
                             noise=0.01, eps_elas=1e-5, seed=11)
        assert np.array_equal(again.mesh.nodes, small_dataset.mesh.nodes)
        for a, b in zip(again.displacements, small_dataset.displacements):
            assert np.array_equal(a.values, b.values)

    def test_seed_changes_mesh_and_noise(self, small_dataset):
        other = make_dataset(phantom_library(PhantomId.DISC), default_loads(2), h_forward=0.1, h_inverse=0.2,
                             noise=0.01, eps_elas=1e-5, seed=12)
        assert not np.array_equal(other.mesh.nodes, small_dataset.mesh.nodes)

    def test_inversion_mesh_on_subdomain(self, small_dataset):
        assert np.abs(small_dataset.mesh.nodes).max() == pytest.approx(0.9)
        assert small_dataset.n_loads == 2
        assert small_dataset.static

    def test_provenance(self, small_dataset):
        prov = small_dataset.provenance
        assert prov.eps_elas == 1e-5
        assert prov.seed == 11
        assert len(prov.loads) == len(prov.max_abs_displacement) == 2

    def test_inverse_crime_matches_direct_solve(self):
        ph = phantom_library(PhantomId.DISC)
        loads = default_loads(2)
        ds = generate_measurements(ph, loads, 0.1, 0.1, noise=0.0, seed=5, inverse_crime=True)
        mu = rasterize(ph, ds.mesh)[0].values
        op = ForwardOperator(ds.mesh, compose_tensor([mu], model_basis(ModelKind.SHEAR)))
        for load, u in zip(loads, ds.displacements):
            assert np.allclose(u.values, op.solve(assemble_traction(ds.mesh, load)).values, rtol=0, atol=1e-14)

    def test_noise_level(self):
        ph = phantom_library(PhantomId.DISC)
        loads = default_loads(1)
        clean = generate_measurements(ph, loads, 0.05, 0.05, noise=0.0, seed=5, inverse_crime=True)
        noisy = generate_measurements(ph, loads, 0.05, 0.05, noise=0.02, seed=5, inverse_crime=True)
        diff = noisy.displacements[0].values - clean.displacements[0].values
        peak = clean.provenance.max_abs_displacement[0]
        assert diff.std() == pytest.approx(0.02 * peak, rel=0.1)

    def test_model_mismatch_rejected(self):
        with pytest.raises(ValueError):
            generate_measurements(phantom_library(PhantomId.DISC), default_loads(1), 0.1, 0.2, 0.0, 0,
                                  model=ModelKind.LAME)

    def test_subset(self, small_dataset):
        first = small_dataset.subset(1)
        assert first.n_loads == 1
        assert first.provenance.loads == small_dataset.provenance.loads[:1]
        assert first.displacements[0] is small_dataset.displacements[0]
        with pytest.raises(ValueError):
            small_dataset.subset(3)

    def test_dataset_mesh_consistency(self, small_dataset, grid_mesh):
        foreign = VectorFieldP1(grid_mesh, np.zeros((grid_mesh.n_nodes, 2)))
        with pytest.raises(ValueError):
            ForwardDataset(small_dataset.mesh, [foreign], small_dataset.provenance)


class TestReplay:
    def test_replay_is_bitwise(self, small_dataset):
        replayed = dataset_from_provenance(small_dataset.provenance)
        for a, b in zip(replayed.displacements, small_dataset.displacements):
            assert np.array_equal(a.values, b.values)

    def test_replay_through_json(self, small_dataset):
        prov = Provenance.model_validate_json(small_dataset.provenance.model_dump_json())
        replayed = dataset_from_provenance(prov)
        assert np.array_equal(replayed.displacements[1].values, small_dataset.displacements[1].values)


class TestBaseline:
    def test_no_source_is_undefined(self, jittered_mesh):
        u = VectorFieldP1.from_function(jittered_mesh, lambda x, y: (x ** 2, y ** 2))
        f = VectorFieldP0(jittered_mesh, np.zeros((jittered_mesh.n_triangles, 2)))
        assert np.all(np.isnan(baseline_algebraic(u, f).values))

    def test_recovers_coefficient(self, jittered_mesh):
        u = VectorFieldP1.from_function(jittered_mesh, lambda x, y: (x ** 2, x * y))
        div = strain_divergence(u).values
        est = baseline_algebraic(u, VectorFieldP0(jittered_mesh, -3.0 * div)).values
        defined = ~np.isnan(est)
        assert defined.sum() > jittered_mesh.n_triangles // 2
        assert np.allclose(est[defined], 3.0)

    def test_affine_field_is_undefined(self, jittered_mesh):
        u = VectorFieldP1.from_function(jittered_mesh, lambda x, y: (x + y, 2 * x))
        f = VectorFieldP0(jittered_mesh, np.ones((jittered_mesh.n_triangles, 2)))
        assert np.all(np.isnan(baseline_algebraic(u, f).values))
