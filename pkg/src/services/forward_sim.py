"""Synthetic displacement data: phantoms, forward solves, sampling, noise and smoothing"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.core.exceptions import MeshError, SingularSystemError, SolverError
from src.core.models import (
    BoundaryLoad, BoundaryTag, Box, Disc, DomainSpec, HalfPlane, ModelKind,
    Phantom, PhantomId, Provenance, Side,
)
from src.services.fem_core import (
    ScalarFieldP0, TensorInput, VectorFieldP0, VectorFieldP1,
    assemble_elastic_stiffness, elastic_smooth, strain_divergence,
)
from src.services.linalg import SymmetricSolver
from src.services.mesh import CartesianGrid, Mesh, build_structured, resample_p1, sample_to_grid
from src.services.tensor_algebra import compose_tensor, model_basis

logger = logging.getLogger(__name__)

RESIDUAL_WARN = 1e-10
RESIDUAL_FAIL = 1e-6


def _values(n: int, assigned: Dict[int, float]) -> List[Optional[float]]:
    return [assigned.get(k) for k in range(n)]


def phantom_library(pid: PhantomId, model: ModelKind = ModelKind.SHEAR) -> Phantom:
    """Built-in phantoms; the first coefficient carries the named geometry"""
    pid = PhantomId(pid)
    n = len(model_basis(model))
    if pid == PhantomId.DISC:
        shapes = [Disc(center=(0.0, 0.0), radius=0.4, values=_values(n, {0: 10.0}))]
    elif pid == PhantomId.TWO_DISCS:
        shapes = [Disc(center=(-0.4, 0.3), radius=0.25, values=_values(n, {0: 6.4})),
                  Disc(center=(0.35, -0.3), radius=0.3, values=_values(n, {0: 3.5}))]
    else:
        shapes = [HalfPlane(normal=(0.0, 1.0), offset=0.3, values=_values(n, {0: 3.0})),
                  HalfPlane(normal=(0.0, -1.0), offset=0.4, values=_values(n, {0: 2.0})),
                  HalfPlane(normal=(1.0, 1.0), offset=1.2, values=_values(n, {0: 4.0}))]

    # Secondary coefficients get their own geometry so the fields are not proportional
    if n > 1:
        shapes.append(Box(lower=(-0.55, -0.65), upper=(0.15, -0.15), values=_values(n, {1: 3.0})))
    if n > 2:
        shapes.append(Disc(center=(0.35, 0.35), radius=0.25, values=_values(n, {2: 2.5})))
    return Phantom(name=pid.value, background=[1.0] * n, shapes=shapes)


def default_loads(n: int) -> List[BoundaryLoad]:
    """Traction profiles on the Neumann segment: oblique, normal, ramp, lateral sine"""
    if not 1 <= n <= 4:
        raise ValueError(f"between 1 and 4 default loads available, asked for {n}")
    c = 1.0 / np.sqrt(2.0)
    s = np.linspace(0.0, 1.0, 33)
    loads = [
        BoundaryLoad(label="oblique", knots=[0.0, 1.0], values=[(c, -c), (c, -c)]),
        BoundaryLoad(label="normal", knots=[0.0, 1.0], values=[(0.0, -1.0), (0.0, -1.0)]),
        BoundaryLoad(label="ramp", knots=[0.0, 1.0], values=[(0.0, 0.0), (0.0, -1.0)]),
        BoundaryLoad(label="lateral_sine", knots=s.tolist(),
                     values=[(float(v), 0.0) for v in np.sin(2.0 * np.pi * s)]),
    ]
    return loads[:n]


def rasterize(ph: Phantom, m: Mesh) -> List[ScalarFieldP0]:
    """Per-triangle coefficients from centroid membership, one field per coefficient"""
    pts = m.centroids
    values = np.tile(np.asarray(ph.background, dtype=float), (m.n_triangles, 1))
    for shape in ph.shapes:
        inside = shape.contains(pts)
        for k, v in enumerate(shape.values):
            if v is not None:
                values[inside, k] = v
    return [ScalarFieldP0(m, values[:, k]) for k in range(ph.n_coefficients)]


def _segment_arclength(m: Mesh, points: np.ndarray) -> np.ndarray:
    spec = m.domain
    seg = spec.neumann
    if seg.side in (Side.BOTTOM, Side.TOP):
        t = (points[:, 0] - spec.xmin) / spec.width
    else:
        t = (points[:, 1] - spec.ymin) / spec.height
    return np.clip((t - seg.start) / (seg.end - seg.start), 0.0, 1.0)


def assemble_traction(m: Mesh, load: BoundaryLoad) -> np.ndarray:
    """Exact integral of the affine-per-edge traction against the vector hat functions"""
    if m.domain is None:
        raise MeshError("traction assembly needs a mesh with a domain specification")
    edges = m.tagged_edges(BoundaryTag.NEUMANN)
    b = np.zeros((m.n_nodes, 2))
    if len(edges) == 0:
        return b.reshape(-1)
    pa = m.nodes[edges[:, 0]]
    pb = m.nodes[edges[:, 1]]
    length = np.hypot(*(pb - pa).T)[:, None]
    ga = load.evaluate(_segment_arclength(m, pa))
    gb = load.evaluate(_segment_arclength(m, pb))
    np.add.at(b, edges[:, 0], length * (2.0 * ga + gb) / 6.0)
    np.add.at(b, edges[:, 1], length * (ga + 2.0 * gb) / 6.0)
    return b.reshape(-1)


class ForwardOperator:
    """Factorized elasticity system with eliminated Dirichlet DOFs"""

    def __init__(self, m: Mesh, c: TensorInput, dirichlet_nodes: Optional[np.ndarray] = None,
                 dirichlet_values: Optional[np.ndarray] = None):
        self.mesh = m
        self.stiffness = assemble_elastic_stiffness(m, c)
        nodes = m.tagged_nodes(BoundaryTag.DIRICHLET) if dirichlet_nodes is None else np.asarray(dirichlet_nodes)
        if nodes.size == 0:
            raise SingularSystemError("forward problem has no Dirichlet nodes, rigid motions are free")
        self.fixed = np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()
        self.fixed_values = (np.zeros(self.fixed.size) if dirichlet_values is None
                             else np.asarray(dirichlet_values, dtype=float).reshape(-1))
        if self.fixed_values.size != self.fixed.size:
            raise SolverError(f"{self.fixed_values.size} Dirichlet values for {self.fixed.size} constrained DOFs")
        free = np.ones(2 * m.n_nodes, dtype=bool)
        free[self.fixed] = False
        self.free = np.flatnonzero(free)
        self._k_ff = self.stiffness[self.free][:, self.free]
        self._k_fc = self.stiffness[self.free][:, self.fixed]
        self._solver = SymmetricSolver(self._k_ff, label="forward elasticity")

    def solve(self, rhs: np.ndarray) -> VectorFieldP1:
        u = np.zeros(2 * self.mesh.n_nodes)
        u[self.fixed] = self.fixed_values
        reduced = rhs[self.free] - self._k_fc @ self.fixed_values
        u[self.free] = self._solver.solve(reduced)
        scale = max(np.linalg.norm(reduced), np.finfo(float).tiny)
        residual = np.linalg.norm(self._k_ff @ u[self.free] - reduced) / scale
        if residual > RESIDUAL_FAIL:
            raise SolverError(f"forward residual {residual:.3e} exceeds {RESIDUAL_FAIL}")
        if residual > RESIDUAL_WARN:
            logger.warning(f"Forward residual {residual:.3e} above {RESIDUAL_WARN}")
        return VectorFieldP1(self.mesh, u)


def solve_forward(m: Mesh, c: TensorInput, load: BoundaryLoad,
                  dirichlet_nodes: Optional[np.ndarray] = None,
                  dirichlet_values: Optional[np.ndarray] = None) -> VectorFieldP1:
    """Displacement under the traction ``load`` with the Dirichlet part clamped"""
    op = ForwardOperator(m, c, dirichlet_nodes, dirichlet_values)
    return op.solve(assemble_traction(m, load))


@dataclass(frozen=True, eq=False)
class ForwardDataset:
    """Measured displacements on the inversion mesh"""
    mesh: Mesh
    displacements: List[VectorFieldP1]
    provenance: Provenance
    sources: List[Optional[VectorFieldP0]] = field(default_factory=list)

    def __post_init__(self):
        if not self.displacements:
            raise ValueError("dataset needs at least one displacement field")
        if any(u.mesh is not self.mesh for u in self.displacements):
            raise ValueError("all displacement fields must live on the inversion mesh")
        if not self.sources:
            object.__setattr__(self, "sources", [None] * len(self.displacements))

    @property
    def n_loads(self) -> int:
        return len(self.displacements)

    @property
    def static(self) -> bool:
        return all(f is None for f in self.sources)

    def subset(self, n: int) -> "ForwardDataset":
        """The first n measurements"""
        if not 1 <= n <= self.n_loads:
            raise ValueError(f"cannot take {n} of {self.n_loads} measurements")
        prov = self.provenance.model_copy(update={
            "loads": self.provenance.loads[:n],
            "max_abs_displacement": self.provenance.max_abs_displacement[:n],
        })
        return ForwardDataset(self.mesh, self.displacements[:n], prov, self.sources[:n])


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def generate_measurements(ph: Phantom, loads: Sequence[BoundaryLoad], h_forward: float, h_inverse: float,
                          noise: float, seed: int, model: ModelKind = ModelKind.SHEAR,
                          forward_jitter: float = 0.15, inverse_jitter: float = 0.25,
                          subdomain_half_width: float = 0.9, inverse_crime: bool = False,
                          forward_domain: Optional[DomainSpec] = None) -> ForwardDataset:
    """Forward solves, grid recording, noise and transfer to the inversion mesh (no smoothing)"""
    if noise < 0:
        raise ValueError(f"noise level must be >= 0, got {noise}")
    if not loads:
        raise ValueError("at least one load is required")
    basis = model_basis(model)
    if len(basis) != ph.n_coefficients:
        raise ValueError(f"phantom has {ph.n_coefficients} coefficients, model {ModelKind(model).value} needs {len(basis)}")

    spec = forward_domain or DomainSpec()
    streams = np.random.SeedSequence(seed).spawn(2 + len(loads))
    fwd_mesh = build_structured(spec, h_forward, forward_jitter, _seed_int(streams[0]), dirichlet_layer=True)
    logger.info(f"Forward mesh: {fwd_mesh.n_nodes} nodes, {fwd_mesh.n_triangles} triangles (h={h_forward})")

    coefficients = rasterize(ph, fwd_mesh)
    tensors = compose_tensor([c.values for c in coefficients], basis)
    op = ForwardOperator(fwd_mesh, tensors)

    if inverse_crime:
        inv_mesh = fwd_mesh
        grid = None
    else:
        sub = DomainSpec.square(subdomain_half_width)
        inv_mesh = build_structured(sub, h_inverse, inverse_jitter, _seed_int(streams[1]))
        grid = CartesianGrid.covering(spec, h_forward)
        grid_mesh = grid.to_mesh()
    logger.info(f"Inversion mesh: {inv_mesh.n_nodes} nodes, {inv_mesh.n_triangles} triangles")

    fields, peaks = [], []
    for idx, load in enumerate(loads):
        u = op.solve(assemble_traction(fwd_mesh, load))
        if grid is None:
            values = u.values
            peak = float(np.abs(values).max())
            if noise > 0:
                rng = np.random.default_rng(streams[2 + idx])
                values = values + rng.normal(0.0, noise * peak, size=values.shape)
        else:
            sampled = sample_to_grid(fwd_mesh, u.values, grid).values
            peak = float(np.abs(sampled).max())
            if noise > 0:
                rng = np.random.default_rng(streams[2 + idx])
                sampled = sampled + rng.normal(0.0, noise * peak, size=sampled.shape)
            values = resample_p1(grid_mesh, sampled, inv_mesh)
        logger.info(f"Load '{load.label}': max |u| = {peak:.4e}")
        fields.append(VectorFieldP1(inv_mesh, values))
        peaks.append(peak)

    prov = Provenance(phantom=ph, model=model, loads=list(loads), h_forward=h_forward, h_inverse=h_inverse,
                      forward_jitter=forward_jitter, inverse_jitter=inverse_jitter,
                      subdomain_half_width=subdomain_half_width, noise=noise, eps_elas=0.0, seed=seed,
                      inverse_crime=inverse_crime, forward_domain=spec, max_abs_displacement=peaks)
    return ForwardDataset(inv_mesh, fields, prov)


def smooth_dataset(ds: ForwardDataset, eps_elas: float) -> ForwardDataset:
    """Elastic smoothing of every measurement"""
    fields = [elastic_smooth(u, eps_elas) for u in ds.displacements]
    prov = ds.provenance.model_copy(update={"eps_elas": eps_elas})
    return replace(ds, displacements=fields, provenance=prov)


def make_dataset(ph: Phantom, loads: Sequence[BoundaryLoad], h_forward: float, h_inverse: float,
                 noise: float, eps_elas: float, seed: int, **kwargs) -> ForwardDataset:
    """Full measurement pipeline, deterministic given the seed"""
    raw = generate_measurements(ph, loads, h_forward, h_inverse, noise, seed, **kwargs)
    return smooth_dataset(raw, eps_elas)


def dataset_from_provenance(prov: Provenance) -> ForwardDataset:
    return make_dataset(prov.phantom, prov.loads, prov.h_forward, prov.h_inverse, prov.noise,
                        prov.eps_elas, prov.seed, model=prov.model, forward_jitter=prov.forward_jitter,
                        inverse_jitter=prov.inverse_jitter, subdomain_half_width=prov.subdomain_half_width,
                        inverse_crime=prov.inverse_crime, forward_domain=prov.forward_domain)


def baseline_algebraic(u: VectorFieldP1, f: VectorFieldP0, tau: float = 1e-8) -> ScalarFieldP0:
    """Locally homogeneous estimate |f| / |div e(u)|; NaN where either side is below tau"""
    div = strain_divergence(u).values
    num = np.hypot(f.values[:, 0], f.values[:, 1])
    den = np.hypot(div[:, 0], div[:, 1])
    defined = (den > tau) & (num > tau)
    ratio = np.full(u.mesh.n_triangles, np.nan)
    ratio[defined] = num[defined] / den[defined]
    undefined = int((~defined).sum())
    if undefined:
        logger.warning(f"Algebraic baseline undefined on {undefined} of {u.mesh.n_triangles} triangles")
    return ScalarFieldP0(u.mesh, ratio)
