"""P0/P1 finite element spaces and exact assembly on triangles

Vector DOFs are interleaved: DOF 2a + c is component c of node a. Strains
are per-triangle component triples (e11, e22, e12). Every element integral
here has a piecewise-constant or piecewise-quadratic integrand and is
evaluated in closed form.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
import scipy.sparse as sp

from src.core.exceptions import AssemblyError, MeshError
from src.services.linalg import SymmetricSolver, consolidate
from src.services.mesh import Mesh
from src.services.tensor_algebra import SQRT2, SymMat2, Tensor4Sym, canonical, check_elliptic
from src.core.models import TensorKind

logger = logging.getLogger(__name__)

SparseOperator = sp.csr_matrix

DEGENERATE_AREA = 1e-14

_P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarFieldP0:
    """One value per triangle"""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.mesh.n_triangles,):
            raise AssemblyError(f"P0 field needs {self.mesh.n_triangles} values, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "ScalarFieldP0":
        return cls(mesh, np.full(mesh.n_triangles, float(value)))


@dataclass(frozen=True, eq=False)
class VectorFieldP0:
    """One 2D vector per triangle"""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.mesh.n_triangles, 2):
            raise AssemblyError(f"P0 vector field needs shape ({self.mesh.n_triangles}, 2), got {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class VectorFieldP1:
    """Continuous piecewise-linear displacement, two values per node"""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape == (2 * self.mesh.n_nodes,):
            values = _frozen(values.reshape(-1, 2))
        if values.shape != (self.mesh.n_nodes, 2):
            raise AssemblyError(f"P1 vector field needs shape ({self.mesh.n_nodes}, 2), got {values.shape}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, mesh: Mesh, fn: Callable[[np.ndarray, np.ndarray], Sequence[np.ndarray]]) -> "VectorFieldP1":
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        ux, uy = fn(x, y)
        return cls(mesh, np.column_stack([np.broadcast_to(ux, x.shape), np.broadcast_to(uy, x.shape)]))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def scaled(self, s: float) -> "VectorFieldP1":
        return VectorFieldP1(self.mesh, s * self.values)


@dataclass(frozen=True, eq=False)
class StrainFieldP0:
    """Symmetric strain per triangle as (e11, e22, e12)"""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.mesh.n_triangles, 3):
            raise AssemblyError(f"strain field needs shape ({self.mesh.n_triangles}, 3), got {values.shape}")
        object.__setattr__(self, "values", values)

    def at(self, t: int) -> SymMat2:
        return SymMat2(*(float(v) for v in self.values[t]))


def basis_gradients(m: Mesh) -> np.ndarray:
    """Gradients of the three hat functions on every triangle, shape (n_triangles, 3, 2)"""
    p = m.nodes[m.triangles]
    x, y = p[..., 0], p[..., 1]
    area2 = 2.0 * m.areas
    if np.any(m.areas < DEGENERATE_AREA):
        bad = np.flatnonzero(m.areas < DEGENERATE_AREA)
        raise MeshError(f"{bad.size} degenerate triangles (area < {DEGENERATE_AREA}), first {bad[0]}")
    gx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]])
    gy = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]])
    return np.stack([gx, gy], axis=2) / area2[:, None, None]


def grad_basis(m: Mesh, t: int) -> np.ndarray:
    """Gradients of the hat functions of triangle t, shape (3, 2)"""
    if not 0 <= t < m.n_triangles:
        raise MeshError(f"triangle index {t} out of range")
    if m.areas[t] < DEGENERATE_AREA:
        raise MeshError(f"triangle {t} is degenerate (area {m.areas[t]:.3e})")
    p = m.nodes[m.triangles[t]]
    x, y = p[:, 0], p[:, 1]
    g = np.array([[y[1] - y[2], x[2] - x[1]],
                  [y[2] - y[0], x[0] - x[2]],
                  [y[0] - y[1], x[1] - x[0]]])
    return g / (2.0 * m.areas[t])


def element_dofs(m: Mesh) -> np.ndarray:
    """Global vector DOFs of each triangle, shape (n_triangles, 6)"""
    return np.stack([2 * m.triangles, 2 * m.triangles + 1], axis=2).reshape(-1, 6)


def strain_operator(m: Mesh) -> np.ndarray:
    """Symmetric gradients of the six vector basis functions in orthonormal Voigt form, shape (n_triangles, 3, 6)"""
    g = basis_gradients(m)
    b = np.zeros((m.n_triangles, 3, 6))
    b[:, 0, 0::2] = g[:, :, 0]
    b[:, 2, 0::2] = g[:, :, 1] / SQRT2
    b[:, 1, 1::2] = g[:, :, 1]
    b[:, 2, 1::2] = g[:, :, 0] / SQRT2
    return b


def strain_field(u: VectorFieldP1) -> StrainFieldP0:
    """Exact symmetric gradient of a P1 field"""
    m = u.mesh
    grad = np.einsum("tai,taj->tij", u.values[m.triangles], basis_gradients(m))
    return StrainFieldP0(m, np.column_stack([grad[:, 0, 0], grad[:, 1, 1], 0.5 * (grad[:, 0, 1] + grad[:, 1, 0])]))


TensorInput = Union[Tensor4Sym, Sequence[Tensor4Sym], np.ndarray]


def tensor_stack(m: Mesh, c: TensorInput) -> np.ndarray:
    """Per-triangle (3, 3) matrices from one tensor, a list, or an array"""
    if isinstance(c, Tensor4Sym):
        return np.broadcast_to(c.v, (m.n_triangles, 3, 3))
    if isinstance(c, np.ndarray):
        stack = np.asarray(c, dtype=float)
    else:
        stack = np.stack([t.v for t in c])
    if stack.shape != (m.n_triangles, 3, 3):
        raise AssemblyError(f"expected {m.n_triangles} element tensors, got shape {stack.shape}")
    return stack


def _assemble_energy(m: Mesh, tensors: np.ndarray) -> SparseOperator:
    b = strain_operator(m)
    ke = m.areas[:, None, None] * np.einsum("tai,tab,tbj->tij", b, tensors, b)
    dofs = element_dofs(m)
    rows = np.repeat(dofs, 6, axis=1)
    cols = np.tile(dofs, (1, 6))
    n = 2 * m.n_nodes
    return consolidate(rows, cols, ke.reshape(m.n_triangles, 36), (n, n))


def assemble_elastic_stiffness(m: Mesh, c: TensorInput) -> SparseOperator:
    """K_ij = sum_T area(T) (C_T : e(e_j)) : e(e_i)"""
    tensors = tensor_stack(m, c)
    check_elliptic(np.ascontiguousarray(tensors))
    return _assemble_energy(m, tensors)


def assemble_mass_vec(m: Mesh) -> SparseOperator:
    """Exact P1 mass matrix acting on both displacement components"""
    local = m.areas[:, None, None] * _P1_MASS
    dofs = element_dofs(m)
    ke = np.zeros((m.n_triangles, 6, 6))
    ke[:, 0::2, 0::2] = local
    ke[:, 1::2, 1::2] = local
    rows = np.repeat(dofs, 6, axis=1)
    cols = np.tile(dofs, (1, 6))
    n = 2 * m.n_nodes
    return consolidate(rows, cols, ke.reshape(m.n_triangles, 36), (n, n))


def assemble_stiffness_vec(m: Mesh) -> SparseOperator:
    """Strain-energy form of C = 2I, so u^T L u = 2 ||e(u)||^2"""
    return assemble_elastic_stiffness(m, 2.0 * canonical(TensorKind.IDENT))


def assemble_load_p0(m: Mesh, f: VectorFieldP0) -> np.ndarray:
    """Exact <f, e_i> for a piecewise-constant vector source"""
    contrib = (m.areas / 3.0)[:, None, None] * f.values[:, None, :]
    out = np.zeros((m.n_nodes, 2))
    np.add.at(out, m.triangles, contrib)
    return out.reshape(-1)


def elastic_smooth(u: VectorFieldP1, eps: float) -> VectorFieldP1:
    """Minimizer of (1/eps) ||v - u||^2 + ||e(v)||^2, i.e. (M + eps L / 2) v = M u"""
    if eps < 0:
        raise ValueError(f"smoothing parameter must be >= 0, got {eps}")
    if eps == 0:
        return VectorFieldP1(u.mesh, u.values.copy())
    m = u.mesh
    mass = assemble_mass_vec(m)
    stiff = assemble_stiffness_vec(m)
    solver = SymmetricSolver(mass + 0.5 * eps * stiff, label="elastic smoothing")
    v = solver.solve(mass @ u.flat)
    logger.debug(f"Elastic smoothing eps={eps}: |v - u|_inf = {np.abs(v - u.flat).max():.3e}")
    return VectorFieldP1(m, v)


def interior_restriction(m: Mesh) -> np.ndarray:
    """Vector DOFs of the nodes not on the boundary"""
    nodes = np.flatnonzero(m.interior_node_flags)
    return np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()


def strain_divergence(u: VectorFieldP1) -> VectorFieldP0:
    """Per-triangle divergence of the area-weighted nodal recovery of e(u)"""
    m = u.mesh
    strain = strain_field(u).values
    weights = np.zeros(m.n_nodes)
    nodal = np.zeros((m.n_nodes, 3))
    np.add.at(weights, m.triangles, np.repeat(m.areas[:, None], 3, axis=1))
    np.add.at(nodal, m.triangles, (m.areas[:, None] * strain)[:, None, :])
    nodal /= weights[:, None]
    grad = np.einsum("tac,tak->tck", nodal[m.triangles], basis_gradients(m))
    div_x = grad[:, 0, 0] + grad[:, 2, 1]
    div_y = grad[:, 2, 0] + grad[:, 1, 1]
    return VectorFieldP0(m, np.column_stack([div_x, div_y]))
