"""Discrete inverse system, TV operator and the box-constrained TV least-squares solver

Unknowns are stacked coefficient blocks M = (mu^(1), ..., mu^(N)), each with
one value per triangle. Rows are stacked per measurement over the interior
vector DOFs of the inversion mesh.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src.core.exceptions import AssemblyError, SolverError
from src.core.models import RegParams, SolveMethod, SolveSummary
from src.services.fem_core import (
    ScalarFieldP0, SparseOperator, StrainFieldP0, VectorFieldP0, VectorFieldP1,
    assemble_load_p0, element_dofs, interior_restriction, strain_field, strain_operator,
)
from src.services.forward_sim import ForwardDataset
from src.services.linalg import SymmetricSolver, consolidate
from src.services.mesh import Mesh
from src.services.tensor_algebra import Tensor4Sym, to_voigt

logger = logging.getLogger(__name__)


def _interior_index(m: Mesh) -> np.ndarray:
    """Global vector DOF -> row in the interior system, -1 for boundary DOFs"""
    index = np.full(2 * m.n_nodes, -1, dtype=np.int64)
    dofs = interior_restriction(m)
    index[dofs] = np.arange(dofs.size)
    return index


def assemble_A(m: Mesh, s: StrainFieldP0, ck: Tensor4Sym) -> SparseOperator:
    """Block (2 n_interior x n_triangles) with entries area(T) (Ck : S_T) : e(e_i)|_T"""
    if s.mesh is not m:
        raise AssemblyError("strain field lives on a different mesh")
    stress = to_voigt(s.values) @ ck.v.T
    local = m.areas[:, None] * np.einsum("ta,tai->ti", stress, strain_operator(m))
    rows = _interior_index(m)[element_dofs(m)]
    cols = np.repeat(np.arange(m.n_triangles)[:, None], 6, axis=1)
    keep = rows >= 0
    return consolidate(rows[keep], cols[keep], local[keep], (2 * m.n_interior, m.n_triangles))


def assemble_source(m: Mesh, f: Optional[VectorFieldP0]) -> np.ndarray:
    """Right-hand side block <f, e_i> over the interior DOFs; zero for a static measurement"""
    if f is None:
        return np.zeros(2 * m.n_interior)
    if f.mesh is not m:
        raise AssemblyError("source field lives on a different mesh")
    return assemble_load_p0(m, f)[interior_restriction(m)]


@dataclass(frozen=True, eq=False)
class InverseSystem:
    """Stacked system A M = F with row blocks per measurement and column blocks per coefficient"""
    matrix: sp.csr_matrix
    rhs: np.ndarray
    n_measurements: int
    n_coefficients: int
    mesh: Optional[Mesh] = None
    blocks: List[List[SparseOperator]] = field(default_factory=list)
    strains: List[StrainFieldP0] = field(default_factory=list)

    def __post_init__(self):
        if self.matrix.shape[0] != self.rhs.shape[0]:
            raise AssemblyError(f"matrix has {self.matrix.shape[0]} rows, rhs has {self.rhs.shape[0]}")
        if self.matrix.shape[1] % self.n_coefficients:
            raise AssemblyError(f"{self.matrix.shape[1]} columns do not split into {self.n_coefficients} blocks")

    @classmethod
    def from_matrix(cls, matrix, rhs: Optional[np.ndarray] = None, n_coefficients: int = 1) -> "InverseSystem":
        """Mesh-free system, for toy problems"""
        matrix = sp.csr_matrix(matrix, dtype=float)
        rhs = np.zeros(matrix.shape[0]) if rhs is None else np.asarray(rhs, dtype=float)
        return cls(matrix, rhs, 1, n_coefficients)

    @property
    def n_triangles(self) -> int:
        return self.matrix.shape[1] // self.n_coefficients

    @property
    def n_unknowns(self) -> int:
        return self.matrix.shape[1]

    @property
    def static(self) -> bool:
        return not np.any(self.rhs)

    def split(self, x: np.ndarray) -> np.ndarray:
        """Stacked unknowns as (n_coefficients, n_triangles)"""
        return np.asarray(x, dtype=float).reshape(self.n_coefficients, self.n_triangles)


def assemble_system(dataset: ForwardDataset, model: Sequence[Tensor4Sym]) -> InverseSystem:
    if not model:
        raise AssemblyError("model needs at least one tensor")
    m = dataset.mesh
    if m.n_interior == 0:
        raise AssemblyError("inversion mesh has no interior nodes")
    strains, blocks, rhs = [], [], []
    for u, f in zip(dataset.displacements, dataset.sources):
        if u.mesh is not m:
            raise AssemblyError("measurement lives on a different mesh")
        s = strain_field(u)
        strains.append(s)
        blocks.append([assemble_A(m, s, ck) for ck in model])
        rhs.append(assemble_source(m, f))
    matrix = sp.bmat(blocks, format="csr")
    logger.info(f"Inverse system: {matrix.shape[0]} x {matrix.shape[1]}, {matrix.nnz} nonzeros "
                f"({dataset.n_loads} measurements, {len(model)} coefficients)")
    return InverseSystem(matrix, np.concatenate(rhs), dataset.n_loads, len(model), m, blocks, strains)


class TVOperator:
    """Jump operator: row e = (i, j) holds +length at triangle i and -length at triangle j"""

    def __init__(self, matrix: sp.spmatrix, pairs: Optional[np.ndarray] = None):
        matrix = sp.csr_matrix(matrix, dtype=float)
        counts = np.diff(matrix.indptr)
        if np.any(counts != 2):
            raise AssemblyError("every TV row needs exactly two nonzeros")
        vals = matrix.data.reshape(-1, 2)
        if not np.allclose(vals[:, 0], -vals[:, 1], rtol=1e-12, atol=0.0):
            raise AssemblyError("TV row entries must have equal magnitude and opposite sign")
        self.matrix = matrix
        self.pairs = pairs

    @classmethod
    def from_pairs(cls, pairs: np.ndarray, lengths: np.ndarray, n_triangles: int) -> "TVOperator":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        lengths = np.asarray(lengths, dtype=float)
        rows = np.repeat(np.arange(len(pairs)), 2)
        vals = np.column_stack([lengths, -lengths]).ravel()
        matrix = sp.csr_matrix((vals, (rows, pairs.ravel())), shape=(len(pairs), n_triangles))
        return cls(matrix, pairs)

    @property
    def n_edges(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.matrix.shape[1]

    def apply(self, mu: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(mu, dtype=float)

    def stacked(self, n: int) -> sp.csr_matrix:
        """Block-diagonal copy for n coefficient blocks"""
        return sp.block_diag([self.matrix] * n, format="csr")


def build_tv(m: Mesh) -> TVOperator:
    """Each internal edge stored once, so ||L mu||_1 is the total variation of a P0 field"""
    return TVOperator.from_pairs(m.edge_triangles, m.edge_lengths, m.n_triangles)


def total_variation(tv: TVOperator, mu) -> float:
    values = mu.values if isinstance(mu, ScalarFieldP0) else mu
    return float(np.abs(tv.apply(values)).sum())


def data_scale(sys: InverseSystem) -> float:
    """Frobenius norm of the system matrix per measurement

    After division ||A||_F^2 = N, independent of the mesh size and of the
    displacement amplitude.
    """
    c = spla.norm(sys.matrix) / np.sqrt(sys.n_measurements) if sys.matrix.nnz else 0.0
    return float(c) if c > 0 else 1.0


def objective(sys: InverseSystem, tv: TVOperator, x: np.ndarray, eps: np.ndarray, scale: float = 1.0) -> float:
    """J(M) = ||A M - F||^2 + sum_k eps_k ||L mu^(k)||_1 for the system scaled by 1/scale"""
    r = (sys.matrix @ x - sys.rhs) / scale
    blocks = sys.split(x)
    reg = sum(e * np.abs(tv.apply(b)).sum() for e, b in zip(eps, blocks))
    return float(r @ r + reg)


@dataclass
class SolveReport:
    """Reconstruction with its solver diagnostics"""
    method: SolveMethod
    solution: np.ndarray
    converged: bool
    iterations: int
    objective: float
    mesh: Optional[Mesh] = None
    objective_history: List[float] = field(default_factory=list)
    primal_residuals: List[float] = field(default_factory=list)
    dual_residuals: List[float] = field(default_factory=list)
    rho: float = 0.0
    data_scale: float = 1.0
    wall_time: float = 0.0
    singular_values: List[float] = field(default_factory=list)

    @property
    def fields(self) -> List[ScalarFieldP0]:
        if self.mesh is None:
            raise AssemblyError("report has no mesh attached")
        return [ScalarFieldP0(self.mesh, row) for row in self.solution]

    def to_summary(self) -> SolveSummary:
        # wall time stays out so reports of identical runs are identical
        return SolveSummary(
            method=self.method,
            converged=self.converged,
            iterations=self.iterations,
            objective=self.objective,
            objective_history=self.objective_history,
            primal_residuals=self.primal_residuals,
            dual_residuals=self.dual_residuals,
            rho=self.rho,
            data_scale=self.data_scale,
            singular_values=self.singular_values,
        )


def solve(sys: InverseSystem, tv: TVOperator, reg: RegParams) -> SolveReport:
    """Minimize J over the box M >= M_min with an over-relaxed scaled-form ADMM

    Splitting variables are z = L M (soft-thresholded) and w = M (projected on
    the box). The x-update solves (2 A^T A + rho L^T L + rho I) x = rhs with one
    cached factorization per penalty value. The first penalty is ``reg.rho``
    times the ratio of the mean diagonals of 2 A^T A and L^T L + I; it is then
    rebalanced against the primal/dual residual ratio every
    ``reg.rho_update_every`` iterations once ``reg.burn_in`` iterations have
    passed. Iteration stops when both residuals fall under an absolute plus a
    relative tolerance. ``objective_history`` holds J at each iterate; the
    returned solution is the last iterate when converged and the best one
    otherwise.
    """
    started = time.perf_counter()
    n, nt = sys.n_coefficients, sys.n_triangles
    if tv.n_triangles != nt:
        raise AssemblyError(f"TV operator has {tv.n_triangles} columns, system blocks have {nt}")
    eps, lo = reg.per_coefficient(n)

    scale = data_scale(sys) if reg.normalize else 1.0
    a = sys.matrix / scale
    f = sys.rhs / scale
    big_l = tv.stacked(n)
    eye = sp.identity(sys.n_unknowns, format="csr")
    gram = (2.0 * (a.T @ a)).tocsc()
    lap = (big_l.T @ big_l + eye).tocsc()
    atf = 2.0 * (a.T @ f)
    thresh = np.repeat(eps, tv.n_edges)
    lower = np.repeat(lo, nt)
    alpha = reg.relaxation
    primal_floor = np.sqrt(big_l.shape[0] + sys.n_unknowns) * reg.abs_tol
    dual_floor = np.sqrt(sys.n_unknowns) * reg.abs_tol

    solvers: Dict[float, SymmetricSolver] = {}

    def factor(rho: float) -> SymmetricSolver:
        if rho not in solvers:
            solvers[rho] = SymmetricSolver(gram + rho * lap, label=f"ADMM x-update (rho={rho:g})")
        return solvers[rho]

    x = lower.copy()
    w = x.copy()
    z = big_l @ x
    yz = np.zeros_like(z)
    yw = np.zeros_like(w)
    gram_diag = gram.diagonal().mean()
    rho = reg.rho * (gram_diag / lap.diagonal().mean() if gram_diag > 0 else 1.0)

    def j(v: np.ndarray) -> float:
        return objective(sys, tv, v, eps, scale)

    best_x = w.copy()
    best_j = j(w)
    history: List[float] = []
    primal: List[float] = []
    dual: List[float] = []
    converged = False
    it = 0
    logger.info(f"ADMM: {sys.n_unknowns} unknowns, {big_l.shape[0]} TV rows, data scale {scale:.4e}, "
                f"initial rho {rho:.3e}")

    for it in range(1, reg.max_iter + 1):
        x = factor(rho).solve(atf + rho * (big_l.T @ (z - yz)) + rho * (w - yw))

        lx = big_l @ x
        z_old, w_old = z, w
        lx_hat = alpha * lx + (1.0 - alpha) * z_old
        x_hat = alpha * x + (1.0 - alpha) * w_old
        v = lx_hat + yz
        z = np.sign(v) * np.maximum(np.abs(v) - thresh / rho, 0.0)
        w = np.maximum(x_hat + yw, lower)
        yz = yz + lx_hat - z
        yw = yw + x_hat - w

        r = np.sqrt(np.sum((lx - z) ** 2) + np.sum((x - w) ** 2))
        s = rho * np.linalg.norm(big_l.T @ (z - z_old) + (w - w_old))
        r_scale = max(np.sqrt(lx @ lx + x @ x), np.sqrt(z @ z + w @ w))
        s_scale = rho * np.linalg.norm(big_l.T @ yz + yw)
        primal.append(float(r / max(r_scale, primal_floor)))
        dual.append(float(s / max(s_scale, dual_floor)))

        jw = j(w)
        history.append(jw)
        if jw < best_j:
            best_j, best_x = jw, w.copy()

        if r <= primal_floor + reg.primal_tol * r_scale and s <= dual_floor + reg.dual_tol * s_scale:
            converged = True
            break

        if it >= reg.burn_in and it % reg.rho_update_every == 0:
            if r > reg.rho_balance * s:
                rho *= reg.rho_factor
                yz, yw = yz / reg.rho_factor, yw / reg.rho_factor
            elif s > reg.rho_balance * r:
                rho /= reg.rho_factor
                yz, yw = yz * reg.rho_factor, yw * reg.rho_factor
            logger.debug(f"ADMM it {it}: J={jw:.6e} r={primal[-1]:.2e} s={dual[-1]:.2e} rho={rho:g}")

    if converged:
        result = w
        logger.info(f"ADMM converged in {it} iterations, J={j(w):.6e}")
    else:
        result = best_x
        logger.warning(f"ADMM stopped after {it} iterations without convergence "
                       f"(r={primal[-1]:.2e}, s={dual[-1]:.2e}), returning best iterate J={best_j:.6e}")

    return SolveReport(
        method=SolveMethod.TV,
        solution=sys.split(result).copy(),
        converged=converged,
        iterations=it,
        objective=j(result),
        mesh=sys.mesh,
        objective_history=history,
        primal_residuals=primal,
        dual_residuals=dual,
        rho=rho,
        data_scale=scale,
        wall_time=time.perf_counter() - started,
    )


class SingularPair(NamedTuple):
    sigma: float
    vector: np.ndarray


def _sign_fixed(v: np.ndarray, nt: int) -> np.ndarray:
    mean = v[:nt].mean()
    if mean == 0:
        nz = np.flatnonzero(v)
        mean = v[nz[0]] if nz.size else 1.0
    return v if mean > 0 else -v


def smallest_singular_pairs(sys: InverseSystem, k: int = 2) -> List[SingularPair]:
    """The k smallest singular values of A with unit right vectors, ascending

    Shift-invert Lanczos on A^T A with a small negative shift and a fixed start
    vector. Each sigma is recomputed as ||A v||.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ncols = sys.n_unknowns
    if k > ncols:
        raise ValueError(f"asked for {k} singular pairs of a matrix with {ncols} columns")
    a = sys.matrix
    gram = (a.T @ a).tocsc()
    diag_mean = gram.diagonal().mean() if ncols else 0.0
    shift = -1e-8 * (diag_mean if diag_mean > 0 else 1.0)

    if k < ncols - 1:
        try:
            _, vecs = spla.eigsh(gram, k=k, sigma=shift, which="LM", v0=np.ones(ncols), tol=0.0)
        except (RuntimeError, ValueError, spla.ArpackError) as e:
            raise SolverError(f"shift-invert eigensolve failed: {e}") from e
    else:
        _, vecs = np.linalg.eigh(gram.toarray())
        vecs = vecs[:, :k]

    sigmas = np.linalg.norm(a @ vecs, axis=0)
    order = np.argsort(sigmas, kind="stable")
    pairs = [SingularPair(float(sigmas[i]), _sign_fixed(vecs[:, i], sys.n_triangles)) for i in order]
    logger.info("Smallest singular values: " + ", ".join(f"{p.sigma:.4e}" for p in pairs))
    return pairs


def null_space_reconstruction(sys: InverseSystem, reg: RegParams, tv: Optional[TVOperator] = None) -> SolveReport:
    """Coefficients from the smallest right singular vector, scaled onto the lower bounds

    The unit vector is scaled so that min_k,T mu^(k)_T / mu_min^(k) = 1.
    """
    started = time.perf_counter()
    eps, lo = reg.per_coefficient(sys.n_coefficients)
    pairs = smallest_singular_pairs(sys, min(2, sys.n_unknowns))
    v = sys.split(pairs[0].vector)
    positive = v > 0
    if not positive.any():
        raise SolverError("smallest singular vector has no positive entries")
    ratios = lo[:, None] / np.where(positive, v, np.inf)
    mu = v * ratios[positive].max()
    clipped = int((mu < lo[:, None]).sum())
    if clipped:
        logger.warning(f"Null vector changes sign: {clipped} entries clipped to the lower bound")
    mu = np.maximum(mu, lo[:, None])

    scale = data_scale(sys) if reg.normalize else 1.0
    obj = objective(sys, tv, mu.ravel(), eps, scale) if tv is not None else float(
        np.sum(((sys.matrix @ mu.ravel() - sys.rhs) / scale) ** 2))
    return SolveReport(
        method=SolveMethod.NULLSPACE,
        solution=mu,
        converged=True,
        iterations=0,
        objective=obj,
        mesh=sys.mesh,
        data_scale=scale,
        wall_time=time.perf_counter() - started,
        singular_values=[p.sigma for p in pairs],
    )


def lame_identifiability(displacements: Sequence[VectorFieldP1]) -> float:
    """1 - max |cos| between the divergences of any two measurements

    Close to 0 when every pair of data sets has proportional divergence, which
    leaves the Lamé pair undetermined.
    """
    if len(displacements) < 2:
        return 0.0
    m = displacements[0].mesh
    divs = []
    for u in displacements:
        if u.mesh is not m:
            raise AssemblyError("measurements live on different meshes")
        e = strain_field(u).values
        divs.append(e[:, 0] + e[:, 1])
    worst = 0.0
    for a in range(len(divs)):
        for b in range(a + 1, len(divs)):
            na = np.sqrt(np.sum(m.areas * divs[a] ** 2))
            nb = np.sqrt(np.sum(m.areas * divs[b] ** 2))
            if na == 0 or nb == 0:
                return 0.0
            cos = np.sum(m.areas * divs[a] * divs[b]) / (na * nb)
            worst = max(worst, abs(cos))
    return float(1.0 - worst)
