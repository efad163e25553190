"""Symmetric order-4 tensor algebra in 2D

Symmetric 2x2 matrices are stored as component triples (a11, a22, a12) and
mapped to the orthonormal basis (E11, E22, (E12 + E21)/sqrt(2)). In that
basis an order-4 tensor with minor and major symmetries is a symmetric 3x3
matrix, the Frobenius product is the Euclidean dot product, and the
canonical tensors are diagonal or projection matrices.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from src.core.exceptions import TensorError
from src.core.models import IsoParams, ModelKind, TensorKind

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)

# Components (a11, a22, a12) -> orthonormal coordinates
_TO_VOIGT = np.array([1.0, 1.0, SQRT2])


def to_voigt(a: np.ndarray) -> np.ndarray:
    """(..., 3) component triples to orthonormal coordinates"""
    return np.asarray(a, dtype=float) * _TO_VOIGT


def from_voigt(x: np.ndarray) -> np.ndarray:
    """(..., 3) orthonormal coordinates to component triples"""
    return np.asarray(x, dtype=float) / _TO_VOIGT


@dataclass(frozen=True)
class SymMat2:
    """Symmetric 2x2 matrix with A21 = A12"""
    a11: float
    a22: float
    a12: float

    @classmethod
    def from_matrix(cls, a: np.ndarray) -> "SymMat2":
        """Symmetric part of an arbitrary 2x2 matrix"""
        a = np.asarray(a, dtype=float)
        return cls(float(a[0, 0]), float(a[1, 1]), float(0.5 * (a[0, 1] + a[1, 0])))

    @classmethod
    def from_voigt(cls, x: np.ndarray) -> "SymMat2":
        return cls(*(float(v) for v in from_voigt(x)))

    def as_array(self) -> np.ndarray:
        return np.array([self.a11, self.a22, self.a12])

    def voigt(self) -> np.ndarray:
        return to_voigt(self.as_array())

    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a12, self.a22]])

    def trace(self) -> float:
        return self.a11 + self.a22

    def norm(self) -> float:
        return float(np.sqrt(self.a11 ** 2 + self.a22 ** 2 + 2.0 * self.a12 ** 2))


@dataclass(frozen=True, eq=False)
class Tensor4Sym:
    """Order-4 tensor with major and minor symmetries, as a 3x3 orthonormal-basis matrix"""
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.shape != (3, 3):
            raise TensorError(f"expected a 3x3 matrix, got shape {v.shape}")
        if not np.allclose(v, v.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(v).max())):
            raise TensorError("tensor matrix is not symmetric")
        v = 0.5 * (v + v.T)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    def __add__(self, other: "Tensor4Sym") -> "Tensor4Sym":
        return Tensor4Sym(self.v + other.v)

    def __mul__(self, s: float) -> "Tensor4Sym":
        return Tensor4Sym(float(s) * self.v)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor4Sym) and np.array_equal(self.v, other.v)

    def __hash__(self):
        return hash(self.v.tobytes())

    @property
    def T(self) -> "Tensor4Sym":
        return Tensor4Sym(self.v.T)

    def op_norm(self) -> float:
        return float(np.linalg.norm(self.v, 2))

    def is_elliptic(self, tol: float = 0.0) -> bool:
        """Positive definite on symmetric matrices"""
        return bool(np.linalg.eigvalsh(self.v)[0] > tol)


def apply(t: Tensor4Sym, a: SymMat2) -> SymMat2:
    """Contraction T : A"""
    return SymMat2.from_voigt(t.v @ a.voigt())


def apply_many(t: Tensor4Sym, a: np.ndarray) -> np.ndarray:
    """Contraction T : A for an (n, 3) stack of component triples"""
    return from_voigt(to_voigt(a) @ t.v.T)


def frob_dd(a: SymMat2, b: SymMat2) -> float:
    """Frobenius product A : B = sum_ij A_ij B_ij"""
    return float(a.a11 * b.a11 + a.a22 * b.a22 + 2.0 * a.a12 * b.a12)


_DILAT = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])

_CANONICAL = {
    TensorKind.IDENT: np.eye(3),
    TensorKind.DILAT: _DILAT,
    TensorKind.C1: np.diag([1.0, 0.0, 0.0]),
    TensorKind.C2: np.diag([0.0, 1.0, 0.0]),
    TensorKind.C3: np.diag([0.0, 0.0, 1.0]),
}


def canonical(kind: TensorKind) -> Tensor4Sym:
    """Identity, I (x) I, and the three anisotropic projectors"""
    return Tensor4Sym(_CANONICAL[TensorKind(kind)])


def make_isotropic(p: IsoParams) -> Tensor4Sym:
    """C = 2 mu I + lambda I (x) I"""
    if p.mu <= 0:
        raise TensorError(f"shear modulus must be positive, got {p.mu}")
    return Tensor4Sym(2.0 * p.mu * np.eye(3) + p.lam * _DILAT)


def model_basis(kind: ModelKind) -> List[Tensor4Sym]:
    """Constant tensors C^k of the decomposition C = sum_k mu_k C^k"""
    kind = ModelKind(kind)
    if kind == ModelKind.SHEAR:
        return [canonical(TensorKind.IDENT)]
    if kind == ModelKind.LAME:
        return [2.0 * canonical(TensorKind.IDENT), canonical(TensorKind.DILAT)]
    return [canonical(TensorKind.C1), canonical(TensorKind.C2), canonical(TensorKind.C3)]


def compose_tensor(coefficients: Sequence[np.ndarray], model: Sequence[Tensor4Sym]) -> np.ndarray:
    """Per-element matrices sum_k mu_k[t] C^k, shape (n_elements, 3, 3)"""
    if len(coefficients) != len(model):
        raise TensorError(f"{len(coefficients)} coefficient fields for {len(model)} model tensors")
    stacked = np.stack([np.asarray(c, dtype=float) for c in coefficients])
    basis = np.stack([t.v for t in model])
    return np.einsum("kt,kab->tab", stacked, basis)


def check_elliptic(tensors: np.ndarray, tol: float = 1e-14) -> None:
    """Raise unless every (3, 3) matrix in the stack is positive definite"""
    eig = np.linalg.eigvalsh(tensors)
    bad = np.flatnonzero(eig[:, 0] <= tol * np.maximum(1.0, eig[:, -1]))
    if bad.size:
        logger.error(f"{bad.size} non-elliptic element tensors, first at element {bad[0]}")
        raise TensorError(f"tensor of element {bad[0]} is not positive definite "
                          f"(smallest eigenvalue {eig[bad[0], 0]:.3e})")
