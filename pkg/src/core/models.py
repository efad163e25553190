"""Data models for the application"""

import math
from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.core.config import settings


class TensorKind(str, Enum):
    """Canonical order-4 tensors"""
    IDENT = "ident"
    DILAT = "dilat"
    C1 = "c1"
    C2 = "c2"
    C3 = "c3"


class ModelKind(str, Enum):
    """Decompositions C = sum_k mu_k C^k"""
    SHEAR = "shear"
    LAME = "lame"
    ANISO = "aniso"


class BoundaryTag(str, Enum):
    """Boundary edge tags"""
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    FREE = "free"


class Side(str, Enum):
    """Sides of a rectangle"""
    BOTTOM = "bottom"
    TOP = "top"
    LEFT = "left"
    RIGHT = "right"


class PhantomId(str, Enum):
    """Built-in phantom suite"""
    DISC = "disc"
    TWO_DISCS = "two_discs"
    LAYERS = "layers"


class SolveMethod(str, Enum):
    """Reconstruction formulations"""
    TV = "tv"
    NULLSPACE = "nullspace"


class SweepParameter(str, Enum):
    """Parameters a sweep can vary"""
    TV = "tv"
    ELAS = "elas"
    N = "n"


class IsoParams(BaseModel):
    """Lamé coefficients"""
    model_config = ConfigDict(populate_by_name=True)

    mu: float = Field(ge=0)
    lam: float = Field(default=0.0, ge=0, alias="lambda")


class BoundarySegment(BaseModel):
    """Part of one rectangle side, as fractions of that side's length"""
    side: Side
    start: float = Field(default=0.0, ge=0, le=1)
    end: float = Field(default=1.0, ge=0, le=1)

    @model_validator(mode="after")
    def _check_interval(self):
        if self.end <= self.start:
            raise ValueError(f"segment end {self.end} must exceed start {self.start}")
        return self

    def overlaps(self, other: "BoundarySegment") -> bool:
        if self.side != other.side:
            return False
        return min(self.end, other.end) - max(self.start, other.start) > 0


class DomainSpec(BaseModel):
    """Rectangle with its Dirichlet and Neumann segments"""
    xmin: float = -1.0
    xmax: float = 1.0
    ymin: float = -1.0
    ymax: float = 1.0
    dirichlet: BoundarySegment = BoundarySegment(side=Side.BOTTOM)
    neumann: BoundarySegment = BoundarySegment(side=Side.TOP)

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ValueError("rectangle bounds must satisfy xmin < xmax and ymin < ymax")
        if self.dirichlet.overlaps(self.neumann):
            raise ValueError("Dirichlet and Neumann segments overlap")
        return self

    @classmethod
    def square(cls, half_width: float, **kwargs) -> "DomainSpec":
        return cls(xmin=-half_width, xmax=half_width, ymin=-half_width, ymax=half_width, **kwargs)

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height


CoefficientValues = List[Optional[float]]


class Disc(BaseModel):
    """Disc inclusion"""
    kind: Literal["disc"] = "disc"
    center: Tuple[float, float]
    radius: float = Field(gt=0)
    values: CoefficientValues

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = points - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= self.radius ** 2


class Box(BaseModel):
    """Axis-aligned box inclusion"""
    kind: Literal["box"] = "box"
    lower: Tuple[float, float]
    upper: Tuple[float, float]
    values: CoefficientValues

    @model_validator(mode="after")
    def _check_corners(self):
        if self.upper[0] <= self.lower[0] or self.upper[1] <= self.lower[1]:
            raise ValueError("box upper corner must exceed lower corner")
        return self

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.all((points >= lo) & (points <= hi), axis=1)


class HalfPlane(BaseModel):
    """Half-plane {x : n.x >= offset}"""
    kind: Literal["half_plane"] = "half_plane"
    normal: Tuple[float, float]
    offset: float
    values: CoefficientValues

    @field_validator("normal")
    @classmethod
    def _check_normal(cls, v):
        if math.hypot(*v) == 0:
            raise ValueError("half-plane normal must be nonzero")
        return v

    def contains(self, points: np.ndarray) -> np.ndarray:
        return points @ np.asarray(self.normal) >= self.offset


Shape = Annotated[Union[Disc, Box, HalfPlane], Field(discriminator="kind")]


class Phantom(BaseModel):
    """Piecewise-constant coefficient phantom; the last shape containing a point wins"""
    name: str = "custom"
    background: List[float]
    shapes: List[Shape] = []
    floor: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check_values(self):
        n = len(self.background)
        if n == 0:
            raise ValueError("phantom needs at least one coefficient")
        if min(self.background) < self.floor:
            raise ValueError(f"background below floor {self.floor}")
        for shape in self.shapes:
            if len(shape.values) != n:
                raise ValueError(f"shape has {len(shape.values)} values, expected {n}")
            for v in shape.values:
                if v is not None and (not math.isfinite(v) or v < self.floor):
                    raise ValueError(f"shape value {v} below floor {self.floor}")
        return self

    @property
    def n_coefficients(self) -> int:
        return len(self.background)


class BoundaryLoad(BaseModel):
    """Traction density on the Neumann segment, piecewise linear in normalized arclength"""
    label: str
    knots: List[float]
    values: List[Tuple[float, float]]

    @model_validator(mode="after")
    def _check_profile(self):
        if len(self.knots) != len(self.values) or len(self.knots) < 1:
            raise ValueError("knots and values must have the same nonzero length")
        k = np.asarray(self.knots)
        if np.any(np.diff(k) <= 0) or k[0] < 0 or k[-1] > 1:
            raise ValueError("knots must increase within [0, 1]")
        if not np.all(np.isfinite(np.asarray(self.values))):
            raise ValueError("traction values must be finite")
        return self

    def evaluate(self, s: np.ndarray) -> np.ndarray:
        """Traction at normalized arclength positions s"""
        v = np.asarray(self.values, dtype=float)
        return np.column_stack([np.interp(s, self.knots, v[:, 0]), np.interp(s, self.knots, v[:, 1])])


class RegParams(BaseModel):
    """Regularization and solver parameters of the TV-constrained least squares"""
    eps_tv: List[float] = Field(default=[1e-4])
    mu_min: List[float] = Field(default=[1.0])
    max_iter: int = Field(default=10000, ge=1)
    primal_tol: float = Field(default=1e-6, gt=0)
    dual_tol: float = Field(default=1e-6, gt=0)
    abs_tol: float = Field(default=1e-9, gt=0)
    rho: float = Field(default=1.0, gt=0)
    relaxation: float = Field(default=1.6, gt=0, lt=2)
    rho_balance: float = Field(default=10.0, gt=1)
    rho_factor: float = Field(default=2.0, gt=1)
    rho_update_every: int = Field(default=10, ge=1)
    burn_in: int = Field(default=50, ge=0)
    normalize: bool = True

    @field_validator("eps_tv")
    @classmethod
    def _check_eps(cls, v):
        if not v or any(e < 0 for e in v):
            raise ValueError("eps_tv values must be >= 0")
        return v

    @field_validator("mu_min")
    @classmethod
    def _check_mu_min(cls, v):
        if not v or any(m <= 0 for m in v):
            raise ValueError("mu_min values must be > 0")
        return v

    def per_coefficient(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Broadcast eps_tv and mu_min to n coefficients"""
        eps = self.eps_tv * n if len(self.eps_tv) == 1 else self.eps_tv
        lo = self.mu_min * n if len(self.mu_min) == 1 else self.mu_min
        if len(eps) != n or len(lo) != n:
            raise ValueError(f"regularization given for {len(eps)}/{len(lo)} coefficients, model has {n}")
        return np.asarray(eps, dtype=float), np.asarray(lo, dtype=float)


class Provenance(BaseModel):
    """Everything needed to regenerate a dataset"""
    phantom: Phantom
    model: ModelKind
    loads: List[BoundaryLoad]
    h_forward: float
    h_inverse: float
    forward_jitter: float
    inverse_jitter: float
    subdomain_half_width: float
    noise: float
    eps_elas: float
    seed: int
    inverse_crime: bool = False
    forward_domain: DomainSpec = DomainSpec()
    max_abs_displacement: List[float] = []


class SolveSummary(BaseModel):
    """Serializable part of a solve report"""
    method: SolveMethod
    converged: bool
    iterations: int
    objective: float
    objective_history: List[float] = []
    primal_residuals: List[float] = []
    dual_residuals: List[float] = []
    rho: float = 0.0
    data_scale: float = 1.0
    singular_values: List[float] = []


class Metrics(BaseModel):
    """Reconstruction quality of one run"""
    parameter: Optional[float] = None
    rel_l2: List[float]
    linf: List[float]
    tv: List[float]
    objective: float
    converged: bool
    iterations: int
    sigma: List[float] = []


class ProbeResult(BaseModel):
    """Drift of the normalized null vector under data perturbations"""
    deltas: List[float]
    errors: List[float]
    slope: float
    intercept: float
    r_squared: float
    degenerate: bool
    mean_normalized_errors: List[float] = []
    mean_normalized_slope: float = float("nan")


class ExperimentConfig(BaseModel):
    """One end-to-end experiment"""

    phantom: PhantomId = PhantomId.DISC
    model: ModelKind = ModelKind.SHEAR
    n_loads: int = Field(default=1, ge=1, le=4)
    h_forward: float = Field(default=0.01, gt=0)
    h_inverse: float = Field(default=0.03, gt=0)
    forward_jitter: float = Field(default=0.15, ge=0, lt=0.5)
    inverse_jitter: float = Field(default=0.25, ge=0, lt=0.5)
    subdomain_half_width: float = Field(default=0.9, gt=0, le=1.0)
    eps_tv: List[float] = Field(default=[1e-4])
    eps_elas: float = Field(default=1e-5, ge=0)
    noise: float = Field(default=0.0, ge=0)
    seed: int = 0
    mu_min: float = Field(default=1.0, gt=0)
    method: SolveMethod = SolveMethod.TV
    max_iter: int = Field(default_factory=lambda: settings.SOLVER_MAX_ITER, ge=1)
    primal_tol: float = Field(default_factory=lambda: settings.SOLVER_PRIMAL_TOL, gt=0)
    dual_tol: float = Field(default_factory=lambda: settings.SOLVER_DUAL_TOL, gt=0)
    inverse_crime: bool = False
    output_dir: str = Field(default_factory=lambda: f"{settings.OUTPUT_ROOT}/experiment")

    @field_validator("eps_tv", mode="before")
    @classmethod
    def _split_eps(cls, v):
        if isinstance(v, str):
            return [float(x) for x in v.split(",") if x.strip()]
        if isinstance(v, (int, float)):
            return [float(v)]
        return v

    @field_validator("eps_tv")
    @classmethod
    def _check_eps(cls, v):
        if not v or any(e < 0 for e in v):
            raise ValueError("eps_tv values must be >= 0")
        return v

    @model_validator(mode="after")
    def _check_meshes(self):
        if not self.inverse_crime and self.h_forward > self.h_inverse:
            raise ValueError("h_forward must not exceed h_inverse")
        return self

    def reg_params(self) -> RegParams:
        return RegParams(
            eps_tv=self.eps_tv,
            mu_min=[self.mu_min],
            max_iter=self.max_iter,
            primal_tol=self.primal_tol,
            dual_tol=self.dual_tol,
            rho=settings.SOLVER_RHO,
            abs_tol=settings.SOLVER_ABS_TOL,
            relaxation=settings.SOLVER_RELAXATION,
        )


def metrics_table(rows: List[Metrics]) -> List[Dict]:
    """Flatten metrics rows for tabular export"""
    table = []
    for row in rows:
        flat = {"parameter": row.parameter, "objective": row.objective,
                "converged": row.converged, "iterations": row.iterations}
        for k, (e2, ei, tv) in enumerate(zip(row.rel_l2, row.linf, row.tv)):
            flat[f"rel_l2_{k}"] = e2
            flat[f"linf_{k}"] = ei
            flat[f"tv_{k}"] = tv
        for k, s in enumerate(row.sigma):
            flat[f"sigma_{k + 1}"] = s
        table.append(flat)
    return table
