"""Exception hierarchy for the inversion toolkit"""

from typing import Optional


class ElastoInverseError(Exception):
    """Base class for every error raised by the toolkit"""


class TensorError(ElastoInverseError):
    """Invalid elasticity tensor or Lamé parameters"""


class MeshError(ElastoInverseError):
    """Invalid domain specification or triangulation"""


class ResampleError(ElastoInverseError):
    """Target points fall outside the source mesh"""


class AssemblyError(ElastoInverseError):
    """Inconsistent dimensions while assembling an operator"""


class SolverError(ElastoInverseError):
    """Linear solve or factorization failure"""


class SingularSystemError(SolverError):
    """Forward system without Dirichlet constraints"""


class ConfigError(ElastoInverseError):
    """Invalid experiment configuration"""


class ExperimentError(ElastoInverseError):
    """Failure of one stage of an experiment pipeline"""

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        self.stage = stage
        self.cause = cause
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"stage '{stage}' failed{detail}")
