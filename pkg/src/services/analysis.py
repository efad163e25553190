"""Experiment orchestration: configuration, metrics, sweeps, stability probe and artifacts"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

from src.core.config import settings
from src.core.exceptions import ConfigError, ElastoInverseError, ExperimentError
from src.core.models import (
    ExperimentConfig, Metrics, ModelKind, ProbeResult, Provenance, RegParams, SolveMethod,
    SweepParameter, metrics_table,
)
from src.services.fem_core import ScalarFieldP0, VectorFieldP1, strain_field
from src.services.forward_sim import (
    ForwardDataset, dataset_from_provenance, default_loads, generate_measurements,
    phantom_library, rasterize, smooth_dataset,
)
from src.services.inverse_core import (
    InverseSystem, SolveReport, TVOperator, assemble_system, build_tv, lame_identifiability,
    null_space_reconstruction, smallest_singular_pairs, solve, total_variation,
)
from src.services.tensor_algebra import model_basis
from src.utils import export
from src.utils.logger import run_log

logger = logging.getLogger(__name__)


def _check_same_mesh(recon: ScalarFieldP0, truth: ScalarFieldP0) -> None:
    if recon.mesh is not truth.mesh:
        raise ValueError("reconstruction and truth live on different meshes")


def rel_l2_error(recon: ScalarFieldP0, truth: ScalarFieldP0) -> float:
    """Area-weighted relative L2 error"""
    _check_same_mesh(recon, truth)
    areas = truth.mesh.areas
    den = np.sum(areas * truth.values ** 2)
    if den == 0:
        raise ValueError("relative error against a zero truth field")
    return float(np.sqrt(np.sum(areas * (recon.values - truth.values) ** 2) / den))


def linf_error(recon: ScalarFieldP0, truth: ScalarFieldP0) -> float:
    _check_same_mesh(recon, truth)
    return float(np.abs(recon.values - truth.values).max())


def compute_metrics(report: SolveReport, truth: Sequence[ScalarFieldP0], tv: TVOperator,
                    parameter: Optional[float] = None) -> Metrics:
    recon = report.fields
    if len(recon) != len(truth):
        raise ValueError(f"{len(recon)} reconstructed fields for {len(truth)} truth fields")
    return Metrics(
        parameter=parameter,
        rel_l2=[rel_l2_error(r, t) for r, t in zip(recon, truth)],
        linf=[linf_error(r, t) for r, t in zip(recon, truth)],
        tv=[total_variation(tv, r) for r in recon],
        objective=report.objective,
        converged=report.converged,
        iterations=report.iterations,
        sigma=report.singular_values,
    )


# Configuration

def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    """``key=value`` strings to a dict"""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not of the form key=value")
        out[key.strip().lower()] = value.strip()
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Experiment config from a KEY=value file, with overrides applied on top"""
    values: Dict[str, object] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update({k.lower(): v for k, v in dotenv_values(path).items() if v is not None})
    values.update({k.lower(): v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(ExperimentConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


# Pipeline stages

def _stage(name: str, fn: Callable, *args, **kwargs):
    logger.info(f"Stage '{name}' started")
    try:
        result = fn(*args, **kwargs)
    except ExperimentError:
        raise
    except (ElastoInverseError, ValueError, np.linalg.LinAlgError, OSError) as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise ExperimentError(name, e) from e
    logger.info(f"Stage '{name}' finished")
    return result


def raw_dataset(cfg: ExperimentConfig, n_loads: Optional[int] = None) -> ForwardDataset:
    """Unsmoothed measurements for the configured phantom and loads"""
    return generate_measurements(
        phantom_library(cfg.phantom, cfg.model), default_loads(n_loads or cfg.n_loads),
        cfg.h_forward, cfg.h_inverse, cfg.noise, cfg.seed, model=cfg.model,
        forward_jitter=cfg.forward_jitter, inverse_jitter=cfg.inverse_jitter,
        subdomain_half_width=cfg.subdomain_half_width, inverse_crime=cfg.inverse_crime,
    )


def build_dataset(cfg: ExperimentConfig, n_loads: Optional[int] = None) -> ForwardDataset:
    return smooth_dataset(raw_dataset(cfg, n_loads), cfg.eps_elas)


def truth_fields(ds: ForwardDataset) -> List[ScalarFieldP0]:
    """Phantom rasterized directly on the inversion mesh"""
    return rasterize(ds.provenance.phantom, ds.mesh)


def reconstruct(sys: InverseSystem, tv: TVOperator, reg: RegParams, method: SolveMethod) -> SolveReport:
    if SolveMethod(method) == SolveMethod.NULLSPACE:
        return null_space_reconstruction(sys, reg, tv)
    return solve(sys, tv, reg)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: ForwardDataset
    system: InverseSystem
    report: SolveReport
    truth: List[ScalarFieldP0]
    metrics: Metrics
    output_dir: Optional[Path] = None


def write_dataset(ds: ForwardDataset, directory: Path) -> None:
    """Inversion mesh, displacements and provenance"""
    directory = Path(directory)
    point_data = {f"u_{k}": u.values for k, u in enumerate(ds.displacements)}
    export.write_vtk(directory / "dataset.vtk", ds.mesh, point_data=point_data)
    export.write_table(directory / "displacements.csv", export.node_table(ds.mesh, point_data))
    export.write_json(directory / "provenance.json", ds.provenance)


def export_system(sys: InverseSystem, directory: Path) -> List[Path]:
    """Stacked matrix and every block in MatrixMarket format"""
    directory = Path(directory)
    paths = [export.write_matrix(directory / "system.mtx", sys.matrix, comment="stacked inverse system")]
    for l, row in enumerate(sys.blocks):
        for k, block in enumerate(row):
            paths.append(export.write_matrix(directory / f"block_{l}_{k}.mtx", block,
                                             comment=f"measurement {l}, coefficient {k}"))
    export.write_table(directory / "rhs.csv", {"rhs": sys.rhs})
    return paths


def write_experiment(result: ExperimentResult, directory: Path) -> None:
    directory = Path(directory)
    ds, m = result.dataset, result.dataset.mesh
    cells = {}
    for k, (t, r) in enumerate(zip(result.truth, result.report.fields)):
        cells[f"truth_{k}"] = t.values
        cells[f"recon_{k}"] = r.values
    points = {f"u_{k}": u.values for k, u in enumerate(ds.displacements)}
    export.write_vtk(directory / "reconstruction.vtk", m, cell_data=cells, point_data=points)
    export.write_table(directory / "reconstruction.csv", export.cell_table(m, cells))
    export.write_table(directory / "displacements.csv", export.node_table(m, points))
    export.write_matrix(directory / "system.mtx", result.system.matrix, comment="stacked inverse system")
    export.write_json(directory / "metrics.json", result.metrics)
    export.write_json(directory / "provenance.json", ds.provenance)
    export.write_json(directory / "report.json", result.report.to_summary())
    export.write_json(directory / "config.json", result.config)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Dataset, system, solve and metrics; every artifact goes to ``cfg.output_dir``"""
    if not write:
        return _run(cfg)
    out = Path(cfg.output_dir)
    with run_log(out):
        result = _run(cfg)
        _stage("export", write_experiment, result, out)
        result.output_dir = out
        logger.info(f"Artifacts written to {out}")
    return result


def _run(cfg: ExperimentConfig) -> ExperimentResult:
    logger.info(f"Experiment: phantom={cfg.phantom.value} model={cfg.model.value} n={cfg.n_loads} "
                f"eps_tv={cfg.eps_tv} eps_elas={cfg.eps_elas} noise={cfg.noise} seed={cfg.seed}")
    ds = _stage("dataset", build_dataset, cfg)
    model = model_basis(cfg.model)
    sys = _stage("assembly", assemble_system, ds, model)
    tv = _stage("assembly", build_tv, ds.mesh)
    if cfg.model == ModelKind.LAME:
        score = lame_identifiability(ds.displacements)
        logger.info(f"Lamé identifiability score: {score:.4e}")
        if score < 1e-6:
            logger.warning("Measurements have proportional divergences, the Lamé pair is not identifiable")
    report = _stage("solve", reconstruct, sys, tv, cfg.reg_params(), cfg.method)
    truth = _stage("metrics", truth_fields, ds)
    metrics = _stage("metrics", compute_metrics, report, truth, tv)
    logger.info(f"Relative L2 errors: {', '.join(f'{e:.4f}' for e in metrics.rel_l2)}")

    return ExperimentResult(cfg, ds, sys, report, truth, metrics)


def replay(provenance: Provenance) -> ForwardDataset:
    """Regenerate a dataset from its stored provenance"""
    return _stage("dataset", dataset_from_provenance, provenance)


# Sweeps

def _parallel(fn: Callable, items: Sequence) -> List:
    workers = min(settings.SWEEP_WORKERS, len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _check_values(values: Sequence) -> None:
    if len(values) < 2:
        raise ConfigError(f"a sweep needs at least two values, got {len(values)}")


def _sweep_point(ds: ForwardDataset, cfg: ExperimentConfig, reg: RegParams, parameter: float) -> Metrics:
    sys = assemble_system(ds, model_basis(cfg.model))
    tv = build_tv(ds.mesh)
    report = reconstruct(sys, tv, reg, cfg.method)
    metrics = compute_metrics(report, truth_fields(ds), tv, parameter)
    logger.info(f"Sweep point {parameter:g}: rel L2 {', '.join(f'{e:.4f}' for e in metrics.rel_l2)}")
    return metrics


def sweep_tv(cfg: ExperimentConfig, values: Sequence[float]) -> List[Metrics]:
    """One dataset and system, one solve per TV weight"""
    _check_values(values)
    ds = _stage("dataset", build_dataset, cfg)
    sys = _stage("assembly", assemble_system, ds, model_basis(cfg.model))
    tv = build_tv(ds.mesh)
    truth = truth_fields(ds)

    def point(eps: float) -> Metrics:
        reg = cfg.reg_params().model_copy(update={"eps_tv": [float(eps)]})
        report = _stage("solve", reconstruct, sys, tv, reg, cfg.method)
        return compute_metrics(report, truth, tv, float(eps))

    return sorted(_parallel(point, list(values)), key=lambda r: r.parameter)


def sweep_elas(cfg: ExperimentConfig, values: Sequence[float]) -> List[Metrics]:
    """One set of raw measurements, re-smoothed per value"""
    _check_values(values)
    raw = _stage("dataset", raw_dataset, cfg)
    reg = cfg.reg_params()

    def point(eps: float) -> Metrics:
        ds = _stage("smoothing", smooth_dataset, raw, float(eps))
        return _stage("solve", _sweep_point, ds, cfg, reg, float(eps))

    return sorted(_parallel(point, list(values)), key=lambda r: r.parameter)


def sweep_n(cfg: ExperimentConfig, counts: Sequence[int]) -> List[Metrics]:
    """Nested measurement subsets of one dataset"""
    _check_values(counts)
    if min(counts) < 1 or max(counts) > 4:
        raise ConfigError(f"measurement counts must lie in [1, 4], got {list(counts)}")
    full = _stage("dataset", build_dataset, cfg, max(counts))
    reg = cfg.reg_params()

    def point(n: int) -> Metrics:
        return _stage("solve", _sweep_point, full.subset(int(n)), cfg, reg, float(n))

    return sorted(_parallel(point, list(counts)), key=lambda r: r.parameter)


SWEEPS = {
    SweepParameter.TV: sweep_tv,
    SweepParameter.ELAS: sweep_elas,
    SweepParameter.N: sweep_n,
}


def run_sweep(cfg: ExperimentConfig, parameter: SweepParameter, values: Sequence[float],
              write: bool = True) -> List[Metrics]:
    rows = SWEEPS[SweepParameter(parameter)](cfg, values)
    if write:
        out = Path(cfg.output_dir)
        export.write_table(out / f"sweep_{SweepParameter(parameter).value}.csv", metrics_table(rows))
        export.write_json(out / f"sweep_{SweepParameter(parameter).value}.json",
                          {"parameter": SweepParameter(parameter).value,
                           "rows": [r.model_dump(mode="json") for r in rows]})
        export.write_json(out / "config.json", cfg)
    return rows


# Stability probe

def smooth_direction(m, seed: int, n_modes: int = 3) -> np.ndarray:
    """Nodal values of a seeded sum of low-frequency sine modes, shape (n_nodes, 2)"""
    rng = np.random.default_rng(seed)
    x, y = m.nodes[:, 0], m.nodes[:, 1]
    w = np.zeros((m.n_nodes, 2))
    for _ in range(n_modes):
        kx, ky = rng.uniform(0.5, 2.0, size=2) * np.pi
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.normal(size=2)
        w += amp[None, :] * np.sin(kx * x + ky * y + phase)[:, None]
    return w


def _strain_sup(values: np.ndarray, m) -> float:
    return float(np.abs(strain_field(VectorFieldP1(m, values)).values).max())


def _l2_normalized(v: np.ndarray, areas: np.ndarray) -> np.ndarray:
    return v / np.sqrt(np.sum(areas * v ** 2))


def _loglog_fit(deltas: np.ndarray, errors: np.ndarray) -> Tuple[float, float, float, bool]:
    usable = (deltas > 0) & (errors > 0) & np.isfinite(errors)
    if usable.sum() < 2:
        return float("nan"), float("nan"), float("nan"), True
    lx, ly = np.log(deltas[usable]), np.log(errors[usable])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    total = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / total if total > 0 else 1.0
    return float(slope), float(intercept), float(r2), not np.isfinite(slope)


def stability_probe(cfg: ExperimentConfig, deltas: Sequence[float], direction_seed: int = 0) -> ProbeResult:
    """Drift of the normalized null vector when the measurements move by delta * w

    Each direction w is a smooth field scaled so its strain has the same sup
    norm as the strain of the measurement it perturbs. Drift is the area
    weighted L2 distance of the L2-normalized, sign-aligned null vector.
    """
    if cfg.model != ModelKind.SHEAR:
        raise ConfigError("the stability probe is defined for the shear model")
    if not deltas:
        raise ConfigError("the stability probe needs at least one amplitude")
    if cfg.n_loads < 2:
        logger.warning("Stability probe with a single measurement: the discrete kernel may not be one-dimensional")
    ds = _stage("dataset", build_dataset, cfg.model_copy(update={"noise": 0.0}))
    m = ds.mesh
    model = model_basis(cfg.model)
    areas = m.areas
    seeds = np.random.SeedSequence(direction_seed).spawn(ds.n_loads)
    directions = []
    for u, s in zip(ds.displacements, seeds):
        w = smooth_direction(m, int(s.generate_state(1)[0]))
        directions.append(w * _strain_sup(u.values, m) / _strain_sup(w, m))

    def null_vector(delta: float) -> np.ndarray:
        fields = [VectorFieldP1(m, u.values + delta * w) for u, w in zip(ds.displacements, directions)]
        sys = assemble_system(ForwardDataset(m, fields, ds.provenance), model)
        return smallest_singular_pairs(sys, 1)[0].vector

    base = _l2_normalized(_stage("probe", null_vector, 0.0), areas)
    total_area = areas.sum()
    base_mean = base * total_area / np.sum(areas * base)
    errors, mean_errors = [], []
    for delta in deltas:
        v = _l2_normalized(_stage("probe", null_vector, float(delta)), areas)
        if np.sum(areas * v * base) < 0:
            v = -v
        errors.append(float(np.sqrt(np.sum(areas * (v - base) ** 2))))
        v_mean = v * total_area / np.sum(areas * v)
        mean_errors.append(float(np.sqrt(np.sum(areas * (v_mean - base_mean) ** 2))))
        logger.info(f"Probe delta={delta:.3e}: drift {errors[-1]:.4e}")

    d = np.asarray(deltas, dtype=float)
    slope, intercept, r2, degenerate = _loglog_fit(d, np.asarray(errors))
    mean_slope, _, _, _ = _loglog_fit(d, np.asarray(mean_errors))
    if degenerate:
        logger.warning("Stability fit is degenerate (fewer than two positive drifts)")
    return ProbeResult(deltas=[float(x) for x in deltas], errors=errors, slope=slope, intercept=intercept,
                       r_squared=r2, degenerate=degenerate, mean_normalized_errors=mean_errors,
                       mean_normalized_slope=mean_slope)
