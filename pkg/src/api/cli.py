"""Command-line interface: mesh, forward, invert, sweep, probe and export subcommands"""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

from src.core.exceptions import ConfigError, ElastoInverseError, ExperimentError
from src.core.models import DomainSpec, ExperimentConfig, Provenance, SweepParameter
from src.services import analysis
from src.services.inverse_core import assemble_system
from src.services.mesh import build_structured
from src.services.tensor_algebra import model_basis
from src.utils import export

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_INVALID_CONFIG = 3

# Dedicated flags mapped onto ExperimentConfig fields
_CONFIG_FLAGS = {
    "phantom": "phantom",
    "model": "model",
    "n_loads": "n_loads",
    "h_forward": "h_forward",
    "h_inverse": "h_inverse",
    "eps_tv": "eps_tv",
    "eps_elas": "eps_elas",
    "noise": "noise",
    "seed": "seed",
    "method": "method",
    "max_iter": "max_iter",
    "output_dir": "output_dir",
}


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="KEY=value experiment file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--phantom")
    p.add_argument("--model")
    p.add_argument("--n-loads", dest="n_loads")
    p.add_argument("--h-forward", dest="h_forward")
    p.add_argument("--h-inverse", dest="h_inverse")
    p.add_argument("--eps-tv", dest="eps_tv")
    p.add_argument("--eps-elas", dest="eps_elas")
    p.add_argument("--noise")
    p.add_argument("--seed")
    p.add_argument("--method")
    p.add_argument("--max-iter", dest="max_iter")
    p.add_argument("--output-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastoinverse",
                                     description="Elastic coefficient reconstruction from internal displacement data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build a structured triangulation and write VTK/CSV")
    p.add_argument("--half-width", type=float, default=1.0)
    p.add_argument("--h", type=float, default=0.03)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dirichlet-layer", action="store_true",
                   help="cut the cells on the Dirichlet side in four, as on forward meshes")
    p.add_argument("--output-dir", default="runs/mesh")

    p = sub.add_parser("forward", help="generate a measurement dataset")
    _add_experiment_flags(p)

    p = sub.add_parser("invert", help="run one reconstruction experiment")
    _add_experiment_flags(p)

    p = sub.add_parser("sweep", help="vary one parameter over a list of values")
    _add_experiment_flags(p)
    p.add_argument("--parameter", required=True, choices=[s.value for s in SweepParameter])
    p.add_argument("--values", required=True, type=_float_list)

    p = sub.add_parser("probe", help="stability of the normalized null vector under perturbations")
    _add_experiment_flags(p)
    p.add_argument("--deltas", type=_float_list, default=[1e-4, 3e-4, 1e-3, 3e-3, 1e-2])
    p.add_argument("--direction-seed", type=int, default=0)

    p = sub.add_parser("export", help="regenerate a dataset from provenance and export its inverse system")
    p.add_argument("--provenance", required=True)
    p.add_argument("--output-dir", default="runs/export")
    return parser


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, object] = {}
    for attr, key in _CONFIG_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    overrides.update(analysis.parse_overrides(args.overrides))
    return analysis.load_config(args.config, overrides)


def _cmd_mesh(args) -> int:
    spec = DomainSpec.square(args.half_width)
    m = build_structured(spec, args.h, args.jitter, args.seed, dirichlet_layer=args.dirichlet_layer)
    out = Path(args.output_dir)
    export.write_vtk(out / "mesh.vtk", m)
    export.write_mesh_csv(out, m)
    logger.info(f"Mesh with {m.n_nodes} nodes and {m.n_triangles} triangles written to {out}")
    return EXIT_OK


def _cmd_forward(args) -> int:
    cfg = experiment_config(args)
    ds = analysis.build_dataset(cfg)
    analysis.write_dataset(ds, Path(cfg.output_dir))
    logger.info(f"Dataset with {ds.n_loads} measurements written to {cfg.output_dir}")
    return EXIT_OK


def _cmd_invert(args) -> int:
    cfg = experiment_config(args)
    result = analysis.run_experiment(cfg)
    return EXIT_OK if result.metrics.converged else EXIT_NOT_CONVERGED


def _cmd_sweep(args) -> int:
    cfg = experiment_config(args)
    rows = analysis.run_sweep(cfg, SweepParameter(args.parameter), args.values)
    return EXIT_OK if all(r.converged for r in rows) else EXIT_NOT_CONVERGED


def _cmd_probe(args) -> int:
    cfg = experiment_config(args)
    result = analysis.stability_probe(cfg, args.deltas, args.direction_seed)
    export.write_json(Path(cfg.output_dir) / "probe.json", result)
    logger.info(f"Stability slope {result.slope:.3f} (R^2 = {result.r_squared:.3f})")
    return EXIT_OK


def _cmd_export(args) -> int:
    path = Path(args.provenance)
    if not path.is_file():
        raise ConfigError(f"provenance file not found: {path}")
    prov = export.read_json(path, Provenance)
    ds = analysis.replay(prov)
    sys = assemble_system(ds, model_basis(prov.model))
    out = Path(args.output_dir)
    analysis.write_dataset(ds, out)
    analysis.export_system(sys, out)
    return EXIT_OK


COMMANDS = {
    "mesh": _cmd_mesh,
    "forward": _cmd_forward,
    "invert": _cmd_invert,
    "sweep": _cmd_sweep,
    "probe": _cmd_probe,
    "export": _cmd_export,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_INVALID_CONFIG
    except ExperimentError as e:
        logger.error(f"Experiment failed in stage '{e.stage}': {e.cause}")
        return EXIT_ERROR
    except ElastoInverseError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_ERROR
