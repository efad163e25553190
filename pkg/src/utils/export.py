"""Artifact writers and readers: legacy VTK, CSV tables, MatrixMarket and JSON"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Type, TypeVar, Union

import numpy as np
import pandas as pd
import scipy.io
import scipy.sparse as sp
from pydantic import BaseModel

from src.core.exceptions import MeshError
from src.core.models import DomainSpec
from src.services.mesh import Mesh

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
M = TypeVar("M", bound=BaseModel)

VTK_TRIANGLE = 5


def _fmt(values: np.ndarray) -> List[str]:
    return [" ".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(values)]


def _data_section(lines: List[str], kind: str, n: int, data: Mapping[str, np.ndarray]) -> None:
    if not data:
        return
    lines.append(f"{kind} {n}")
    for name, values in data.items():
        values = np.asarray(values, dtype=float)
        if values.shape[0] != n:
            raise MeshError(f"{kind.lower()} '{name}' has {values.shape[0]} entries, expected {n}")
        if values.ndim == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.17g}" for v in values)
        elif values.shape[1] == 2:
            lines.append(f"VECTORS {name} double")
            lines.extend(_fmt(np.column_stack([values, np.zeros(n)])))
        else:
            raise MeshError(f"cannot write '{name}' with shape {values.shape} to VTK")


def write_vtk(path: PathLike, m: Mesh, cell_data: Optional[Mapping[str, np.ndarray]] = None,
              point_data: Optional[Mapping[str, np.ndarray]] = None, title: str = "elastoinverse") -> Path:
    """Unstructured grid in legacy ASCII format; 2-column data is written as 3D vectors"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# vtk DataFile Version 2.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {m.n_nodes} double"]
    lines.extend(_fmt(np.column_stack([m.nodes, np.zeros(m.n_nodes)])))
    lines.append(f"CELLS {m.n_triangles} {4 * m.n_triangles}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in m.triangles)
    lines.append(f"CELL_TYPES {m.n_triangles}")
    lines.extend([str(VTK_TRIANGLE)] * m.n_triangles)
    _data_section(lines, "CELL_DATA", m.n_triangles, cell_data or {})
    _data_section(lines, "POINT_DATA", m.n_nodes, point_data or {})
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path}")
    return path


def read_vtk(path: PathLike) -> Tuple[Mesh, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Mesh plus cell and point data from a file produced by ``write_vtk``"""
    tokens = Path(path).read_text(encoding="utf-8").split("\n")
    pos = 4
    nodes = triangles = None
    cell_data: Dict[str, np.ndarray] = {}
    point_data: Dict[str, np.ndarray] = {}
    target = None
    sizes = {}

    def take(n: int) -> List[str]:
        nonlocal pos
        chunk = tokens[pos:pos + n]
        pos += n
        return chunk

    while pos < len(tokens):
        head = tokens[pos].split()
        pos += 1
        if not head:
            continue
        key = head[0]
        if key == "POINTS":
            n = int(head[1])
            nodes = np.array([r.split() for r in take(n)], dtype=float)[:, :2]
        elif key == "CELLS":
            n = int(head[1])
            cells = np.array([r.split() for r in take(n)], dtype=np.int64)
            if np.any(cells[:, 0] != 3):
                raise MeshError(f"{path}: only triangle cells are supported")
            triangles = cells[:, 1:]
        elif key == "CELL_TYPES":
            types = np.array(take(int(head[1])), dtype=int)
            if np.any(types != VTK_TRIANGLE):
                raise MeshError(f"{path}: only triangle cells are supported")
        elif key in ("CELL_DATA", "POINT_DATA"):
            target = cell_data if key == "CELL_DATA" else point_data
            sizes[id(target)] = int(head[1])
        elif key == "SCALARS" and target is not None:
            pos += 1  # lookup table line
            target[head[1]] = np.array(take(sizes[id(target)]), dtype=float)
        elif key == "VECTORS" and target is not None:
            rows = take(sizes[id(target)])
            target[head[1]] = np.array([r.split() for r in rows], dtype=float)[:, :2]
        else:
            raise MeshError(f"{path}: unexpected VTK section '{key}'")

    if nodes is None or triangles is None:
        raise MeshError(f"{path}: missing POINTS or CELLS section")
    return Mesh.from_arrays(nodes, triangles), cell_data, point_data


def write_table(path: PathLike, rows: Union[pd.DataFrame, List[Dict], Mapping[str, np.ndarray]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def cell_table(m: Mesh, fields: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """One row per triangle: centroid, area and the given P0 fields"""
    df = pd.DataFrame({"triangle": np.arange(m.n_triangles), "cx": m.centroids[:, 0],
                       "cy": m.centroids[:, 1], "area": m.areas})
    for name, values in fields.items():
        df[name] = np.asarray(values, dtype=float)
    return df


def node_table(m: Mesh, fields: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """One row per node: coordinates and the given P1 fields, vectors split into _x/_y columns"""
    df = pd.DataFrame({"node": np.arange(m.n_nodes), "x": m.nodes[:, 0], "y": m.nodes[:, 1]})
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            df[f"{name}_x"] = values[:, 0]
            df[f"{name}_y"] = values[:, 1]
        else:
            df[name] = values
    return df


def write_mesh_csv(directory: PathLike, m: Mesh) -> Tuple[Path, Path]:
    """nodes.csv and triangles.csv, plus domain.json when the mesh carries boundary tags"""
    directory = Path(directory)
    nodes = write_table(directory / "nodes.csv", node_table(m, {}))
    tris = pd.DataFrame(m.triangles, columns=["a", "b", "c"])
    tris.insert(0, "triangle", np.arange(m.n_triangles))
    if m.domain is not None:
        write_json(directory / "domain.json", m.domain)
    return nodes, write_table(directory / "triangles.csv", tris)


def read_mesh_csv(directory: PathLike) -> Mesh:
    directory = Path(directory)
    nodes = read_table(directory / "nodes.csv").sort_values("node")
    tris = read_table(directory / "triangles.csv").sort_values("triangle")
    domain_file = directory / "domain.json"
    domain = read_json(domain_file, DomainSpec) if domain_file.is_file() else None
    return Mesh.from_arrays(nodes[["x", "y"]].to_numpy(), tris[["a", "b", "c"]].to_numpy(), domain=domain)


def write_matrix(path: PathLike, matrix: sp.spmatrix, comment: str = "") -> Path:
    """Sparse matrix in MatrixMarket coordinate format"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment, field="real", precision=17)
    return path


def read_matrix(path: PathLike) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))


def write_json(path: PathLike, payload: Union[BaseModel, Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike, model: Type[M]) -> M:
    return model.model_validate_json(Path(path).read_text(encoding="utf-8"))
