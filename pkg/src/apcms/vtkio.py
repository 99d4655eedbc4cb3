"""Legacy ASCII VTK output for displacement and von Mises fields.

Writes version 2.0 unstructured-grid files with POINT_DATA vector
"displacement" and CELL_DATA scalar "von_mises".  Floats carry 17
significant digits so a value round-trips bit-exactly through the file,
which makes repeated runs byte-identical and lets the comparison command
reread its own output without loss.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh import Mesh

_FMT = "%.17g"


def write_vtk(path: str | Path, mesh: Mesh, displacement: np.ndarray,
              cell_von_mises: np.ndarray, title: str = "apcms field") -> None:
    u = np.asarray(displacement, dtype=np.float64)
    vm = np.asarray(cell_von_mises, dtype=np.float64)
    if u.size != mesh.num_dofs:
        raise ValidationError(f"displacement length {u.size} != {mesh.num_dofs}")
    if vm.size != mesh.num_triangles:
        raise ValidationError(f"von_mises length {vm.size} != {mesh.num_triangles}")

    n, m = mesh.num_nodes, mesh.num_triangles
    lines: list[str] = []
    lines.append("# vtk DataFile Version 2.0")
    lines.append(title.splitlines()[0] if title else "apcms field")
    lines.append("ASCII")
    lines.append("DATASET UNSTRUCTURED_GRID")
    lines.append(f"POINTS {n} double")
    for x, y in mesh.nodes:
        lines.append(f"{_FMT % x} {_FMT % y} 0")
    lines.append(f"CELLS {m} {4 * m}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {m}")
    lines.extend(["5"] * m)
    lines.append(f"POINT_DATA {n}")
    lines.append("VECTORS displacement double")
    for k in range(n):
        lines.append(f"{_FMT % u[2 * k]} {_FMT % u[2 * k + 1]} 0")
    lines.append(f"CELL_DATA {m}")
    lines.append("SCALARS von_mises double 1")
    lines.append("LOOKUP_TABLE default")
    for v in vm:
        lines.append(_FMT % v)
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path: str | Path) -> dict:
    """Read back a file produced by :func:`write_vtk`.

    Returns a dict with ``nodes`` (N, 2), ``triangles`` (T, 3),
    ``displacement`` (2N,) and ``von_mises`` (T,).
    """
    text = Path(path).read_text().splitlines()
    pos = 0

    def expect(prefix: str) -> str:
        nonlocal pos
        while pos < len(text) and not text[pos].strip():
            pos += 1
        if pos >= len(text) or not text[pos].startswith(prefix):
            got = text[pos] if pos < len(text) else "<eof>"
            raise ValidationError(f"{path}: expected '{prefix}', got '{got}'")
        line = text[pos]
        pos += 1
        return line

    expect("# vtk DataFile")
    pos += 1  # title line
    expect("ASCII")
    expect("DATASET UNSTRUCTURED_GRID")
    n = int(expect("POINTS").split()[1])
    nodes = np.empty((n, 2))
    for k in range(n):
        parts = text[pos].split()
        nodes[k] = (float(parts[0]), float(parts[1]))
        pos += 1
    m = int(expect("CELLS").split()[1])
    tris = np.empty((m, 3), dtype=np.int64)
    for k in range(m):
        parts = text[pos].split()
        if parts[0] != "3":
            raise ValidationError(f"{path}: only triangle cells supported")
        tris[k] = [int(parts[1]), int(parts[2]), int(parts[3])]
        pos += 1
    expect("CELL_TYPES")
    pos += m
    expect("POINT_DATA")
    expect("VECTORS displacement")
    u = np.empty(2 * n)
    for k in range(n):
        parts = text[pos].split()
        u[2 * k], u[2 * k + 1] = float(parts[0]), float(parts[1])
        pos += 1
    expect("CELL_DATA")
    expect("SCALARS von_mises")
    expect("LOOKUP_TABLE")
    vm = np.empty(m)
    for k in range(m):
        vm[k] = float(text[pos])
        pos += 1
    return {"nodes": nodes, "triangles": tris, "displacement": u, "von_mises": vm}
