"""Structured mesh builders: tensor-product rectangles and polar annuli.

These produce the reference component meshes and the small fixtures used in
tests.  Both builders emit counter-clockwise triangles, tagged boundary
edges, and optional ports.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, PortCurve, triangle_areas


def _fix_orientation(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    areas = triangle_areas(nodes, tris)
    flip = areas < 0.0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def rect_mesh(xs, ys, ports: dict[str, str] | None = None, region: int = 0) -> Mesh:
    """Tensor-product rectangle mesh on grid lines ``xs`` x ``ys``.

    Parameters
    ----------
    xs, ys : array-like
        Strictly increasing grid coordinates (at least 2 each).
    ports : dict, optional
        Map side -> port name for sides in {"left", "right", "bottom", "top"}.
        Port chains run +y on vertical sides and +x on horizontal sides.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    nx, ny = xs.size - 1, ys.size - 1
    if nx < 1 or ny < 1:
        raise ValueError("need at least a 1x1 grid")

    def nid(i: int, j: int) -> int:
        return i * (ny + 1) + j

    nodes = np.empty(((nx + 1) * (ny + 1), 2))
    for i in range(nx + 1):
        for j in range(ny + 1):
            nodes[nid(i, j)] = (xs[i], ys[j])

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i, j + 1), nid(i + 1, j + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    tris = _fix_orientation(nodes, np.asarray(tris, dtype=np.int64))

    edges = []
    tags = []
    side_nodes = {
        "left": [nid(0, j) for j in range(ny + 1)],
        "right": [nid(nx, j) for j in range(ny + 1)],
        "bottom": [nid(i, 0) for i in range(nx + 1)],
        "top": [nid(i, ny) for i in range(nx + 1)],
    }
    for side, chain in side_nodes.items():
        for a, b in zip(chain[:-1], chain[1:]):
            edges.append((a, b))
            tags.append(side)

    port_curves = []
    for side, name in (ports or {}).items():
        port_curves.append(PortCurve(name, np.asarray(side_nodes[side]), "straight"))

    return Mesh(nodes, tris, np.full(len(tris), region, dtype=np.int64),
                np.asarray(edges, dtype=np.int64), tuple(tags), tuple(port_curves))


def annulus_mesh(center, radii, n_theta: int,
                 inner_port: str | None = None, outer_port: str | None = None,
                 start_angle_deg: float = 0.0, region: int = 0,
                 inner_tag: str = "inner", outer_tag: str = "outer") -> Mesh:
    """Polar annulus mesh between radii[0] and radii[-1].

    ``radii`` lists the radial grid (ascending, at least 2 entries);
    ``n_theta`` equally spaced spokes close the loop.  Inner/outer circles
    become arc ports when named.
    """
    center = np.asarray(center, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    n_r = radii.size - 1
    if n_r < 1 or n_theta < 3:
        raise ValueError("need >= 2 radii and >= 3 spokes")

    angles = np.radians(start_angle_deg) + 2.0 * np.pi * np.arange(n_theta) / n_theta
    cos, sin = np.cos(angles), np.sin(angles)

    def nid(k: int, t: int) -> int:
        return k * n_theta + (t % n_theta)

    nodes = np.empty(((n_r + 1) * n_theta, 2))
    for k, r in enumerate(radii):
        nodes[k * n_theta:(k + 1) * n_theta, 0] = center[0] + r * cos
        nodes[k * n_theta:(k + 1) * n_theta, 1] = center[1] + r * sin

    tris = []
    for k in range(n_r):
        for t in range(n_theta):
            a, b = nid(k, t), nid(k, t + 1)
            c, d = nid(k + 1, t), nid(k + 1, t + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    tris = _fix_orientation(nodes, np.asarray(tris, dtype=np.int64))

    edges = []
    tags = []
    for t in range(n_theta):
        edges.append((nid(0, t), nid(0, t + 1)))
        tags.append(inner_tag)
    for t in range(n_theta):
        edges.append((nid(n_r, t), nid(n_r, t + 1)))
        tags.append(outer_tag)

    ports = []
    if inner_port:
        ports.append(PortCurve(inner_port, np.arange(n_theta), "arc",
                               (center[0], center[1]), float(radii[0]), closed=True))
    if outer_port:
        ports.append(PortCurve(outer_port, np.arange(n_r * n_theta, (n_r + 1) * n_theta),
                               "arc", (center[0], center[1]), float(radii[-1]), closed=True))

    return Mesh(nodes, tris, np.full(len(tris), region, dtype=np.int64),
                np.asarray(edges, dtype=np.int64), tuple(tags), tuple(ports))
