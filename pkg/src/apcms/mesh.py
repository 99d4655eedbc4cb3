"""Triangle meshes, interface curves and the online buffer-layer generator.

A :class:`Mesh` is an immutable P1 triangulation of a plane domain with named
boundary ports.  Ports are the curves along which components are coupled; a
port is an ordered chain of boundary nodes, either a straight polyline or a
circular arc with explicit center/radius so that rigid rotations can keep its
nodes exactly on the circle.

The module also provides the dynamically generated buffer layer: a thin strip
or annulus triangulated between two prescribed node loops without inserting
any interior node, so both boundary loops of the result reproduce the given
coordinates bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BufferQualityError, MeshError

log = logging.getLogger(__name__)

# Quality floor for generated buffer layers, in degrees.  Generation aborts
# rather than hand a degenerate strip to the solver.
BUFFER_MIN_ANGLE_DEG = 15.0

# Duplicate-node detection threshold, relative to the bounding-box diagonal.
DUPLICATE_NODE_REL_TOL = 1e-9

# Arc ports must keep their nodes on the circle to this relative tolerance.
ARC_REL_TOL = 1e-9


@dataclass(frozen=True)
class PortCurve:
    """Ordered chain of boundary nodes along which a component couples.

    Parameters
    ----------
    name : str
        Identifier, unique within its mesh.
    nodes : ndarray of int
        Node indices ordered monotonically along the curve.  For a closed
        curve the first node is not repeated at the end.
    kind : {"straight", "arc"}
        "arc" curves carry ``center``/``radius`` and are rotated
        analytically; "straight" curves are general polylines.
    center, radius : optional
        Circle data, required for ``kind == "arc"``.
    closed : bool
        True when the chain wraps around (last node connects to first).
    """

    name: str
    nodes: np.ndarray
    kind: str = "straight"
    center: tuple[float, float] | None = None
    radius: float | None = None
    closed: bool = False

    def __post_init__(self) -> None:
        nodes = np.ascontiguousarray(self.nodes, dtype=np.int64)
        if nodes.ndim != 1 or nodes.size < 2:
            raise MeshError(f"port '{self.name}': needs at least 2 nodes")
        if np.unique(nodes).size != nodes.size:
            raise MeshError(f"port '{self.name}': repeated node index")
        if self.kind not in ("straight", "arc"):
            raise MeshError(f"port '{self.name}': unknown kind '{self.kind}'")
        if self.kind == "arc" and (self.center is None or self.radius is None):
            raise MeshError(f"port '{self.name}': arc needs center and radius")
        nodes.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        if self.center is not None:
            object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if self.radius is not None:
            object.__setattr__(self, "radius", float(self.radius))

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.size)


@dataclass(frozen=True)
class BufferSpec:
    """Two node loops bounding a thin strip or annulus to be triangulated.

    ``inner`` comes from the stationary neighbour's port grid, ``outer`` from
    the rotated body's port grid.  ``closed`` selects annulus (True) versus
    open strip (False).  The loops must be disjoint point sets with positive
    clearance; for closed loops both must run in the same angular direction.
    """

    inner: np.ndarray
    outer: np.ndarray
    closed: bool = True

    def __post_init__(self) -> None:
        inner = np.ascontiguousarray(self.inner, dtype=np.float64)
        outer = np.ascontiguousarray(self.outer, dtype=np.float64)
        for label, loop in (("inner", inner), ("outer", outer)):
            if loop.ndim != 2 or loop.shape[1] != 2 or loop.shape[0] < 2:
                raise MeshError(f"buffer {label} loop: expected (n, 2) with n >= 2")
            if not np.isfinite(loop).all():
                raise MeshError(f"buffer {label} loop: non-finite coordinate")
        gap = cKDTree(outer).query(inner)[0].min()
        if gap <= 0.0:
            raise MeshError("buffer loops touch: zero thickness")
        inner.flags.writeable = False
        outer.flags.writeable = False
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "outer", outer)

    @property
    def thickness(self) -> float:
        """Minimum clearance between the two loops."""
        return float(cKDTree(self.outer).query(self.inner)[0].min())


@dataclass(frozen=True)
class Mesh:
    """Immutable P1 triangulation with region tags, boundary tags and ports.

    Attributes
    ----------
    nodes : (N, 2) float64
    triangles : (T, 3) int64, counter-clockwise
    regions : (T,) int64 region tag per triangle
    boundary_edges : (E, 2) int64
    boundary_tags : tuple of str, one per boundary edge
    ports : tuple of PortCurve
    """

    nodes: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: tuple[str, ...] = ()
    ports: tuple[PortCurve, ...] = ()

    def __post_init__(self) -> None:
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        regions = np.ascontiguousarray(self.regions, dtype=np.int64)
        edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64)
        if edges.size == 0:
            edges = edges.reshape(0, 2)
        tags = tuple(str(t) for t in self.boundary_tags)
        ports = tuple(self.ports)
        _validate_mesh(nodes, tris, regions, edges, tags, ports)
        for arr in (nodes, tris, regions, edges):
            arr.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "boundary_edges", edges)
        object.__setattr__(self, "boundary_tags", tags)
        object.__setattr__(self, "ports", ports)

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def num_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def num_dofs(self) -> int:
        """Two displacement components per node."""
        return 2 * self.num_nodes

    def port(self, name: str) -> PortCurve:
        for p in self.ports:
            if p.name == name:
                return p
        raise MeshError(f"no port named '{name}' (have {[p.name for p in self.ports]})")

    def boundary_node_set(self) -> set[int]:
        return set(np.unique(self.boundary_edges).tolist())

    def with_regions(self, region: int) -> "Mesh":
        """Copy of the mesh with every triangle assigned one region tag."""
        return Mesh(self.nodes, self.triangles,
                    np.full(self.num_triangles, int(region), dtype=np.int64),
                    self.boundary_edges, self.boundary_tags, self.ports)


def _assemble_mesh(nodes, triangles, regions, edges, tags, ports) -> Mesh:
    """Construct a Mesh, skipping invariant validation.

    Internal fast path for meshes that are valid by construction: rigid
    motions of validated meshes, and rebuilds from a recorded merge
    structure.  Everything else must go through the ``Mesh`` constructor.
    """
    mesh = object.__new__(Mesh)
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    regions = np.ascontiguousarray(regions, dtype=np.int64)
    edges = np.ascontiguousarray(edges, dtype=np.int64)
    for arr in (nodes, triangles, regions, edges):
        arr.flags.writeable = False
    object.__setattr__(mesh, "nodes", nodes)
    object.__setattr__(mesh, "triangles", triangles)
    object.__setattr__(mesh, "regions", regions)
    object.__setattr__(mesh, "boundary_edges", edges)
    object.__setattr__(mesh, "boundary_tags", tuple(tags))
    object.__setattr__(mesh, "ports", tuple(ports))
    return mesh


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def triangle_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Signed areas; positive for counter-clockwise vertex order."""
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    u = p1 - p0
    v = p2 - p0
    return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


def _validate_mesh(nodes, tris, regions, edges, tags, ports) -> None:
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must have shape (N, 2)")
    if not np.isfinite(nodes).all():
        raise MeshError("non-finite node coordinate")
    n = nodes.shape[0]
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshError("triangles must have shape (T, 3)")
    if regions.shape != (tris.shape[0],):
        raise MeshError("regions must be one tag per triangle")
    if tris.size and (tris.min() < 0 or tris.max() >= n):
        raise MeshError("triangle node index out of range")
    areas = triangle_areas(nodes, tris)
    if tris.size and areas.min() <= 0.0:
        worst = int(np.argmin(areas))
        raise MeshError(f"triangle {worst} has non-positive area {areas.min():.3e}")

    bbox_diag = float(np.linalg.norm(nodes.max(axis=0) - nodes.min(axis=0))) if n else 0.0
    if n > 1 and bbox_diag > 0.0:
        pairs = cKDTree(nodes).query_pairs(r=DUPLICATE_NODE_REL_TOL * bbox_diag)
        if pairs:
            i, j = sorted(pairs)[0]
            raise MeshError(f"duplicate nodes {i} and {j} within tolerance")

    if edges.ndim != 2 or edges.shape[1] != 2:
        raise MeshError("boundary_edges must have shape (E, 2)")
    if len(tags) != edges.shape[0]:
        raise MeshError("need one boundary tag per boundary edge")
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise MeshError("boundary edge node index out of range")

    boundary_nodes = set(np.unique(edges).tolist())
    edge_set = {frozenset(e) for e in edges.tolist()}
    seen = set()
    for port in ports:
        if port.name in seen:
            raise MeshError(f"duplicate port name '{port.name}'")
        seen.add(port.name)
        idx = port.nodes
        if idx.max() >= n:
            raise MeshError(f"port '{port.name}': node index out of range")
        for k in idx.tolist():
            if k not in boundary_nodes:
                raise MeshError(f"port '{port.name}': node {k} not on boundary")
        chain = list(idx.tolist())
        pairs = list(zip(chain[:-1], chain[1:]))
        if port.closed:
            pairs.append((chain[-1], chain[0]))
        for a, b in pairs:
            if frozenset((a, b)) not in edge_set:
                raise MeshError(
                    f"port '{port.name}': consecutive nodes {a},{b} share no boundary edge")
        if port.kind == "arc":
            c = np.asarray(port.center)
            r = np.linalg.norm(nodes[idx] - c, axis=1)
            if np.abs(r - port.radius).max() > ARC_REL_TOL * port.radius:
                raise MeshError(
                    f"port '{port.name}': node departs arc by "
                    f"{np.abs(r - port.radius).max():.3e} (radius {port.radius})")


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle over all triangles, in degrees."""
    return float(_tri_min_angles(mesh.nodes, mesh.triangles).min())


def _tri_min_angles(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = nodes[triangles]                      # (T, 3, 2)
    angles = np.empty((triangles.shape[0], 3))
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.where(na * nb > 0.0, na * nb, 1.0)
        cosang = np.clip(np.einsum("ij,ij->i", a, b) / denom, -1.0, 1.0)
        angles[:, k] = np.degrees(np.arccos(cosang))
        angles[na * nb == 0.0, k] = 0.0
    return angles.min(axis=1)


def _corner_angles(p0, p1, p2) -> float:
    """Minimum interior angle of one triangle given its vertices."""
    pts = (np.asarray(p0), np.asarray(p1), np.asarray(p2))
    worst = 180.0
    for k in range(3):
        a = pts[(k + 1) % 3] - pts[k]
        b = pts[(k + 2) % 3] - pts[k]
        na = float(np.hypot(*a))
        nb = float(np.hypot(*b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        c = min(1.0, max(-1.0, float(a @ b) / (na * nb)))
        worst = min(worst, math.degrees(math.acos(c)))
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def mesh_from_dict(data: dict) -> Mesh:
    """Build a mesh from the on-disk JSON structure, fixing orientation."""
    try:
        nodes = np.asarray(data["nodes"], dtype=np.float64)
        raw_tris = data["triangles"]
        raw_edges = data.get("boundary_edges", [])
        raw_ports = data.get("ports", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"malformed mesh data: {exc}") from None

    tris = np.empty((len(raw_tris), 3), dtype=np.int64)
    regions = np.zeros(len(raw_tris), dtype=np.int64)
    for t, row in enumerate(raw_tris):
        if len(row) == 4:
            tris[t] = row[:3]
            regions[t] = row[3]
        elif len(row) == 3:
            tris[t] = row
        else:
            raise MeshError(f"triangle row {t}: expected [i, j, k, region]")

    # Auto-correct clockwise triangles before the invariant check runs.
    if tris.size:
        areas = triangle_areas(nodes, tris)
        flip = areas < 0.0
        tris[flip] = tris[flip][:, [0, 2, 1]]

    edges = np.empty((len(raw_edges), 2), dtype=np.int64)
    tags = []
    for e, row in enumerate(raw_edges):
        if len(row) != 3:
            raise MeshError(f"boundary edge row {e}: expected [i, j, tag]")
        edges[e] = row[:2]
        tags.append(str(row[2]))

    edge_set = {frozenset(e) for e in edges.tolist()}
    ports = []
    for entry in raw_ports:
        try:
            name = entry["name"]
            pnodes = np.asarray(entry["nodes"], dtype=np.int64)
            kind = entry.get("kind", "straight")
        except (KeyError, TypeError, ValueError) as exc:
            raise MeshError(f"malformed port entry: {exc}") from None
        center = entry.get("center")
        radius = entry.get("radius")
        closed = (pnodes.size > 2
                  and frozenset((int(pnodes[-1]), int(pnodes[0]))) in edge_set)
        ports.append(PortCurve(name=name, nodes=pnodes, kind=kind,
                               center=tuple(center) if center is not None else None,
                               radius=radius, closed=closed))

    return Mesh(nodes, tris, regions, edges, tuple(tags), tuple(ports))


def mesh_to_dict(mesh: Mesh) -> dict:
    tris = [[int(a), int(b), int(c), int(r)]
            for (a, b, c), r in zip(mesh.triangles.tolist(), mesh.regions.tolist())]
    edges = [[int(a), int(b), tag]
             for (a, b), tag in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)]
    ports = []
    for p in mesh.ports:
        entry: dict = {"name": p.name, "nodes": p.nodes.tolist(), "kind": p.kind}
        if p.kind == "arc":
            entry["center"] = [p.center[0], p.center[1]]
            entry["radius"] = p.radius
        ports.append(entry)
    return {"nodes": mesh.nodes.tolist(), "triangles": tris,
            "boundary_edges": edges, "ports": ports}


def load_mesh(path: str | Path) -> Mesh:
    """Read a mesh JSON file; raises MeshError on any invariant violation."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read mesh file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MeshError(f"mesh file {path} is not valid JSON: {exc}") from None
    return mesh_from_dict(data)


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(mesh_to_dict(mesh), fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

def rotate_mesh(mesh: Mesh, center: tuple[float, float], angle_deg: float) -> Mesh:
    """Rigidly rotate a mesh about ``center`` by ``angle_deg`` degrees.

    Nodes belonging to arc ports are rotated analytically (angle shift on
    their own circle) so they remain exactly on the arc under repeated
    rotation; everything else gets the plain rotation matrix.
    """
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    ctr = np.asarray(center, dtype=np.float64)
    rel = mesh.nodes - ctr
    nodes = np.empty_like(mesh.nodes)
    nodes[:, 0] = ctr[0] + c * rel[:, 0] - s * rel[:, 1]
    nodes[:, 1] = ctr[1] + s * rel[:, 0] + c * rel[:, 1]

    new_ports = []
    for p in mesh.ports:
        if p.kind != "arc":
            new_ports.append(p)
            continue
        old_c = np.asarray(p.center)
        rc = old_c - ctr
        new_c = (ctr[0] + c * rc[0] - s * rc[1], ctr[1] + s * rc[0] + c * rc[1])
        ang = np.arctan2(mesh.nodes[p.nodes, 1] - old_c[1],
                         mesh.nodes[p.nodes, 0] - old_c[0]) + th
        nodes[p.nodes, 0] = new_c[0] + p.radius * np.cos(ang)
        nodes[p.nodes, 1] = new_c[1] + p.radius * np.sin(ang)
        new_ports.append(PortCurve(p.name, p.nodes, p.kind, new_c, p.radius, p.closed))

    # A rigid motion preserves every validated invariant; skip re-checking.
    return _assemble_mesh(nodes, mesh.triangles, mesh.regions, mesh.boundary_edges,
                          mesh.boundary_tags, tuple(new_ports))


def place_mesh(mesh: Mesh, translate: tuple[float, float] = (0.0, 0.0),
               rotate_deg: float = 0.0) -> Mesh:
    """Placement transform: rotate about the origin, then translate."""
    out = mesh
    if rotate_deg != 0.0:
        out = rotate_mesh(out, (0.0, 0.0), rotate_deg)
    tx, ty = float(translate[0]), float(translate[1])
    if tx == 0.0 and ty == 0.0:
        return out
    nodes = out.nodes + np.array([tx, ty])
    ports = []
    for p in out.ports:
        if p.kind == "arc":
            ports.append(PortCurve(p.name, p.nodes, p.kind,
                                   (p.center[0] + tx, p.center[1] + ty),
                                   p.radius, p.closed))
        else:
            ports.append(p)
    return _assemble_mesh(nodes, out.triangles, out.regions, out.boundary_edges,
                          out.boundary_tags, tuple(ports))


# ---------------------------------------------------------------------------
# buffer layer generation
# ---------------------------------------------------------------------------

def generate_buffer(spec: BufferSpec) -> Mesh:
    """Triangulate the strip between two node loops without interior nodes.

    Advancing-front "zipper": walk both loops simultaneously, at each step
    emitting the triangle (advance inner or advance outer) whose minimum
    interior angle is larger.  Node coordinates of the result reproduce the
    spec's loops bit for bit: inner loop first, outer loop second.

    Raises
    ------
    BufferQualityError
        If the best triangulation still contains an angle below 15 degrees.
    MeshError
        If the result would self-intersect (area mismatch against the exact
        strip area), which signals loop geometry the zipper cannot handle.
    """
    inner, outer, closed = spec.inner, spec.outer, spec.closed
    n, m = inner.shape[0], outer.shape[0]
    nodes = np.vstack([inner, outer])

    if closed:
        steps_i, steps_j = n, m
        j0 = int(np.argmin(np.linalg.norm(outer - inner[0], axis=1)))
        if _loop_turn(inner) * _loop_turn(outer) < 0.0:
            raise MeshError("buffer loops wind in opposite directions")
    else:
        steps_i, steps_j = n - 1, m - 1
        j0 = 0
        # Chains must run in the same direction: compare rung pairings.
        aligned = (np.linalg.norm(inner[0] - outer[0]) + np.linalg.norm(inner[-1] - outer[-1]))
        crossed = (np.linalg.norm(inner[0] - outer[-1]) + np.linalg.norm(inner[-1] - outer[0]))
        if crossed < aligned:
            raise MeshError("buffer strip loops run in opposite directions")

    def inner_at(a: int) -> int:
        return a % n if closed else a

    def outer_at(a: int) -> int:
        return (j0 + a) % m if closed else a

    tris = []
    ai = aj = 0
    while ai < steps_i or aj < steps_j:
        ii, jj = inner_at(ai), outer_at(aj)
        cand_in = cand_out = None
        if ai < steps_i:
            cand_in = (ii, inner_at(ai + 1), n + jj)
        if aj < steps_j:
            cand_out = (ii, n + jj, n + outer_at(aj + 1))
        if cand_in is not None and cand_out is not None:
            score_in = _corner_angles(*nodes[list(cand_in)])
            score_out = _corner_angles(*nodes[list(cand_out)])
            take_in = score_in >= score_out
        else:
            take_in = cand_in is not None
        if take_in:
            tris.append(cand_in)
            ai += 1
        else:
            tris.append(cand_out)
            aj += 1

    triangles = np.asarray(tris, dtype=np.int64)
    areas = triangle_areas(nodes, triangles)
    flip = areas < 0.0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    # Self-intersection / fold-over check: triangle areas must tile the strip.
    covered = float(np.abs(areas).sum())
    exact = _strip_area(inner, outer, closed)
    if not math.isclose(covered, exact, rel_tol=1e-9, abs_tol=1e-14):
        raise MeshError(
            f"buffer triangulation does not tile the strip "
            f"(covered {covered:.12e}, exact {exact:.12e}); loops likely invalid")

    edges = []
    tags = []
    for a in range(n if closed else n - 1):
        edges.append((a, (a + 1) % n))
        tags.append("inner")
    for a in range(m if closed else m - 1):
        edges.append((n + a, n + (a + 1) % m))
        tags.append("outer")
    if not closed:
        edges.append((0, n))
        tags.append("side0")
        edges.append((n - 1, n + m - 1))
        tags.append("side1")

    ports = (
        PortCurve("inner", np.arange(n), "straight", closed=closed),
        PortCurve("outer", np.arange(n, n + m), "straight", closed=closed),
    )
    mesh = Mesh(nodes, triangles, np.zeros(len(tris), dtype=np.int64),
                np.asarray(edges, dtype=np.int64), tuple(tags), ports)

    quality = min_angle(mesh)
    log.debug("buffer: %d triangles, min angle %.2f deg", mesh.num_triangles, quality)
    if quality < BUFFER_MIN_ANGLE_DEG:
        raise BufferQualityError(
            f"buffer min angle {quality:.2f} deg below {BUFFER_MIN_ANGLE_DEG} deg "
            f"(inner {n} nodes, outer {m} nodes, thickness {spec.thickness:.3g})")
    return mesh


def _shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _loop_turn(loop: np.ndarray) -> float:
    """Sign of a closed loop's winding (positive = counter-clockwise)."""
    return math.copysign(1.0, _shoelace(loop))


def _strip_area(inner: np.ndarray, outer: np.ndarray, closed: bool) -> float:
    """Exact area between the loops (shoelace)."""
    if closed:
        return abs(_shoelace(outer)) - abs(_shoelace(inner))
    ring = np.vstack([inner, outer[::-1]])
    return abs(_shoelace(ring))


# ---------------------------------------------------------------------------
# conforming merge
# ---------------------------------------------------------------------------

def merge_conforming(meshes: list[Mesh], tol: float = 1e-9) -> Mesh:
    """Union of meshes with coincident nodes unified.

    Glue surfaces are detected automatically: port pairs from different input
    meshes whose curves touch geometrically must match node for node within
    ``tol`` (anything else raises a MeshError naming the ports).  Boundary
    edges mirrored by the glue partner become interior and are dropped, as
    are ports that end up fully interior.
    """
    mesh, _ = merge_with_maps(meshes, tol)
    return mesh


def merge_with_maps(meshes: list[Mesh], tol: float = 1e-9) -> tuple[Mesh, list[np.ndarray]]:
    """Like :func:`merge_conforming`, also returning old-to-new node maps."""
    if not meshes:
        raise MeshError("nothing to merge")
    _check_port_conformity(meshes, tol)

    all_nodes = np.vstack([m.nodes for m in meshes])
    total = all_nodes.shape[0]

    # Union-find over coincident nodes; representative = lowest index.
    parent = np.arange(total)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in cKDTree(all_nodes).query_pairs(r=tol):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    rep = np.array([find(a) for a in range(total)])
    keep = np.flatnonzero(rep == np.arange(total))
    new_index = np.full(total, -1, dtype=np.int64)
    new_index[keep] = np.arange(keep.size)
    remap_all = new_index[rep]

    offsets = np.cumsum([0] + [m.num_nodes for m in meshes])
    maps = [remap_all[offsets[k]:offsets[k + 1]] for k in range(len(meshes))]

    nodes = all_nodes[keep]
    triangles = np.vstack([remap_all[m.triangles + offsets[k]]
                           for k, m in enumerate(meshes)])
    regions = np.concatenate([m.regions for m in meshes])

    edge_rows = []
    tag_rows: list[str] = []
    for k, m in enumerate(meshes):
        if m.boundary_edges.size:
            edge_rows.append(remap_all[m.boundary_edges + offsets[k]])
            tag_rows.extend(m.boundary_tags)
    edges = np.vstack(edge_rows) if edge_rows else np.empty((0, 2), dtype=np.int64)

    # Edges appearing twice (glued from both sides) are interior: drop all copies.
    counts: dict[frozenset, int] = {}
    for e in edges.tolist():
        key = frozenset(e)
        counts[key] = counts.get(key, 0) + 1
    keep_edge = [counts[frozenset(e)] == 1 for e in edges.tolist()]
    edges = edges[keep_edge]
    tags = tuple(t for t, k in zip(tag_rows, keep_edge) if k)

    boundary_nodes = set(np.unique(edges).tolist())
    ports: list[PortCurve] = []
    names_seen: dict[str, int] = {}
    for k, m in enumerate(meshes):
        for p in m.ports:
            mapped = maps[k][p.nodes]
            if any(int(i) not in boundary_nodes for i in mapped.tolist()):
                continue  # glued away
            name = p.name
            if name in names_seen:
                names_seen[name] += 1
                name = f"{name}#{names_seen[p.name]}"
            else:
                names_seen[name] = 0
            ports.append(PortCurve(name, mapped, p.kind, p.center, p.radius, p.closed))

    merged = Mesh(nodes, triangles, regions, edges, tags, tuple(ports))
    return merged, maps


class ConformingMerger:
    """Repeated conforming merges that share one node-pairing structure.

    When the same family of meshes is merged again and again with only
    rigid per-mesh motion and re-triangulation in between — parts of an
    assembly turning while every glued interface keeps its node order —
    the coincidence pattern never changes.  The first merge runs the full
    pairing; later calls re-scatter coordinates and remap connectivity,
    which is bit-for-bit the same result at a fraction of the cost.
    Every reuse re-verifies that glued nodes still coincide within the
    merge tolerance and falls back to a full merge when anything (node
    counts, boundary chains, positions) no longer matches.
    """

    def __init__(self, tol: float = 1e-9) -> None:
        self.tol = float(tol)
        self._snapshot: dict | None = None

    def merge(self, meshes: list[Mesh]) -> tuple[Mesh, list[np.ndarray]]:
        rebuilt = self._rebuild(meshes)
        if rebuilt is not None:
            return rebuilt
        merged, maps = merge_with_maps(meshes, self.tol)
        self._snapshot = {
            "maps": maps,
            "num_nodes": [m.num_nodes for m in meshes],
            "n_merged": merged.num_nodes,
            "edges": merged.boundary_edges,
            "tags": merged.boundary_tags,
            "edge_src": [m.boundary_edges for m in meshes],
            "boundary_nodes": frozenset(np.unique(merged.boundary_edges).tolist()),
        }
        return merged, maps

    def _rebuild(self, meshes: list[Mesh]) -> tuple[Mesh, list[np.ndarray]] | None:
        snap = self._snapshot
        if snap is None or len(meshes) != len(snap["num_nodes"]):
            return None
        if any(m.num_nodes != n for m, n in zip(meshes, snap["num_nodes"])):
            return None
        if any(
            m.boundary_edges is not e and not np.array_equal(m.boundary_edges, e)
            for m, e in zip(meshes, snap["edge_src"])
        ):
            return None

        maps = snap["maps"]
        nodes = np.empty((snap["n_merged"], 2))
        # Reverse order: at a glued node the earliest mesh wrote the
        # representative coordinate in the full merge, so it must win here.
        for m, node_map in zip(reversed(meshes), list(reversed(maps))):
            nodes[node_map] = m.nodes
        for m, node_map in zip(meshes, maps):
            drift = np.abs(nodes[node_map] - m.nodes).max()
            if drift > self.tol:
                return None

        triangles = np.vstack([mp[m.triangles] for m, mp in zip(meshes, maps)])
        regions = np.concatenate([m.regions for m in meshes])

        boundary_nodes = snap["boundary_nodes"]
        ports: list[PortCurve] = []
        names_seen: dict[str, int] = {}
        for k, m in enumerate(meshes):
            for p in m.ports:
                mapped = maps[k][p.nodes]
                if any(int(i) not in boundary_nodes for i in mapped.tolist()):
                    continue
                name = p.name
                if name in names_seen:
                    names_seen[name] += 1
                    name = f"{name}#{names_seen[p.name]}"
                else:
                    names_seen[name] = 0
                ports.append(
                    PortCurve(name, mapped, p.kind, p.center, p.radius, p.closed)
                )

        merged = _assemble_mesh(
            nodes, triangles, regions, snap["edges"], snap["tags"], tuple(ports)
        )
        return merged, maps


def _check_port_conformity(meshes: list[Mesh], tol: float) -> None:
    """Ports from different meshes that touch must coincide node for node."""
    for a in range(len(meshes)):
        for b in range(a + 1, len(meshes)):
            for pa in meshes[a].ports:
                pts_a = meshes[a].nodes[pa.nodes]
                for pb in meshes[b].ports:
                    pts_b = meshes[b].nodes[pb.nodes]
                    if not (_touches(pts_a, pts_b, pb.closed, tol)
                            or _touches(pts_b, pts_a, pa.closed, tol)):
                        continue
                    if pts_a.shape[0] != pts_b.shape[0]:
                        raise MeshError(
                            f"unmatched port node: '{pa.name}' ({pts_a.shape[0]} nodes) "
                            f"vs '{pb.name}' ({pts_b.shape[0]} nodes)")
                    d, _ = cKDTree(pts_b).query(pts_a)
                    if d.max() > tol:
                        k = int(np.argmax(d))
                        raise MeshError(
                            f"unmatched port node: '{pa.name}' node at "
                            f"({pts_a[k, 0]:.9g}, {pts_a[k, 1]:.9g}) is {d.max():.3e} "
                            f"from '{pb.name}' (tol {tol:.1e})")


def _touches(pts: np.ndarray, chain: np.ndarray, chain_closed: bool, tol: float) -> bool:
    """True if any point of ``pts`` lies within tol of the polyline ``chain``."""
    lo, hi = chain.min(axis=0) - tol, chain.max(axis=0) + tol
    pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    if pts.shape[0] == 0:
        return False
    segs_a = chain if chain_closed else chain[:-1]
    if segs_a.shape[0] == 0:
        return False
    segs_b = np.roll(chain, -1, axis=0) if chain_closed else chain[1:]
    d = segs_b - segs_a                           # (S, 2)
    ls = np.einsum("ij,ij->i", d, d)
    ls[ls == 0.0] = 1.0
    rel = pts[:, None, :] - segs_a[None, :, :]    # (P, S, 2)
    t = np.clip(np.einsum("psj,sj->ps", rel, d) / ls, 0.0, 1.0)
    off = rel - t[:, :, None] * d[None, :, :]
    d2 = np.einsum("psj,psj->ps", off, off)
    return bool(d2.min() <= tol * tol)


def port_arc_lengths(mesh: Mesh, port: PortCurve) -> np.ndarray:
    """Cumulative arc length along a port chain (first node at 0)."""
    pts = mesh.nodes[port.nodes]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])
