"""Offline training data for a single component archetype.

An archetype bundles a reference-frame mesh with everything the online
stage needs per port: a basis of port modes, one harmonic extension per
mode (lifting the mode into the component interior), and index sets that
split the mesh DoFs into port / clamped / interior groups.  Interior
"bubble" corrections for a given material are computed here with the full
finite-element operator; their reduced-basis counterparts live in
:mod:`apcms.rb`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import TrainingError, ValidationError
from .fem import (
    AffineOperator,
    Field,
    MaterialParams,
    SpdFactor,
    area_masses,
    assemble_load,
    build_affine_operator,
    edge_masses,
    factorize_spd,
    scalar_laplacian,
)
from .mesh import Mesh, PortCurve, port_arc_lengths

__all__ = [
    "PortSpace",
    "Archetype",
    "build_port_modes",
    "port_dof_indices",
    "clamped_node_indices",
    "interior_dofs",
    "harmonic_extension",
    "build_archetype",
    "FEBubbleSolver",
    "solve_bubble_fe",
    "solve_force_bubble_fe",
]


def port_dof_indices(port: PortCurve) -> np.ndarray:
    """Interleaved (x, y) DoF indices along a port chain, in chain order."""
    out = np.empty(2 * len(port.nodes), dtype=np.int64)
    out[0::2] = 2 * port.nodes
    out[1::2] = 2 * port.nodes + 1
    return out


def clamped_node_indices(mesh: Mesh, clamped_tags: tuple[str, ...]) -> np.ndarray:
    """Sorted node indices lying on boundary edges with a clamped tag."""
    nodes: set[int] = set()
    for edge, tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if tag in clamped_tags:
            nodes.add(int(edge[0]))
            nodes.add(int(edge[1]))
    return np.array(sorted(nodes), dtype=np.int64)


def interior_dofs(mesh: Mesh, clamped_tags: tuple[str, ...] = ()) -> np.ndarray:
    """DoFs not attached to any port node or clamped-boundary node.

    Both displacement components of a node are excluded together, so the
    result always holds full (x, y) pairs in sorted order.
    """
    excluded = set()
    for port in mesh.ports:
        excluded.update(int(n) for n in port.nodes)
    excluded.update(int(n) for n in clamped_node_indices(mesh, clamped_tags))
    keep = [n for n in range(mesh.num_nodes) if n not in excluded]
    out = np.empty(2 * len(keep), dtype=np.int64)
    out[0::2] = 2 * np.array(keep, dtype=np.int64)
    out[1::2] = out[0::2] + 1
    return out


@dataclass(frozen=True)
class PortSpace:
    """Orthonormal basis of displacement modes on one port.

    ``modes`` has shape ``(2 * n_port_nodes, count)``; rows follow the
    port chain with interleaved (x, y) components.  ``kind`` is ``"full"``
    (one mode per DoF, the identity basis) or ``"eigen"`` (smoothest
    eigenvectors of the 1D chain Laplacian along the port, paired per
    displacement component).
    """

    port: str
    kind: str
    modes: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "modes", np.asarray(self.modes, dtype=float))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=float))
        self.modes.setflags(write=False)
        self.eigenvalues.setflags(write=False)
        if self.kind not in ("full", "eigen"):
            raise ValidationError(f"unknown port-space kind {self.kind!r}")
        gram = self.modes.T @ self.modes
        if not np.allclose(gram, np.eye(self.count), atol=1e-10):
            raise ValidationError(f"port {self.port!r}: mode basis is not orthonormal")

    @property
    def count(self) -> int:
        return self.modes.shape[1]

    def sliced(self, count: int) -> "PortSpace":
        """First ``count`` modes of this basis (for mode-count studies)."""
        if count > self.count:
            raise ValidationError(
                f"port {self.port!r}: requested {count} modes, trained {self.count}"
            )
        if count % 2 != 0 or count < 2:
            raise ValidationError("port mode count must be even and >= 2")
        return PortSpace(
            self.port, self.kind, self.modes[:, :count], self.eigenvalues[:count]
        )


def _chain_laplacian(lengths: np.ndarray, closed: bool) -> np.ndarray:
    """1D FE Laplacian of a node chain with given segment lengths.

    Open chains get natural (Neumann) ends; closed chains wrap around.
    The constant vector is always in the kernel.
    """
    n = len(lengths) + (0 if closed else 1)
    L = np.zeros((n, n))
    for s, h in enumerate(lengths):
        i, j = s, (s + 1) % n
        w = 1.0 / h
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w
    return L


def build_port_modes(mesh: Mesh, port_name: str, kind: str, count: int | None = None) -> PortSpace:
    """Train the displacement-mode basis for one port.

    ``kind="full"`` returns the identity basis over all port DoFs.
    ``kind="eigen"`` solves the chain-Laplacian eigenproblem along the
    port (arc-length weighted, periodic when the port is closed), pairs
    each scalar eigenvector with the x and y displacement components, and
    keeps the first ``count`` columns.  ``count`` must be even so the
    basis stays closed under in-plane rotation of the component.
    """
    port = mesh.port(port_name)
    n_dofs = 2 * len(port.nodes)
    if kind == "full":
        if count is not None and count != n_dofs:
            raise ValidationError(
                f"port {port_name!r}: full basis has exactly {n_dofs} modes"
            )
        return PortSpace(port_name, "full", np.eye(n_dofs), np.zeros(n_dofs))
    if kind != "eigen":
        raise ValidationError(f"unknown port-space kind {kind!r}")
    if count is None:
        raise ValidationError("eigen-reduced port basis needs an explicit mode count")
    if count % 2 != 0 or count < 2:
        raise ValidationError("port mode count must be even and >= 2")
    if count > n_dofs:
        raise ValidationError(
            f"port {port_name!r}: requested {count} modes but the port has {n_dofs} DoFs"
        )
    if port.closed:
        ring = mesh.nodes[np.append(port.nodes, port.nodes[0])]
        lengths = np.linalg.norm(np.diff(ring, axis=0), axis=1)
        L = _chain_laplacian(lengths, closed=True)
    else:
        lengths = np.diff(port_arc_lengths(mesh, port))
        L = _chain_laplacian(lengths, closed=False)
    evals, evecs = scipy.linalg.eigh(L)
    modes = np.zeros((n_dofs, count))
    pair_vals = np.zeros(count)
    for col in range(count):
        scalar = evecs[:, col // 2]
        comp = col % 2  # x then y for each scalar shape
        modes[comp::2, col] = scalar
        pair_vals[col] = evals[col // 2]
    # eigh returns orthonormal scalar vectors and the x/y interleaving
    # keeps columns disjoint, but re-orthonormalize to guard roundoff.
    q, _ = np.linalg.qr(modes)
    # Keep the sign convention of the raw modes for reproducibility.
    signs = np.sign(np.einsum("ij,ij->j", q, modes))
    signs[signs == 0] = 1.0
    return PortSpace(port_name, "eigen", q * signs, pair_vals)


def harmonic_extension(
    mesh: Mesh,
    laplacian: sp.csr_array,
    laplacian_factor: SpdFactor,
    free_nodes: np.ndarray,
    port: PortCurve,
    mode: np.ndarray,
) -> Field:
    """Lift one port mode into the component interior.

    Each displacement component is extended independently by a discrete
    Laplace solve: the mode values are imposed on the owning port, zero on
    every other port and on clamped boundaries, and the interior follows
    harmonically.  ``laplacian_factor`` must factorize the free-node block
    of ``laplacian``.  The result is material-independent.
    """
    n = mesh.num_nodes
    out = np.zeros(2 * n)
    for comp in range(2):
        values = np.zeros(n)
        values[port.nodes] = mode[comp::2]
        rhs = -(laplacian @ values)[free_nodes]
        sol = values.copy()
        sol[free_nodes] = laplacian_factor.solve(rhs)
        out[comp::2] = sol
    return out


@dataclass
class Archetype:
    """One trained component: mesh, operator, port bases, and extensions.

    ``extensions[(port, k)]`` is the harmonic lift of mode ``k`` of
    ``port`` over the whole mesh (zero on other ports and clamped
    boundaries).  ``interior`` indexes the DoFs eliminated by static
    condensation; ``port_dofs[name]`` gives each port's interleaved DoFs
    in chain order.
    """

    name: str
    mesh: Mesh
    operator: AffineOperator
    clamped_tags: tuple[str, ...]
    port_spaces: dict[str, PortSpace]
    extensions: dict[tuple[str, int], Field]
    interior: np.ndarray
    port_dofs: dict[str, np.ndarray]
    body_mass: np.ndarray = field(default=None)  # type: ignore[assignment]
    edge_mass: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.body_mass is None:
            self.body_mass = area_masses(self.mesh)
        for tag in set(self.mesh.boundary_tags):
            if tag not in self.edge_mass:
                self.edge_mass[tag] = edge_masses(self.mesh, tag)

    @property
    def port_names(self) -> tuple[str, ...]:
        return tuple(self.port_spaces)

    def mode_count(self, port: str) -> int:
        return self.port_spaces[port].count

    def extension_for(self, port: str, coeffs: np.ndarray) -> Field:
        """Extension of an arbitrary combination of one port's modes.

        Extensions are linear in the port data, so the lift of a mode
        combination is the same combination of the stored lifts.
        """
        out = np.zeros(2 * self.mesh.num_nodes)
        for k in range(self.port_spaces[port].count):
            c = coeffs[k]
            if c != 0.0:
                out += c * self.extensions[(port, k)]
        return out


def build_archetype(
    name: str,
    mesh: Mesh,
    port_kinds: dict[str, tuple[str, int | None]],
    clamped_tags: tuple[str, ...] = (),
) -> Archetype:
    """Run the material-independent part of offline training.

    ``port_kinds`` maps each port name to ``(kind, count)`` as accepted by
    :func:`build_port_modes`.  Every port of the mesh must be covered; the
    kind ``"none"`` lists a port without training modes for it (used for
    the adaptive interface of a rotating body, whose modes live on the
    stationary side of the interface).
    """
    mesh_ports = {p.name for p in mesh.ports}
    if set(port_kinds) != mesh_ports:
        raise ValidationError(
            f"archetype {name!r}: port training spec {sorted(port_kinds)} does not "
            f"match mesh ports {sorted(mesh_ports)}"
        )
    clamped_nodes = set(int(n) for n in clamped_node_indices(mesh, clamped_tags))
    seen: dict[int, str] = {}
    for p in mesh.ports:
        for node in p.nodes:
            node = int(node)
            if node in clamped_nodes:
                raise ValidationError(
                    f"archetype {name!r}: port {p.name!r} touches a clamped boundary node"
                )
            if node in seen:
                raise ValidationError(
                    f"archetype {name!r}: ports {seen[node]!r} and {p.name!r} share a node"
                )
            seen[node] = p.name

    port_spaces = {
        pname: build_port_modes(mesh, pname, kind, count)
        for pname, (kind, count) in sorted(port_kinds.items())
        if kind != "none"
    }
    port_dofs = {p.name: port_dof_indices(p) for p in mesh.ports}
    interior = interior_dofs(mesh, clamped_tags)

    # One Laplacian factorization serves every extension: the Dirichlet
    # set (all port nodes plus clamped nodes) is the same for each mode.
    L = scalar_laplacian(mesh)
    constrained = np.array(sorted(set(seen) | clamped_nodes), dtype=np.int64)
    free_nodes = np.setdiff1d(np.arange(mesh.num_nodes), constrained)
    if len(free_nodes) == 0:
        raise TrainingError(f"archetype {name!r}: no interior nodes to extend into")
    lap_factor = factorize_spd(L[np.ix_(free_nodes, free_nodes)].tocsr())

    extensions: dict[tuple[str, int], Field] = {}
    for pname, space in port_spaces.items():
        port = mesh.port(pname)
        for k in range(space.count):
            extensions[(pname, k)] = harmonic_extension(
                mesh, L, lap_factor, free_nodes, port, space.modes[:, k]
            )

    return Archetype(
        name=name,
        mesh=mesh,
        operator=build_affine_operator(mesh),
        clamped_tags=tuple(clamped_tags),
        port_spaces=port_spaces,
        extensions=extensions,
        interior=interior,
        port_dofs=port_dofs,
    )


class FEBubbleSolver:
    """Full-order interior corrections at one material point.

    Factorizes the interior block of the operator once and reuses it for
    every port mode and for the body-load bubble, so training loops cost
    one factorization plus one triangular solve per right-hand side.
    """

    def __init__(self, archetype: Archetype, mu: MaterialParams):
        self.archetype = archetype
        self.mu = mu
        I = archetype.interior
        A = archetype.operator.assemble(mu)
        self._A = A
        self._factor = factorize_spd(A[np.ix_(I, I)].tocsc())

    @property
    def solve_count(self) -> int:
        return self._factor.solve_count

    def bubble(self, extension: Field) -> Field:
        """Interior correction making ``extension + bubble`` operator-harmonic."""
        I = self.archetype.interior
        rhs = -(self._A @ extension)[I]
        out = np.zeros_like(extension)
        out[I] = self._factor.solve(rhs)
        return out

    def force_bubble(self, load_mu: MaterialParams | None = None) -> Field:
        """Interior response to a material's body force and tractions.

        The stiffness side always comes from the construction-time ``mu``;
        ``load_mu`` swaps in different loads (same elastic constants) while
        reusing the factorization.
        """
        I = self.archetype.interior
        rhs = assemble_load(self.archetype.mesh, load_mu or self.mu)[I]
        out = np.zeros(2 * self.archetype.mesh.num_nodes)
        out[I] = self._factor.solve(rhs)
        return out


def solve_bubble_fe(archetype: Archetype, port: str, k: int, mu: MaterialParams) -> Field:
    """Full-order bubble for mode ``k`` of ``port`` at material ``mu``."""
    return FEBubbleSolver(archetype, mu).bubble(archetype.extensions[(port, k)])


def solve_force_bubble_fe(archetype: Archetype, mu: MaterialParams) -> Field:
    """Full-order body-load bubble at material ``mu``."""
    return FEBubbleSolver(archetype, mu).force_bubble()
