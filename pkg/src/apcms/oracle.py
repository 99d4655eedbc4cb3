"""Monolithic full-order reference solver and field-comparison metrics.

The reference path shares only the mesh and element primitives with the
synthesis engine: it places every instance, merges the meshes into one
conforming triangulation (including the buffer layer when the system
rotates), assembles the heterogeneous stiffness element by element in
the global frame, clamps the configured ports, and solves the full
sparse system directly.  No port modes, no condensation, no trained
data beyond the archetype meshes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .archetype import clamped_node_indices
from .errors import ConfigError
from .fem import (
    MaterialParams,
    apply_dirichlet,
    assemble_load,
    build_affine_operator,
    factorize_spd,
)
from .mesh import BufferSpec, Mesh, generate_buffer, merge_with_maps, place_mesh, rotate_mesh
from .synthesis import SystemConfig

__all__ = [
    "OracleSolution",
    "place_system",
    "oracle_solve",
    "rrmse",
    "re_max",
]


@dataclass
class OracleSolution:
    """Full-order solve on the merged mesh.

    Region tags of ``mesh`` are instance indices (the buffer layer carries
    the rotating instance's), so ``materials`` maps straight to per-element
    constants for stress recovery.
    """

    theta: float
    mesh: Mesh
    displacement: np.ndarray
    materials: dict[int, MaterialParams]
    n_dofs: int
    n_free: int
    timings: dict[str, float]


def _adaptive_interface(config: SystemConfig) -> tuple[int, str, int, str] | None:
    """(rotational idx, adaptive port, stationary idx, stationary port)."""
    rot = next(
        (i for i, inst in enumerate(config.instances) if inst.adaptive_port), None
    )
    if rot is None:
        return None
    inst = config.instances[rot]
    names = [i.name for i in config.instances]
    for (a_name, a_port), (b_name, b_port) in config.connections:
        if (a_name, a_port) == (inst.name, inst.adaptive_port):
            return rot, inst.adaptive_port, names.index(b_name), b_port
        if (b_name, b_port) == (inst.name, inst.adaptive_port):
            return rot, inst.adaptive_port, names.index(a_name), a_port
    raise ConfigError(
        f"adaptive port {inst.name}.{inst.adaptive_port} must appear in a connection"
    )


def place_system(library, config: SystemConfig, theta: float = 0.0
                 ) -> tuple[list[Mesh], Mesh | None]:
    """Placed instance meshes at one angle, plus the buffer layer.

    Each returned mesh is region-tagged with its instance index; the
    buffer (present only when an instance rotates) carries the rotating
    instance's index, since it deforms with that instance's material.
    """
    meshes = []
    for idx, inst in enumerate(config.instances):
        if inst.archetype not in library:
            raise ConfigError(f"library has no archetype {inst.archetype!r}")
        meshes.append(
            place_mesh(library[inst.archetype].archetype.mesh,
                       inst.translate, inst.rotate_deg).with_regions(idx)
        )

    interface = _adaptive_interface(config)
    if interface is None:
        return meshes, None
    rot, rot_port, stat, stat_port = interface
    center = meshes[rot].port(rot_port).center
    if center is None:
        raise ConfigError(f"adaptive port {rot_port!r} is not an arc")
    for idx, inst in enumerate(config.instances):
        if idx == rot or inst.co_rotate_with is not None:
            meshes[idx] = rotate_mesh(meshes[idx], center, theta)

    master = meshes[stat].port(stat_port)
    buffer_mesh = generate_buffer(
        BufferSpec(
            inner=meshes[stat].nodes[master.nodes],
            outer=meshes[rot].nodes[meshes[rot].port(rot_port).nodes],
            closed=master.closed,
        )
    ).with_regions(rot)
    return meshes, buffer_mesh


def oracle_solve(library, config: SystemConfig, theta: float = 0.0) -> OracleSolution:
    """Assemble and solve the monolithic system at one angle."""
    t_start = time.perf_counter()
    meshes, buffer_mesh = place_system(library, config, theta)
    pieces = list(meshes) + ([buffer_mesh] if buffer_mesh is not None else [])
    merged, maps = merge_with_maps(pieces)
    mesh_s = time.perf_counter() - t_start

    # Instance materials carry global-frame loads: assembling on the placed
    # meshes directly makes any frame bookkeeping unnecessary.
    t0 = time.perf_counter()
    materials: dict[int, MaterialParams] = {}
    mus = []
    for inst in config.instances:
        g = np.asarray(config.gravity) * inst.material.density
        mus.append(inst.material.params(body_force=(g[0], g[1]),
                                        tractions=inst.tractions))
        materials[len(mus) - 1] = MaterialParams(E=inst.material.E, nu=inst.material.nu)
    if buffer_mesh is not None:
        mus.append(mus[int(buffer_mesh.regions[0])])

    n = merged.num_dofs
    rows, cols, vals = [], [], []
    f = np.zeros(n)
    for mesh, mu, node_map in zip(pieces, mus, maps):
        dof_map = np.empty(2 * mesh.num_nodes, dtype=np.int64)
        dof_map[0::2] = 2 * node_map
        dof_map[1::2] = 2 * node_map + 1
        K_i = build_affine_operator(mesh).assemble(mu).tocoo()
        rows.append(dof_map[K_i.row])
        cols.append(dof_map[K_i.col])
        vals.append(K_i.data)
        np.add.at(f, dof_map, assemble_load(mesh, mu))
    K = sp.csr_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    assemble_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    fixed = []
    names = [i.name for i in config.instances]
    for inst_name, port_name in config.clamped:
        idx = names.index(inst_name)
        nodes = maps[idx][meshes[idx].port(port_name).nodes]
        fixed.extend(2 * nodes)
        fixed.extend(2 * nodes + 1)
    for idx, inst in enumerate(config.instances):
        tags = library[inst.archetype].archetype.clamped_tags
        if tags:
            nodes = maps[idx][clamped_node_indices(meshes[idx], tags)]
            fixed.extend(2 * nodes)
            fixed.extend(2 * nodes + 1)

    reduced = apply_dirichlet(K, f, np.asarray(fixed, dtype=np.int64))
    u = reduced.expand(factorize_spd(reduced.matrix).solve(reduced.rhs))
    solve_s = time.perf_counter() - t0

    return OracleSolution(
        theta=theta,
        mesh=merged,
        displacement=u,
        materials=materials,
        n_dofs=n,
        n_free=len(reduced.free),
        timings={
            "mesh_s": mesh_s,
            "assemble_s": assemble_s,
            "solve_s": solve_s,
            "total_s": time.perf_counter() - t_start,
        },
    )


def rrmse(values: np.ndarray, reference: np.ndarray) -> float:
    """Relative root-mean-square error of one field against a reference."""
    ref_norm = float(np.linalg.norm(reference))
    if ref_norm == 0.0:
        return float(np.linalg.norm(values))
    return float(np.linalg.norm(values - reference)) / ref_norm


def re_max(values: np.ndarray, reference: np.ndarray) -> float:
    """Relative error of the field maximum (peak-stress accuracy)."""
    ref_peak = float(reference.max())
    if ref_peak == 0.0:
        return float(values.max())
    return abs(float(values.max()) - ref_peak) / ref_peak
