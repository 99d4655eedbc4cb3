"""Built-in rotor-in-housing reference scenario.

A stationary annular housing (``disk``) is clamped at its central hole
and surrounds a rotating annulus (``ring``) across a buffer gap whose
thickness is 5% of the interface radius.  Three rectangular ``blade``
paddles bolt onto straight chord ports flattened into the ring's outer
circle 120 degrees apart and co-rotate with it.  Gravity loads the whole
assembly.

Everything is sized by an integer ``refine`` factor: node counts scale
linearly while the geometry (radii, chord angles, blade length) stays
fixed, so solutions at different refinements describe the same physical
problem.  The generator emits the component meshes, two training
manifests (reduced spaces for production use, one mode per port DoF for
exactness studies), and the system configuration.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh import Mesh, PortCurve, save_mesh
from .structured import _fix_orientation, annulus_mesh, rect_mesh

__all__ = [
    "reference_meshes",
    "bladed_ring_mesh",
    "blade_mesh",
    "reference_training_manifest",
    "reference_system",
    "make_reference",
]

R_HUB = 0.3
R_RIM = 1.0            # housing outer circle = master side of the interface
R_BORE = 1.05          # ring bore; the 0.05 gap is 5% of the interface radius
R_OUT = 1.35

DISK_THETA = 96        # housing nodes per circle (x refine)
DISK_RADIAL = 24       # housing nodes per spoke (x refine)
RING_THETA = 84        # ring nodes per circle; divisible by 12 so every
                       # mount center lands exactly on a spoke
RING_RADIAL = 8
MOUNT_DEG = (90.0, 210.0, 330.0)
MOUNT_HALF_INTERVALS = 2   # chord half-span in spoke intervals (x refine)
BLADE_LEN = 0.45
BLADE_AXIAL = 6        # blade elements along its length (x refine)

DISK_MATERIAL = {"E": 200e9, "nu": 0.3, "density": 8000.0}
RING_MATERIAL = {"E": 30e9, "nu": 0.2, "density": 1800.0}

TRAIN_GRID = {
    "E_values": [30e9, 115e9, 200e9],
    "nu_values": [0.2, 0.3],
    "rb_tol": 1e-6,
    "rb_nmax": 25,
}

PORT_COUNTS = {"hub": 8, "rim": 32, "mount": 12}


def _check_refine(refine: int) -> int:
    if int(refine) != refine or refine < 1:
        raise ValidationError(f"refine must be a positive integer, got {refine!r}")
    return int(refine)


def _mount_geometry(refine: int):
    """Shared spoke grid so the ring chords and blade roots match exactly."""
    n = RING_THETA * refine
    delta = 2.0 * np.pi / n
    half = MOUNT_HALF_INTERVALS * refine
    chord_distance = R_OUT * np.cos(half * delta)
    return n, delta, half, chord_distance


def bladed_ring_mesh(refine: int = 1) -> Mesh:
    """Rotating annulus with three straight chord ports on its outer rim."""
    refine = _check_refine(refine)
    n, delta, half, d = _mount_geometry(refine)
    nr = RING_RADIAL * refine

    angles = delta * np.arange(n)
    outer_r = np.full(n, R_OUT)
    mount_spokes: list[list[int]] = []
    for center_deg in MOUNT_DEG:
        tc = round(center_deg * n / 360.0)
        spokes = [(tc + dt) % n for dt in range(-half, half + 1)]
        for dt, t in zip(range(-half, half + 1), spokes):
            outer_r[t] = d / np.cos(dt * delta)
        mount_spokes.append(spokes)

    def nid(k: int, t: int) -> int:
        return k * n + (t % n)

    nodes = np.empty((nr * n, 2))
    for k, s in enumerate(np.linspace(0.0, 1.0, nr)):
        r = R_BORE + (outer_r - R_BORE) * s
        nodes[k * n:(k + 1) * n, 0] = r * np.cos(angles)
        nodes[k * n:(k + 1) * n, 1] = r * np.sin(angles)

    tris = []
    for k in range(nr - 1):
        for t in range(n):
            a, b = nid(k, t), nid(k, t + 1)
            c, e = nid(k + 1, t), nid(k + 1, t + 1)
            tris.append((a, b, e))
            tris.append((a, e, c))
    tris = _fix_orientation(nodes, np.asarray(tris, dtype=np.int64))

    in_mount = {}
    for j, spokes in enumerate(mount_spokes):
        for t in spokes[:-1]:  # edge t covers spokes (t, t+1)
            in_mount[t] = j
    edges, tags = [], []
    for t in range(n):
        edges.append((nid(0, t), nid(0, t + 1)))
        tags.append("bore")
    for t in range(n):
        edges.append((nid(nr - 1, t), nid(nr - 1, t + 1)))
        tags.append(f"mount{in_mount[t]}" if t in in_mount else "outer")

    ports = [
        PortCurve("bore", np.arange(n), "arc", (0.0, 0.0), R_BORE, closed=True),
    ]
    for j, spokes in enumerate(mount_spokes):
        ports.append(
            PortCurve(f"mount{j}", np.asarray([nid(nr - 1, t) for t in spokes]))
        )

    return Mesh(nodes, tris, np.zeros(len(tris), dtype=np.int64),
                np.asarray(edges, dtype=np.int64), tuple(tags), tuple(ports))


def blade_mesh(refine: int = 1) -> Mesh:
    """Rectangular paddle whose root grid equals the chord node spacing."""
    refine = _check_refine(refine)
    _, delta, half, d = _mount_geometry(refine)
    ys = d * np.tan(delta * np.arange(-half, half + 1))
    xs = np.linspace(0.0, BLADE_LEN, BLADE_AXIAL * refine + 1)
    return rect_mesh(xs, ys, ports={"left": "root"})


def reference_meshes(refine: int = 1) -> dict[str, Mesh]:
    refine = _check_refine(refine)
    disk = annulus_mesh(
        (0.0, 0.0),
        np.linspace(R_HUB, R_RIM, DISK_RADIAL * refine),
        DISK_THETA * refine,
        inner_port="hub",
        outer_port="rim",
    )
    return {
        "disk": disk,
        "ring": bladed_ring_mesh(refine),
        "blade": blade_mesh(refine),
    }


def reference_training_manifest(full_nodal: bool = False,
                                refine: int = 1) -> dict:
    """Training manifest body (mesh paths relative to the manifest).

    ``full_nodal`` switches every port to one mode per DoF for exactness
    studies; the default trains smooth mode subsets plus reduced bubbles.
    """
    refine = _check_refine(refine)

    def port(kind_eigen_count):
        if full_nodal:
            return {"kind": "full", "count": None}
        return {"kind": "eigen", "count": kind_eigen_count}

    # a mount chord never has many nodes; cap its mode count at complete
    mount_dofs = 2 * (2 * MOUNT_HALF_INTERVALS * refine + 1)
    mounts = {f"mount{j}": port(min(PORT_COUNTS["mount"], mount_dofs))
              for j in range(3)}
    return {
        "schema_version": 1,
        "archetypes": {
            "disk": {
                "mesh": "meshes/disk.json",
                "ports": {"hub": port(PORT_COUNTS["hub"]),
                          "rim": port(PORT_COUNTS["rim"])},
            },
            "ring": {
                "mesh": "meshes/ring.json",
                "adaptive_port": "bore",
                "ports": {"bore": {"kind": "none", "count": None}, **mounts},
            },
            "blade": {
                "mesh": "meshes/blade.json",
                "ports": {"root": {"kind": "full", "count": None}},
            },
        },
        "training": dict(TRAIN_GRID),
    }


def reference_system() -> dict:
    """System configuration body for the rotor-in-housing scenario."""
    _, _, _, d = _mount_geometry(1)
    instances = [
        {"name": "disk", "archetype": "disk", "material": dict(DISK_MATERIAL)},
        {"name": "ring", "archetype": "ring", "material": dict(RING_MATERIAL),
         "adaptive_port": "bore"},
    ]
    connections = [[["disk", "rim"], ["ring", "bore"]]]
    for j, center_deg in enumerate(MOUNT_DEG):
        rad = np.radians(center_deg)
        instances.append(
            {
                "name": f"blade{j}",
                "archetype": "blade",
                "material": dict(RING_MATERIAL),
                "translate": [d * float(np.cos(rad)), d * float(np.sin(rad))],
                "rotate_deg": center_deg,
                "co_rotate_with": "ring",
            }
        )
        connections.append([["ring", f"mount{j}"], [f"blade{j}", "root"]])
    return {
        "schema_version": 1,
        "gravity": [0.0, -9.81],
        "instances": instances,
        "connections": connections,
        "clamped": [["disk", "hub"]],
    }


def make_reference(out_dir, refine: int = 1) -> dict[str, Path]:
    """Write meshes, training manifests, and the system config to disk."""
    refine = _check_refine(refine)
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)

    paths: dict[str, Path] = {}
    for name, mesh in reference_meshes(refine).items():
        paths[name] = out / "meshes" / f"{name}.json"
        save_mesh(mesh, paths[name])

    for key, manifest in (
        ("train", reference_training_manifest(full_nodal=False, refine=refine)),
        ("train_full", reference_training_manifest(full_nodal=True, refine=refine)),
    ):
        paths[key] = out / f"{key}.json"
        with open(paths[key], "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    paths["system"] = out / "system.json"
    with open(paths["system"], "w") as fh:
        json.dump(reference_system(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
