"""Trained-component library: offline training, save, and load.

A library directory holds one subdirectory per archetype:

``manifest.json``
    Metadata: port kinds and counts, clamped tags, the adaptive port,
    reduced-space bookkeeping, and the greedy decay records.  Written
    with sorted keys so retraining reproduces it byte for byte.
``mesh.json``
    The component mesh in the standard mesh schema.
``modes.npz`` / ``extensions.npy`` / ``rb.npz`` / ``coupling.npz``
    Port-mode bases with eigenvalues, harmonic extensions (columns
    ordered like the manifest's mode list), reduced bubble spaces, and
    the offline contraction tables.

Loading rebuilds everything derivable from the mesh (operator terms,
interior indexing, mass vectors, the rotational split) instead of
storing it, keeping the on-disk format small and the arrays in a single
consistent order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptive import RotationalSplit, build_rotational_split
from .archetype import (
    Archetype,
    PortSpace,
    build_archetype,
    interior_dofs,
    port_dof_indices,
)
from .errors import ConfigError, ValidationError
from .fem import MaterialParams, build_affine_operator
from .mesh import load_mesh, mesh_from_dict, mesh_to_dict
from .rb import (
    RB_DEFAULT_NMAX,
    RB_DEFAULT_TOL,
    RBSpace,
    RBTrainer,
    ReducedCoupling,
    build_reduced_coupling,
)

__all__ = [
    "TrainedComponent",
    "train_component",
    "train_library",
    "load_training_manifest",
    "save_library",
    "load_library",
    "LIBRARY_SCHEMA_VERSION",
]

LIBRARY_SCHEMA_VERSION = 1


@dataclass
class TrainedComponent:
    """Everything the synthesis engine needs about one archetype."""

    archetype: Archetype
    adaptive_port: str | None = None
    split: RotationalSplit | None = None
    mode_spaces: dict[tuple[str, int], RBSpace] | None = None
    force_space: RBSpace | None = None
    coupling: ReducedCoupling | None = None


def train_component(
    name: str,
    mesh,
    port_kinds: dict[str, tuple[str, int | None]],
    clamped_tags: tuple[str, ...] = (),
    adaptive_port: str | None = None,
    train_set: list[MaterialParams] | None = None,
    force_set: list[MaterialParams] | None = None,
    rb_tol: float = RB_DEFAULT_TOL,
    rb_nmax: int = RB_DEFAULT_NMAX,
) -> TrainedComponent:
    """Offline training for one archetype.

    ``train_set`` drives the greedy loops for the mode bubbles (their
    right-hand sides ignore loads, so elastic constants are all that
    matters there); ``force_set`` does the same for the load bubble and
    should sample force directions too.  Omitting ``train_set`` skips
    reduced-space training entirely (full-order bubbles only).
    """
    if adaptive_port is not None and port_kinds.get(adaptive_port, ("",))[0] != "none":
        raise ConfigError(
            f"adaptive port {adaptive_port!r} must use kind 'none': its interface "
            "modes live on the stationary neighbor"
        )
    arch = build_archetype(name, mesh, port_kinds, clamped_tags)
    split = build_rotational_split(arch, adaptive_port) if adaptive_port else None
    comp = TrainedComponent(archetype=arch, adaptive_port=adaptive_port, split=split)
    if train_set is None:
        return comp

    trainer = RBTrainer(arch)
    mode_spaces: dict[tuple[str, int], RBSpace] = {}
    for port in arch.port_names:
        for k in range(arch.mode_count(port)):
            mode_spaces[(port, k)] = trainer.train(
                ("mode", port, k), train_set, rb_tol, rb_nmax
            )
    force_space = trainer.train(("force",), force_set or train_set, rb_tol, rb_nmax)
    comp.mode_spaces = mode_spaces
    comp.force_space = force_space
    comp.coupling = build_reduced_coupling(arch, mode_spaces, force_space)
    return comp


# ---------------------------------------------------------------------------
# training manifest
# ---------------------------------------------------------------------------

def load_training_manifest(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    try:
        version = manifest["schema_version"]
        archetypes = manifest["archetypes"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed training manifest: {exc!r}") from None
    if version != LIBRARY_SCHEMA_VERSION:
        raise ConfigError(f"unsupported training manifest schema {version!r}")
    if not isinstance(archetypes, dict) or not archetypes:
        raise ConfigError("training manifest lists no archetypes")
    manifest["_base_dir"] = str(path.parent)
    return manifest


def _manifest_train_sets(manifest: dict) -> tuple[list, list]:
    """Material grids for mode training and force training."""
    training = manifest.get("training", {})
    e_values = [float(v) for v in training.get("E_values", (1.0,))]
    nu_values = [float(v) for v in training.get("nu_values", (0.3,))]
    directions = [tuple(d) for d in training.get("force_directions", ((1.0, 0.0), (0.0, 1.0)))]
    mode_set = [
        MaterialParams(E=e, nu=nu) for e in e_values for nu in nu_values
    ]
    force_set = [
        MaterialParams(E=e, nu=nu, body_force=d)
        for e in e_values for nu in nu_values for d in directions
    ]
    return mode_set, force_set


def train_library(
    manifest: dict,
    rb_tol: float | None = None,
    rb_nmax: int | None = None,
    skip_rb: bool = False,
) -> dict[str, TrainedComponent]:
    """Train every archetype listed in a training manifest."""
    base = Path(manifest.get("_base_dir", "."))
    training = manifest.get("training", {})
    tol = rb_tol if rb_tol is not None else float(training.get("rb_tol", RB_DEFAULT_TOL))
    nmax = rb_nmax if rb_nmax is not None else int(training.get("rb_nmax", RB_DEFAULT_NMAX))
    mode_set, force_set = _manifest_train_sets(manifest)

    library: dict[str, TrainedComponent] = {}
    for name in sorted(manifest["archetypes"]):
        entry = manifest["archetypes"][name]
        try:
            mesh = load_mesh(base / entry["mesh"])
            port_kinds = {
                pname: (spec["kind"], spec.get("count"))
                for pname, spec in entry["ports"].items()
            }
            clamped_tags = tuple(entry.get("clamped_tags", ()))
            adaptive_port = entry.get("adaptive_port")
        except (KeyError, TypeError) as exc:
            raise ConfigError(
                f"malformed manifest entry for archetype {name!r}: {exc!r}"
            ) from None
        library[name] = train_component(
            name,
            mesh,
            port_kinds,
            clamped_tags=clamped_tags,
            adaptive_port=adaptive_port,
            train_set=None if skip_rb else mode_set,
            force_set=None if skip_rb else force_set,
            rb_tol=tol,
            rb_nmax=nmax,
        )
    return library


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _mode_list(arch: Archetype) -> list[list]:
    return [[port, k] for port in arch.port_names for k in range(arch.mode_count(port))]


def _space_key(target: tuple) -> str:
    return "force" if target[0] == "force" else f"mode_{target[1]}_{target[2]}"


def _save_space(space: RBSpace, arrays: dict, meta: dict) -> None:
    key = _space_key(space.target)
    arrays[f"{key}_basis"] = space.basis
    arrays[f"{key}_op_terms"] = space.op_terms
    if space.rhs_terms is not None:
        arrays[f"{key}_rhs_terms"] = space.rhs_terms
    if space.body_cols is not None:
        arrays[f"{key}_body_cols"] = space.body_cols
    for tag, cols in (space.trac_cols or {}).items():
        arrays[f"{key}_trac_{tag}"] = cols
    meta[key] = {
        "target": list(space.target),
        "decay": [[int(n), mu, float(e)] for n, mu, e in space.decay],
        "tol": space.tol,
        "converged": space.converged,
        "trac_tags": sorted((space.trac_cols or {})),
    }


def _load_space(key: str, target: tuple, arrays, meta: dict) -> RBSpace:
    entry = meta[key]
    return RBSpace(
        target=target,
        basis=arrays[f"{key}_basis"],
        op_terms=arrays[f"{key}_op_terms"],
        rhs_terms=arrays.get(f"{key}_rhs_terms"),
        body_cols=arrays.get(f"{key}_body_cols"),
        trac_cols={tag: arrays[f"{key}_trac_{tag}"] for tag in entry["trac_tags"]},
        decay=tuple((int(n), mu, float(e)) for n, mu, e in entry["decay"]),
        tol=float(entry["tol"]),
        converged=bool(entry["converged"]),
    )


def save_library(library: dict[str, TrainedComponent], path) -> None:
    """Write a library directory (deterministic bytes for identical input)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name in sorted(library):
        _save_component(library[name], root / name)
    top = {
        "schema_version": LIBRARY_SCHEMA_VERSION,
        "archetypes": sorted(library),
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(top, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_component(comp: TrainedComponent, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    arch = comp.archetype

    with open(folder / "mesh.json", "w") as fh:
        json.dump(mesh_to_dict(arch.mesh), fh, indent=2, sort_keys=True)
        fh.write("\n")

    modes = {}
    port_meta = {}
    for pname, space in arch.port_spaces.items():
        modes[f"{pname}_modes"] = space.modes
        modes[f"{pname}_eigenvalues"] = space.eigenvalues
        port_meta[pname] = {"kind": space.kind, "count": int(space.count)}
    np.savez(folder / "modes.npz", **modes)

    mode_list = _mode_list(arch)
    ext = np.column_stack(
        [arch.extensions[(port, k)] for port, k in mode_list]
    ) if mode_list else np.zeros((2 * arch.mesh.num_nodes, 0))
    np.save(folder / "extensions.npy", ext)

    manifest = {
        "schema_version": LIBRARY_SCHEMA_VERSION,
        "name": arch.name,
        "clamped_tags": list(arch.clamped_tags),
        "adaptive_port": comp.adaptive_port,
        "ports": port_meta,
        "modes": mode_list,
        "reduced": None,
    }

    if comp.coupling is not None:
        arrays: dict[str, np.ndarray] = {}
        spaces_meta: dict[str, dict] = {}
        for (port, k), space in comp.mode_spaces.items():
            _save_space(space, arrays, spaces_meta)
        _save_space(comp.force_space, arrays, spaces_meta)
        np.savez(folder / "rb.npz", **arrays)

        coupling = comp.coupling
        coupling_arrays = {
            "columns": coupling.columns,
            "gram": coupling.gram,
            "body_loads": coupling.body_loads,
        }
        for tag, cols in coupling.trac_loads.items():
            coupling_arrays[f"trac_{tag}"] = cols
        np.savez(folder / "coupling.npz", **coupling_arrays)

        manifest["reduced"] = {
            "spaces": spaces_meta,
            "ext_col": [[p, k, c] for (p, k), c in sorted(coupling.ext_col.items())],
            "rb_cols": [[p, k, s0, s1] for (p, k), (s0, s1) in sorted(coupling.rb_cols.items())],
            "force_cols": list(coupling.force_cols),
            "trac_tags": sorted(coupling.trac_loads),
        }

    with open(folder / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_library(path) -> dict[str, TrainedComponent]:
    root = Path(path)
    top_path = root / "manifest.json"
    if not top_path.exists():
        raise ConfigError(f"{root} is not a library (no manifest.json)")
    with open(top_path) as fh:
        top = json.load(fh)
    if top.get("schema_version") != LIBRARY_SCHEMA_VERSION:
        raise ConfigError(f"unsupported library schema {top.get('schema_version')!r}")
    return {name: _load_component(root / name) for name in top["archetypes"]}


def _load_component(folder: Path) -> TrainedComponent:
    with open(folder / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != LIBRARY_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported archetype schema {manifest.get('schema_version')!r} in {folder}"
        )
    with open(folder / "mesh.json") as fh:
        mesh = mesh_from_dict(json.load(fh))

    modes = np.load(folder / "modes.npz")
    port_spaces = {
        pname: PortSpace(
            port=pname,
            kind=meta["kind"],
            modes=modes[f"{pname}_modes"],
            eigenvalues=modes[f"{pname}_eigenvalues"],
        )
        for pname, meta in manifest["ports"].items()
    }

    mode_list = [(port, int(k)) for port, k in manifest["modes"]]
    ext_matrix = np.load(folder / "extensions.npy")
    if ext_matrix.shape[1] != len(mode_list):
        raise ValidationError(
            f"extension store in {folder} has {ext_matrix.shape[1]} columns "
            f"for {len(mode_list)} modes"
        )
    extensions = {
        key: ext_matrix[:, i] for i, key in enumerate(mode_list)
    }

    clamped_tags = tuple(manifest["clamped_tags"])
    arch = Archetype(
        name=manifest["name"],
        mesh=mesh,
        operator=build_affine_operator(mesh),
        clamped_tags=clamped_tags,
        port_spaces=port_spaces,
        extensions=extensions,
        interior=interior_dofs(mesh, clamped_tags),
        port_dofs={p.name: port_dof_indices(p) for p in mesh.ports},
    )
    adaptive_port = manifest.get("adaptive_port")
    comp = TrainedComponent(
        archetype=arch,
        adaptive_port=adaptive_port,
        split=build_rotational_split(arch, adaptive_port) if adaptive_port else None,
    )

    reduced = manifest.get("reduced")
    if reduced is not None:
        arrays = np.load(folder / "rb.npz")
        spaces_meta = reduced["spaces"]
        mode_spaces = {}
        for port, k in mode_list:
            key = f"mode_{port}_{k}"
            mode_spaces[(port, k)] = _load_space(
                key, ("mode", port, k), arrays, spaces_meta
            )
        force_space = _load_space("force", ("force",), arrays, spaces_meta)

        coupling_arrays = np.load(folder / "coupling.npz")
        comp.mode_spaces = mode_spaces
        comp.force_space = force_space
        comp.coupling = ReducedCoupling(
            columns=coupling_arrays["columns"],
            gram=coupling_arrays["gram"],
            body_loads=coupling_arrays["body_loads"],
            trac_loads={
                tag: coupling_arrays[f"trac_{tag}"] for tag in reduced["trac_tags"]
            },
            ext_col={(p, int(k)): int(c) for p, k, c in reduced["ext_col"]},
            rb_cols={
                (p, int(k)): (int(s0), int(s1))
                for p, k, s0, s1 in reduced["rb_cols"]
            },
            force_cols=tuple(reduced["force_cols"]),
        )
    return comp
