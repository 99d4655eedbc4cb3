"""System synthesis: condensed assembly and solve over port-mode DoFs.

A system is a set of placed component instances coupled through ports.
Interior DoFs never appear in the global system: every instance
contributes energy products of its port-mode functions (harmonic
extension plus interior bubble), so the global unknown vector holds one
coefficient per active port mode.  Stationary instances evaluate their
blocks from offline contraction tables (or from full-order bubbles when
requested); the rotating instance recomputes its bubbles per angle
through the buffer layer and the block-inverse machinery.

Interfaces between independently trained components are reconciled by a
mode-map: the master side's placed basis defines the global modes, and
each slave side carries a small transform expressing those modes in its
own trained basis, verified at build time.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .adaptive import RotorOnline, rotate_field, rotor_condense
from .archetype import FEBubbleSolver
from .errors import (
    ConfigError,
    PortCompatibilityError,
    SingularMatrixError,
    ValidationError,
)
from .fem import MaterialParams, assemble_load
from .mesh import (
    BufferSpec,
    ConformingMerger,
    Mesh,
    generate_buffer,
    place_mesh,
    rotate_mesh,
)

__all__ = [
    "MaterialSpec",
    "InstanceConfig",
    "SystemConfig",
    "parse_system_config",
    "system_config_to_dict",
    "load_system_config",
    "save_system_config",
    "SystemSolver",
    "SystemSolution",
]

MODE_MAP_RTOL = 1e-8

ADAPTIVE_AXIS = "@adaptive"
"""Local-axis key for the rotating body's interface-mode block.

Port names come from mesh files where ``@`` never appears in practice,
and the key is only used inside the solver's scatter tables.
"""


@dataclass(frozen=True)
class MaterialSpec:
    """Material of one instance; density converts gravity to body force."""

    E: float
    nu: float
    density: float = 0.0

    def params(self, body_force=(0.0, 0.0), tractions=None) -> MaterialParams:
        return MaterialParams(
            E=self.E, nu=self.nu, body_force=tuple(body_force),
            tractions=dict(tractions or {}),
        )


@dataclass(frozen=True)
class InstanceConfig:
    name: str
    archetype: str
    material: MaterialSpec
    translate: tuple[float, float] = (0.0, 0.0)
    rotate_deg: float = 0.0
    adaptive_port: str | None = None
    co_rotate_with: str | None = None
    tractions: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class SystemConfig:
    instances: tuple[InstanceConfig, ...]
    connections: tuple[tuple[tuple[str, str], tuple[str, str]], ...]
    clamped: tuple[tuple[str, str], ...]
    gravity: tuple[float, float] = (0.0, 0.0)

    def instance(self, name: str) -> InstanceConfig:
        for inst in self.instances:
            if inst.name == name:
                return inst
        raise ConfigError(f"unknown instance {name!r}")


def parse_system_config(data: dict) -> SystemConfig:
    """Validate and freeze a system description read from JSON."""
    try:
        instances = []
        names = set()
        for d in data["instances"]:
            name = d["name"]
            if name in names:
                raise ConfigError(f"duplicate instance name {name!r}")
            names.add(name)
            m = d["material"]
            translate = d.get("translate", (0.0, 0.0))
            instances.append(
                InstanceConfig(
                    name=name,
                    archetype=d["archetype"],
                    material=MaterialSpec(
                        E=float(m["E"]), nu=float(m["nu"]),
                        density=float(m.get("density", 0.0)),
                    ),
                    translate=(float(translate[0]), float(translate[1])),
                    rotate_deg=float(d.get("rotate_deg", 0.0)),
                    adaptive_port=d.get("adaptive_port"),
                    co_rotate_with=d.get("co_rotate_with"),
                    tractions={
                        tag: (float(v[0]), float(v[1]))
                        for tag, v in d.get("tractions", {}).items()
                    },
                )
            )
        connections = tuple(
            ((c[0][0], c[0][1]), (c[1][0], c[1][1]))
            for c in data.get("connections", ())
        )
        clamped = tuple((c[0], c[1]) for c in data.get("clamped", ()))
        grav = data.get("gravity", (0.0, 0.0))
        gravity = (float(grav[0]), float(grav[1]))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed system config: {exc!r}") from None

    cfg = SystemConfig(tuple(instances), connections, clamped, gravity)
    for (a, _), (b, _) in cfg.connections:
        cfg.instance(a)
        cfg.instance(b)
    for name, _ in cfg.clamped:
        cfg.instance(name)
    rotational = [i for i in cfg.instances if i.adaptive_port]
    if len(rotational) > 1:
        raise ConfigError("at most one instance may carry an adaptive port")
    for inst in cfg.instances:
        if inst.co_rotate_with is not None:
            target = cfg.instance(inst.co_rotate_with)
            if not target.adaptive_port:
                raise ConfigError(
                    f"{inst.name!r} co-rotates with {target.name!r}, "
                    "which has no adaptive port"
                )
    return cfg


def system_config_to_dict(cfg: SystemConfig) -> dict:
    return {
        "schema_version": 1,
        "gravity": list(cfg.gravity),
        "instances": [
            {
                "name": i.name,
                "archetype": i.archetype,
                "material": {
                    "E": i.material.E, "nu": i.material.nu,
                    "density": i.material.density,
                },
                "translate": list(i.translate),
                "rotate_deg": i.rotate_deg,
                **({"adaptive_port": i.adaptive_port} if i.adaptive_port else {}),
                **({"co_rotate_with": i.co_rotate_with} if i.co_rotate_with else {}),
                **(
                    {"tractions": {t: list(v) for t, v in i.tractions.items()}}
                    if i.tractions else {}
                ),
            }
            for i in cfg.instances
        ],
        "connections": [[[a, pa], [b, pb]] for (a, pa), (b, pb) in cfg.connections],
        "clamped": [[n, p] for n, p in cfg.clamped],
    }


def load_system_config(path) -> SystemConfig:
    with open(path) as fh:
        return parse_system_config(json.load(fh))


def save_system_config(cfg: SystemConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(system_config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class _PortLink:
    """One instance-side attachment of a global port.

    ``transform`` expresses the global modes in the instance's trained
    basis: local coefficients = transform @ global coefficients.
    """

    inst: int
    port: str
    transform: np.ndarray


@dataclass
class _GlobalPort:
    key: tuple[str, str]  # master (instance name, port name)
    master: int
    master_port: str
    basis: np.ndarray  # placed master basis on the master chain (2n, count)
    links: list[_PortLink]
    clamped: bool
    adaptive: bool
    count: int
    offset: int = -1


def _placed_basis(modes: np.ndarray, rotate_deg: float) -> np.ndarray:
    return rotate_field(modes, rotate_deg) if rotate_deg else modes.copy()


def _match_port_nodes(master_xy: np.ndarray, slave_xy: np.ndarray, scale: float) -> np.ndarray:
    """Permutation p such that slave node p[r] coincides with master node r."""
    if len(master_xy) != len(slave_xy):
        raise PortCompatibilityError(
            f"connected ports have {len(master_xy)} vs {len(slave_xy)} nodes"
        )
    dist, idx = cKDTree(slave_xy).query(master_xy)
    if dist.max() > 1e-9 * scale:
        raise PortCompatibilityError(
            f"connected port nodes do not coincide (max gap {dist.max():.3e})"
        )
    if len(np.unique(idx)) != len(idx):
        raise PortCompatibilityError("connected port nodes do not match one-to-one")
    return idx


def _pair_rows(perm: np.ndarray) -> np.ndarray:
    """Node permutation -> interleaved DoF row permutation."""
    rows = np.empty(2 * len(perm), dtype=np.int64)
    rows[0::2] = 2 * perm
    rows[1::2] = 2 * perm + 1
    return rows


@dataclass
class SystemSolution:
    """One synthesized solve: merged output mesh plus per-instance fields.

    ``mesh`` unifies the placed instance meshes (and the buffer layer when
    the system rotates); its region tags are instance indices, so
    ``materials`` can look up the elasticity constants per element for
    stress evaluation.
    """

    theta: float
    mesh: Mesh
    displacement: np.ndarray
    materials: dict[int, MaterialParams]
    n_sc: int
    timings: dict[str, float]
    instance_meshes: list[Mesh]
    instance_fields: list[np.ndarray]
    coefficients: np.ndarray


class SystemSolver:
    """Synthesizes and solves one configured system at arbitrary angles.

    ``library`` maps archetype names to trained components (see
    :mod:`apcms.library`).  ``port_modes`` restricts every port to its
    first N trained modes (``None`` or ``"full"`` keeps all); ``bubbles``
    selects reduced-basis interior corrections (``"rb"``) or full-order
    ones (``"fe"``).
    """

    def __init__(self, library, config: SystemConfig, port_modes=None, bubbles: str = "rb"):
        if bubbles not in ("rb", "fe"):
            raise ConfigError(f"unknown bubble mode {bubbles!r}")
        self.library = library
        self.config = config
        self.bubbles = bubbles
        self._port_modes = port_modes
        self._stationary_cache: dict = {}
        self._fe_cache: dict = {}
        self._merger = ConformingMerger()

        self.components = []
        self.placed = []
        for idx, inst in enumerate(config.instances):
            if inst.archetype not in library:
                raise ConfigError(f"library has no archetype {inst.archetype!r}")
            comp = library[inst.archetype]
            self.components.append(comp)
            self.placed.append(
                place_mesh(comp.archetype.mesh, inst.translate, inst.rotate_deg)
                .with_regions(idx)
            )
            if bubbles == "rb" and inst.adaptive_port is None and comp.coupling is None:
                raise ConfigError(
                    f"archetype {inst.archetype!r} was trained without reduced "
                    "bubbles; solve with full-order bubbles instead"
                )

        self.rotational: int | None = None
        self.center = np.zeros(2)
        for idx, inst in enumerate(config.instances):
            if inst.adaptive_port:
                self.rotational = idx
                comp = self.components[idx]
                if comp.split is None or comp.split.adaptive_port != inst.adaptive_port:
                    raise ConfigError(
                        f"archetype {inst.archetype!r} was not trained for rotation "
                        f"about port {inst.adaptive_port!r}"
                    )
                port = self.placed[idx].port(inst.adaptive_port)
                self.center = np.asarray(port.center, dtype=np.float64)
        self.co_rotating = frozenset(
            idx for idx, inst in enumerate(config.instances)
            if inst.co_rotate_with is not None
        )

        self._scale = max(
            (float(np.abs(m.nodes).max()) for m in self.placed), default=1.0
        ) or 1.0
        self._build_global_ports()

    # ------------------------------------------------------------------
    # global port table
    # ------------------------------------------------------------------

    def _inst_index(self, name: str) -> int:
        for idx, inst in enumerate(self.config.instances):
            if inst.name == name:
                return idx
        raise ConfigError(f"unknown instance {name!r}")

    def _active_count(self, trained: int) -> int:
        req = self._port_modes
        if req is None or req == "full":
            return trained
        req = int(req)
        if req < 2 or req % 2 != 0:
            raise ValidationError("port mode count must be even and >= 2")
        if req > trained:
            raise ValidationError(
                f"requested {req} port modes but only {trained} were trained"
            )
        return req

    def _trained_port_basis(self, idx: int, port: str) -> np.ndarray:
        comp = self.components[idx]
        if port not in comp.archetype.port_spaces:
            raise ConfigError(
                f"instance {self.config.instances[idx].name!r} has no trained "
                f"modes for port {port!r}"
            )
        return comp.archetype.port_spaces[port].modes

    def _build_global_ports(self) -> None:
        cfg = self.config
        clamped_set = set(cfg.clamped)
        clampable: set[tuple[str, str]] = set()
        used: dict[tuple[int, str], int] = {}
        self.global_ports: list[_GlobalPort] = []

        def port_xy(idx: int, port: str) -> np.ndarray:
            mesh = self.placed[idx]
            return mesh.nodes[mesh.port(port).nodes]

        def claim(idx: int, port: str) -> None:
            if (idx, port) in used:
                raise ConfigError(
                    f"port {cfg.instances[idx].name}.{port} used in two connections"
                )
            used[(idx, port)] = len(self.global_ports)

        for (a_name, a_port), (b_name, b_port) in cfg.connections:
            ia, ib = self._inst_index(a_name), self._inst_index(b_name)
            # The adaptive interface is mastered by the stationary side: its
            # mode basis lives on the stationary neighbor's chain, and the
            # rotating body couples to it through the buffer layer.
            a_adaptive = ia == self.rotational and cfg.instances[ia].adaptive_port == a_port
            b_adaptive = ib == self.rotational and cfg.instances[ib].adaptive_port == b_port
            if a_adaptive and b_adaptive:
                raise ConfigError("a connection cannot join two adaptive ports")
            if a_adaptive:
                ia, a_port, ib, b_port = ib, b_port, ia, a_port
                a_adaptive, b_adaptive = False, True

            master_modes = self._trained_port_basis(ia, a_port)
            trained = master_modes.shape[1]
            count = self._active_count(trained)
            clampable.add((cfg.instances[ia].name, a_port))
            clampable.add((cfg.instances[ib].name, b_port))
            gp = _GlobalPort(
                key=(cfg.instances[ia].name, a_port),
                master=ia,
                master_port=a_port,
                basis=_placed_basis(master_modes[:, :count], cfg.instances[ia].rotate_deg),
                links=[_PortLink(ia, a_port, np.eye(trained, count))],
                clamped=(cfg.instances[ia].name, a_port) in clamped_set
                or (cfg.instances[ib].name, b_port) in clamped_set,
                adaptive=b_adaptive,
                count=count,
            )
            claim(ia, a_port)
            if b_adaptive:
                gp.links.append(_PortLink(ib, ADAPTIVE_AXIS, np.eye(count)))
                claim(ib, b_port)
            else:
                slave_modes = self._trained_port_basis(ib, b_port)
                perm = _match_port_nodes(
                    port_xy(ia, a_port), port_xy(ib, b_port), self._scale
                )
                aligned = _placed_basis(
                    slave_modes, cfg.instances[ib].rotate_deg
                )[_pair_rows(perm)]
                T = aligned.T @ gp.basis
                resid = np.linalg.norm(aligned @ T - gp.basis)
                if resid > MODE_MAP_RTOL * max(np.linalg.norm(gp.basis), 1.0):
                    raise PortCompatibilityError(
                        f"slave port {cfg.instances[ib].name}.{b_port} cannot "
                        f"represent the global modes of {gp.key} "
                        f"(residual {resid:.3e})"
                    )
                gp.links.append(_PortLink(ib, b_port, T))
                claim(ib, b_port)
            self.global_ports.append(gp)

        # Unconnected trained ports become free (or clamped) global ports.
        for idx, (inst, comp) in enumerate(zip(cfg.instances, self.components)):
            for pname, space in comp.archetype.port_spaces.items():
                clampable.add((inst.name, pname))
                if (idx, pname) in used:
                    continue
                count = self._active_count(space.count)
                self.global_ports.append(
                    _GlobalPort(
                        key=(inst.name, pname),
                        master=idx,
                        master_port=pname,
                        basis=_placed_basis(space.modes[:, :count], inst.rotate_deg),
                        links=[_PortLink(idx, pname, np.eye(space.count, count))],
                        clamped=(inst.name, pname) in clamped_set,
                        adaptive=False,
                        count=count,
                    )
                )
        if self.rotational is not None:
            inst = cfg.instances[self.rotational]
            adapt = [g for g in self.global_ports if g.adaptive]
            if len(adapt) != 1:
                raise ConfigError(
                    f"adaptive port {inst.name}.{inst.adaptive_port} must appear "
                    "in exactly one connection"
                )

        stray = clamped_set - clampable
        if stray:
            name, port = sorted(stray)[0]
            raise ConfigError(
                f"clamped entry {name}.{port} matches no trained port of the system"
            )

        offset = 0
        for gp in self.global_ports:
            if not gp.clamped:
                gp.offset = offset
                offset += gp.count
        self.n_sc = offset

        self._gp_of: dict[tuple[int, str], tuple[_GlobalPort, np.ndarray]] = {}
        for gp in self.global_ports:
            for link in gp.links:
                self._gp_of[(link.inst, link.port)] = (gp, link.transform)

        # Per-instance local mode axes over the trained ports.
        self._local_slices: list[dict[str, slice]] = []
        self._local_size: list[int] = []
        for comp in self.components:
            slices: dict[str, slice] = {}
            at = 0
            for pname, space in comp.archetype.port_spaces.items():
                slices[pname] = slice(at, at + space.count)
                at += space.count
            self._local_slices.append(slices)
            self._local_size.append(at)

    # ------------------------------------------------------------------
    # per-instance condensed contributions
    # ------------------------------------------------------------------

    def _effective_angle(self, idx: int, theta: float) -> float:
        inst = self.config.instances[idx]
        extra = theta if (idx == self.rotational or idx in self.co_rotating) else 0.0
        return inst.rotate_deg + extra

    def _instance_mu(self, idx: int, theta: float) -> MaterialParams:
        """Material with loads rotated into the instance reference frame."""
        inst = self.config.instances[idx]
        eff = self._effective_angle(idx, theta)
        g = np.asarray(self.config.gravity) * inst.material.density
        trac_ref = {
            tag: tuple(rotate_field(np.asarray(v, dtype=np.float64), -eff))
            for tag, v in inst.tractions.items()
        }
        return inst.material.params(
            body_force=tuple(rotate_field(g, -eff)), tractions=trac_ref
        )

    def _stationary_tables(self, idx: int, mu: MaterialParams) -> dict:
        """Reference-frame contraction tables, cached per material point."""
        inst = self.config.instances[idx]
        comp = self.components[idx]
        key = (inst.archetype, mu.E, mu.nu)
        if key in self._stationary_cache:
            return self._stationary_cache[key]
        t = mu.thetas()
        coupling = comp.coupling
        G = t[0] * coupling.gram[0] + t[1] * coupling.gram[1]
        n_off = coupling.columns.shape[1]
        C = np.zeros((n_off, self._local_size[idx]))
        for pname, sl in self._local_slices[idx].items():
            for k in range(sl.stop - sl.start):
                col = sl.start + k
                C[coupling.ext_col[(pname, k)], col] = 1.0
                s0, s1 = coupling.rb_cols[(pname, k)]
                C[s0:s1, col] = comp.mode_spaces[(pname, k)].coefficients(mu)
        GC = G @ C
        M = C.T @ GC
        tables = {"C": C, "G": G, "GC": GC, "M": 0.5 * (M + M.T)}
        self._stationary_cache[key] = tables
        return tables

    def _stationary_contribution(self, idx: int, mu: MaterialParams):
        """(local M, local F, offline force coords) for a stationary instance."""
        comp = self.components[idx]
        coupling = comp.coupling
        tables = self._stationary_tables(idx, mu)
        u_f = comp.force_space.coefficients(mu)
        s0, s1 = coupling.force_cols
        c_f = np.zeros(coupling.columns.shape[1])
        c_f[s0:s1] = u_f

        lvec = coupling.body_loads @ np.asarray(mu.body_force)
        for tag, trac in mu.tractions.items():
            if tag not in coupling.trac_loads:
                raise ValidationError(f"no trained load column for tag {tag!r}")
            lvec = lvec + coupling.trac_loads[tag] @ np.asarray(trac)
        F = tables["C"].T @ lvec - tables["GC"].T @ c_f
        return tables["M"], F, c_f

    def _fe_tables(self, idx: int, mu: MaterialParams) -> dict:
        inst = self.config.instances[idx]
        comp = self.components[idx]
        key = (inst.archetype, mu.E, mu.nu)
        if key in self._fe_cache:
            return self._fe_cache[key]
        arch = comp.archetype
        solver = FEBubbleSolver(arch, mu)
        fields = np.empty((2 * arch.mesh.num_nodes, self._local_size[idx]))
        for pname, sl in self._local_slices[idx].items():
            for k in range(sl.stop - sl.start):
                psi = arch.extensions[(pname, k)]
                fields[:, sl.start + k] = psi + solver.bubble(psi)
        t = mu.thetas()
        images = t[0] * (arch.operator.terms[0] @ fields)
        images += t[1] * (arch.operator.terms[1] @ fields)
        M = fields.T @ images
        tables = {"solver": solver, "fields": fields, "images": images,
                  "M": 0.5 * (M + M.T)}
        self._fe_cache[key] = tables
        return tables

    def _fe_contribution(self, idx: int, mu: MaterialParams):
        """Full-order variant of :meth:`_stationary_contribution`."""
        comp = self.components[idx]
        tables = self._fe_tables(idx, mu)
        b_f = tables["solver"].force_bubble(mu)
        load = assemble_load(comp.archetype.mesh, mu)
        F = tables["fields"].T @ load - tables["images"].T @ b_f
        return tables["M"], F, b_f

    def _rotational_contribution(self, rot: RotorOnline, adaptive_gp: _GlobalPort):
        """Condensed block of the combined rotating component.

        The per-angle energy and load already live on ``rot``; what is
        left is eliminating the unit-weight load response into the
        right-hand side and mapping mode columns onto port slices.
        """
        arch = self.components[self.rotational].archetype
        slices: dict[str, slice] = {}
        for col, label in enumerate(rot.labels):
            if label[0] == "adaptive":
                if ADAPTIVE_AXIS not in slices:
                    slices[ADAPTIVE_AXIS] = slice(col, col + adaptive_gp.count)
            elif label != ("force",):
                pname = label[0]
                if pname not in slices:
                    slices[pname] = slice(col, col + arch.port_spaces[pname].count)

        force_col = len(rot.labels) - 1
        M = rot.M[:force_col, :force_col]
        F = rot.f[:force_col] - rot.M[force_col, :force_col]
        return M, F, slices, rot

    # ------------------------------------------------------------------
    # solve
    # ------------------------------------------------------------------

    def condensed_system(self, theta: float = 0.0):
        """Assemble the condensed operator and load at one angle.

        Returns ``(K, F, context)`` where the context dict carries the
        per-instance data needed to expand coefficients back into fields.
        """
        cfg = self.config
        t_start = time.perf_counter()
        buffer_s = 0.0
        bubble_s = 0.0

        # Rotating instance: buffer mesh, then condensed tables at this angle.
        rot_online = buffer_mesh = rot_mesh = adaptive_gp = None
        if self.rotational is not None:
            idx = self.rotational
            adaptive_gp = next(g for g in self.global_ports if g.adaptive)
            master_mesh = self.placed[adaptive_gp.master]
            master_port = master_mesh.port(adaptive_gp.master_port)

            t0 = time.perf_counter()
            rot_mesh = rotate_mesh(self.placed[idx], tuple(self.center), theta)
            outer_loop = rot_mesh.nodes[
                rot_mesh.port(cfg.instances[idx].adaptive_port).nodes
            ]
            buffer_mesh = generate_buffer(
                BufferSpec(
                    inner=master_mesh.nodes[master_port.nodes],
                    outer=outer_loop,
                    closed=master_port.closed,
                )
            ).with_regions(idx)
            buffer_s = time.perf_counter() - t0

            g_global = np.asarray(cfg.gravity) * cfg.instances[idx].material.density
            rot_online = rotor_condense(
                self.components[idx].split,
                self._instance_mu(idx, theta),
                self._effective_angle(idx, theta),
                buffer_mesh,
                adaptive_gp.basis,
                body_force=(g_global[0], g_global[1]),
            )
            bubble_s += rot_online.seconds

        # Stationary contributions (co-rotating instances included: their
        # tables are angle-independent, only their loads rotate).
        t0 = time.perf_counter()
        contributions: dict[int, tuple] = {}
        for idx in range(len(cfg.instances)):
            if idx == self.rotational:
                continue
            mu = self._instance_mu(idx, theta)
            if self.bubbles == "rb":
                contributions[idx] = self._stationary_contribution(idx, mu)
            else:
                contributions[idx] = self._fe_contribution(idx, mu)
        bubble_s += time.perf_counter() - t0

        t0 = time.perf_counter()
        rot_data = None
        if self.rotational is not None:
            rot_data = self._rotational_contribution(rot_online, adaptive_gp)

        # Global assembly over active port modes.
        K = np.zeros((self.n_sc, self.n_sc))
        F = np.zeros(self.n_sc)

        def scatter(idx: int, M_local, F_local, slices) -> None:
            for p_name, sl_p in slices.items():
                gp_p, T_p = self._gp_of[(idx, p_name)]
                if gp_p.clamped:
                    continue
                rows = slice(gp_p.offset, gp_p.offset + gp_p.count)
                F[rows] += T_p.T @ F_local[sl_p]
                for q_name, sl_q in slices.items():
                    gp_q, T_q = self._gp_of[(idx, q_name)]
                    if gp_q.clamped:
                        continue
                    cols = slice(gp_q.offset, gp_q.offset + gp_q.count)
                    K[rows, cols] += T_p.T @ M_local[sl_p, sl_q] @ T_q

        for idx, (M_local, F_local, _) in contributions.items():
            scatter(idx, M_local, F_local, self._local_slices[idx])
        if rot_data is not None:
            scatter(self.rotational, rot_data[0], rot_data[1], rot_data[2])

        K = 0.5 * (K + K.T)
        context = {
            "theta": theta,
            "contributions": contributions,
            "rot_data": rot_data,
            "buffer_mesh": buffer_mesh,
            "rot_mesh": rot_mesh,
            "adaptive_gp": adaptive_gp,
            "buffer_s": buffer_s,
            "bubble_s": bubble_s,
            "assemble_start": t0,
            "start": t_start,
        }
        return K, F, context

    def solve(self, theta: float = 0.0) -> SystemSolution:
        K, F, ctx = self.condensed_system(theta)
        try:
            chol, lower = scipy.linalg.cho_factor(K)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(
                f"condensed system is not positive definite ({exc}); "
                "is the system clamped?"
            ) from None
        d = np.abs(np.diag(chol))
        if d.size and d.min() <= np.sqrt(np.finfo(float).eps) * d.max():
            raise SingularMatrixError(
                "condensed system is numerically singular; is the system clamped?"
            )
        U = scipy.linalg.cho_solve((chol, lower), F)
        solve_s = time.perf_counter() - ctx["assemble_start"]

        solution = self._reconstruct(
            theta, U, ctx["contributions"], ctx["rot_data"], ctx["buffer_mesh"],
            ctx["rot_mesh"], ctx["adaptive_gp"]
        )
        solution.timings = {
            "buffer_s": ctx["buffer_s"],
            "bubble_s": ctx["bubble_s"],
            "solve_s": solve_s,
            "total_s": time.perf_counter() - ctx["start"],
        }
        return solution

    # ------------------------------------------------------------------

    def _local_coeffs(self, idx: int, U: np.ndarray) -> np.ndarray:
        """Back-map global coefficients onto one instance's trained modes."""
        out = np.zeros(self._local_size[idx])
        for pname, sl in self._local_slices[idx].items():
            gp, T = self._gp_of[(idx, pname)]
            if not gp.clamped:
                out[sl] = T @ U[gp.offset : gp.offset + gp.count]
        return out

    def _reconstruct(self, theta, U, contributions, rot_data, buffer_mesh,
                     rot_mesh, adaptive_gp) -> SystemSolution:
        cfg = self.config
        meshes: list[Mesh] = []
        fields: list[np.ndarray] = []
        materials: dict[int, MaterialParams] = {}

        for idx, inst in enumerate(cfg.instances):
            materials[idx] = MaterialParams(E=inst.material.E, nu=inst.material.nu)
            if idx == self.rotational:
                meshes.append(rot_mesh)
                fields.append(None)  # filled below from the online data
                continue
            mesh = self.placed[idx]
            if idx in self.co_rotating:
                mesh = rotate_mesh(mesh, tuple(self.center), theta)
            meshes.append(mesh)
            c_local = self._local_coeffs(idx, U)
            extra = contributions[idx][2]
            key = (inst.archetype, inst.material.E, inst.material.nu)
            if self.bubbles == "rb":
                coupling = self.components[idx].coupling
                w = coupling.columns @ (
                    self._stationary_cache[key]["C"] @ c_local + extra
                )
            else:
                w = self._fe_cache[key]["fields"] @ c_local + extra
            fields.append(rotate_field(w, self._effective_angle(idx, theta)))

        if self.rotational is not None:
            idx = self.rotational
            _, _, slices, rot_online = rot_data
            c = np.zeros(len(rot_online.labels))
            c[-1] = 1.0  # the load response enters with unit weight
            if not adaptive_gp.clamped:
                c[slices[ADAPTIVE_AXIS]] = U[
                    adaptive_gp.offset : adaptive_gp.offset + adaptive_gp.count
                ]
            c_local = self._local_coeffs(idx, U)
            for pname, sl in self._local_slices[idx].items():
                c[slices[pname]] = c_local[sl]
            body, buf = rot_online.expand(c)
            fields[idx] = body
            meshes.append(buffer_mesh)
            fields.append(buf)

        merged, maps = self._merger.merge(meshes)
        disp = np.zeros(2 * merged.num_nodes)
        for mesh, fvec, node_map in zip(meshes, fields, maps):
            dofs = np.empty(2 * mesh.num_nodes, dtype=np.int64)
            dofs[0::2] = 2 * node_map
            dofs[1::2] = 2 * node_map + 1
            disp[dofs] = fvec

        return SystemSolution(
            theta=theta,
            mesh=merged,
            displacement=disp,
            materials=materials,
            n_sc=self.n_sc,
            timings={},
            instance_meshes=meshes,
            instance_fields=fields,
            coefficients=U,
        )
