"""System synthesis: condensed assembly against monolithic references.

The load-bearing check: with one trained mode per port DoF and full-order
interior corrections, the condensed operator must equal the Schur
complement of the monolithic merged system over the interface DoFs —
condensation is then an exact elimination, so matrices, loads, and
displacements all match to solver precision.
"""

import numpy as np
import pytest

from apcms.errors import (
    ConfigError,
    PortCompatibilityError,
    SingularMatrixError,
    ValidationError,
)
from apcms.fem import MaterialParams, assemble_load, build_affine_operator, von_mises
from apcms.library import train_component
from apcms.mesh import merge_with_maps, place_mesh
from apcms.oracle import oracle_solve, re_max, rrmse
from apcms.structured import annulus_mesh, rect_mesh
from apcms.synthesis import (
    SystemSolver,
    load_system_config,
    parse_system_config,
    save_system_config,
    system_config_to_dict,
)

N = 5  # grid nodes per square edge
GRAVITY = [1.3, -9.81]  # tilted so no symmetry hides frame mistakes

STEEL = {"E": 200e9, "nu": 0.3, "density": 7800.0}
ALUM = {"E": 70e9, "nu": 0.25, "density": 2700.0}


def _square(ports, n=N):
    grid = np.linspace(0.0, 1.0, n)
    return rect_mesh(grid, grid, ports=ports)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture(scope="module")
def square_library():
    return {
        "square_we": train_component(
            "square_we",
            _square({"left": "w", "right": "e"}),
            {"w": ("full", None), "e": ("full", None)},
        ),
        "square_w": train_component(
            "square_w", _square({"left": "w"}), {"w": ("full", None)}
        ),
        "square_e": train_component(
            "square_e", _square({"right": "e2"}), {"e2": ("full", None)}
        ),
    }


def _two_square_config(**overrides):
    data = {
        "gravity": GRAVITY,
        "instances": [
            {"name": "left", "archetype": "square_we", "material": STEEL},
            {
                "name": "right",
                "archetype": "square_w",
                "material": ALUM,
                "translate": [1.0, 0.0],
            },
        ],
        "connections": [[["left", "e"], ["right", "w"]]],
        "clamped": [["left", "w"]],
    }
    data.update(overrides)
    return parse_system_config(data)


def _dense_system(pieces, mus):
    """Monolithic stiffness and load on the merged mesh (dense, test-sized)."""
    merged, maps = merge_with_maps(pieces)
    n = merged.num_dofs
    K = np.zeros((n, n))
    f = np.zeros(n)
    for mesh, mu, node_map in zip(pieces, mus, maps):
        dofs = np.empty(2 * mesh.num_nodes, dtype=np.int64)
        dofs[0::2] = 2 * node_map
        dofs[1::2] = 2 * node_map + 1
        K[np.ix_(dofs, dofs)] += build_affine_operator(mesh).assemble(mu).toarray()
        np.add.at(f, dofs, assemble_load(mesh, mu))
    return merged, maps, K, f


def _global_mu(spec, gravity=GRAVITY, tractions=None):
    g = np.asarray(gravity) * spec["density"]
    return MaterialParams(
        E=spec["E"], nu=spec["nu"], body_force=(g[0], g[1]),
        tractions=tractions or {},
    )


def _interleave(nodes):
    dofs = np.empty(2 * len(nodes), dtype=np.int64)
    dofs[0::2] = 2 * nodes
    dofs[1::2] = 2 * nodes + 1
    return dofs


# ---------------------------------------------------------------------------
# configuration parsing
# ---------------------------------------------------------------------------

class TestSystemConfig:
    def test_round_trips_through_its_dict_form(self):
        cfg = _two_square_config()
        assert parse_system_config(system_config_to_dict(cfg)) == cfg

    def test_round_trips_through_a_file(self, tmp_path):
        cfg = _two_square_config()
        path = tmp_path / "system.json"
        save_system_config(cfg, path)
        assert load_system_config(path) == cfg

    def test_rejects_duplicate_instance_names(self):
        with pytest.raises(ConfigError, match="duplicate"):
            _two_square_config(
                instances=[
                    {"name": "left", "archetype": "square_we", "material": STEEL},
                    {"name": "left", "archetype": "square_w", "material": ALUM},
                ]
            )

    def test_rejects_unknown_instance_in_connection(self):
        with pytest.raises(ConfigError, match="nobody"):
            _two_square_config(connections=[[["left", "e"], ["nobody", "w"]]])

    def test_rejects_unknown_instance_in_clamp_list(self):
        with pytest.raises(ConfigError, match="nobody"):
            _two_square_config(clamped=[["nobody", "w"]])

    def test_rejects_missing_material_field(self):
        with pytest.raises(ConfigError, match="malformed"):
            _two_square_config(
                instances=[{"name": "left", "archetype": "square_we",
                            "material": {"E": 1.0}}]
            )

    def test_rejects_two_rotating_instances(self):
        with pytest.raises(ConfigError, match="at most one"):
            _two_square_config(
                instances=[
                    {"name": "left", "archetype": "square_we", "material": STEEL,
                     "adaptive_port": "w"},
                    {"name": "right", "archetype": "square_w", "material": ALUM,
                     "adaptive_port": "w"},
                ]
            )

    def test_rejects_co_rotation_with_a_stationary_target(self):
        with pytest.raises(ConfigError, match="no adaptive port"):
            _two_square_config(
                instances=[
                    {"name": "left", "archetype": "square_we", "material": STEEL},
                    {"name": "right", "archetype": "square_w", "material": ALUM,
                     "co_rotate_with": "left"},
                ]
            )


# ---------------------------------------------------------------------------
# exactness of the condensed system (full modes + full-order corrections)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def monolithic(square_library):
    cfg = _two_square_config()
    pieces = [
        place_mesh(square_library["square_we"].archetype.mesh, (0.0, 0.0), 0.0),
        place_mesh(square_library["square_w"].archetype.mesh, (1.0, 0.0), 0.0),
    ]
    mus = [_global_mu(STEEL), _global_mu(ALUM)]
    merged, maps, K, f = _dense_system(pieces, mus)
    fixed = _interleave(maps[0][pieces[0].port("w").nodes])
    interface = _interleave(maps[0][pieces[0].port("e").nodes])
    return cfg, pieces, merged, maps, K, f, fixed, interface


class TestInterfaceEliminationIsExact:
    """Frozen reference: the condensed operator is a Schur complement."""

    def test_condensed_operator_equals_the_schur_complement(
        self, square_library, monolithic
    ):
        cfg, _, merged, _, K, f, fixed, interface = monolithic
        solver = SystemSolver(square_library, cfg, bubbles="fe")
        K_rom, F_rom, _ = solver.condensed_system(0.0)
        assert solver.n_sc == 2 * N
        assert K_rom.shape == (2 * N, 2 * N)

        mask = np.ones(merged.num_dofs, dtype=bool)
        mask[fixed] = False
        mask[interface] = False
        inner = np.flatnonzero(mask)
        A_ii = K[np.ix_(inner, inner)]
        A_gi = K[np.ix_(interface, inner)]
        X = np.linalg.solve(
            A_ii, np.column_stack([K[np.ix_(inner, interface)], f[inner]])
        )
        schur = K[np.ix_(interface, interface)] - A_gi @ X[:, :-1]
        load = f[interface] - A_gi @ X[:, -1]

        assert np.linalg.norm(K_rom - schur) <= 1e-9 * np.linalg.norm(schur)
        assert np.linalg.norm(F_rom - load) <= 1e-9 * np.linalg.norm(load)

    def test_solution_matches_the_monolithic_solve(self, square_library, monolithic):
        cfg, _, merged, _, K, f, fixed, interface = monolithic
        mask = np.ones(merged.num_dofs, dtype=bool)
        mask[fixed] = False
        free = np.flatnonzero(mask)
        u = np.zeros(merged.num_dofs)
        u[free] = np.linalg.solve(K[np.ix_(free, free)], f[free])

        solution = SystemSolver(square_library, cfg, bubbles="fe").solve(0.0)
        assert solution.mesh.num_nodes == merged.num_nodes
        assert _rel(solution.displacement, u) <= 1e-9
        # With one mode per port DoF the coefficients ARE the interface values.
        assert np.allclose(solution.coefficients, u[interface], atol=1e-9 * np.abs(u).max())
        assert set(solution.timings) == {"buffer_s", "bubble_s", "solve_s", "total_s"}

    def test_oracle_agrees_with_the_dense_reference(self, square_library, monolithic):
        cfg, _, merged, _, K, f, fixed, _ = monolithic
        mask = np.ones(merged.num_dofs, dtype=bool)
        mask[fixed] = False
        free = np.flatnonzero(mask)
        u = np.zeros(merged.num_dofs)
        u[free] = np.linalg.solve(K[np.ix_(free, free)], f[free])

        oracle = oracle_solve(square_library, cfg, 0.0)
        assert oracle.n_dofs == merged.num_dofs
        assert oracle.n_free == len(free)
        assert _rel(oracle.displacement, u) <= 1e-9

    def test_rotated_placement_still_matches_the_monolithic_solve(
        self, square_library
    ):
        # The neighbor is flipped 180 degrees, so its connecting edge is its
        # own "east" side and its trained frame disagrees with the global one.
        cfg = _two_square_config(
            instances=[
                {"name": "left", "archetype": "square_we", "material": STEEL},
                {"name": "right", "archetype": "square_e", "material": ALUM,
                 "translate": [2.0, 1.0], "rotate_deg": 180.0},
            ],
            connections=[[["left", "e"], ["right", "e2"]]],
        )
        pieces = [
            place_mesh(square_library["square_we"].archetype.mesh, (0.0, 0.0), 0.0),
            place_mesh(square_library["square_e"].archetype.mesh, (2.0, 1.0), 180.0),
        ]
        merged, maps, K, f = _dense_system(pieces, [_global_mu(STEEL), _global_mu(ALUM)])
        fixed = _interleave(maps[0][pieces[0].port("w").nodes])
        mask = np.ones(merged.num_dofs, dtype=bool)
        mask[fixed] = False
        free = np.flatnonzero(mask)
        u = np.zeros(merged.num_dofs)
        u[free] = np.linalg.solve(K[np.ix_(free, free)], f[free])

        solution = SystemSolver(square_library, cfg, bubbles="fe").solve(0.0)
        assert _rel(solution.displacement, u) <= 1e-8


# ---------------------------------------------------------------------------
# reduced bubbles against full-order bubbles
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def plate_library():
    # Snapshot grid contains the solve point, and the load snapshots span
    # both body-force directions and both traction directions on "top",
    # so the reduced spaces reproduce the full-order bubbles exactly.
    mode_set = [MaterialParams(E=STEEL["E"], nu=STEEL["nu"])]
    force_set = [
        MaterialParams(E=STEEL["E"], nu=STEEL["nu"], body_force=(1.0, 0.0)),
        MaterialParams(E=STEEL["E"], nu=STEEL["nu"], body_force=(0.0, 1.0)),
        MaterialParams(E=STEEL["E"], nu=STEEL["nu"], tractions={"top": (1.0, 0.0)}),
        MaterialParams(E=STEEL["E"], nu=STEEL["nu"], tractions={"top": (0.0, 1.0)}),
    ]
    comp = train_component(
        "plate",
        _square({"left": "w", "right": "e"}),
        {"w": ("eigen", 6), "e": ("eigen", 6)},
        train_set=mode_set,
        force_set=force_set,
    )
    return {"plate": comp}


class TestReducedBubbles:
    TRACTION = {"top": (2.5e6, -1.0e6)}

    def _config(self):
        return parse_system_config(
            {
                "gravity": GRAVITY,
                "instances": [
                    {"name": "plate", "archetype": "plate", "material": STEEL,
                     "tractions": {"top": list(self.TRACTION["top"])}},
                ],
                "clamped": [["plate", "w"]],
            }
        )

    def test_reduced_and_full_order_paths_agree_at_a_snapshot(self, plate_library):
        cfg = self._config()
        fe = SystemSolver(plate_library, cfg, bubbles="fe").solve(0.0)
        rb = SystemSolver(plate_library, cfg, bubbles="rb").solve(0.0)
        assert fe.n_sc == rb.n_sc == 6
        assert _rel(rb.displacement, fe.displacement) <= 1e-8

    def test_reduced_path_requires_trained_reduced_data(self, square_library):
        cfg = _two_square_config()
        with pytest.raises(ConfigError, match="full-order"):
            SystemSolver(square_library, cfg, bubbles="rb")

    def test_unknown_traction_tag_is_reported(self, plate_library):
        cfg = parse_system_config(
            {
                "gravity": GRAVITY,
                "instances": [
                    {"name": "plate", "archetype": "plate", "material": STEEL,
                     "tractions": {"rim": [1.0, 0.0]}},
                ],
                "clamped": [["plate", "w"]],
            }
        )
        with pytest.raises(ValidationError, match="rim"):
            SystemSolver(plate_library, cfg, bubbles="rb").solve(0.0)


# ---------------------------------------------------------------------------
# port-mode restriction
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def eigen_library():
    full = 2 * N  # every chain eigenvector: the basis spans the full trace space
    return {
        "square_we": train_component(
            "square_we",
            _square({"left": "w", "right": "e"}),
            {"w": ("eigen", full), "e": ("eigen", full)},
        ),
        "square_w": train_component(
            "square_w", _square({"left": "w"}), {"w": ("eigen", full)}
        ),
    }


class TestPortModeRestriction:
    def test_error_decreases_with_mode_count_and_vanishes_at_full(self, eigen_library):
        cfg = _two_square_config()
        pieces = [
            place_mesh(eigen_library["square_we"].archetype.mesh, (0.0, 0.0), 0.0),
            place_mesh(eigen_library["square_w"].archetype.mesh, (1.0, 0.0), 0.0),
        ]
        merged, maps, K, f = _dense_system(pieces, [_global_mu(STEEL), _global_mu(ALUM)])
        fixed = _interleave(maps[0][pieces[0].port("w").nodes])
        mask = np.ones(merged.num_dofs, dtype=bool)
        mask[fixed] = False
        free = np.flatnonzero(mask)
        u = np.zeros(merged.num_dofs)
        u[free] = np.linalg.solve(K[np.ix_(free, free)], f[free])

        errors = []
        for count in (2, 6, None):
            solver = SystemSolver(eigen_library, cfg, port_modes=count, bubbles="fe")
            solution = solver.solve(0.0)
            # Only the shared port is live: the west port is clamped.
            assert solver.n_sc == (count if count else 2 * N)
            errors.append(_rel(solution.displacement, u))
        assert errors[0] > errors[1] > errors[2]
        assert errors[2] <= 1e-8

    def test_rejects_odd_or_oversized_mode_requests(self, eigen_library):
        cfg = _two_square_config()
        with pytest.raises(ValidationError, match="even"):
            SystemSolver(eigen_library, cfg, port_modes=3, bubbles="fe")
        with pytest.raises(ValidationError, match="trained"):
            SystemSolver(eigen_library, cfg, port_modes=2 * N + 2, bubbles="fe")


# ---------------------------------------------------------------------------
# interface compatibility failures
# ---------------------------------------------------------------------------

class TestInterfaceCompatibility:
    def test_mismatched_node_counts_are_rejected(self, square_library):
        library = dict(square_library)
        library["square_w"] = train_component(
            "square_w", _square({"left": "w"}, n=N + 2), {"w": ("full", None)}
        )
        with pytest.raises(PortCompatibilityError, match="nodes"):
            SystemSolver(library, _two_square_config(), bubbles="fe")

    def test_gapped_interfaces_are_rejected(self, square_library):
        cfg = _two_square_config()
        shifted = _two_square_config(
            instances=[
                {"name": "left", "archetype": "square_we", "material": STEEL},
                {"name": "right", "archetype": "square_w", "material": ALUM,
                 "translate": [1.05, 0.0]},
            ],
            connections=cfg.connections,
        )
        with pytest.raises(PortCompatibilityError, match="coincide"):
            SystemSolver(square_library, shifted, bubbles="fe")

    def test_slave_basis_too_small_for_the_global_modes(self, square_library):
        library = dict(square_library)
        library["square_w"] = train_component(
            "square_w", _square({"left": "w"}), {"w": ("eigen", 4)}
        )
        with pytest.raises(PortCompatibilityError, match="represent"):
            SystemSolver(library, _two_square_config(), bubbles="fe")

    def test_unknown_archetype_is_reported(self, square_library):
        cfg = _two_square_config(
            instances=[
                {"name": "left", "archetype": "hexagon", "material": STEEL},
            ],
            connections=[],
            clamped=[],
        )
        with pytest.raises(ConfigError, match="hexagon"):
            SystemSolver(square_library, cfg, bubbles="fe")

    def test_unclamped_system_reports_singularity(self, square_library):
        cfg = _two_square_config(clamped=[])
        with pytest.raises(SingularMatrixError, match="clamped"):
            SystemSolver(square_library, cfg, bubbles="fe").solve(0.0)

    def test_clamped_entry_must_name_a_trained_port(self, square_library):
        cfg = _two_square_config(clamped=[["left", "north"]])
        with pytest.raises(ConfigError, match="left.north"):
            SystemSolver(square_library, cfg, bubbles="fe")


# ---------------------------------------------------------------------------
# rotating subsystem against the monolithic oracle
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def rotor_library():
    disk_mesh = annulus_mesh(
        (0.0, 0.0), np.linspace(0.3, 1.0, 4), 48,
        outer_port="rim", inner_tag="hub",
    )
    ring_mesh = annulus_mesh(
        (0.0, 0.0), np.linspace(1.05, 1.4, 3), 48,
        inner_port="bore", outer_port="rim",
    )
    return {
        "disk": train_component(
            "disk", disk_mesh, {"rim": ("full", None)}, clamped_tags=("hub",)
        ),
        "ring": train_component(
            "ring", ring_mesh,
            {"bore": ("none", None), "rim": ("full", None)},
            adaptive_port="bore",
        ),
    }


def _rotor_config():
    return parse_system_config(
        {
            "gravity": GRAVITY,
            "instances": [
                {"name": "disk", "archetype": "disk", "material": STEEL},
                {"name": "ring", "archetype": "ring",
                 "material": {"E": 30e9, "nu": 0.2, "density": 1800.0},
                 "adaptive_port": "bore"},
            ],
            "connections": [[["disk", "rim"], ["ring", "bore"]]],
        }
    )


class TestRotatingSystem:
    @pytest.mark.parametrize("theta", [0.0, 18.0, -73.0])
    def test_matches_the_monolithic_oracle_at_any_angle(self, rotor_library, theta):
        cfg = _rotor_config()
        solution = SystemSolver(rotor_library, cfg, bubbles="fe").solve(theta)
        oracle = oracle_solve(rotor_library, cfg, theta)
        assert solution.mesh.num_nodes == oracle.mesh.num_nodes
        assert solution.n_sc == 2 * 96  # disk rim + free ring rim, one mode per DoF
        assert _rel(solution.displacement, oracle.displacement) <= 1e-8

        vm_rom = von_mises(solution.mesh, solution.displacement, solution.materials)
        vm_ref = von_mises(oracle.mesh, oracle.displacement, oracle.materials)
        assert rrmse(vm_rom, vm_ref) <= 1e-8
        assert re_max(vm_rom, vm_ref) <= 1e-8

    def test_new_angle_needs_no_interior_solves(self, rotor_library):
        # The per-material budget is n_b + (body modes) + 2 interior solves;
        # after that, every further angle is pure interface-sized algebra.
        cfg = _rotor_config()
        solver = SystemSolver(rotor_library, cfg, bubbles="fe")
        solver.solve(12.0)
        split = solver.components[1].split
        mu = MaterialParams(E=30e9, nu=0.2)
        baseline = split.factor(mu).solve_count
        assert baseline == split.n_b + len(split.rhs_cores) + 2
        solver.solve(-104.0)
        solver.solve(63.0)
        assert split.factor(mu).solve_count == baseline
        assert len(split._factors) == 1

    def test_rotation_must_be_trained(self, square_library):
        cfg = _two_square_config(
            instances=[
                {"name": "left", "archetype": "square_we", "material": STEEL},
                {"name": "right", "archetype": "square_w", "material": ALUM,
                 "translate": [1.0, 0.0], "adaptive_port": "w"},
            ]
        )
        with pytest.raises(ConfigError, match="rotation"):
            SystemSolver(square_library, cfg, bubbles="fe")
