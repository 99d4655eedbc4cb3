"""Reference-solver placement rules and comparison metrics."""

import numpy as np
import pytest

from apcms.errors import ConfigError
from apcms.library import train_component
from apcms.oracle import oracle_solve, place_system, re_max, rrmse
from apcms.structured import annulus_mesh, rect_mesh
from apcms.synthesis import parse_system_config


@pytest.fixture(scope="module")
def rotor_library():
    disk_mesh = annulus_mesh(
        (0.0, 0.0), np.linspace(0.3, 1.0, 3), 32,
        outer_port="rim", inner_tag="hub",
    )
    ring_mesh = annulus_mesh(
        (0.0, 0.0), np.linspace(1.1, 1.4, 3), 32,
        inner_port="bore", outer_port="rim",
    )
    blade_mesh = rect_mesh(
        np.linspace(0.0, 0.2, 3), np.linspace(0.0, 0.1, 2),
        ports={"left": "root"},
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
        "blade": train_component("blade", blade_mesh, {"root": ("full", None)}),
    }


def _config(extra_instances=(), extra_connections=()):
    return parse_system_config(
        {
            "gravity": [0.0, -9.81],
            "instances": [
                {"name": "disk", "archetype": "disk",
                 "material": {"E": 200e9, "nu": 0.3, "density": 7800.0}},
                {"name": "ring", "archetype": "ring",
                 "material": {"E": 30e9, "nu": 0.2, "density": 1800.0},
                 "adaptive_port": "bore"},
                *extra_instances,
            ],
            "connections": [[["disk", "rim"], ["ring", "bore"]],
                            *extra_connections],
        }
    )


class TestPlacement:
    def test_rotation_turns_the_rotating_instance_only(self, rotor_library):
        cfg = _config()
        ref, _ = place_system(rotor_library, cfg, 0.0)
        turned, buffer_mesh = place_system(rotor_library, cfg, 30.0)
        assert np.allclose(turned[0].nodes, ref[0].nodes)  # disk stays put
        assert not np.allclose(turned[1].nodes, ref[1].nodes)
        # Rigid rotation: every ring node keeps its radius.
        assert np.allclose(
            np.linalg.norm(turned[1].nodes, axis=1),
            np.linalg.norm(ref[1].nodes, axis=1),
        )
        assert buffer_mesh is not None
        assert np.all(buffer_mesh.regions == 1)

    def test_co_rotating_instances_turn_with_the_rotor(self, rotor_library):
        # The blade root sits on the ring's outer circle at radius 1.4.
        blade = {
            "name": "blade", "archetype": "blade",
            "material": {"E": 30e9, "nu": 0.2, "density": 1800.0},
            "translate": [1.4, 0.0], "co_rotate_with": "ring",
        }
        cfg = _config(extra_instances=[blade])
        ref, _ = place_system(rotor_library, cfg, 0.0)
        turned, _ = place_system(rotor_library, cfg, 45.0)
        assert np.allclose(
            np.linalg.norm(turned[2].nodes, axis=1),
            np.linalg.norm(ref[2].nodes, axis=1),
        )
        assert not np.allclose(turned[2].nodes, ref[2].nodes)

    def test_unconnected_adaptive_port_is_an_error(self, rotor_library):
        cfg = parse_system_config(
            {
                "instances": [
                    {"name": "ring", "archetype": "ring",
                     "material": {"E": 30e9, "nu": 0.2},
                     "adaptive_port": "bore"},
                ],
            }
        )
        with pytest.raises(ConfigError, match="connection"):
            place_system(rotor_library, cfg, 0.0)

    def test_stationary_system_has_no_buffer(self, rotor_library):
        cfg = parse_system_config(
            {
                "instances": [
                    {"name": "disk", "archetype": "disk",
                     "material": {"E": 200e9, "nu": 0.3, "density": 7800.0}},
                ],
            }
        )
        meshes, buffer_mesh = place_system(rotor_library, cfg, 0.0)
        assert buffer_mesh is None
        assert len(meshes) == 1


class TestOracleSolve:
    def test_reports_sizes_and_timings(self, rotor_library):
        oracle = oracle_solve(rotor_library, _config(), 10.0)
        assert oracle.n_dofs == 2 * oracle.mesh.num_nodes
        assert 0 < oracle.n_free < oracle.n_dofs
        assert set(oracle.timings) == {"mesh_s", "assemble_s", "solve_s", "total_s"}
        assert np.all(np.isfinite(oracle.displacement))
        assert np.linalg.norm(oracle.displacement) > 0.0

    def test_displacement_is_rotation_equivariant_without_gravity_direction_change(
        self, rotor_library
    ):
        # Pure self-weight of an axisymmetric pair: turning the ring relabels
        # material points but the disk's deformation stays the same scale.
        u0 = oracle_solve(rotor_library, _config(), 0.0)
        u1 = oracle_solve(rotor_library, _config(), 45.0)
        m0 = float(np.abs(u0.displacement).max())
        m1 = float(np.abs(u1.displacement).max())
        assert abs(m0 - m1) <= 0.05 * m0


class TestMetrics:
    def test_rrmse_frozen_values(self):
        ref = np.array([3.0, 4.0])
        assert rrmse(np.array([3.0, 4.0]), ref) == 0.0
        assert rrmse(np.array([3.0, 4.0 + 5.0e-2]), ref) == pytest.approx(1e-2)
        assert rrmse(np.array([1.0, 0.0]), np.zeros(2)) == 1.0

    def test_re_max_frozen_values(self):
        ref = np.array([1.0, 2.0])
        assert re_max(np.array([0.5, 2.2]), ref) == pytest.approx(0.1)
        assert re_max(np.array([0.5, 1.8]), ref) == pytest.approx(0.1)
        assert re_max(np.array([3.0]), np.zeros(1)) == 3.0
