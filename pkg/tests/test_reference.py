"""Built-in rotor-in-housing scenario: geometry, manifests, config."""

import pytest

from apcms.errors import ValidationError
from apcms.library import load_training_manifest
from apcms.mesh import load_mesh
from apcms.reference import (
    make_reference,
    reference_meshes,
    reference_system,
    reference_training_manifest,
)
from apcms.synthesis import load_system_config


class TestReferenceMeshes:
    def test_archetypes_and_ports(self):
        meshes = reference_meshes()
        assert set(meshes) == {"disk", "ring", "blade"}

        def names(mesh):
            return {p.name for p in mesh.ports}

        assert names(meshes["disk"]) == {"hub", "rim"}
        assert names(meshes["ring"]) == {"bore", "mount0", "mount1", "mount2"}
        assert names(meshes["blade"]) == {"root"}

    def test_refinement_adds_nodes_everywhere(self):
        coarse = reference_meshes(refine=1)
        fine = reference_meshes(refine=2)
        for name in coarse:
            assert fine[name].num_nodes > coarse[name].num_nodes

    def test_mount_chords_match_blade_roots(self):
        meshes = reference_meshes()
        root = meshes["blade"].port("root")
        for j in range(3):
            mount = meshes["ring"].port(f"mount{j}")
            assert len(mount.nodes) == len(root.nodes)

    @pytest.mark.parametrize("refine", [0, -1])
    def test_invalid_refine_is_rejected(self, refine):
        with pytest.raises(ValidationError):
            reference_meshes(refine=refine)


class TestReferenceManifests:
    def test_system_names_only_manifest_archetypes(self):
        manifest = reference_training_manifest()
        system = reference_system()
        trained = set(manifest["archetypes"])
        assert {inst["archetype"] for inst in system["instances"]} <= trained

    def test_full_nodal_variant_trains_every_port_dof(self):
        manifest = reference_training_manifest(full_nodal=True)
        for name, arch in manifest["archetypes"].items():
            for pname, port in arch["ports"].items():
                expected = "none" if pname == "bore" else "full"
                assert port["kind"] == expected, (name, pname)

    def test_written_scenario_round_trips(self, tmp_path):
        paths = make_reference(tmp_path)
        assert set(paths) == {"disk", "ring", "blade", "train", "train_full",
                              "system"}
        for name in ("disk", "ring", "blade"):
            mesh = load_mesh(paths[name])  # validates on load
            assert mesh.num_nodes > 0
        manifest = load_training_manifest(paths["train"])
        assert set(manifest["archetypes"]) == {"disk", "ring", "blade"}
        config = load_system_config(paths["system"])
        assert [inst.name for inst in config.instances][:2] == ["disk", "ring"]

    def test_written_files_are_deterministic(self, tmp_path):
        first = make_reference(tmp_path / "a")
        second = make_reference(tmp_path / "b")
        for key in first:
            assert first[key].read_bytes() == second[key].read_bytes()
