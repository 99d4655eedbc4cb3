"""End-to-end command-line pipeline on the built-in scenario."""

import csv
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from apcms.cli import METRICS_HEADER, SUMMARY_HEADER, main, normalize_theta
from apcms.errors import NumericalError
from apcms.vtkio import read_vtk, write_vtk

EXPECTED_HEADER = "theta,rrmse,re_max,n_sc,fe_dofs,buffer_s,bubble_s,solve_s,total_s"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Scenario + trained library + one ROM/oracle solve pair at 30 deg."""
    root = tmp_path_factory.mktemp("cli")
    scenario = root / "scenario"
    lib = root / "lib"
    assert main(["make-reference", "--out", str(scenario)]) == 0
    assert main(["train", "--manifest", str(scenario / "train.json"),
                 "--out", str(lib)]) == 0
    for cmd in ("solve", "oracle"):
        code = main([cmd, "--library", str(lib), "--system",
                     str(scenario / "system.json"), "--theta", "30",
                     "--out", str(root / f"{cmd}30")])
        assert code == 0
    return SimpleNamespace(root=root, scenario=scenario, lib=lib,
                           rom=root / "solve30", oracle=root / "oracle30")


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "apcms", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "make-reference" in proc.stdout

    def test_normalize_theta(self):
        assert normalize_theta(45.0) == 45.0
        assert normalize_theta(-180.0) == -180.0
        assert normalize_theta(270.0) == -90.0
        assert normalize_theta(360.0) == 0.0
        assert normalize_theta(-200.0) == 160.0


class TestSolveAndOracle:
    def test_metrics_header_is_exact(self, workspace):
        for out in (workspace.rom, workspace.oracle):
            first = (out / "metrics.csv").read_text().splitlines()[0]
            assert first == EXPECTED_HEADER
        assert ",".join(METRICS_HEADER) == EXPECTED_HEADER

    def test_rom_row_fills_reduction_columns(self, workspace):
        (row,) = read_rows(workspace.rom / "metrics.csv")
        assert float(row["theta"]) == 30.0
        assert int(row["n_sc"]) > 0
        assert int(row["fe_dofs"]) > int(row["n_sc"])
        for key in ("buffer_s", "bubble_s", "solve_s", "total_s"):
            assert float(row[key]) >= 0.0
        assert row["rrmse"] == "" and row["re_max"] == ""

    def test_oracle_row_fills_full_order_columns(self, workspace):
        (row,) = read_rows(workspace.oracle / "metrics.csv")
        assert float(row["theta"]) == 30.0
        assert int(row["fe_dofs"]) > 0
        assert float(row["total_s"]) >= float(row["solve_s"]) >= 0.0
        assert row["n_sc"] == "" and row["buffer_s"] == ""

    def test_solution_bytes_are_deterministic(self, workspace):
        out = workspace.root / "solve30_again"
        assert main(["solve", "--library", str(workspace.lib),
                     "--system", str(workspace.scenario / "system.json"),
                     "--theta", "30", "--out", str(out)]) == 0
        assert ((out / "solution.vtk").read_bytes()
                == (workspace.rom / "solution.vtk").read_bytes())

    def test_retraining_reproduces_library_bytes(self, workspace):
        lib2 = workspace.root / "lib_again"
        assert main(["train", "--manifest",
                     str(workspace.scenario / "train.json"),
                     "--out", str(lib2)]) == 0
        assert ((lib2 / "manifest.json").read_bytes()
                == (workspace.lib / "manifest.json").read_bytes())

    def test_out_of_range_theta_is_wrapped(self, workspace):
        out = workspace.root / "solve_wrapped"
        assert main(["solve", "--library", str(workspace.lib),
                     "--system", str(workspace.scenario / "system.json"),
                     "--theta", "270", "--out", str(out)]) == 0
        (row,) = read_rows(out / "metrics.csv")
        assert float(row["theta"]) == -90.0

    def test_port_modes_cap_shrinks_the_system(self, workspace):
        out = workspace.root / "solve_capped"
        assert main(["solve", "--library", str(workspace.lib),
                     "--system", str(workspace.scenario / "system.json"),
                     "--theta", "30", "--port-modes", "2",
                     "--out", str(out)]) == 0
        (capped,) = read_rows(out / "metrics.csv")
        (full,) = read_rows(workspace.rom / "metrics.csv")
        assert int(capped["n_sc"]) < int(full["n_sc"])


class TestCompare:
    def test_self_comparison_is_exactly_zero(self, workspace, capsys):
        assert main(["compare", str(workspace.rom), str(workspace.rom)]) == 0
        assert "rrmse=0.000000e+00 re_max=0.000000e+00" in capsys.readouterr().out

    def test_rom_against_oracle_writes_merged_row(self, workspace):
        out = workspace.root / "cmp.csv"
        assert main(["compare", str(workspace.rom), str(workspace.oracle),
                     "--out", str(out)]) == 0
        (row,) = read_rows(out)
        assert 0.0 < float(row["rrmse"]) < 0.05
        assert 0.0 <= float(row["re_max"]) < 0.05
        # reduction columns come from A, full-order timing fills from B
        assert int(row["n_sc"]) > 0
        assert float(row["total_s"]) > 0.0

    def test_uniformly_scaled_field_scores_its_scale_factor(self, workspace,
                                                            tmp_path):
        data = read_vtk(workspace.rom / "solution.vtk")
        mesh = SimpleNamespace(
            nodes=data["nodes"], triangles=data["triangles"],
            num_nodes=len(data["nodes"]), num_triangles=len(data["triangles"]),
            num_dofs=2 * len(data["nodes"]),
        )
        scaled = tmp_path / "scaled"
        scaled.mkdir()
        write_vtk(scaled / "solution.vtk", mesh, data["displacement"],
                  1.01 * data["von_mises"])
        out = tmp_path / "cmp.csv"
        assert main(["compare", str(scaled), str(workspace.rom),
                     "--out", str(out)]) == 0
        (row,) = read_rows(out)
        assert float(row["rrmse"]) == pytest.approx(0.01, rel=1e-12)
        assert float(row["re_max"]) == pytest.approx(0.01, rel=1e-12)

    def test_different_meshes_are_refused(self, workspace):
        out = workspace.root / "solve0"
        assert main(["solve", "--library", str(workspace.lib),
                     "--system", str(workspace.scenario / "system.json"),
                     "--theta", "0", "--out", str(out)]) == 0
        assert main(["compare", str(workspace.rom), str(out)]) == 2


class TestSweep:
    def test_layout_rows_and_summary(self, workspace):
        out = workspace.root / "sweep"
        assert main(["sweep", "--library", str(workspace.lib),
                     "--system", str(workspace.scenario / "system.json"),
                     "--theta-list", "0,45", "--jobs", "1",
                     "--out", str(out)]) == 0
        for theta in ("0", "45"):
            sub = out / f"theta_{theta}"
            assert (sub / "rom" / "solution.vtk").is_file()
            assert (sub / "oracle" / "solution.vtk").is_file()
            assert (sub / "metrics.csv").is_file()
        rows = read_rows(out / "metrics.csv")
        assert [float(r["theta"]) for r in rows] == [0.0, 45.0]
        for row in rows:
            assert 0.0 < float(row["rrmse"]) < 0.05

        first = (out / "summary.csv").read_text().splitlines()[0]
        assert first == ",".join(SUMMARY_HEADER)
        (summary,) = read_rows(out / "summary.csv")
        assert int(summary["points"]) == 2
        assert float(summary["speedup"]) == pytest.approx(
            float(summary["oracle_total_mean_s"])
            / float(summary["rom_total_mean_s"]), rel=1e-6)
        assert float(summary["rrmse_worst"]) == pytest.approx(
            max(float(r["rrmse"]) for r in rows), rel=1e-6)

    def test_parallel_jobs_match_serial_fields(self, workspace):
        serial = workspace.root / "sweep_serial"
        parallel = workspace.root / "sweep_parallel"
        for out, jobs in ((serial, "1"), (parallel, "2")):
            assert main(["sweep", "--library", str(workspace.lib),
                         "--system", str(workspace.scenario / "system.json"),
                         "--theta-list=-30,60", "--jobs", jobs,
                         "--out", str(out)]) == 0
        for theta in ("-30", "60"):
            for kind in ("rom", "oracle"):
                a = serial / f"theta_{theta}" / kind / "solution.vtk"
                b = parallel / f"theta_{theta}" / kind / "solution.vtk"
                assert a.read_bytes() == b.read_bytes()

    def test_empty_theta_list_is_invalid(self, workspace):
        assert main(["sweep", "--library", str(workspace.lib),
                     "--system", str(workspace.scenario / "system.json"),
                     "--theta-list", " , ", "--jobs", "1",
                     "--out", str(workspace.root / "sweep_bad")]) == 2


class TestExitCodes:
    def test_missing_input_file_is_io_error(self, workspace, tmp_path):
        assert main(["solve", "--library", str(workspace.lib),
                     "--system", str(tmp_path / "nope.json"),
                     "--theta", "0", "--out", str(tmp_path / "x")]) == 4
        assert main(["train", "--manifest", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "y")]) == 4

    def test_validation_failure_maps_to_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"schema_version": 1, "instances": []}\n')
        assert main(["solve", "--library", str(workspace.lib),
                     "--system", str(bad), "--theta", "0",
                     "--out", str(tmp_path / "x")]) == 2

    def test_numerical_failure_maps_to_3(self, workspace, monkeypatch,
                                         tmp_path):
        import apcms.cli as cli

        def explode(*args, **kwargs):
            raise NumericalError("synthetic breakdown")

        monkeypatch.setattr(cli, "train_library", explode)
        assert main(["train", "--manifest",
                     str(workspace.scenario / "train.json"),
                     "--out", str(tmp_path / "z")]) == 3

    def test_bad_port_modes_is_usage_error(self, workspace):
        with pytest.raises(SystemExit) as excinfo:
            main(["solve", "--library", str(workspace.lib),
                  "--system", str(workspace.scenario / "system.json"),
                  "--theta", "0", "--port-modes", "zero",
                  "--out", "unused"])
        assert excinfo.value.code == 2
