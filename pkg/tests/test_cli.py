"""
End-to-end tests for the command-line runner.
"""

import json
import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from main import main


def last_json(text):
    """Last line of captured output that holds a JSON object."""
    return json.loads([line for line in text.splitlines() if line.startswith("{")][-1])


@pytest.fixture
def scene(tmp_path):
    """A small noiseless synthetic scene on disk."""
    config = tmp_path / "scene_in.cfg"
    config.write_text("# small peak\namplitude = 3.75\nbit_depth = 0\n")
    out = tmp_path / "scene"
    assert main(["synth", "--config", str(config), "--out", str(out), "--size", "24"]) == 0
    return out


class TestPipeline:
    """Tests for the synth -> decompose -> reconstruct -> eval chain."""

    def test_chain(self, scene, capsys):
        """Every step succeeds and the reconstruction is close."""
        assert (scene / "stack.phmap").exists()
        assert main(["decompose", str(scene)]) == 0
        assert (scene / "rho.phmap").exists()

        capsys.readouterr()
        assert main(["reconstruct", str(scene), "--variant", "prop1", "--no-preview"]) == 0
        report = last_json(capsys.readouterr().out)
        assert report["variant"] == "prop1"
        assert report["height_rms"] < 0.05 * 3.75
        assert (scene / "height.phmap").exists()

        assert main(["eval", str(scene)]) == 0
        metrics = last_json(capsys.readouterr().out)
        assert metrics["height_rms"] == pytest.approx(report["height_rms"], abs=1e-5)

    def test_reconstruct_decomposes_on_demand(self, scene):
        """Reconstruct works on a scene that was never decomposed."""
        assert main(["reconstruct", str(scene), "--variant", "srt16", "--albedo", "known", "--no-preview",
                     "--dump-constraints"]) == 0
        assert (scene / "constraints_srt16.csv").exists()
        assert (scene / "stats.jsonl").exists()

    def test_albedo_step(self, scene):
        """Albedo recovery runs from the reconstructed height."""
        assert main(["reconstruct", str(scene), "--no-preview"]) == 0
        assert main(["albedo", str(scene), "--no-preview"]) == 0
        assert (scene / "albedo.phmap").exists()

    def test_estimate_light_report(self, scene, capsys):
        """Estimated lights are printed as unit vectors with spherical angles."""
        capsys.readouterr()
        assert main(["estimate-light", str(scene)]) == 0
        report = last_json(capsys.readouterr().out)
        for name in ("light_s", "light_t"):
            light = report[name]
            assert np.linalg.norm(light["vector"]) == pytest.approx(1.0)
            assert 0.0 <= light["theta_deg"] < 90.0
            assert 0.0 <= light["alpha_deg"] < 360.0
            assert light["vector"][2] == pytest.approx(np.cos(np.radians(light["theta_deg"])))
        assert (scene / "lights_estimated.cfg").exists()


class TestErrors:
    """Tests for error reporting and exit codes."""

    def test_coplanar_lights(self, scene, capsys):
        """prop2 with coplanar lights exits 1 with a JSON error line."""
        code = main(["reconstruct", str(scene), "--variant", "prop2", "--no-preview",
                     "--light-s", "1,0,5", "--light-t=-1,0,3"])
        assert code == 1
        err = capsys.readouterr().err
        assert any(line.startswith('{"error"') for line in err.splitlines())
        assert last_json(err)["error"] == "CoplanarityError"

    def test_missing_scene(self, tmp_path, capsys):
        """A directory without a scene is a validation error."""
        assert main(["decompose", str(tmp_path / "nothing")]) == 1
        assert last_json(capsys.readouterr().err)["exit_code"] == 1

    def test_malformed_config_value(self, tmp_path, capsys):
        """A config value that is not a number exits 1 with a JSON error, not a traceback."""
        config = tmp_path / "bad.cfg"
        config.write_text("eta = abc\n")
        code = main(["synth", "--config", str(config), "--out", str(tmp_path / "scene"), "--size", "8"])
        assert code == 1
        error = last_json(capsys.readouterr().err)
        assert error["error"] == "ValidationError"
        assert "eta" in error["message"]

    def test_unknown_command(self, capsys):
        """Usage errors exit 1; exit code 2 stays reserved for numerical failure."""
        assert main(["frobnicate"]) == 1
        assert last_json(capsys.readouterr().err)["exit_code"] == 1

    def test_bad_option_type(self, tmp_path, capsys):
        """A non-integer --size is a usage error."""
        assert main(["synth", "--out", str(tmp_path / "scene"), "--size", "big"]) == 1
        assert last_json(capsys.readouterr().err)["error"] == "ValidationError"


class TestTable2:
    """Tests for the evaluation grid command."""

    def test_byte_identical(self, tmp_path):
        """Two runs with the same seed write identical files."""
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        args = ["table2", "--size", "16", "--sigmas", "0", "--methods", "prop1,srt16"]
        assert main(args + ["--out", str(first)]) == 0
        assert main(args + ["--out", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()
        assert first.read_text().splitlines()[0] == "setting,method,sigma,height_rms,normal_mae,wall_ms"
