"""
Tests for metrics, single pipeline runs and the protocol grid.
"""

import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import build_scene, exact_polarisation
from scripts.config import CSV_COLUMNS
from scripts.errors import ValidationError
from scripts.evaluate import (
    compute_metrics,
    protocol_scene,
    reconstruct,
    run_reconstruction,
    run_table2,
)
from scripts.poldecomp import decompose_stack
from scripts.solver import build_gradient_operator


class TestMetrics:
    """Tests for height RMS and normal angular error."""

    def test_offset_is_free(self, peak_scene):
        """A constant shift scores zero on both metrics."""
        z = peak_scene.height
        metrics = compute_metrics(z + 5.0, z)
        assert metrics["height_rms"] == pytest.approx(0.0, abs=1e-12)
        assert metrics["normal_mae"] == pytest.approx(0.0, abs=1e-5)

    def test_monotone_in_scale(self, peak_scene):
        """Larger distortions score worse."""
        z = peak_scene.height
        results = [compute_metrics(k * z, z) for k in (1.05, 1.1, 1.2)]
        rms = [r["height_rms"] for r in results]
        mae = [r["normal_mae"] for r in results]
        assert rms[0] < rms[1] < rms[2]
        assert mae[0] < mae[1] < mae[2]

    def test_analytic_normals(self, peak_scene):
        """Reference normals may be supplied directly."""
        metrics = compute_metrics(peak_scene.height, peak_scene.height, peak_scene.normals)
        assert metrics["height_rms"] == pytest.approx(0.0, abs=1e-12)
        assert 0.0 < metrics["normal_mae"] < 2.0

    def test_shape_mismatch(self):
        """Grids must agree."""
        with pytest.raises(ValidationError):
            compute_metrics(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_operator_mask_mismatch(self, peak_scene):
        """The metric mask and the operator's domain must agree."""
        mask = np.ones(peak_scene.height.shape, dtype=bool)
        other = mask.copy()
        other[0, 0] = False
        with pytest.raises(ValidationError):
            compute_metrics(peak_scene.height, peak_scene.height, mask=mask, G=build_gradient_operator(other))


class TestProtocolScene:
    """Tests for the scaled protocol scene."""

    def test_scaled_scene(self):
        """A 32 px scene keeps the 128 px slopes and checker layout."""
        stack = protocol_scene("varying", size=32)
        assert stack.images.shape == (2, 3, 18, 32, 32)
        assert set(np.unique(stack.albedo)) == {0.5, 0.9}
        assert stack.albedo[0, 0, 0] != stack.albedo[0, 4, 0]
        assert 4.5 < stack.height.max() <= 5.0

    def test_unknown_setting(self):
        """Albedo settings are uniform or varying."""
        with pytest.raises(ValidationError):
            protocol_scene("striped", size=16)


class TestRunReconstruction:
    """Tests for the single-scene pipeline."""

    def test_prop1_accuracy(self):
        """Noiseless prop1 lands within 5% of the peak amplitude."""
        stack = build_scene(size=32, channels=3)
        result = run_reconstruction(stack, "prop1")
        assert result["metrics"]["height_rms"] < 0.05 * 5.0
        assert result["metrics"]["normal_mae"] < 1.0
        assert result["stats"]["method"] == "prop1"

    def test_varying_albedo_ordering(self):
        """Without the albedo, prop1 beats srt16 and prop2 fails badly."""
        stack = build_scene(size=32, albedo="checkerboard", channels=3)
        pol = exact_polarisation(stack)
        rms = {method: run_reconstruction(stack, method, albedo_known=False, pol=pol)["metrics"]["height_rms"]
               for method in ("srt16", "prop1", "prop2")}
        assert rms["prop1"] < rms["srt16"]
        assert rms["prop2"] > 5 * rms["prop1"]

    def test_unknown_method(self, peak_scene):
        """Method names are checked."""
        pol = exact_polarisation(peak_scene)
        with pytest.raises(ValidationError):
            reconstruct("prop9", pol, peak_scene.lights, peak_scene.eta)

    def test_unknown_lighting(self, peak_scene):
        """Lighting is known or estimated."""
        with pytest.raises(ValidationError):
            run_reconstruction(peak_scene, "prop1", lighting="guessed", pol=exact_polarisation(peak_scene))


class TestProtocolOrdering:
    """Method ordering on decomposed, quantised protocol scenes."""

    @pytest.mark.parametrize("sigma", [0.0, 0.005, 0.02])
    def test_varying_albedo_ordering(self, sigma):
        """Unknown checkerboard albedo: srt16 trails prop1 and the alternation, prop2 fails."""
        stack = protocol_scene("varying", sigma, seed=2, size=64)
        pol = decompose_stack(stack.channel_stack(), stack.angles)
        rms = {method: run_reconstruction(stack, method, albedo_known=False, pol=pol)["metrics"]["height_rms"]
               for method in ("srt16", "prop1", "prop2", "prop13")}
        assert rms["prop1"] < rms["srt16"]
        assert rms["prop13"] < rms["srt16"]
        assert rms["prop2"] > 5 * rms["prop1"]

    def test_uniform_albedo_prop3_best(self):
        """Uniform albedo at 2% noise: prop3 has the lowest mean height error."""
        totals = dict.fromkeys(("srt16", "prop1", "prop2", "prop3"), 0.0)
        for seed in (1, 2, 3):
            stack = protocol_scene("uniform", 0.02, seed=seed)
            pol = decompose_stack(stack.channel_stack(), stack.angles)
            for method in totals:
                totals[method] += run_reconstruction(stack, method, pol=pol)["metrics"]["height_rms"]
        assert min(totals, key=totals.get) == "prop3"


class TestTable2:
    """Tests for the protocol grid."""

    SETTINGS = [("uniform", "known"), ("varying", "known")]

    def test_columns_and_rows(self):
        """One row per setting, noise level and method."""
        frame = run_table2(size=16, sigmas=(0.0, 0.02), methods=["srt16", "prop1"], settings=self.SETTINGS)
        assert list(frame.columns) == CSV_COLUMNS
        assert len(frame) == 2 * 2 * 2
        assert set(frame["setting"]) == {"uniform albedo, known lighting", "varying albedo, known lighting"}
        assert (frame["wall_ms"] == 0.0).all()

    def test_repeatable(self):
        """The same seed gives the same table."""
        kwargs = dict(size=16, sigmas=(0.005,), methods=["prop1"], settings=self.SETTINGS)
        first = run_table2(seed=3, **kwargs)
        second = run_table2(seed=3, **kwargs)
        assert first.equals(second)
