"""
Tests for the gradient operator and the sparse height solver.
"""

import pytest
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import build_scene, exact_polarisation
from scripts.config import SOLVER
from scripts.constraints import ConstraintField, assemble
from scripts.errors import SingularSystemError, ValidationError
from scripts.optics import normals_from_gradients
from scripts.poldecomp import decompose_stack
from scripts.solver import (
    HeightSolution,
    build_gradient_operator,
    integrate_gradient,
    maximal_height_score,
    pinned_index,
    solve_height,
    solve_prop13,
)


def centred_rms(z_est, z_gt, mask):
    diff = z_est[mask] - z_gt[mask]
    return float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))


def mean_angle_deg(G, z, normals_gt, mask):
    n_est = normals_from_gradients(*G.apply(z))[mask]
    cos = np.clip(np.sum(n_est * normals_gt[mask], axis=1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


class TestGradientOperator:
    """Tests for the finite-difference operator."""

    def test_two_pixel_row(self):
        """A 1x2 domain: forward then backward difference in x, nothing in y."""
        # the last column takes a backward difference instead of a flagged zero row
        G = build_gradient_operator(np.ones((1, 2), dtype=bool))
        dense = G.matrix.toarray()
        np.testing.assert_array_equal(dense[:2], [[-1, 1], [-1, 1]])
        np.testing.assert_array_equal(dense[2:], 0)
        assert G.flagged.tolist() == [False, False, True, True]

    @pytest.mark.parametrize("stencil", ["forward", "central"])
    def test_plane_is_exact(self, stencil):
        """Both stencils differentiate a plane exactly, edges included."""
        rows, cols = np.mgrid[0:6, 0:7]
        z = 2.0 * cols + 3.0 * rows
        G = build_gradient_operator(np.ones(z.shape, dtype=bool), stencil)
        gx, gy = G.apply(z)
        np.testing.assert_allclose(gx, 2.0)
        np.testing.assert_allclose(gy, 3.0)

    def test_apply_outside_mask(self):
        """Pixels outside the domain come back as NaN."""
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        gx, _ = build_gradient_operator(mask).apply(np.zeros((4, 4)))
        assert np.isnan(gx[0, 0]) and np.all(np.isfinite(gx[mask]))

    def test_rows_sum_to_zero(self):
        """Constants are in the null space."""
        mask = np.zeros((8, 8), dtype=bool)
        mask[1:7, 2:8] = True
        G = build_gradient_operator(mask)
        np.testing.assert_allclose(G.matrix @ np.ones(G.n_pixels), 0.0)

    def test_disconnected(self):
        """Two islands cannot share one height offset."""
        mask = np.zeros((5, 5), dtype=bool)
        mask[0:2, 0:2] = True
        mask[3:5, 3:5] = True
        with pytest.raises(ValidationError):
            build_gradient_operator(mask)

    @pytest.mark.parametrize("mask", [np.zeros((3, 3), dtype=bool), np.eye(1, dtype=bool),
                                      np.ones((2, 2, 2), dtype=bool)])
    def test_invalid_masks(self, mask):
        """Empty, single-pixel and non-2-D masks are rejected."""
        with pytest.raises(ValidationError):
            build_gradient_operator(mask)

    def test_unknown_stencil(self):
        """Only forward and central stencils exist."""
        with pytest.raises(ValidationError):
            build_gradient_operator(np.ones((3, 3), dtype=bool), "upwind")

    def test_pinned_index_centre(self):
        """The pinned pixel is the one nearest the centroid."""
        assert pinned_index(np.ones((5, 5), dtype=bool)) == (2, 2)


class TestSolveHeight:
    """Tests for the least-squares solve."""

    def test_plane(self):
        """A tilted plane is recovered exactly up to its offset."""
        stack = build_scene(size=16, surface="plane", a=0.1, b=-0.05)
        pol = exact_polarisation(stack)
        solution = solve_height(assemble("prop1", pol, lights=stack.lights))
        assert centred_rms(solution.z, stack.height, pol.mask) < 1e-8

    def test_prop1_albedo_invariant(self):
        """prop1 gives the same plane under uniform and checkerboard albedo."""
        heights = []
        for albedo in ("uniform", "checkerboard"):
            stack = build_scene(size=16, albedo=albedo, surface="plane", a=0.1, b=-0.05)
            heights.append(solve_height(assemble("prop1", exact_polarisation(stack), lights=stack.lights)).z)
        np.testing.assert_allclose(heights[0], heights[1], atol=1e-8)

    def test_pinned_pixel_is_zero(self, peak_scene):
        """Height is zero at the pinned pixel."""
        pol = exact_polarisation(peak_scene)
        solution = solve_height(assemble("prop1", pol, lights=peak_scene.lights))
        assert solution.z[solution.pinned_pixel] == 0.0
        assert solution.stats["optimality"] < 1e-8
        assert solution.stats["method"] == "direct"

    def test_one_pixel_without_rows(self, peak_scene):
        """Neighbouring rows still determine a pixel that lost its own rows."""
        pol = exact_polarisation(peak_scene)
        field_ = assemble("prop1", pol, lights=peak_scene.lights)
        keep = field_.pixel != 16 * 32 + 16
        reduced = replace(field_, pixel=field_.pixel[keep], b=field_.b[keep], h=field_.h[keep],
                          weight=field_.weight[keep], kind=field_.kind[keep])
        solution = solve_height(reduced)
        assert np.all(np.isfinite(solution.values()))
        assert centred_rms(solution.z, peak_scene.height, pol.mask) < 0.05 * 5.0

    def test_unconstrained_pixel(self):
        """A single row over three pixels leaves the system singular."""
        mask = np.ones((1, 3), dtype=bool)
        field_ = ConstraintField(variant="prop1", shape=(1, 3), mask=mask, pixel=np.array([0]),
                                 b=np.array([[1.0, 0.0]]), h=np.array([1.0]), weight=np.array([1.0]),
                                 kind=np.array(["phase"], dtype=object))
        with pytest.raises(SingularSystemError):
            solve_height(field_)

    def test_numerically_rank_deficient(self):
        """Rows that barely couple the two image rows leave the system singular."""
        mask = np.ones((2, 2), dtype=bool)
        # every pixel sees the x-gradient, the y-gradient only at 1e-13
        field_ = ConstraintField(variant="prop1", shape=(2, 2), mask=mask, pixel=np.arange(4),
                                 b=np.tile([1.0, 1e-13], (4, 1)), h=np.array([0.5, 0.5, -0.5, -0.5]),
                                 weight=np.ones(4), kind=np.array(["phase"] * 4, dtype=object))
        with pytest.raises(SingularSystemError):
            solve_height(field_)

    def test_empty_field(self):
        """No rows at all is singular."""
        mask = np.ones((2, 2), dtype=bool)
        field_ = ConstraintField(variant="prop1", shape=(2, 2), mask=mask, pixel=np.zeros(0, dtype=int),
                                 b=np.zeros((0, 2)), h=np.zeros(0), weight=np.zeros(0),
                                 kind=np.zeros(0, dtype=object))
        with pytest.raises(SingularSystemError):
            solve_height(field_)

    def test_domain_mismatch(self, peak_scene):
        """The operator must cover the field's domain."""
        pol = exact_polarisation(peak_scene)
        field_ = assemble("prop1", pol, lights=peak_scene.lights)
        other = np.ones(pol.shape, dtype=bool)
        other[0, 0] = False
        with pytest.raises(ValidationError):
            solve_height(field_, build_gradient_operator(other))

    def test_conjugate_gradients_match_direct(self, peak_scene, monkeypatch):
        """The iterative path agrees with the direct factorisation."""
        pol = exact_polarisation(peak_scene)
        field_ = assemble("prop1", pol, lights=peak_scene.lights)
        direct = solve_height(field_)
        monkeypatch.setitem(SOLVER, "direct_max_pixels", 10)
        iterative = solve_height(field_)
        assert iterative.stats["method"] == "cg"
        np.testing.assert_allclose(iterative.values(), direct.values(), atol=1e-4)


class TestProtocolAccuracy:
    """Noiseless accuracy on the full-size gaussian peak."""

    @pytest.fixture(scope="class")
    def full_scene(self):
        stack = build_scene(size=128, channels=3)
        return stack, exact_polarisation(stack), build_gradient_operator(np.ones((128, 128), dtype=bool))

    @pytest.mark.parametrize("variant", ["srt16", "prop1", "prop2", "prop3"])
    def test_variant_accuracy(self, full_scene, variant):
        """Height within 1% of the peak amplitude, normals within half a degree."""
        stack, pol, G = full_scene
        field_ = assemble(variant, pol, lights=stack.lights, albedo=stack.albedo.transpose(2, 0, 1))
        solution = solve_height(field_, G)
        assert centred_rms(solution.z, stack.height, pol.mask) < 0.2
        assert mean_angle_deg(G, solution.z, stack.normals, pol.mask) < 0.5


class TestIntegration:
    """Tests for gradient integration and the convexity score."""

    def test_integrates_discrete_gradient(self, peak_scene):
        """Differentiating then integrating returns the surface."""
        G = build_gradient_operator(np.ones(peak_scene.height.shape, dtype=bool))
        gx, gy = G.apply(peak_scene.height)
        solution = integrate_gradient(gx, gy, G=G)
        assert centred_rms(solution.z, peak_scene.height, G.mask) < 1e-8

    def test_score_sign(self):
        """A peak scores positive, a dent negative."""
        mask = np.ones((32, 32), dtype=bool)
        peak = build_scene(size=32).height
        dent = build_scene(size=32, invert=True).height
        assert maximal_height_score(HeightSolution(z=peak, mask=mask, pinned_pixel=(16, 16))) > 0
        assert maximal_height_score(HeightSolution(z=dent, mask=mask, pinned_pixel=(16, 16))) < 0


class TestAlternation:
    """Tests for the albedo / height alternation."""

    def test_runs_and_returns_albedo(self, checker_scene):
        """The alternation produces a height, a non-negative albedo and its history."""
        pol = exact_polarisation(checker_scene)
        solution, albedo, stats = solve_prop13(pol, checker_scene.lights)
        assert albedo.shape == (1, 32, 32)
        assert np.all(albedo >= 0)
        assert np.all(np.isfinite(solution.values()))
        assert 1 <= stats["iterations"] <= 10
        assert stats["converged"] or stats["height_changes"][-1] < stats["height_changes"][0]
        assert solution.stats["variant"] == "prop13"

    def test_beats_assumed_albedo(self):
        """On a checkerboard, alternation beats phase + DOP with albedo assumed uniform."""
        stack = build_scene(size=32, albedo="checkerboard", channels=3, sigma=0.005, bit_depth=8, seed=11)
        pol = decompose_stack(stack.channel_stack(), stack.angles)
        G = build_gradient_operator(pol.mask)

        baseline = solve_height(assemble("srt16", pol, lights=stack.lights), G)
        alternated, _, _ = solve_prop13(pol, stack.lights, G=G)
        assert (centred_rms(alternated.z, stack.height, pol.mask)
                < centred_rms(baseline.z, stack.height, pol.mask))

    def test_settles_on_noiseless_input(self):
        """Exact polarisation pins the albedo, so the second solve repeats the first."""
        stack = build_scene(size=32, channels=3)
        pol = exact_polarisation(stack)
        G = build_gradient_operator(pol.mask)

        solution, albedo, stats = solve_prop13(pol, stack.lights, G=G)
        known = solve_height(assemble("prop3", pol, lights=stack.lights,
                                      albedo=stack.albedo.transpose(2, 0, 1)), G)

        assert stats["converged"]
        assert stats["iterations"] <= 2
        np.testing.assert_allclose(albedo, stack.albedo.transpose(2, 0, 1), atol=1e-5)
        gap = np.linalg.norm(solution.values() - known.values()) / np.linalg.norm(known.values())
        assert gap < 1e-6
