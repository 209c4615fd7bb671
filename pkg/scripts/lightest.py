"""
Uncalibrated two-light estimation.

Each pixel's polarisation gives its gradient up to sign:
grad z = +/- tan(theta) (sin phi, cos phi). For candidate lights s, t the
intensity ratio i1 (n.t) - i2 (n.s) should vanish for one of the two signs,
so the objective sums min(r^2, q^2) over pixels and colour channels, each
residual normalised to a cosine between the branch normal and i1 t - i2 s. The
lights are searched in spherical coordinates with restarted Nelder-Mead.
(s, t) and (Ts, Tt) with T = diag(-1, -1, 1) score identically; the tie is
broken by the convexity of the recovered height.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from scripts.config import DEFAULT_ETA, LIGHT_ESTIMATION, MAX_ZENITH_DEG
from scripts.errors import DegenerateFitError, ValidationError
from scripts.optics import as_light, light_from_spherical, spherical_from_light, zenith_from_rho
from scripts.poldecomp import PolarisationImage

logger = logging.getLogger(__name__)

FLIP = np.diag([-1.0, -1.0, 1.0])


@dataclass
class SphericalLight:
    theta: float
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.theta < np.pi / 2:
            raise ValidationError(f"Light polar angle must lie in [0, pi/2), got {self.theta}")
        self.alpha = float(np.mod(self.alpha, 2.0 * np.pi))

    @property
    def vector(self) -> np.ndarray:
        return light_from_spherical(self.theta, self.alpha)

    @classmethod
    def from_vector(cls, u: Sequence[float]) -> "SphericalLight":
        theta, alpha = spherical_from_light(u)
        return cls(theta=theta, alpha=alpha)

    def flipped(self) -> "SphericalLight":
        return SphericalLight(theta=self.theta, alpha=self.alpha + np.pi)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "vector": [float(v) for v in self.vector],
            "theta_deg": float(np.degrees(self.theta)),
            "alpha_deg": float(np.degrees(self.alpha)),
        }


@dataclass
class AmbiguousGradientField:
    """The '+' branch of the per-pixel gradient; the other branch is its negation."""
    gx: np.ndarray
    gy: np.ndarray
    theta: np.ndarray
    valid: np.ndarray


@dataclass
class LightEstimate:
    s: SphericalLight
    t: SphericalLight
    objective: float
    stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def lights(self) -> List[np.ndarray]:
        return [self.s.vector, self.t.vector]

    def candidates(self) -> List[List[np.ndarray]]:
        """(s, t) and its convex/concave twin (Ts, Tt)."""
        return [self.lights, [FLIP @ self.s.vector, FLIP @ self.t.vector]]


def ambiguous_gradients(pol: PolarisationImage, eta: float = DEFAULT_ETA) -> AmbiguousGradientField:
    """
    Both sign choices of the polarisation gradient at every pixel.

    Pixels with clamped rho (measured at or above rho_max) are marked invalid.
    """
    theta, clamped = zenith_from_rho(pol.rho, eta)
    theta = np.minimum(theta, np.deg2rad(MAX_ZENITH_DEG))
    slope = np.tan(theta)
    valid = pol.mask & ~clamped & ~pol.clamped
    return AmbiguousGradientField(
        gx=slope * np.sin(pol.phi),
        gy=slope * np.cos(pol.phi),
        theta=theta,
        valid=valid,
    )


def _branch_residuals(s: np.ndarray, t: np.ndarray, i1: np.ndarray, i2: np.ndarray,
                      gx: np.ndarray, gy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normalised ratio residuals of the '+' and '-' gradient branches.

    r = i1 (-g.t~ + t3) - i2 (-g.s~ + s3) equals sqrt(1 + |g|^2) (n . w) with
    w = i1 t - i2 s; dividing by |w| sqrt(1 + |g|^2) leaves the cosine n . w/|w|.
    """
    along_t = gx * t[0] + gy * t[1]
    along_s = gx * s[0] + gy * s[1]
    r = i1 * (-along_t + t[2]) - i2 * (-along_s + s[2])
    q = i1 * (along_t + t[2]) - i2 * (along_s + s[2])
    w_norm = np.sqrt(np.maximum(i1 ** 2 * (t @ t) + i2 ** 2 * (s @ s) - 2.0 * i1 * i2 * (s @ t), 0.0))
    scale = np.maximum(w_norm * np.sqrt(1.0 + gx ** 2 + gy ** 2), LIGHT_ESTIMATION["min_ratio_norm"])
    return r / scale, q / scale


def light_objective(s: Sequence[float], t: Sequence[float], i1: np.ndarray, i2: np.ndarray,
                    gx: np.ndarray, gy: np.ndarray) -> float:
    """
    Sum over pixels and channels of min(r^2, q^2), with

        r = i1 (-g.t~ + t3) - i2 (-g.s~ + s3)
        q = i1 ( g.t~ + t3) - i2 ( g.s~ + s3)

    each divided by |i1 t - i2 s| sqrt(1 + |g|^2), so every term is the squared
    cosine between a branch normal and the ratio vector. The sum does not
    change with the image scale and does not shrink as s and t merge.

    Args:
        s, t: light directions
        i1, i2: (channels, pixels) intensities under s and t
        gx, gy: (pixels,) '+' branch gradients
    """
    r, q = _branch_residuals(np.asarray(s, dtype=float), np.asarray(t, dtype=float), i1, i2, gx, gy)
    return float(np.sum(np.minimum(r ** 2, q ** 2)))


def oriented_gradients(grads: AmbiguousGradientField, i1: np.ndarray, i2: np.ndarray,
                       s: Sequence[float], t: Sequence[float],
                       reference: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel gradient branch that better explains the intensity ratio
    under known lights.

    Where both branches fit equally (flat pixels) the reference gradient
    decides; without one the '+' branch is kept.

    Args:
        i1, i2: (channels, h, w) intensities under s and t
        reference: (gx, gy) grids, e.g. of the current height estimate
    """
    shape = grads.gx.shape
    i1 = np.asarray(i1, dtype=float).reshape(-1, grads.gx.size)
    i2 = np.asarray(i2, dtype=float).reshape(-1, grads.gx.size)
    gx, gy = grads.gx.ravel(), grads.gy.ravel()
    r, q = _branch_residuals(as_light(s), as_light(t), i1, i2, gx, gy)
    plus = np.sum(r ** 2, axis=0)
    minus = np.sum(q ** 2, axis=0)

    sign = np.where(plus <= minus, 1.0, -1.0)
    tie = np.isclose(plus, minus, rtol=1e-9, atol=1e-15)
    if reference is not None:
        agree = np.nan_to_num(reference[0]).ravel() * gx + np.nan_to_num(reference[1]).ravel() * gy
        sign = np.where(tie, np.where(agree >= 0, 1.0, -1.0), sign)
    else:
        sign = np.where(tie, 1.0, sign)
    return (sign * gx).reshape(shape), (sign * gy).reshape(shape)


def _parameters_to_lights(params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return light_from_spherical(params[0], params[1]), light_from_spherical(params[2], params[3])


def _samples(grads: AmbiguousGradientField, i1: np.ndarray, i2: np.ndarray,
             pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (i1.reshape(i1.shape[0], -1)[:, pixels],
            i2.reshape(i2.shape[0], -1)[:, pixels],
            grads.gx.ravel()[pixels],
            grads.gy.ravel()[pixels])


def estimate_lights(i1: np.ndarray, i2: np.ndarray, grads: AmbiguousGradientField,
                    seed: int = 0,
                    restarts: int = LIGHT_ESTIMATION["restarts"],
                    max_pixels: int = LIGHT_ESTIMATION["max_pixels"]) -> LightEstimate:
    """
    Minimise light_objective over both directions.

    Args:
        i1, i2: (channels, h, w) unpolarised intensities under each light
        grads: ambiguous gradients from the shared polarisation image
        seed: fixes pixel subsampling and restart positions

    Raises:
        ValidationError: too few valid pixels
        DegenerateFitError: identical images (objective is flat)
    """
    i1 = np.asarray(i1, dtype=float)
    i2 = np.asarray(i2, dtype=float)
    if i1.ndim == 2:
        i1, i2 = i1[None], i2[None]
    if i1.shape != i2.shape:
        raise ValidationError(f"Intensity stacks differ in shape: {i1.shape} vs {i2.shape}")

    valid = np.flatnonzero(grads.valid)
    if valid.size < LIGHT_ESTIMATION["min_pixels"]:
        raise ValidationError(f"Light estimation needs at least {LIGHT_ESTIMATION['min_pixels']} "
                              f"valid pixels, found {valid.size}")
    if np.allclose(i1.reshape(i1.shape[0], -1)[:, valid], i2.reshape(i2.shape[0], -1)[:, valid]):
        raise DegenerateFitError("The two images are identical; light directions are undetermined")

    rng = np.random.default_rng(seed)
    subset = valid if valid.size <= max_pixels else np.sort(rng.choice(valid, max_pixels, replace=False))
    sample = _samples(grads, i1, i2, subset)

    theta_max = np.deg2rad(LIGHT_ESTIMATION["max_theta_deg"])
    bounds = [(0.0, theta_max), (None, None), (0.0, theta_max), (None, None)]
    options = {
        "xatol": LIGHT_ESTIMATION["xatol"],
        "fatol": LIGHT_ESTIMATION["fatol"],
        "maxiter": LIGHT_ESTIMATION["max_iterations"],
        "maxfev": 2 * LIGHT_ESTIMATION["max_iterations"],
    }

    def cost(params, data):
        s, t = _parameters_to_lights(params)
        return light_objective(s, t, *data)

    runs = []
    for k in range(restarts):
        start = np.array([
            rng.uniform(0.05, theta_max * 0.75), rng.uniform(0, 2 * np.pi),
            rng.uniform(0.05, theta_max * 0.75), rng.uniform(0, 2 * np.pi),
        ])
        res = minimize(cost, start, args=(sample,), method="Nelder-Mead", bounds=bounds, options=options)
        runs.append({"restart": k, "objective": float(res.fun), "iterations": int(res.nit),
                     "success": bool(res.success), "x": res.x})
        logger.debug(f"Restart {k}: objective {res.fun:.4e} after {res.nit} iterations")

    best = min(runs, key=lambda run: run["objective"])

    # refine on every valid pixel from the best restart
    full = _samples(grads, i1, i2, valid)
    refined = minimize(cost, best["x"], args=(full,), method="Nelder-Mead", bounds=bounds, options=options)
    if not refined.success:
        logger.warning(f"Light refinement did not converge: {refined.message}")

    s = SphericalLight(theta=float(refined.x[0]), alpha=float(refined.x[1]))
    t = SphericalLight(theta=float(refined.x[2]), alpha=float(refined.x[3]))

    stats = {
        "pixels": int(valid.size),
        "subsampled": int(subset.size),
        "restarts": [{key: value for key, value in run.items() if key != "x"} for run in runs],
        "best_restart": best["restart"],
        "refined_iterations": int(refined.nit),
        "converged": bool(refined.success),
        "seed": seed,
    }
    logger.info(f"Estimated lights s={np.round(s.vector, 4).tolist()} t={np.round(t.vector, 4).tolist()} "
                f"(objective {refined.fun:.4e})")
    return LightEstimate(s=s, t=t, objective=float(refined.fun), stats=stats)


def resolve_ambiguity(candidates: Sequence[Sequence[np.ndarray]], solve: Callable[[Sequence[np.ndarray]], Any],
                      score: Optional[Callable[[Any], float]] = None) -> Tuple[Sequence[np.ndarray], Any, Dict[str, Any]]:
    """
    Keep the candidate lighting whose reconstruction stands highest above
    its boundary (the convex reading).

    Args:
        candidates: [(s, t), (Ts, Tt)]
        solve: lights -> HeightSolution
        score: solution -> float, maximal_height_score by default

    Returns:
        Tuple of (chosen lights, its solution, stats)
    """
    if score is None:
        from scripts.solver import maximal_height_score
        score = maximal_height_score

    solutions = [solve(lights) for lights in candidates]
    scores = [float(score(solution)) for solution in solutions]

    chosen = int(np.argmax(scores))
    if np.isclose(scores[0], scores[1], rtol=1e-12, atol=1e-12):
        logger.warning(f"Both light candidates score {scores[0]:.6g}; keeping the first")
        chosen = 0

    return candidates[chosen], solutions[chosen], {"scores": scores, "chosen": chosen}
