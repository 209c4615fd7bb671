"""
Evaluation harness: metrics, single pipeline runs and the protocol grid.

The grid crosses {uniform, varying} albedo with {known, estimated} lighting
and the noise levels in PROTOCOL, reconstructing each scene with every
method and reporting height RMS (pixels) and normal angular error (degrees).
"""

import logging
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from scripts.config import ALBEDO, CSV_COLUMNS, METHODS, PROTOCOL, SOLVER
from scripts.constraints import assemble
from scripts.errors import ValidationError
from scripts.lightest import ambiguous_gradients, estimate_lights, resolve_ambiguity
from scripts.optics import normals_from_gradients
from scripts.poldecomp import PolarisationImage, decompose_stack
from scripts.solver import (
    GradientOperator,
    HeightSolution,
    build_gradient_operator,
    solve_height,
    solve_prop13,
)
from scripts.synth import CapturedStack, SceneConfig, make_albedo, make_surface, render_stack

logger = logging.getLogger(__name__)

SETTINGS = [
    ("uniform", "known"),
    ("uniform", "estimated"),
    ("varying", "known"),
    ("varying", "estimated"),
]


def compute_metrics(z_est: np.ndarray, z_gt: np.ndarray, n_gt: Optional[np.ndarray] = None,
                    mask: Optional[np.ndarray] = None, G: Optional[GradientOperator] = None) -> Dict[str, float]:
    """
    Height RMS after removing the mean offset, and mean angular error of the
    normals obtained by differentiating z_est with G.

    Without n_gt the reference normals come from differentiating z_gt with
    the same operator.

    Raises:
        ValidationError: grids differ in shape or z_est is undefined inside the mask
    """
    z_est = np.asarray(z_est, dtype=float)
    z_gt = np.asarray(z_gt, dtype=float)
    if z_est.shape != z_gt.shape:
        raise ValidationError(f"Height grids differ in shape: {z_est.shape} vs {z_gt.shape}")
    if mask is None:
        mask = np.isfinite(z_est) if G is None else G.mask
    if mask.shape != z_est.shape:
        raise ValidationError(f"Mask shape {mask.shape} does not match heights {z_est.shape}")
    if G is not None and not np.array_equal(G.mask, mask):
        raise ValidationError("Gradient operator and metric mask disagree")
    if not np.all(np.isfinite(z_est[mask])) or not np.all(np.isfinite(z_gt[mask])):
        raise ValidationError("Height is undefined at masked pixels")
    if G is None:
        G = build_gradient_operator(mask)

    diff = z_est[mask] - z_gt[mask]
    height_rms = float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))

    n_est = normals_from_gradients(*G.apply(z_est))[mask]
    if n_gt is None:
        n_ref = normals_from_gradients(*G.apply(z_gt))[mask]
    else:
        n_gt = np.asarray(n_gt, dtype=float)
        if n_gt.shape != mask.shape + (3,):
            raise ValidationError(f"Normal grid shape {n_gt.shape} does not match {mask.shape}")
        n_ref = n_gt[mask]
    cos = np.clip(np.sum(n_est * n_ref, axis=1), -1.0, 1.0)
    normal_mae = float(np.degrees(np.mean(np.arccos(cos))))

    return {"height_rms": height_rms, "normal_mae": normal_mae}


def protocol_scene(albedo_kind: str = "uniform", sigma: float = 0.0, seed: int = 0,
                   size: int = PROTOCOL["size"], channels: int = PROTOCOL["channels"],
                   bit_depth: int = PROTOCOL["bit_depth"], invert: bool = False) -> CapturedStack:
    """
    Gaussian peak under the two protocol lights. Amplitude and checker size
    scale with the grid so slopes and albedo pattern match the full-size scene.
    """
    shape = (size, size)
    surface = make_surface("gaussian-peak", shape, invert=invert,
                           amplitude=PROTOCOL["amplitude"] * size / PROTOCOL["size"],
                           width=PROTOCOL["width_fraction"] * size)
    if albedo_kind == "uniform":
        albedo = make_albedo("uniform", shape, channels, level=PROTOCOL["uniform_albedo"])
    elif albedo_kind == "varying":
        low, high = PROTOCOL["checker_levels"]
        albedo = make_albedo("checkerboard", shape, channels, low=low, high=high,
                             size=max(1, PROTOCOL["checker_size"] * size // PROTOCOL["size"]))
    else:
        raise ValidationError(f"Unknown albedo setting: {albedo_kind}")

    cfg = SceneConfig(surface=surface, albedo=albedo,
                      lights=[np.array(PROTOCOL["light_s"]), np.array(PROTOCOL["light_t"])],
                      noise_sigma=sigma, bit_depth=bit_depth, seed=seed)
    return render_stack(cfg)


def reconstruct(method: str, pol: PolarisationImage, lights: Sequence[np.ndarray], eta: float,
                albedo: Optional[np.ndarray] = None, spec: Optional[np.ndarray] = None,
                G: Optional[GradientOperator] = None, lam: float = ALBEDO["lambda"]) -> HeightSolution:
    """One method on a decomposed scene; prop13 runs the alternation."""
    if method not in METHODS:
        raise ValidationError(f"Unknown method '{method}', expected one of {METHODS}")
    if G is None:
        G = build_gradient_operator(pol.mask)
    if method == "prop13":
        solution, _, _ = solve_prop13(pol, lights, eta=eta, spec=spec, G=G, lam=lam)
        return solution
    field_ = assemble(method, pol, lights=lights, albedo=albedo, spec=spec, eta=eta)
    return solve_height(field_, G)


def estimate_scene_lights(pol: PolarisationImage, eta: float, G: GradientOperator,
                          seed: int = 0) -> Dict[str, Any]:
    """Uncalibrated lights, disambiguated by the albedo-free reconstruction."""
    i1, i2 = pol.light_channels(2)
    estimate = estimate_lights(i1, i2, ambiguous_gradients(pol, eta), seed=seed)
    lights, _, resolution = resolve_ambiguity(
        estimate.candidates(),
        lambda candidate: solve_height(assemble("prop1", pol, lights=candidate, eta=eta), G),
    )
    return {"lights": lights, "estimate": estimate, "resolution": resolution}


def run_reconstruction(stack: CapturedStack, method: str, lighting: str = "known",
                       albedo_known: bool = True, mode: str = "multi",
                       stencil: str = SOLVER["stencil"], seed: int = 0,
                       pol: Optional[PolarisationImage] = None,
                       lights: Optional[Sequence[np.ndarray]] = None) -> Dict[str, Any]:
    """
    Full pipeline on a rendered scene: decompose, choose lights, solve, score.

    Args:
        method: srt16 | prop1 | prop2 | prop3 | prop13
        lighting: 'known' uses the rendering lights, 'estimated' recovers them
        albedo_known: pass the true albedo to albedo-dependent variants,
                      otherwise they assume it uniform
        pol, lights: reuse an earlier decomposition / light estimate
    """
    start = time.perf_counter()
    stats: Dict[str, Any] = {"method": method, "lighting": lighting}

    if pol is None:
        pol = decompose_stack(stack.channel_stack(), stack.angles, mode=mode)
    G = build_gradient_operator(pol.mask, stencil)

    if lights is None:
        if lighting == "known":
            lights = stack.lights
        elif lighting == "estimated":
            found = estimate_scene_lights(pol, stack.eta, G, seed=seed)
            lights = found["lights"]
            stats["light_estimation"] = {"objective": found["estimate"].objective,
                                         **found["resolution"]}
        else:
            raise ValidationError(f"Unknown lighting mode: {lighting}")

    albedo = stack.albedo.transpose(2, 0, 1) if albedo_known else None
    solution = reconstruct(method, pol, lights, stack.eta, albedo=albedo, G=G)
    metrics = compute_metrics(solution.z, stack.height, stack.normals, mask=pol.mask, G=G)

    stats.update(solution.stats)
    stats.update({"method": method, "wall_ms": (time.perf_counter() - start) * 1000.0})
    return {"solution": solution, "metrics": metrics, "stats": stats, "lights": lights}


def run_table2(seed: int = 7, size: int = PROTOCOL["size"], sigmas: Sequence[float] = PROTOCOL["sigmas"],
               methods: Sequence[str] = METHODS, settings: Sequence = SETTINGS,
               channels: int = PROTOCOL["channels"], timing: bool = False) -> pd.DataFrame:
    """
    The protocol grid as a DataFrame with CSV_COLUMNS.

    Each (albedo, sigma) scene gets its own child seed from the master seed, so
    a cell does not depend on which others run. wall_ms is 0 unless timing is
    requested, which keeps repeated runs byte-identical.
    """
    albedo_kinds = sorted({albedo for albedo, _ in settings}, key=["uniform", "varying"].index)
    children = np.random.SeedSequence(seed).spawn(len(albedo_kinds) * len(sigmas))

    rows: List[Dict[str, Any]] = []
    for a, albedo_kind in enumerate(albedo_kinds):
        for k, sigma in enumerate(sigmas):
            child = children[a * len(sigmas) + k]
            scene_seed, light_seed = (int(v) for v in child.generate_state(2))
            stack = protocol_scene(albedo_kind, sigma, seed=scene_seed, size=size, channels=channels)
            pol = decompose_stack(stack.channel_stack(), stack.angles)
            G = build_gradient_operator(pol.mask)

            for setting_albedo, lighting in settings:
                if setting_albedo != albedo_kind:
                    continue
                if lighting == "estimated":
                    lights = estimate_scene_lights(pol, stack.eta, G, seed=light_seed)["lights"]
                else:
                    lights = stack.lights
                setting = f"{albedo_kind} albedo, {lighting} lighting"
                logger.info(f"{setting}, sigma={sigma:.1%}")

                for method in methods:
                    start = time.perf_counter()
                    result = run_reconstruction(stack, method, lighting, albedo_known=(albedo_kind == "uniform"),
                                                pol=pol, lights=lights)
                    wall_ms = (time.perf_counter() - start) * 1000.0
                    rows.append({
                        "setting": setting,
                        "method": method,
                        "sigma": float(sigma),
                        "height_rms": result["metrics"]["height_rms"],
                        "normal_mae": result["metrics"]["normal_mae"],
                        "wall_ms": round(wall_ms, 1) if timing else 0.0,
                    })
                    logger.info(f"  ✓ {method}: height RMS {result['metrics']['height_rms']:.3f} px, "
                                f"normal MAE {result['metrics']['normal_mae']:.2f} deg")

    return pd.DataFrame(rows, columns=CSV_COLUMNS)
