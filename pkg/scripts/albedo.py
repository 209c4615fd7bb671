"""
Albedo recovery from a height estimate and the unpolarised intensities.

Pointwise: least-squares fit of i = albedo * (n . light) over the diffuse
observations at each pixel. Consistency: a sparse solve that keeps the
pointwise values where they exist while matching the albedo gradient to the
gradient of the shading-normalised intensity, which also fills specular and
undefined pixels.
"""

import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from scripts.config import ALBEDO, DEFAULT_ETA
from scripts.errors import SingularSystemError, ValidationError
from scripts.lightest import ambiguous_gradients, oriented_gradients
from scripts.optics import as_light, normals_from_gradients
from scripts.poldecomp import PolarisationImage
from scripts.solver import GradientOperator, build_gradient_operator

logger = logging.getLogger(__name__)


def _shading(normals: np.ndarray, light: Optional[Sequence[float]]) -> Optional[np.ndarray]:
    if light is None:
        return None
    return normals @ as_light(light)


def albedo_pointwise(normals: np.ndarray, i1: np.ndarray, i2: Optional[np.ndarray],
                     s: Sequence[float], t: Optional[Sequence[float]] = None,
                     spec: Optional[np.ndarray] = None,
                     min_shading: float = ALBEDO["min_shading"]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel albedo (i1 (n.s) + i2 (n.t)) / ((n.s)^2 + (n.t)^2) over the
    usable diffuse observations; a single usable observation gives i / (n.light).

    Args:
        normals: (h, w, 3) unit normals
        i1, i2: (colours, h, w) intensities under s and t (i2 may be None)
        spec: specular-dominant pixels, which contribute no observation

    Returns:
        Tuple of (albedo (colours, h, w) clamped at 0, undefined (h, w) flags)
    """
    i1 = np.asarray(i1, dtype=float)
    if i1.ndim == 2:
        i1 = i1[None]
    diffuse = np.ones(i1.shape[1:], dtype=bool) if spec is None else ~np.asarray(spec, dtype=bool)

    numerator = np.zeros(i1.shape)
    denominator = np.zeros(i1.shape[1:])
    observations = [(i1, _shading(normals, s))]
    if i2 is not None and t is not None:
        i2 = np.asarray(i2, dtype=float)
        observations.append((i2[None] if i2.ndim == 2 else i2, _shading(normals, t)))

    for intensity, shade in observations:
        usable = diffuse & (shade > min_shading)
        weight = np.where(usable, shade, 0.0)
        numerator += intensity * weight[None]
        denominator += weight ** 2

    undefined = denominator <= 0
    albedo = numerator / np.where(undefined, 1.0, denominator)[None]
    albedo[:, undefined] = 0.0
    return np.maximum(albedo, 0.0), undefined


def albedo_with_consistency(pointwise: np.ndarray, defined: np.ndarray, reference: np.ndarray,
                            G: GradientOperator, lam: float = ALBEDO["lambda"]) -> np.ndarray:
    """
    Minimise sum_defined (a - a_pointwise)^2 + lam * ||G a - g_ref||^2 per colour.

    g_ref is the gradient of the reference map (shading-normalised intensity)
    on rows whose stencil touches only defined pixels, and 0 elsewhere so
    those rows act as pure smoothness.

    Args:
        pointwise: (colours, h, w) pointwise albedo
        defined: (h, w) pixels carrying a data term
        reference: (colours, h, w) shading-normalised intensity
        G: gradient operator over the reconstruction domain
        lam: consistency weight, >= 0
    """
    if lam < 0:
        raise ValidationError(f"Consistency weight must be non-negative, got {lam}")
    pointwise = np.asarray(pointwise, dtype=float)
    if lam == 0:
        return pointwise.copy()

    pixels = G.pixels
    data = np.asarray(defined, dtype=bool).ravel()[pixels]
    if not np.any(data):
        raise SingularSystemError("No pixel carries an albedo observation")

    D = sparse.diags(data.astype(float))
    system = (D + lam * (G.matrix.T @ G.matrix)).tocsc()
    try:
        factor = splu(system)
    except RuntimeError as e:
        raise SingularSystemError(f"Albedo system is singular: {e}")

    # rows that read an undefined pixel carry no reference gradient
    touches_undefined = (abs(G.matrix) @ (~data).astype(float)) > 0

    result = np.zeros(pointwise.shape)
    for c in range(pointwise.shape[0]):
        target_ref = G.matrix @ reference[c].ravel()[pixels]
        target_ref[touches_undefined] = 0.0
        rhs = data * pointwise[c].ravel()[pixels] + lam * (G.matrix.T @ target_ref)
        result[c].ravel()[pixels] = factor.solve(rhs)

    return np.maximum(result, 0.0)


def estimate_albedo(z: np.ndarray, pol: PolarisationImage, lights: Sequence[Sequence[float]],
                    spec: Optional[np.ndarray] = None, lam: float = ALBEDO["lambda"],
                    G: Optional[GradientOperator] = None, normals: str = "height",
                    eta: float = DEFAULT_ETA) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Albedo from a height map: normals, then the pointwise fit and the
    consistency solve.

    With normals="height" the normals come from the height by the solver's
    stencil. With normals="polarisation" they come from the measured zenith
    and phase, the sign branch picked per pixel by the intensity ratio under
    the known lights and, on ties, by the height gradient; pixels with a
    clamped degree of polarisation keep the height normal.

    Returns:
        Tuple of (albedo (colours, h, w), stats)
    """
    if G is None:
        G = build_gradient_operator(pol.mask)
    if normals not in ("height", "polarisation"):
        raise ValidationError(f"Unknown normal source '{normals}'")
    source = normals
    gx, gy = G.apply(z)
    gx, gy = np.nan_to_num(gx), np.nan_to_num(gy)

    if len(lights) == 2:
        i1, i2 = pol.light_channels(2)
        s, t = lights
    else:
        i1, i2, s, t = pol.i_un, None, lights[0], None

    if source == "polarisation":
        grads = ambiguous_gradients(pol, eta)
        if i2 is not None:
            px, py = oriented_gradients(grads, i1, i2, s, t, reference=(gx, gy))
        else:
            # one light leaves only the height to pick the branch
            sign = np.where(gx * grads.gx + gy * grads.gy >= 0, 1.0, -1.0)
            px, py = sign * grads.gx, sign * grads.gy
        gx = np.where(grads.valid, px, gx)
        gy = np.where(grads.valid, py, gy)
    normals = normals_from_gradients(gx, gy)

    spec = np.zeros(pol.shape, dtype=bool) if spec is None else np.asarray(spec, dtype=bool)
    pointwise, undefined = albedo_pointwise(normals, i1, i2, s, t, spec)
    undefined |= ~pol.mask
    defined = pol.mask & ~undefined & ~spec

    total_shading = np.maximum(normals @ as_light(s), 0.0)
    total_intensity = i1.copy()
    if i2 is not None:
        total_shading = total_shading + np.maximum(normals @ as_light(t), 0.0)
        total_intensity = total_intensity + i2
    reference = total_intensity / np.maximum(total_shading, ALBEDO["min_shading"])[None]

    albedo = albedo_with_consistency(pointwise, defined, reference, G, lam)
    albedo[:, ~pol.mask] = 0.0

    stats = {
        "lambda": lam,
        "normals": source,
        "undefined_pixels": int(np.sum(undefined & pol.mask)),
        "specular_pixels": int(np.sum(spec & pol.mask)),
        "min": float(albedo.min()),
        "max": float(albedo.max()),
    }
    if stats["undefined_pixels"]:
        logger.warning(f"Albedo undefined at {stats['undefined_pixels']} pixel(s), filled by consistency")
    return albedo, stats
