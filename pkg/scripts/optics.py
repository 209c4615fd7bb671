"""
Geometric and optical primitives.
Normals from gradients, the diffuse polarisation model and its inverse,
and Lambertian shading. Everything here is a pure function of its inputs
and accepts numpy arrays wherever a scalar makes sense.
"""

import logging
from typing import Sequence, Tuple, Union

import numpy as np

from scripts.config import DEFAULT_ETA, MAX_ZENITH_DEG, RHO_MAX_MARGIN
from scripts.errors import DomainError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


def unit_vector(v: Sequence[float]) -> np.ndarray:
    """Normalise a 3-vector."""
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValidationError(f"Expected a 3-vector, got shape {v.shape}")
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise ValidationError(f"Cannot normalise vector {v.tolist()}")
    return v / norm


def as_light(v: Sequence[float]) -> np.ndarray:
    """Normalise a light or viewer direction; it must point into the upper hemisphere."""
    u = unit_vector(v)
    if u[2] <= 0:
        raise ValidationError(f"Direction {u.tolist()} is not in the upper hemisphere")
    return u


def check_eta(eta: float) -> float:
    if not eta > 1.0:
        raise DomainError(f"Refractive index must exceed 1, got {eta}")
    return float(eta)


def normal_from_gradient(g: Sequence[float]) -> np.ndarray:
    """
    Unit normal [-zx, -zy, 1] / sqrt(1 + |grad z|^2) for a single gradient.
    """
    zx, zy = float(g[0]), float(g[1])
    n = np.array([-zx, -zy, 1.0])
    return n / np.sqrt(1.0 + zx * zx + zy * zy)


def normals_from_gradients(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Vectorised normal_from_gradient; returns an (..., 3) array."""
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    norm = np.sqrt(1.0 + gx ** 2 + gy ** 2)
    return np.stack([-gx / norm, -gy / norm, 1.0 / norm], axis=-1)


def rho_max(eta: float = DEFAULT_ETA) -> float:
    """Degree of diffuse polarisation reached as the zenith angle tends to 90 degrees."""
    eta = check_eta(eta)
    return (eta ** 2 - 1.0) / (eta ** 2 + 1.0)


def rho_from_zenith(theta: ArrayLike, eta: float = DEFAULT_ETA) -> ArrayLike:
    """
    Degree of diffuse polarisation for zenith angle theta (radians).

    Raises:
        DomainError: if any theta lies outside [0, pi/2)
    """
    eta = check_eta(eta)
    theta = np.asarray(theta, dtype=float)
    if np.any(~np.isfinite(theta)) or np.any(theta < 0) or np.any(theta >= np.pi / 2):
        raise DomainError("Zenith angle must lie in [0, pi/2)")

    sin2 = np.sin(theta) ** 2
    numerator = (eta - 1.0 / eta) ** 2 * sin2
    denominator = (2.0 + 2.0 * eta ** 2 - (eta + 1.0 / eta) ** 2 * sin2
                   + 4.0 * np.cos(theta) * np.sqrt(eta ** 2 - sin2))
    rho = numerator / denominator
    return float(rho) if rho.ndim == 0 else rho


def _cos_zenith(rho: np.ndarray, eta: float) -> np.ndarray:
    # closed form inverse of the diffuse model; the radicand can dip a hair
    # below zero at rho_max from round-off
    r2 = rho ** 2
    eta2 = eta ** 2
    eta4 = eta2 ** 2
    numerator = (eta4 * (1.0 - r2)
                 + 2.0 * eta2 * (2.0 * r2 + rho - 1.0)
                 + r2 + 2.0 * rho
                 - 4.0 * eta ** 3 * rho * np.sqrt(1.0 - r2)
                 + 1.0)
    denominator = (rho + 1.0) ** 2 * (eta4 + 1.0) + 2.0 * eta2 * (3.0 * r2 + 2.0 * rho - 1.0)
    return np.sqrt(np.clip(numerator / denominator, 0.0, 1.0))


def f_of_rho(rho: ArrayLike, eta: float = DEFAULT_ETA) -> ArrayLike:
    """
    Cosine of the zenith angle implied by a degree of diffuse polarisation.

    Raises:
        DomainError: if rho lies outside [0, rho_max(eta))
    """
    eta = check_eta(eta)
    rho = np.asarray(rho, dtype=float)
    upper = rho_max(eta)
    if np.any(~np.isfinite(rho)) or np.any(rho < 0) or np.any(rho >= upper):
        raise DomainError(f"Degree of polarisation must lie in [0, {upper:.6f}) for eta={eta}")
    f = _cos_zenith(rho, eta)
    return float(f) if f.ndim == 0 else f


def zenith_from_rho(rho: np.ndarray, eta: float = DEFAULT_ETA) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised zenith inversion for measured (noisy) polarisation maps.

    Values at or above rho_max are clamped just inside the invertible range
    and flagged. The returned zenith is capped at MAX_ZENITH_DEG.

    Returns:
        Tuple of (theta in radians, clamped flags)
    """
    eta = check_eta(eta)
    rho = np.nan_to_num(np.asarray(rho, dtype=float))
    limit = rho_max(eta) * (1.0 - RHO_MAX_MARGIN)
    clamped = rho >= limit
    theta = np.arccos(_cos_zenith(np.clip(rho, 0.0, limit), eta))
    theta = np.minimum(theta, np.deg2rad(MAX_ZENITH_DEG))
    return theta, clamped


def f_slope(rho: np.ndarray, eta: float = DEFAULT_ETA, step: float = 1e-6) -> np.ndarray:
    """d cos(theta) / d rho of the diffuse inversion, by a forward difference."""
    eta = check_eta(eta)
    limit = rho_max(eta) * (1.0 - RHO_MAX_MARGIN)
    rho = np.clip(np.nan_to_num(np.asarray(rho, dtype=float)), 0.0, limit - step)
    return (_cos_zenith(rho + step, eta) - _cos_zenith(rho, eta)) / step


def lambert_intensity(g: Sequence[float], s: Sequence[float], albedo: float = 1.0) -> float:
    """
    Lambertian intensity albedo * (-grad z . s~ + s3) / sqrt(1 + |grad z|^2),
    clamped at zero (attached shadow).
    """
    if albedo < 0:
        raise ValidationError(f"Albedo must be non-negative, got {albedo}")
    zx, zy = float(g[0]), float(g[1])
    shading = (-zx * s[0] - zy * s[1] + s[2]) / np.sqrt(1.0 + zx * zx + zy * zy)
    return float(albedo * max(shading, 0.0))


def lambert_field(gx: np.ndarray, gy: np.ndarray, s: np.ndarray, albedo: ArrayLike = 1.0) -> np.ndarray:
    """Vectorised lambert_intensity over gradient grids."""
    shading = (-gx * s[0] - gy * s[1] + s[2]) / np.sqrt(1.0 + gx ** 2 + gy ** 2)
    return np.asarray(albedo) * np.maximum(shading, 0.0)


def light_from_spherical(theta: float, alpha: float) -> np.ndarray:
    """[cos(alpha) sin(theta), sin(alpha) sin(theta), cos(theta)]"""
    return np.array([np.cos(alpha) * np.sin(theta),
                     np.sin(alpha) * np.sin(theta),
                     np.cos(theta)])


def spherical_from_light(u: Sequence[float]) -> Tuple[float, float]:
    """Inverse of light_from_spherical; azimuth folded into [0, 2 pi)."""
    u = unit_vector(u)
    theta = float(np.arccos(np.clip(u[2], -1.0, 1.0)))
    alpha = float(np.mod(np.arctan2(u[1], u[0]), 2.0 * np.pi))
    return theta, alpha


def angular_error_deg(a: Sequence[float], b: Sequence[float]) -> float:
    """Angle between two directions in degrees."""
    cos = float(np.dot(unit_vector(a), unit_vector(b)))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
