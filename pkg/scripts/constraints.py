"""
Per-pixel linear constraints on the height gradient.

Every constraint has the form b(x) . grad z(x) = h(x). Three families come
from the data (DOP ratio, intensity ratio, phase) and one from specular
pixels (halfway-vector normal). The method variants stack them as:

    variant   phase  dop-ratio  intensity-ratio
    srt16       x        x
    prop1       x                    x
    prop2                x           x
    prop3       x        x           x

DOP-ratio and intensity-ratio rows are repeated once per colour channel.
When the polarisation image carries a noise estimate each row is scaled by
the inverse of its propagated standard deviation, on top of the per-family
weights.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from scripts.config import ASSUMED_UNIFORM_ALBEDO, DEFAULT_ETA, DEFAULT_VIEWER, THRESHOLDS
from scripts.errors import ConfigurationError, CoplanarityError, ValidationError
from scripts.optics import as_light, f_slope, zenith_from_rho
from scripts.poldecomp import PolarisationImage

logger = logging.getLogger(__name__)

VARIANTS = ("srt16", "prop1", "prop2", "prop3")

# families used by each variant
VARIANT_FAMILIES = {
    "srt16": ("phase", "dop-ratio"),
    "prop1": ("phase", "intensity-ratio"),
    "prop2": ("dop-ratio", "intensity-ratio"),
    "prop3": ("phase", "dop-ratio", "intensity-ratio"),
}

KINDS = ("dop-ratio", "intensity-ratio", "phase", "specular-normal")


@dataclass
class ConstraintRow:
    b: np.ndarray
    h: float
    weight: float = 1.0
    kind: str = "phase"

    def residual(self, gradient: Sequence[float]) -> float:
        return float(self.b[0] * gradient[0] + self.b[1] * gradient[1] - self.h)


@dataclass
class ConstraintField:
    """
    Stacked rows over the reconstruction domain.

    Row k constrains pixel pixel[k] (flat index into shape) by
    b[k] . grad z = h[k], scaled by weight[k].
    """
    variant: str
    shape: Tuple[int, int]
    mask: np.ndarray
    pixel: np.ndarray
    b: np.ndarray
    h: np.ndarray
    weight: np.ndarray
    kind: np.ndarray
    stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return int(self.pixel.size)

    def rows_per_pixel(self) -> np.ndarray:
        counts = np.bincount(self.pixel, minlength=self.shape[0] * self.shape[1])
        return counts.reshape(self.shape)

    def pixel_matrix(self, row: int, col: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel (B, h) as stacked at (row, col)."""
        index = np.flatnonzero(self.pixel == row * self.shape[1] + col)
        return self.b[index], self.h[index]


# === Single rows ===

def dop_ratio_row(i_un: float, f: float, albedo: float, s: Sequence[float],
                  v: Sequence[float] = DEFAULT_VIEWER) -> Optional[ConstraintRow]:
    """
    b = i_un v~ - albedo f s~, h = i_un v3 - albedo f s3.
    Returns None (excluded row) when i_un or f is below threshold.
    """
    if i_un < THRESHOLDS["min_intensity"] or f < THRESHOLDS["min_cos_zenith"]:
        return None
    s = np.asarray(s, dtype=float)
    v = np.asarray(v, dtype=float)
    b = i_un * v[:2] - albedo * f * s[:2]
    h = i_un * v[2] - albedo * f * s[2]
    return ConstraintRow(b=b, h=float(h), weight=THRESHOLDS["row_weights"]["dop-ratio"], kind="dop-ratio")


def _check_distinct(s: np.ndarray, t: np.ndarray):
    if np.allclose(s, t, atol=1e-12):
        raise ConfigurationError("Intensity ratio needs two different light directions (s == t)")


def intensity_ratio_row(i1: float, i2: float, s: Sequence[float],
                        t: Sequence[float]) -> Optional[ConstraintRow]:
    """
    b = i2 s~ - i1 t~, h = i2 s3 - i1 t3.
    Returns None (excluded row) when both intensities are below threshold.

    Raises:
        ConfigurationError: if s == t
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_distinct(s, t)
    if i1 < THRESHOLDS["min_intensity"] and i2 < THRESHOLDS["min_intensity"]:
        return None
    b = i2 * s[:2] - i1 * t[:2]
    h = i2 * s[2] - i1 * t[2]
    return ConstraintRow(b=b, h=float(h), weight=THRESHOLDS["row_weights"]["intensity-ratio"],
                         kind="intensity-ratio")


def phase_row(phi: float, specular: bool = False) -> ConstraintRow:
    """(-cos phi', sin phi') . grad z = 0 with phi' = phi + pi/2 at specular pixels."""
    shifted = phi + np.pi / 2 if specular else phi
    b = np.array([-np.cos(shifted), np.sin(shifted)])
    return ConstraintRow(b=b, h=0.0, weight=THRESHOLDS["row_weights"]["phase"], kind="phase")


def halfway_vector(s: Sequence[float], v: Sequence[float] = DEFAULT_VIEWER) -> np.ndarray:
    m = np.asarray(s, dtype=float) + np.asarray(v, dtype=float)
    norm = np.linalg.norm(m)
    if norm == 0 or m[2] / norm <= THRESHOLDS["min_halfway_z"]:
        raise ConfigurationError("Halfway vector is degenerate (s + v has no upward component)")
    return m / norm


def specular_normal_rows(s: Sequence[float], v: Sequence[float] = DEFAULT_VIEWER) -> List[ConstraintRow]:
    """Pin grad z to (-m1/m3, -m2/m3) for the unit halfway vector m."""
    m = halfway_vector(s, v)
    weight = THRESHOLDS["row_weights"]["specular-normal"]
    return [
        ConstraintRow(b=np.array([1.0, 0.0]), h=float(-m[0] / m[2]), weight=weight, kind="specular-normal"),
        ConstraintRow(b=np.array([0.0, 1.0]), h=float(-m[1] / m[2]), weight=weight, kind="specular-normal"),
    ]


def rank_check_srt16(B: np.ndarray, eps: float = THRESHOLDS["rank_deficiency"]) -> str:
    """
    'deficient' when the 2x2 [DOP-ratio; phase] matrix is singular.
    With v = (0,0,1) the determinant is proportional to s1 sin(phi) + s2 cos(phi).
    """
    B = np.asarray(B, dtype=float)
    if B.shape != (2, 2):
        raise ValidationError(f"Expected a 2x2 matrix, got shape {B.shape}")
    return "deficient" if abs(np.linalg.det(B)) < eps else "full-rank"


# === Field assembly ===

class _RowBuffer:
    """Collects vectorised row blocks before concatenation."""

    def __init__(self, weights: Dict[str, float]):
        self.weights = weights
        self.blocks: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, str]] = []
        self.excluded: Dict[str, int] = {kind: 0 for kind in KINDS}

    def add(self, kind: str, pixels: np.ndarray, b1: np.ndarray, b2: np.ndarray,
            h: np.ndarray, keep: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        scale = np.ones(pixels.size) if std is None else 1.0 / np.maximum(std, 1e-300)
        if keep is not None:
            self.excluded[kind] += int(np.sum(~keep))
            pixels, b1, b2, h, scale = pixels[keep], b1[keep], b2[keep], h[keep], scale[keep]
        if pixels.size:
            self.blocks.append((pixels, b1, b2, h, scale, kind))

    def build(self, variant: str, shape, mask) -> ConstraintField:
        if self.blocks:
            pixel = np.concatenate([blk[0] for blk in self.blocks])
            b = np.column_stack([np.concatenate([blk[1] for blk in self.blocks]),
                                 np.concatenate([blk[2] for blk in self.blocks])])
            h = np.concatenate([blk[3] for blk in self.blocks])
            scale = np.concatenate([blk[4] for blk in self.blocks])
            kind = np.concatenate([np.full(blk[0].size, blk[5], dtype=object) for blk in self.blocks])
        else:
            pixel = np.zeros(0, dtype=int)
            b = np.zeros((0, 2))
            h = np.zeros(0)
            scale = np.zeros(0)
            kind = np.zeros(0, dtype=object)

        order = np.argsort(pixel, kind="stable")
        kind = kind[order]
        scale = scale[order]
        if scale.size:
            # median noise scale is 1
            scale = scale / np.median(scale)
        weight = np.array([self.weights[k] for k in kind], dtype=float) * scale
        counts = {k: int(np.sum(kind == k)) for k in KINDS}

        return ConstraintField(
            variant=variant,
            shape=shape,
            mask=mask,
            pixel=pixel[order],
            b=b[order],
            h=h[order],
            weight=weight,
            kind=kind,
            stats={"rows": counts, "excluded": dict(self.excluded), "total_rows": int(pixel.size)},
        )


def _albedo_block(albedo: Optional[np.ndarray], n_colours: int, shape) -> Tuple[np.ndarray, bool]:
    """(colours, h, w) albedo and whether it was assumed uniform."""
    if albedo is None:
        return np.full((n_colours,) + tuple(shape), ASSUMED_UNIFORM_ALBEDO), True
    albedo = np.asarray(albedo, dtype=float)
    if albedo.ndim == 2:
        albedo = albedo[None]
    if albedo.shape[0] == 1 and n_colours > 1:
        albedo = np.repeat(albedo, n_colours, axis=0)
    if albedo.shape != (n_colours,) + tuple(shape):
        raise ValidationError(f"Albedo shape {albedo.shape} does not match ({n_colours}, {shape[0]}, {shape[1]})")
    return albedo, False


def _intensities(pol1: PolarisationImage, pol2: Optional[PolarisationImage],
                 n_lights: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if pol2 is not None:
        if pol2.i_un.shape != pol1.i_un.shape:
            raise ValidationError("Polarisation images for the two lights differ in shape")
        return pol1.i_un, pol2.i_un
    if n_lights == 2:
        i1, i2 = pol1.light_channels(2)
        return i1, i2
    return pol1.i_un, None


@dataclass
class _RowNoise:
    """Per-pixel standard deviations used to weight rows by 1/std."""
    phase: np.ndarray
    rho: np.ndarray
    log_f_slope: np.ndarray
    i1: np.ndarray
    i2: Optional[np.ndarray]


def _row_noise(pol1: PolarisationImage, pol2: Optional[PolarisationImage], n_lights: int,
               eta: float) -> Optional[_RowNoise]:
    """
    First-order noise of each row family, or None when the polarisation
    image carries no noise estimate.

    phase rows:  |grad z| * std(phi) with std(phi) = sigma / (2 rho)
    rho error:   sigma, inflated towards sqrt(1 + k^2) sigma where rho ~ sigma
    DOP rows:    i_std and i * |f'/f| * rho error
    """
    if not THRESHOLDS["noise_weighting"] or not pol1.noisy:
        return None
    if pol2 is not None and not pol2.noisy:
        return None

    sigma = pol1.rho_std
    finite = np.isfinite(sigma)
    ceiling = float(np.max(sigma[finite])) if np.any(finite) else 1.0
    sigma = np.where(finite, sigma, ceiling)
    level = np.maximum(pol1.rho, sigma)

    theta, _ = zenith_from_rho(level, eta)
    phase = np.tan(theta) * sigma / (2.0 * level)

    k = THRESHOLDS["low_snr_inflation"]
    rho_err = sigma * np.sqrt(1.0 + k ** 2 * sigma ** 2 / (pol1.rho ** 2 + sigma ** 2))

    theta_rho, _ = zenith_from_rho(pol1.rho, eta)
    log_f_slope = np.abs(f_slope(pol1.rho, eta)) / np.maximum(np.cos(theta_rho), THRESHOLDS["min_cos_zenith"])

    if pol2 is not None:
        i1_std, i2_std = pol1.i_std, pol2.i_std
    elif n_lights == 2:
        half = pol1.i_std.shape[0] // 2
        i1_std, i2_std = pol1.i_std[:half], pol1.i_std[half:]
    else:
        i1_std, i2_std = pol1.i_std, None
    return _RowNoise(phase=phase, rho=rho_err, log_f_slope=log_f_slope, i1=i1_std, i2=i2_std)


def label_specular(i_un: np.ndarray, mask: Optional[np.ndarray] = None,
                   percentile: float = THRESHOLDS["specular_percentile"]) -> np.ndarray:
    """Label the brightest pixels (summed over channels) as specular dominant."""
    total = np.asarray(i_un, dtype=float)
    if total.ndim == 3:
        total = total.sum(axis=0)
    mask = np.ones(total.shape, dtype=bool) if mask is None else mask
    if not np.any(mask):
        return np.zeros(total.shape, dtype=bool)
    cutoff = np.percentile(total[mask], percentile)
    return mask & (total > cutoff)


def assemble(variant: str, pol1: PolarisationImage, pol2: Optional[PolarisationImage] = None,
             lights: Sequence[Sequence[float]] = (), albedo: Optional[np.ndarray] = None,
             spec: Optional[np.ndarray] = None, eta: float = DEFAULT_ETA,
             viewer: Sequence[float] = DEFAULT_VIEWER,
             weights: Optional[Dict[str, float]] = None) -> ConstraintField:
    """
    Build the stacked constraint field for a method variant.

    Args:
        variant: srt16 | prop1 | prop2 | prop3
        pol1: polarisation image; with two lights and no pol2 its channels are
              light-major (first half lit by s, second half by t)
        pol2: optional separate polarisation image for light t
        lights: (s,) or (s, t)
        albedo: (colours, h, w); variants that need it fall back to a uniform
                assumption when absent
        spec: specular-dominant mask; all-diffuse when absent
        eta: refractive index
        viewer: viewing direction

    Raises:
        ValidationError: unknown variant or missing inputs
        ConfigurationError: s == t or degenerate halfway vector
        CoplanarityError: prop2 with coplanar s, t, v
    """
    if variant not in VARIANTS:
        raise ValidationError(f"Unknown variant '{variant}', expected one of {VARIANTS}")
    families = VARIANT_FAMILIES[variant]
    two_light = "intensity-ratio" in families

    if not lights:
        raise ValidationError(f"{variant} needs light source direction s")
    lights = [as_light(v) for v in lights]
    v = as_light(viewer)
    if two_light and len(lights) < 2:
        raise ValidationError(f"{variant} needs two light directions (s, t)")
    s = lights[0]
    t = lights[1] if len(lights) > 1 else None

    if t is not None:
        _check_distinct(s, t)
    if variant == "prop2":
        det = np.linalg.det(np.column_stack([s, t, v]))
        if abs(det) < THRESHOLDS["coplanarity"]:
            raise CoplanarityError(f"prop2 needs non-coplanar s, t, v (|det| = {abs(det):.2e})")

    shape = pol1.shape
    n_lights = 2 if (pol2 is None and t is not None and pol1.n_channels % 2 == 0
                     and pol1.n_channels > 1) else 1
    i1, i2 = _intensities(pol1, pol2, n_lights)
    if two_light and i2 is None:
        raise ValidationError(f"{variant} needs intensities under both lights")
    n_colours = i1.shape[0]
    noise = _row_noise(pol1, pol2, n_lights, eta)

    uses_dop = "dop-ratio" in families
    gamma, assumed = (_albedo_block(albedo, n_colours, shape) if uses_dop else (None, False))
    if uses_dop and assumed:
        logger.warning(f"{variant}: no albedo supplied, assuming uniform albedo {ASSUMED_UNIFORM_ALBEDO}")

    mask = pol1.mask.copy()
    spec = np.zeros(shape, dtype=bool) if spec is None else (np.asarray(spec, dtype=bool) & mask)
    diffuse = mask & ~spec

    theta, clamped = zenith_from_rho(pol1.rho, eta)
    f = np.cos(theta)

    buffer = _RowBuffer({**THRESHOLDS["row_weights"], **(weights or {})})
    min_i = THRESHOLDS["min_intensity"]
    min_f = THRESHOLDS["min_cos_zenith"]

    flat_diffuse = np.flatnonzero(diffuse)
    f_d = f.ravel()[flat_diffuse]
    sources_per_colour = 1 if variant == "srt16" else 2

    def pick(grid: Optional[np.ndarray], pixels: np.ndarray) -> Optional[np.ndarray]:
        return None if grid is None else grid.ravel()[pixels]

    if "phase" in families:
        pixels = np.flatnonzero(mask)
        phi = pol1.phi.ravel()[pixels] + np.where(spec.ravel()[pixels], np.pi / 2, 0.0)
        buffer.add("phase", pixels, -np.cos(phi), np.sin(phi), np.zeros(pixels.size),
                   std=pick(noise.phase if noise else None, pixels))

    for c in range(n_colours):
        i1_d = i1[c].ravel()[flat_diffuse]
        i2_d = i2[c].ravel()[flat_diffuse] if i2 is not None else None

        if uses_dop:
            g_d = gamma[c].ravel()[flat_diffuse]
            sources = [(i1_d, s, 0)] if variant == "srt16" else [(i1_d, s, 0), (i2_d, t, 1)]
            for intensity, light, k in sources:
                keep = (intensity >= min_i) & (f_d >= min_f)
                std = None
                if noise is not None:
                    i_std = (noise.i1 if k == 0 else noise.i2)[c].ravel()[flat_diffuse]
                    # rho is shared by every DOP row at the pixel
                    shared = (intensity * noise.log_f_slope.ravel()[flat_diffuse]
                              * noise.rho.ravel()[flat_diffuse])
                    std = np.sqrt(i_std ** 2 + n_colours * sources_per_colour * shared ** 2)
                buffer.add("dop-ratio", flat_diffuse,
                           intensity * v[0] - g_d * f_d * light[0],
                           intensity * v[1] - g_d * f_d * light[1],
                           intensity * v[2] - g_d * f_d * light[2],
                           keep, std)

        if "intensity-ratio" in families:
            keep = (i1_d >= min_i) | (i2_d >= min_i)
            std = None
            if noise is not None:
                std = np.hypot(noise.i1[c].ravel()[flat_diffuse] * t[2],
                               noise.i2[c].ravel()[flat_diffuse] * s[2])
            buffer.add("intensity-ratio", flat_diffuse,
                       i2_d * s[0] - i1_d * t[0],
                       i2_d * s[1] - i1_d * t[1],
                       i2_d * s[2] - i1_d * t[2],
                       keep, std)

    if np.any(spec):
        pixels = np.flatnonzero(spec)
        if two_light:
            # halfway vector of whichever light dominates the pixel
            use_t = i2.sum(axis=0).ravel()[pixels] > i1.sum(axis=0).ravel()[pixels]
        else:
            use_t = np.zeros(pixels.size, dtype=bool)
        for light, chosen in ((s, ~use_t), (t, use_t)):
            if light is None or not np.any(chosen):
                continue
            m = halfway_vector(light, v)
            sel = pixels[chosen]
            # trusted like a typical phase row
            std = None if noise is None else np.full(sel.size, np.median(noise.phase[mask]))
            buffer.add("specular-normal", sel, np.ones(sel.size), np.zeros(sel.size),
                       np.full(sel.size, -m[0] / m[2]), std=std)
            buffer.add("specular-normal", sel, np.zeros(sel.size), np.ones(sel.size),
                       np.full(sel.size, -m[1] / m[2]), std=std)

    field_ = buffer.build(variant, shape, mask)
    field_.stats.update({
        "variant": variant,
        "colours": n_colours,
        "assumed_albedo": assumed,
        "specular_pixels": int(np.sum(spec)),
        "clamped_rho": int(np.sum(clamped & mask)),
        "noise_weighted": noise is not None,
    })
    logger.debug(f"{variant}: {field_.n_rows} rows over {int(mask.sum())} pixels, "
                 f"excluded {field_.stats['excluded']}")
    return field_


def residuals(field_: ConstraintField, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """b . grad z - h for every row, given gradient grids."""
    gx = np.asarray(gx, dtype=float).ravel()[field_.pixel]
    gy = np.asarray(gy, dtype=float).ravel()[field_.pixel]
    return field_.b[:, 0] * gx + field_.b[:, 1] * gy - field_.h


def dump_constraint_csv(field_: ConstraintField, path: Union[str, Path]) -> Path:
    """Debug dump, one row per constraint. Not a stable format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = np.unravel_index(field_.pixel, field_.shape)
    frame = pd.DataFrame({
        "row": rows,
        "col": cols,
        "kind": field_.kind,
        "b1": field_.b[:, 0],
        "b2": field_.b[:, 1],
        "h": field_.h,
        "weight": field_.weight,
    })
    frame.to_csv(path, index=False)
    logger.info(f"Dumped {len(frame)} constraint rows to {path}")
    return path
