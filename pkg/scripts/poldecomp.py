"""
Polarisation image estimation from polariser-angle stacks.

Each pixel follows i(v) = i_un * (1 + rho * cos(2v - 2phi)). With
a = rho cos(2phi), b = rho sin(2phi) the model is linear in (i_un, i_un a, i_un b)
for one channel, and bilinear in (i_un per channel, a, b) for several channels
sharing one (rho, phi). The multichannel fit alternates two closed-form
least-squares steps.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from scripts.config import DECOMPOSITION
from scripts.errors import DegenerateFitError, ValidationError
from scripts.maps import read_float_map, write_float_map

logger = logging.getLogger(__name__)


@dataclass
class PolarisationImage:
    """
    Decomposed polarisation quantities on a pixel grid.

    i_un is (channels, h, w); rho and phi are shared by all channels.
    mask is the reconstruction domain; clamped marks rho pushed below 1;
    degenerate marks pixels whose fitted intensity is not positive.

    rho_std (h, w) and i_std (channels, h, w) are first-order standard
    deviations of rho (per component of rho e^{2i phi}) and of i_un, from the
    noise level pooled over the fit residuals. Both are None when the fit
    was exact or the image did not come from a fit.
    """
    i_un: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    mask: np.ndarray
    clamped: np.ndarray = None
    degenerate: np.ndarray = None
    rho_std: Optional[np.ndarray] = None
    i_std: Optional[np.ndarray] = None
    stats: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.i_un.ndim == 2:
            self.i_un = self.i_un[None]
        if self.clamped is None:
            self.clamped = np.zeros(self.rho.shape, dtype=bool)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.rho.shape, dtype=bool)

    @property
    def n_channels(self) -> int:
        return self.i_un.shape[0]

    @property
    def shape(self):
        return self.rho.shape

    @property
    def noisy(self) -> bool:
        return self.rho_std is not None and self.i_std is not None

    def light_channels(self, n_lights: int) -> List[np.ndarray]:
        """Split light-major channels into one (colours, h, w) block per light."""
        if self.n_channels % n_lights:
            raise ValidationError(f"{self.n_channels} channels cannot be split across {n_lights} lights")
        per_light = self.n_channels // n_lights
        return [self.i_un[k * per_light:(k + 1) * per_light] for k in range(n_lights)]


def _design(angles: np.ndarray) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    return np.column_stack([np.ones_like(angles), np.cos(2 * angles), np.sin(2 * angles)])


def _check_design(angles: np.ndarray) -> np.ndarray:
    """Raise DegenerateFitError unless the angles determine the sinusoid."""
    angles = np.asarray(angles, dtype=float)
    if angles.size < 3:
        raise DegenerateFitError(f"At least 3 polariser angles are required, got {angles.size}")
    design = _design(angles)
    singular = np.linalg.svd(design, compute_uv=False)
    if singular[-1] < DECOMPOSITION["rank_tol"] * singular[0]:
        raise DegenerateFitError("Polariser angles are not distinct modulo 180 degrees")
    return design


def _finish(i_un: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(a, b) -> (rho, phi, clamped) with rho clamped below 1 and phi folded into [0, pi)."""
    rho = np.sqrt(a ** 2 + b ** 2)
    clamped = rho > DECOMPOSITION["rho_clamp"]
    rho = np.clip(rho, 0.0, DECOMPOSITION["rho_clamp"])
    phi = np.mod(0.5 * np.arctan2(b, a), np.pi)
    # zero-amplitude sinusoid: phase undefined, 0 by convention
    phi = np.where(rho > 1e-12, phi, 0.0)
    return rho, phi, clamped


def _domain(i_un: np.ndarray) -> np.ndarray:
    return np.max(i_un, axis=0) >= DECOMPOSITION["min_intensity"]


def _noise_level(rss: np.ndarray, dof: int, domain: np.ndarray, level: float) -> Optional[float]:
    """
    Per-sample noise standard deviation pooled over the domain.

    Returns None when there are no spare degrees of freedom or the residual
    is at round-off level relative to the mean intensity.
    """
    n = int(np.sum(domain))
    if dof <= 0 or n == 0:
        return None
    sigma = float(np.sqrt(np.sum(rss[domain]) / (dof * n)))
    if sigma <= DECOMPOSITION["noise_floor"] * max(level, 1e-300):
        return None
    return sigma


def fit_single_channel(samples: np.ndarray, angles: np.ndarray) -> PolarisationImage:
    """
    Linear least-squares sinusoid fit for one channel.

    Args:
        samples: (P, ...) intensities, one slice per polariser angle
        angles: P polariser angles in radians

    Raises:
        DegenerateFitError: if fewer than 3 distinct angles (mod 180 degrees)
    """
    samples = np.asarray(samples, dtype=float)
    design = _check_design(angles)
    if samples.shape[0] != design.shape[0]:
        raise ValidationError(f"{samples.shape[0]} samples for {design.shape[0]} angles")

    spatial = samples.shape[1:]
    flat = samples.reshape(design.shape[0], -1)
    coeffs = np.linalg.pinv(design) @ flat
    i_un = coeffs[0]
    degenerate = i_un <= 0
    safe = np.where(degenerate, 1.0, i_un)
    a = np.where(degenerate, 0.0, coeffs[1] / safe)
    b = np.where(degenerate, 0.0, coeffs[2] / safe)

    rho, phi, clamped = _finish(i_un, a, b)
    i_un = i_un.reshape((1,) + spatial)
    if np.any(degenerate):
        logger.warning(f"{int(np.sum(degenerate))} pixel(s) with non-positive fitted intensity")
    mask = _domain(i_un) & ~degenerate.reshape(spatial)

    rss = np.sum((flat - design @ coeffs) ** 2, axis=0)
    sigma = _noise_level(rss, design.shape[0] - 3, mask.ravel(),
                         float(np.mean(i_un.reshape(-1)[mask.ravel()])) if np.any(mask) else 0.0)
    rho_std = i_std = None
    if sigma is not None:
        # coefficient covariance is sigma^2 (D^T D)^-1
        cov = np.linalg.inv(design.T @ design)
        rho_std = np.where(degenerate, np.inf,
                           sigma * np.sqrt(0.5 * (cov[1, 1] + cov[2, 2])) / safe).reshape(spatial)
        i_std = np.full((1,) + spatial, sigma * np.sqrt(cov[0, 0]))

    return PolarisationImage(
        i_un=i_un,
        rho=rho.reshape(spatial),
        phi=phi.reshape(spatial),
        mask=mask,
        clamped=clamped.reshape(spatial),
        degenerate=degenerate.reshape(spatial),
        rho_std=rho_std,
        i_std=i_std,
        stats={"mode": "single", "channels": 1, "noise_std": sigma},
    )


def fit_three_angle_closed_form(i0: np.ndarray, i45: np.ndarray, i90: np.ndarray) -> Dict[str, np.ndarray]:
    """Closed-form decomposition for the polariser schedule {0, 45, 90} degrees."""
    i0, i45, i90 = (np.asarray(v, dtype=float) for v in (i0, i45, i90))
    i_un = 0.5 * (i0 + i90)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(i_un > 0, 0.5 * (i0 - i90) / i_un, 0.0)
        b = np.where(i_un > 0, (i45 - i_un) / i_un, 0.0)
    rho, phi, clamped = _finish(i_un, a, b)
    return {"i_un": i_un, "rho": rho, "phi": phi, "clamped": clamped}


def _objective(data: np.ndarray, i_un: np.ndarray, modulation: np.ndarray) -> float:
    residual = data - i_un[:, None, :] * modulation[None]
    return float(np.sum(residual ** 2))


def fit_multichannel(stacks: np.ndarray, angles: np.ndarray,
                     init: Optional[PolarisationImage] = None,
                     rel_tol: float = DECOMPOSITION["rel_tol"],
                     max_iterations: int = DECOMPOSITION["max_iterations"]) -> PolarisationImage:
    """
    Shared (rho, phi) with per-channel unpolarised intensity.

    Alternates (a) closed-form per-channel i_un with (rho, phi) fixed and
    (b) the per-pixel 2x2 normal equations for (a, b) over all channels with
    i_un fixed, until the relative objective decrease drops below rel_tol.

    Args:
        stacks: (C, P, h, w) samples
        angles: P polariser angles in radians
        init: starting polarisation image; by default the single-channel fit
              of the brightest channel
    """
    stacks = np.asarray(stacks, dtype=float)
    if stacks.ndim != 4:
        raise ValidationError(f"Expected (channels, angles, h, w) stack, got shape {stacks.shape}")
    _check_design(angles)
    n_c, n_p, h, w = stacks.shape

    if init is None:
        brightest = int(np.argmax(stacks.mean(axis=(1, 2, 3))))
        logger.debug(f"Initialising from channel {brightest}")
        init = fit_single_channel(stacks[brightest], angles)

    data = stacks.reshape(n_c, n_p, h * w)
    cos2 = np.cos(2 * np.asarray(angles))[:, None]
    sin2 = np.sin(2 * np.asarray(angles))[:, None]

    a = (init.rho * np.cos(2 * init.phi)).ravel()
    b = (init.rho * np.sin(2 * init.phi)).ravel()

    history: List[float] = []
    previous = None
    converged = False
    monotone = True
    iteration = 0
    i_un = np.zeros((n_c, h * w))

    for iteration in range(1, max_iterations + 1):
        # (a) per-channel intensities, diagonal system per pixel
        modulation = 1.0 + a[None] * cos2 + b[None] * sin2
        energy = np.sum(modulation ** 2, axis=0)
        i_un = np.einsum("pn,cpn->cn", modulation, data) / np.where(energy > 0, energy, 1.0)
        half = _objective(data, i_un, modulation)

        # (b) shared (a, b) from all channels at once
        weight = np.sum(i_un ** 2, axis=0)
        excess = data - i_un[:, None, :]
        r1 = np.einsum("cn,pn,cpn->n", i_un, np.broadcast_to(cos2, (n_p, h * w)), excess)
        r2 = np.einsum("cn,pn,cpn->n", i_un, np.broadcast_to(sin2, (n_p, h * w)), excess)
        a11 = weight * np.sum(cos2 ** 2)
        a12 = weight * np.sum(cos2 * sin2)
        a22 = weight * np.sum(sin2 ** 2)
        det = a11 * a22 - a12 ** 2
        solvable = det > 1e-300
        safe = np.where(solvable, det, 1.0)
        a = np.where(solvable, (a22 * r1 - a12 * r2) / safe, a)
        b = np.where(solvable, (a11 * r2 - a12 * r1) / safe, b)

        modulation = 1.0 + a[None] * cos2 + b[None] * sin2
        full = _objective(data, i_un, modulation)

        for value in (half, full):
            if history and value > history[-1] * (1 + 1e-10) + 1e-15:
                monotone = False
                logger.warning(f"Objective increased at iteration {iteration}: {history[-1]:.3e} -> {value:.3e}")
            history.append(value)

        if previous is not None and previous - full <= rel_tol * max(previous, 1e-300):
            converged = True
            break
        if full == 0.0:
            converged = True
            break
        previous = full

    if not converged:
        logger.warning(f"Multichannel fit hit the iteration cap ({max_iterations})")

    rho, phi, clamped = _finish(i_un, a, b)
    degenerate = np.any(i_un <= 0, axis=0)
    domain = _domain(i_un)

    modulation = 1.0 + a[None] * cos2 + b[None] * sin2
    rss = np.sum((data - i_un[:, None, :] * modulation[None]) ** 2, axis=(0, 1))
    sigma = _noise_level(rss, n_c * n_p - n_c - 2, domain,
                         float(np.mean(i_un[:, domain])) if np.any(domain) else 0.0)
    rho_std = i_std = None
    if sigma is not None:
        # inverse of the (a, b) normal matrix, averaged over both components
        weight = np.sum(i_un ** 2, axis=0)
        spread = np.sum(cos2 ** 2) * np.sum(sin2 ** 2) - np.sum(cos2 * sin2) ** 2
        scale = 0.5 * (np.sum(cos2 ** 2) + np.sum(sin2 ** 2)) / spread
        positive = weight > 0
        rho_std = np.where(positive, sigma * np.sqrt(scale / np.where(positive, weight, 1.0)), np.inf)
        rho_std = rho_std.reshape(h, w)
        energy = np.sum(modulation ** 2, axis=0)
        i_std = np.broadcast_to(sigma / np.sqrt(energy), (n_c, h * w)).reshape(n_c, h, w).copy()

    i_un = np.maximum(i_un, 0.0).reshape(n_c, h, w)

    return PolarisationImage(
        i_un=i_un,
        rho=rho.reshape(h, w),
        phi=phi.reshape(h, w),
        mask=domain.reshape(h, w),
        clamped=clamped.reshape(h, w),
        degenerate=degenerate.reshape(h, w),
        rho_std=rho_std,
        i_std=i_std,
        stats={
            "mode": "multi",
            "channels": n_c,
            "iterations": iteration,
            "converged": converged,
            "monotone": monotone,
            "objective": history[-1] if history else 0.0,
            "history": history,
            "noise_std": sigma,
        },
    )


def decompose_stack(stack: np.ndarray, angles: np.ndarray, mode: str = "multi") -> PolarisationImage:
    """
    Polarisation image from a (channels, angles, h, w) stack.

    mode 'single' fits only the brightest channel for (rho, phi) but still
    reports a per-channel intensity; 'multi' runs the alternation.
    """
    stack = np.asarray(stack, dtype=float)
    if mode == "multi":
        pol = fit_multichannel(stack, angles)
    elif mode == "single":
        brightest = int(np.argmax(stack.mean(axis=(1, 2, 3))))
        pol = fit_single_channel(stack[brightest], angles)
        # per-channel intensity from the shared sinusoid, as in step (a)
        cos2 = np.cos(2 * np.asarray(angles))[:, None, None]
        sin2 = np.sin(2 * np.asarray(angles))[:, None, None]
        modulation = 1.0 + pol.rho * np.cos(2 * pol.phi) * cos2 + pol.rho * np.sin(2 * pol.phi) * sin2
        energy = np.sum(modulation ** 2, axis=0)
        i_un = np.einsum("phw,cphw->chw", modulation, stack) / energy
        pol.i_un = np.maximum(i_un, 0.0)
        pol.mask = pol.mask & _domain(pol.i_un)
        if pol.i_std is not None:
            sigma = pol.stats["noise_std"]
            pol.i_std = np.repeat((sigma / np.sqrt(energy))[None], stack.shape[0], axis=0)
        pol.stats.update({"channels": stack.shape[0], "init_channel": brightest})
    else:
        raise ValidationError(f"Unknown decomposition mode: {mode}")

    if DECOMPOSITION["debias_rho"]:
        pol = debias_rho(pol)
    return pol


def debias_rho(pol: PolarisationImage) -> PolarisationImage:
    """
    Remove the positive noise bias of rho = sqrt(a^2 + b^2).

    rho0 = sqrt(rho^2 - rho_std^2), set to 0 where the difference is negative.
    Images without a noise estimate are returned unchanged.
    """
    if pol.rho_std is None:
        return pol
    sigma = np.where(np.isfinite(pol.rho_std), pol.rho_std, 0.0)
    excess = pol.rho ** 2 - sigma ** 2
    zeroed = int(np.sum((excess <= 0) & pol.mask))
    pol.rho = np.sqrt(np.maximum(excess, 0.0))
    pol.stats.update({"debiased": True, "rho_zeroed": zeroed})
    logger.debug(f"Debiased rho; {zeroed} pixel(s) fell to zero")
    return pol


def save_polarisation(pol: PolarisationImage, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    files = {
        "i_un": write_float_map(out_dir / "iun.phmap", pol.i_un.transpose(1, 2, 0)),
        "rho": write_float_map(out_dir / "rho.phmap", pol.rho),
        "phi": write_float_map(out_dir / "phi.phmap", pol.phi),
    }
    if pol.noisy:
        files["rho_std"] = write_float_map(out_dir / "rhostd.phmap", pol.rho_std)
        files["i_std"] = write_float_map(out_dir / "istd.phmap", pol.i_std.transpose(1, 2, 0))
    return files


def _channels_first(grid: np.ndarray) -> np.ndarray:
    return grid[None] if grid.ndim == 2 else grid.transpose(2, 0, 1)


def load_polarisation(scene_dir: Union[str, Path]) -> PolarisationImage:
    scene_dir = Path(scene_dir)
    i_un = _channels_first(read_float_map(scene_dir / "iun.phmap"))
    rho = read_float_map(scene_dir / "rho.phmap")
    phi = read_float_map(scene_dir / "phi.phmap")
    rho_std = i_std = None
    if (scene_dir / "rhostd.phmap").exists() and (scene_dir / "istd.phmap").exists():
        rho_std = read_float_map(scene_dir / "rhostd.phmap")
        i_std = _channels_first(read_float_map(scene_dir / "istd.phmap"))
    return PolarisationImage(i_un=i_un, rho=rho, phi=phi, mask=_domain(i_un), rho_std=rho_std, i_std=i_std)
