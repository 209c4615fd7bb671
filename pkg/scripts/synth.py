"""
Synthetic scenes and simulated polariser image stacks.

Surfaces are rendered with Lambertian shading under each light, polarised
with the diffuse model, sampled along the polariser angle schedule, then
corrupted with Gaussian noise, saturated and quantised.

Coordinates: x runs along columns, y along rows, both centred on the grid.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from scripts.config import DEFAULT_ETA, DEFAULT_VIEWER, PROTOCOL
from scripts.errors import ValidationError
from scripts.maps import (
    parse_scalar,
    parse_vector,
    read_float_map,
    read_key_value,
    write_float_map,
    write_key_value,
    write_png,
)
from scripts.optics import as_light, check_eta, lambert_field, normals_from_gradients, rho_from_zenith

logger = logging.getLogger(__name__)


@dataclass
class Surface:
    """Height grid (pixels) with its gradient."""
    kind: str
    height: np.ndarray
    gx: np.ndarray
    gy: np.ndarray

    @property
    def shape(self):
        return self.height.shape


@dataclass
class SceneConfig:
    surface: Surface
    albedo: np.ndarray                      # (h, w, channels), values in [0, 1]
    lights: List[np.ndarray]
    viewer: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_VIEWER))
    eta: float = DEFAULT_ETA
    polariser_angles: np.ndarray = field(
        default_factory=lambda: np.deg2rad(np.arange(0.0, 180.0, PROTOCOL["polariser_step_deg"])))
    noise_sigma: float = 0.0                # fraction of full scale
    bit_depth: int = 8                      # 0 disables quantisation
    seed: int = 0

    def validate(self):
        if len(self.polariser_angles) < 3:
            raise ValidationError("At least 3 polariser angles are required")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValidationError("Albedo must lie in [0, 1]")
        if self.albedo.shape[:2] != self.surface.shape:
            raise ValidationError("Albedo and height grids differ in size")
        if not self.lights:
            raise ValidationError("At least one light is required")
        if self.bit_depth < 0:
            raise ValidationError(f"bit_depth must be >= 0, got {self.bit_depth}")
        check_eta(self.eta)
        self.lights = [as_light(s) for s in self.lights]
        self.viewer = as_light(self.viewer)
        return self


@dataclass
class CapturedStack:
    """
    Rendered polariser stack plus the ground truth it came from.

    images has shape (lights, channels, angles, h, w).
    """
    images: np.ndarray
    angles: np.ndarray
    lights: List[np.ndarray]
    eta: float
    height: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    normals: np.ndarray
    i_un: np.ndarray                        # (lights, channels, h, w)
    rho: np.ndarray
    phi: np.ndarray
    albedo: np.ndarray
    mask: np.ndarray

    @property
    def n_lights(self) -> int:
        return self.images.shape[0]

    @property
    def n_channels(self) -> int:
        return self.images.shape[1]

    def channel_stack(self) -> np.ndarray:
        """Lights folded into channels: (lights * channels, angles, h, w)."""
        n_l, n_c, n_p, h, w = self.images.shape
        return self.images.reshape(n_l * n_c, n_p, h, w)


# === Surfaces ===

def pixel_coordinates(shape) -> Sequence[np.ndarray]:
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    return x - (w - 1) / 2.0, y - (h - 1) / 2.0


def make_surface(kind: str, shape=(PROTOCOL["size"], PROTOCOL["size"]), invert: bool = False,
                 **params) -> Surface:
    """
    Build a height grid.

    Kinds:
        plane:         z = a x + b y + c
        gaussian-peak: z = amplitude * exp(-(x^2 + y^2) / width^2)
        from-file:     float map at params['path']; gradient by central differences
    """
    x, y = pixel_coordinates(shape)

    if kind == "plane":
        a = float(params.get("a", 0.0))
        b = float(params.get("b", 0.0))
        c = float(params.get("c", 0.0))
        z = a * x + b * y + c
        gx = np.full(shape, a)
        gy = np.full(shape, b)
    elif kind == "gaussian-peak":
        amplitude = float(params.get("amplitude", PROTOCOL["amplitude"]))
        width = float(params.get("width", PROTOCOL["width_fraction"] * min(shape)))
        if width <= 0:
            raise ValidationError(f"Gaussian width must be positive, got {width}")
        z = amplitude * np.exp(-(x ** 2 + y ** 2) / width ** 2)
        gx = -2.0 * x / width ** 2 * z
        gy = -2.0 * y / width ** 2 * z
    elif kind == "from-file":
        path = params.get("path")
        if path is None or not Path(path).exists():
            raise ValidationError(f"Height file not found: {path}")
        z = read_float_map(path)
        if z.ndim != 2:
            raise ValidationError(f"Height map must have one channel, got shape {z.shape}")
        gy, gx = np.gradient(z)
    else:
        raise ValidationError(f"Unknown surface kind: {kind}")

    if invert:
        z, gx, gy = -z, -gx, -gy

    return Surface(kind=kind, height=z, gx=gx, gy=gy)


def make_albedo(kind: str, shape, channels: int = 1, level: Union[float, Sequence[float]] = 1.0,
                low: Union[float, Sequence[float]] = 0.4, high: Union[float, Sequence[float]] = 1.0,
                size: int = 8) -> np.ndarray:
    """
    Per-channel albedo grid of shape (h, w, channels).

    Levels may be scalars or one value per channel.
    """
    h, w = shape

    def per_channel(value):
        values = np.broadcast_to(np.asarray(value, dtype=float), (channels,)).copy()
        if np.any(values < 0) or np.any(values > 1):
            raise ValidationError(f"Albedo levels must lie in [0, 1], got {values.tolist()}")
        return values

    if kind == "uniform":
        return np.broadcast_to(per_channel(level), (h, w, channels)).copy()

    if kind == "checkerboard":
        if size < 1:
            raise ValidationError(f"Checker size must be at least 1 pixel, got {size}")
        rows, cols = np.mgrid[0:h, 0:w]
        odd = ((rows // size + cols // size) % 2).astype(bool)
        return np.where(odd[..., None], per_channel(high), per_channel(low))

    raise ValidationError(f"Unknown albedo kind: {kind}")


# === Rendering ===

def phase_from_normals(normals: np.ndarray) -> np.ndarray:
    """
    Diffuse phase angle in [0, pi).

    The projected normal (nx, ny) is collinear with (sin phi, cos phi), which is
    the direction the phase constraint (-cos phi, sin phi) . grad z = 0 expects.
    """
    return np.mod(np.arctan2(normals[..., 0], normals[..., 1]), np.pi)


def render_stack(cfg: SceneConfig) -> CapturedStack:
    """Render the polariser stack for every light and colour channel."""
    cfg.validate()
    surface = cfg.surface
    gx, gy = surface.gx, surface.gy
    h, w = surface.shape

    normals = normals_from_gradients(gx, gy)
    cos_zenith = np.clip(normals @ cfg.viewer, 0.0, 1.0)
    theta = np.arccos(cos_zenith)
    rho = rho_from_zenith(theta, cfg.eta)
    phi = phase_from_normals(normals)

    angles = np.asarray(cfg.polariser_angles, dtype=float)
    n_lights, n_channels = len(cfg.lights), cfg.albedo.shape[2]

    i_un = np.empty((n_lights, n_channels, h, w))
    for l, s in enumerate(cfg.lights):
        for c in range(n_channels):
            i_un[l, c] = lambert_field(gx, gy, s, cfg.albedo[..., c])

    modulation = 1.0 + rho[None] * np.cos(2.0 * angles[:, None, None] - 2.0 * phi[None])
    images = i_un[:, :, None] * modulation[None, None]

    if cfg.noise_sigma > 0:
        # Philox is counter based: the seed alone fixes every pixel's draw
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        images = images + rng.normal(0.0, cfg.noise_sigma, size=images.shape)

    images = np.clip(images, 0.0, 1.0)
    if cfg.bit_depth:
        levels = 2 ** cfg.bit_depth - 1
        images = np.round(images * levels) / levels

    logger.info(f"Rendered {n_lights} light(s) x {n_channels} channel(s) x {len(angles)} angles "
                f"at {w}x{h}, sigma={cfg.noise_sigma:.3%}")

    return CapturedStack(
        images=images,
        angles=angles,
        lights=list(cfg.lights),
        eta=cfg.eta,
        height=surface.height,
        gx=gx,
        gy=gy,
        normals=normals,
        i_un=i_un,
        rho=rho,
        phi=phi,
        albedo=cfg.albedo,
        mask=np.ones((h, w), dtype=bool),
    )


# === Scene files ===

def scene_config_from_entries(entries: Dict[str, str], base_dir: Optional[Path] = None) -> SceneConfig:
    """Build a SceneConfig from flat key-value entries (angles in degrees)."""
    def get(key, default):
        return entries.get(key, default)

    def number(key, default, kind=float):
        return parse_scalar(get(key, default), kind, key)

    size = number("size", PROTOCOL["size"], int)
    shape = (number("height", size, int), number("width", size, int))
    invert = str(get("invert", "false")).lower() in ("1", "true", "yes")

    kind = get("surface", "gaussian-peak")
    params: Dict[str, Any] = {}
    if kind == "plane":
        params = {k: number(f"plane_{k}", 0.0) for k in ("a", "b", "c")}
    elif kind == "gaussian-peak":
        params = {"amplitude": number("amplitude", PROTOCOL["amplitude"]),
                  "width": number("gaussian_width", PROTOCOL["width_fraction"] * min(shape))}
    elif kind == "from-file":
        path = Path(get("height_file", ""))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        params = {"path": path}
    surface = make_surface(kind, shape, invert=invert, **params)

    channels = number("channels", 1, int)
    albedo_kind = get("albedo", "uniform")
    if albedo_kind == "uniform":
        level = parse_vector(get("albedo_level", str(PROTOCOL["uniform_albedo"])))
        albedo = make_albedo("uniform", surface.shape, channels, level=level)
    else:
        albedo = make_albedo("checkerboard", surface.shape, channels,
                             low=parse_vector(get("checker_low", str(PROTOCOL["checker_levels"][0]))),
                             high=parse_vector(get("checker_high", str(PROTOCOL["checker_levels"][1]))),
                             size=number("checker_size", PROTOCOL["checker_size"], int))

    lights = [parse_vector(get("light_s", ",".join(map(str, PROTOCOL["light_s"]))))]
    if "light_t" in entries or "light_s" not in entries:
        lights.append(parse_vector(get("light_t", ",".join(map(str, PROTOCOL["light_t"])))))

    if "polariser_angles" in entries:
        angles = np.deg2rad(parse_vector(entries["polariser_angles"]))
    else:
        step = number("polariser_step", PROTOCOL["polariser_step_deg"])
        angles = np.deg2rad(np.arange(0.0, 180.0, step))

    cfg = SceneConfig(
        surface=surface,
        albedo=albedo,
        lights=lights,
        viewer=parse_vector(get("viewer", "0,0,1")),
        eta=number("eta", DEFAULT_ETA),
        polariser_angles=angles,
        noise_sigma=number("noise_sigma", 0.0),
        bit_depth=number("bit_depth", PROTOCOL["bit_depth"], int),
        seed=number("seed", 0, int),
    )
    return cfg.validate()


def load_scene_config(path: Union[str, Path], overrides: Optional[Dict[str, str]] = None) -> SceneConfig:
    entries = read_key_value(path)
    entries.update(overrides or {})
    return scene_config_from_entries(entries, base_dir=Path(path).parent)


def save_scene(stack: CapturedStack, out_dir: Union[str, Path], previews: bool = False) -> Dict[str, Path]:
    """
    Write a rendered scene to a directory.

    Layout: scene.cfg, stack.phmap (channels ordered light, colour, angle),
    ground-truth height, gradient and albedo maps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_l, n_c, n_p, h, w = stack.images.shape

    files = {
        "config": write_key_value(out_dir / "scene.cfg", {
            "lights": n_l,
            "channels": n_c,
            "eta": stack.eta,
            "polariser_angles": np.round(np.rad2deg(stack.angles), 10),
            **{f"light_{name}": s for name, s in zip("st", stack.lights)},
        }),
        "stack": write_float_map(out_dir / "stack.phmap",
                                 stack.images.reshape(n_l * n_c * n_p, h, w).transpose(1, 2, 0)),
        "height_gt": write_float_map(out_dir / "height_gt.phmap", stack.height),
        "gradient_gt": write_float_map(out_dir / "gradient_gt.phmap", np.stack([stack.gx, stack.gy], axis=-1)),
        "albedo_gt": write_float_map(out_dir / "albedo_gt.phmap", stack.albedo),
    }

    if previews:
        for l in range(n_l):
            for p in range(n_p):
                image = stack.images[l, :, p].transpose(1, 2, 0)
                write_png(out_dir / "png" / f"light{l}_angle{p:02d}.png", image)

    logger.info(f"Saved scene to {out_dir}")
    return files


def load_scene(scene_dir: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a scene directory written by save_scene.

    Returns dict with images (lights, channels, angles, h, w), angles, lights,
    eta and whatever ground truth is present.
    """
    scene_dir = Path(scene_dir)
    entries = read_key_value(scene_dir / "scene.cfg")
    n_l = parse_scalar(entries.get("lights", 1), int, "lights")
    n_c = parse_scalar(entries.get("channels", 1), int, "channels")
    angles = np.deg2rad(parse_vector(entries["polariser_angles"]))

    flat = read_float_map(scene_dir / "stack.phmap")
    if flat.ndim == 2:
        flat = flat[..., None]
    h, w, total = flat.shape
    if total != n_l * n_c * len(angles):
        raise ValidationError(f"stack.phmap holds {total} images, scene.cfg implies {n_l * n_c * len(angles)}")

    scene = {
        "images": flat.transpose(2, 0, 1).reshape(n_l, n_c, len(angles), h, w),
        "angles": angles,
        "lights": [parse_vector(entries[f"light_{name}"]) for name in "st"[:n_l] if f"light_{name}" in entries],
        "eta": parse_scalar(entries.get("eta", DEFAULT_ETA), float, "eta"),
        "entries": entries,
    }

    for key in ("height_gt", "gradient_gt", "albedo_gt"):
        path = scene_dir / f"{key}.phmap"
        if path.exists():
            scene[key] = read_float_map(path)

    return scene
