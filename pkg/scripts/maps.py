"""
File formats for pixel grids and scene descriptions.

Float maps: ASCII header "PHMAP <w> <h> <channels>\\n" followed by row-major
little-endian 32-bit floats. PNG is used only for 8-bit previews.
Scene and run files are flat "key = value" text.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

try:
    import cv2
    CV2_AVAILABLE = True
except ImportError:
    CV2_AVAILABLE = False

from scripts.errors import ValidationError

logger = logging.getLogger(__name__)

MAGIC = "PHMAP"

PathLike = Union[str, Path]


def write_float_map(path: PathLike, values: np.ndarray) -> Path:
    """Write an (h, w) or (h, w, c) array as a float map."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[..., None]
    if values.ndim != 3:
        raise ValidationError(f"Float maps hold 2-D or 3-D grids, got shape {values.shape}")

    height, width, channels = values.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"{MAGIC} {width} {height} {channels}\n".encode("ascii"))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())

    logger.debug(f"Wrote {width}x{height}x{channels} map to {path}")
    return path


def read_float_map(path: PathLike) -> np.ndarray:
    """Read a float map; single-channel maps come back as (h, w)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Float map not found: {path}")

    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").split()
        payload = f.read()

    if len(header) != 4 or header[0] != MAGIC:
        raise ValidationError(f"{path} is not a {MAGIC} file")
    width, height, channels = (int(v) for v in header[1:])

    expected = width * height * channels * 4
    if len(payload) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes of data, found {len(payload)}")

    values = np.frombuffer(payload, dtype="<f4").astype(float).reshape(height, width, channels)
    return values[..., 0] if channels == 1 else values


def write_png(path: PathLike, image: np.ndarray, lo: Optional[float] = None,
              hi: Optional[float] = None) -> Optional[Path]:
    """
    Write an 8-bit preview. Values are mapped linearly from [lo, hi]
    (default [0, 1]) and saturated.
    """
    if not CV2_AVAILABLE:
        logger.warning(f"opencv not installed, skipping preview {path}")
        return None

    path = Path(path)
    lo = 0.0 if lo is None else lo
    hi = 1.0 if hi is None else hi
    scaled = (np.asarray(image, dtype=float) - lo) / max(hi - lo, 1e-12)
    pixels = np.round(np.clip(np.nan_to_num(scaled), 0.0, 1.0) * 255).astype(np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        pixels = pixels[..., ::-1]  # opencv expects BGR
    elif pixels.ndim == 3:
        pixels = pixels[..., 0]

    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), pixels)
    return path


def read_key_value(path: PathLike) -> Dict[str, str]:
    """Parse a flat "key = value" file; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file not found: {path}")

    entries = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def write_key_value(path: PathLike, entries: Dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {_format_value(value)}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def _format_value(value: object) -> str:
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def parse_scalar(text: object, kind: type = float, key: str = "value"):
    """Convert one config entry with int or float, as a ValidationError on bad input."""
    try:
        return kind(text)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Cannot parse {key} '{text}' as {kind.__name__}: {e}")


def parse_vector(text: str) -> np.ndarray:
    """'1,0,5' -> array([1., 0., 5.])"""
    try:
        return np.array([float(v) for v in text.replace(" ", "").split(",") if v], dtype=float)
    except ValueError as e:
        raise ValidationError(f"Cannot parse vector '{text}': {e}")
