"""
Export run results: JSON-lines stats, metrics CSV, height/albedo maps and
8-bit previews.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from scripts.config import CSV_COLUMNS, RESULTS_DIR
from scripts.errors import ValidationError
from scripts.maps import write_float_map, write_png

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def ensure_output_dir(out_dir: PathLike = RESULTS_DIR) -> Path:
    """Create output directory if it doesn't exist."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _plain(value: Any) -> Any:
    """numpy scalars and arrays to JSON-friendly values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def append_stats(path: PathLike, record: Dict[str, Any], timestamp: bool = True) -> Path:
    """Append one JSON object per line."""
    path = Path(path)
    ensure_output_dir(path.parent)
    payload = _plain(record)
    if timestamp:
        payload = {"generated_at": datetime.now().isoformat(), **payload}
    with open(path, "a") as f:
        f.write(json.dumps(payload, default=str, sort_keys=True) + "\n")
    logger.debug(f"Appended stats record to {path}")
    return path


def write_metrics_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write the metrics table; float formatting is fixed for reproducible files."""
    path = Path(path)
    ensure_output_dir(path.parent)
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"Metrics table is missing columns: {missing}")
    frame[CSV_COLUMNS].to_csv(path, index=False, float_format="%.6f")
    logger.info(f"Exported {len(frame)} metric rows to {path}")
    return path


def summarise_table(frame: pd.DataFrame) -> pd.DataFrame:
    """One row per (sigma, method), one column per metric and setting."""
    return frame.pivot_table(index=["sigma", "method"], columns="setting",
                             values=["height_rms", "normal_mae"]).sort_index()


def export_height(z: np.ndarray, out_dir: PathLike, name: str = "height",
                  preview: bool = True) -> Dict[str, Optional[Path]]:
    out_dir = ensure_output_dir(out_dir)
    files: Dict[str, Optional[Path]] = {"map": write_float_map(out_dir / f"{name}.phmap", np.nan_to_num(z))}
    if preview:
        finite = z[np.isfinite(z)]
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        files["preview"] = write_png(out_dir / f"{name}.png", np.nan_to_num(z, nan=lo), lo, hi)
    logger.info(f"Exported {name} to {files['map']}")
    return files


def export_albedo(albedo: np.ndarray, out_dir: PathLike, preview: bool = True) -> Dict[str, Optional[Path]]:
    """albedo is (colours, h, w)."""
    out_dir = ensure_output_dir(out_dir)
    grid = np.asarray(albedo).transpose(1, 2, 0)
    files: Dict[str, Optional[Path]] = {"map": write_float_map(out_dir / "albedo.phmap", grid)}
    if preview:
        files["preview"] = write_png(out_dir / "albedo.png", grid)
    logger.info(f"Exported albedo to {files['map']}")
    return files


def get_export_summary(out_dir: PathLike = RESULTS_DIR) -> Dict[str, Any]:
    """Sizes and modification times of exported files."""
    out_dir = Path(out_dir)
    summary: Dict[str, Any] = {"directory": str(out_dir), "files": {}}
    if not out_dir.exists():
        return summary
    for path in sorted(out_dir.iterdir()):
        if path.is_file():
            stat = path.stat()
            summary["files"][path.name] = {
                "exists": True,
                "size_kb": round(stat.st_size / 1024, 2),
                "modified": datetime.fromtimestamp(stat.st_mtime).isoformat(),
            }
    return summary
