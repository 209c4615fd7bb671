"""
Tests for result export.
"""

import json
import pytest
import sys
from pathlib import Path

import numpy as np
import pandas as pd

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from scripts.config import CSV_COLUMNS
from scripts.errors import ValidationError
from scripts.export import (
    append_stats,
    export_albedo,
    export_height,
    get_export_summary,
    summarise_table,
    write_metrics_csv,
)
from scripts.maps import read_float_map


def sample_frame():
    return pd.DataFrame([
        {"setting": "uniform albedo, known lighting", "method": "prop1", "sigma": 0.0,
         "height_rms": 0.12, "normal_mae": 0.3, "wall_ms": 0.0},
        {"setting": "uniform albedo, known lighting", "method": "srt16", "sigma": 0.0,
         "height_rms": 0.15, "normal_mae": 0.4, "wall_ms": 0.0},
    ], columns=CSV_COLUMNS)


class TestStats:
    """Tests for the JSON-lines log."""

    def test_append(self, tmp_path):
        """Records accumulate one per line with numpy values made plain."""
        path = tmp_path / "stats.jsonl"
        append_stats(path, {"step": "a", "value": np.float64(1.5), "grid": np.arange(3)})
        append_stats(path, {"step": "b"}, timestamp=False)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first["value"] == 1.5 and first["grid"] == [0, 1, 2]
        assert "generated_at" in first
        assert json.loads(lines[1]) == {"step": "b"}


class TestMetricsCsv:
    """Tests for the metrics table."""

    def test_columns(self, tmp_path):
        """The file carries exactly the metric columns in order."""
        path = write_metrics_csv(sample_frame(), tmp_path / "out" / "table.csv")
        assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)

    def test_missing_column(self, tmp_path):
        """A table without wall_ms is rejected."""
        with pytest.raises(ValidationError):
            write_metrics_csv(sample_frame().drop(columns=["wall_ms"]), tmp_path / "table.csv")

    def test_summary_pivot(self):
        """The summary has one row per sigma and method."""
        summary = summarise_table(sample_frame())
        assert len(summary) == 2
        assert ("height_rms", "uniform albedo, known lighting") in summary.columns


class TestMaps:
    """Tests for height and albedo export."""

    def test_height_nan_outside(self, tmp_path):
        """Undefined heights are written as 0."""
        z = np.array([[1.0, np.nan], [2.0, 3.0]])
        files = export_height(z, tmp_path, preview=False)
        np.testing.assert_array_equal(read_float_map(files["map"]), [[1.0, 0.0], [2.0, 3.0]])

    def test_albedo_layout(self, tmp_path):
        """Albedo goes to disk channels-last."""
        files = export_albedo(np.zeros((3, 4, 5)), tmp_path, preview=False)
        assert read_float_map(files["map"]).shape == (4, 5, 3)

    def test_summary(self, tmp_path):
        """The export summary lists written files."""
        export_albedo(np.zeros((1, 2, 2)), tmp_path, preview=False)
        summary = get_export_summary(tmp_path)
        assert "albedo.phmap" in summary["files"]
        assert get_export_summary(tmp_path / "missing")["files"] == {}
