"""Tests for result tables, PR figures and probability-map grids."""

from __future__ import annotations

import pytest
from PIL import Image

from cris.errors import ConfigError
from cris.metrics import EvalReport, PRPoint
from cris.persistence import write_report
from cris.preview import panel_grid, scale_nearest
from cris.report import (
    emit_pr_plot,
    emit_prob_maps,
    emit_table,
    emit_tables,
    format_dice,
    format_mse,
    load_reports,
)


def _report(model, strategy, d, m, dataset="kvasir") -> EvalReport:
    return EvalReport(d, m, 0.5, [PRPoint(0.5, 0.8, 0.7)], [d], model, dataset, strategy, "")


REPORTS = [
    _report("unet", "backbone_only", 0.80, 0.050),
    _report("unet", "backbone_fcn_joint", 0.82, 0.041),
    _report("unet", "cris", 0.8599, 0.035),
    _report("segnet", "backbone_only", 0.70, 0.060),
    _report("segnet", "cris", 0.75, 0.070),
]


class TestFormat:
    def test_dice(self):
        assert format_dice(0.8599) == "85.99"
        assert format_dice(0.5) == "50.00"

    def test_mse(self):
        assert format_mse(0.0351) == "0.035"
        assert format_mse(0.1) == "0.100"


class TestTable:
    def test_layout(self):
        lines = emit_table(REPORTS).splitlines()
        assert lines[0] == "# kvasir: DICE (x100) / MSE"
        assert lines[2] == "| Strategy | UNet | SegNet |"
        assert lines[4].startswith("| Backbone |")
        assert lines[5].startswith("| Backbone+FCN |")
        assert lines[6].startswith("| Proposed |")

    def test_best_per_column_in_bold(self):
        text = emit_table(REPORTS)
        assert "| Proposed | **85.99** / **0.035** | **75.00** / 0.070 |" in text
        assert "| Backbone | 80.00 / 0.050 | 70.00 / **0.060** |" in text

    def test_missing_cell(self):
        assert "| Backbone+FCN | 82.00 / 0.041 | - |" in emit_table(REPORTS)

    def test_crf_placeholder(self):
        lines = emit_table(REPORTS, crf_placeholder=True).splitlines()
        assert lines[5] == "| Backbone+CRF* | N/A | N/A |"
        assert lines[-1].startswith("\\* N/A")

    def test_no_placeholder_by_default(self):
        assert "CRF" not in emit_table(REPORTS)

    def test_one_dataset_only(self):
        with pytest.raises(ConfigError):
            emit_table(REPORTS + [_report("unet", "cris", 0.9, 0.02, dataset="cvc")])

    def test_empty(self):
        with pytest.raises(ConfigError):
            emit_table([])

    def test_re_emission_is_identical(self, tmp_path):
        for r in REPORTS:
            write_report(r, tmp_path / f"{r.dataset}__{r.model}__{r.strategy}")
        (first,) = emit_tables(load_reports(tmp_path), tmp_path / "a")
        (second,) = emit_tables(load_reports(tmp_path), tmp_path / "b")
        assert first.name == "table_kvasir.md"
        assert first.read_bytes() == second.read_bytes()
        assert first.read_text() == emit_table(REPORTS)

    def test_load_reports_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_reports(tmp_path / "nope")


class TestPRPlot:
    def test_writes_png(self, tmp_path):
        curves = {
            "unet": {
                "cris": [PRPoint(t / 10, 0.5 + t / 20, 1 - t / 10) for t in range(11)],
                "backbone_only": [PRPoint(0.5, 0.6, 0.5)],
            },
            "segnet": {"cris": [PRPoint(0.0, 0.3, 1.0), PRPoint(1.0, 1.0, 0.0)]},
        }
        path = emit_pr_plot(curves, tmp_path / "pr.png", title="kvasir")
        with Image.open(path) as img:
            assert img.format == "PNG"
            assert img.width > img.height

    def test_no_curves(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_pr_plot({}, tmp_path / "pr.png")


class TestProbMaps:
    def test_grid_size(self, make_backbone, make_full_model, synth32, tmp_path):
        models = {
            "unet": {"backbone_only": make_backbone(), "cris": make_full_model(),
                     "backbone_fcn_joint": make_full_model(seed=1)},
            "segnet": {"cris": make_full_model("segnet")},
        }
        samples = list(synth32)[:2]
        path = emit_prob_maps(models, samples, tmp_path / "maps.png")
        with Image.open(path) as img:
            assert img.size == (5 * 32 + 4 * 2, 4 * 32 + 3 * 2)

    def test_missing_strategy_is_black(self, make_backbone, make_full_model, synth32, tmp_path):
        models = {"unet": {"cris": make_full_model()}, "segnet": {"backbone_only": make_backbone("segnet")}}
        path = emit_prob_maps(models, list(synth32)[:1], tmp_path / "maps.png", gap=0)
        with Image.open(path) as img:
            # segnet row, cris column: backbone_only sorts first, so cris is column 3
            assert img.getpixel((3 * 32 + 5, 32 + 5)) == (0, 0, 0)

    def test_rerun_is_byte_identical(self, make_full_model, synth32, tmp_path):
        models = {"unet": {"cris": make_full_model()}}
        a = emit_prob_maps(models, list(synth32)[:2], tmp_path / "a.png", scale=2)
        b = emit_prob_maps(models, list(synth32)[:2], tmp_path / "b.png", scale=2)
        assert a.read_bytes() == b.read_bytes()

    def test_nothing_to_draw(self, synth32, tmp_path):
        with pytest.raises(ConfigError):
            emit_prob_maps({}, list(synth32)[:1], tmp_path / "x.png")


class TestPreview:
    def test_scale_nearest(self):
        img = Image.new("L", (3, 2), 7)
        assert scale_nearest(img, 4).size == (12, 8)
        assert scale_nearest(img, 1) is img
        with pytest.raises(ValueError):
            scale_nearest(img, 0)

    def test_panel_grid_gaps(self):
        panels = [[Image.new("L", (4, 4), 0), Image.new("L", (4, 4), 0)]]
        grid = panel_grid(panels, gap=3)
        assert grid.size == (11, 4)
        assert grid.getpixel((5, 0)) == (255, 255, 255)
        assert grid.getpixel((8, 0)) == (0, 0, 0)

    def test_ragged_rows(self):
        with pytest.raises(ValueError):
            panel_grid([[Image.new("L", (2, 2))], []])
