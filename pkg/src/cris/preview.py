"""Preview and tiling utilities for probability-map figures."""

from __future__ import annotations

from typing import Sequence, Tuple

from PIL import Image

RGB = Tuple[int, int, int]


def scale_nearest(img: Image.Image, factor: int) -> Image.Image:
    """Scale up using nearest-neighbor interpolation."""
    if factor < 1:
        raise ValueError(f"Scale factor must be >= 1, got {factor}")
    if factor == 1:
        return img
    return img.resize((img.width * factor, img.height * factor), Image.Resampling.NEAREST)


def panel_grid(
    rows: Sequence[Sequence[Image.Image]],
    gap: int = 2,
    background: RGB = (255, 255, 255),
) -> Image.Image:
    """Tile rows of equally sized panels into one RGB image.

    Args:
        rows: Panels per row; every row must have the same length.
        gap: Pixels between neighbouring panels.
        background: Canvas colour shown in the gaps.
    """
    if not rows or not rows[0]:
        raise ValueError("panel_grid requires at least 1 panel")
    n_cols = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != n_cols:
            raise ValueError(f"Row {i} has {len(row)} panels, expected {n_cols}")
    cell_w = max(p.width for row in rows for p in row)
    cell_h = max(p.height for row in rows for p in row)
    width = n_cols * cell_w + gap * (n_cols - 1)
    height = len(rows) * cell_h + gap * (len(rows) - 1)

    canvas = Image.new("RGB", (width, height), background)
    for r, row in enumerate(rows):
        for c, panel in enumerate(row):
            canvas.paste(panel.convert("RGB"), (c * (cell_w + gap), r * (cell_h + gap)))
    return canvas
