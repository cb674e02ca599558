"""Result tables, precision-recall figures and probability-map grids."""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import torch.nn as nn
from matplotlib.figure import Figure
from PIL import Image

from .backbones import BackboneKind
from .errors import ConfigError
from .io import image_to_pil, map_to_pil
from .metrics import EvalReport, PRPoint
from .persistence import read_report
from .preview import panel_grid, scale_nearest
from .tensors import Dataset, Sample
from .training import Strategy, predict

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CRF_LABEL = "Backbone+CRF"
CRF_FOOTNOTE = "N/A: the Backbone+CRF strategy is not evaluated in this study."


def _backbone_label(kind: str) -> str:
    try:
        return BackboneKind(kind).label
    except ValueError:
        return kind


def _strategy_label(strategy: str) -> str:
    try:
        return Strategy(strategy).label
    except ValueError:
        return strategy


def _ordered(values, canonical: Sequence[str]) -> List[str]:
    present = set(values)
    ordered = [v for v in canonical if v in present]
    return ordered + sorted(present - set(ordered))


def load_reports(results_dir: PathLike) -> List[EvalReport]:
    """Every cell report under ``results_dir``, ordered by cell directory name."""
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise FileNotFoundError(f"Results directory not found: {results_dir}")
    return [read_report(p.parent) for p in sorted(results_dir.glob("*/report.csv"))]


def format_dice(value: float) -> str:
    return f"{value * 100:.2f}"


def format_mse(value: float) -> str:
    return f"{value:.3f}"


def emit_table(
    reports: Sequence[EvalReport],
    path: Optional[PathLike] = None,
    *,
    crf_placeholder: bool = False,
) -> str:
    """Markdown table for one dataset: strategies as rows, backbones as columns.

    Each cell reads ``DICE / MSE`` with DICE scaled by 100. The best DICE
    (highest) and best MSE (lowest) of every column are bold.
    """
    if not reports:
        raise ConfigError("emit_table needs at least one report")
    datasets = sorted({r.dataset for r in reports})
    if len(datasets) > 1:
        raise ConfigError(f"emit_table takes one dataset at a time, got {datasets}")

    backbones = _ordered((r.model for r in reports), [k.value for k in BackboneKind])
    strategies = _ordered((r.strategy for r in reports), [s.value for s in Strategy])
    cells: Dict[tuple, EvalReport] = {(r.strategy, r.model): r for r in reports}

    best_dice = {b: max(r.dice for r in reports if r.model == b) for b in backbones}
    best_mse = {b: min(r.mse for r in reports if r.model == b) for b in backbones}

    def cell(strategy: str, backbone: str) -> str:
        r = cells.get((strategy, backbone))
        if r is None:
            return "-"
        d, m = format_dice(r.dice), format_mse(r.mse)
        if r.dice == best_dice[backbone]:
            d = f"**{d}**"
        if r.mse == best_mse[backbone]:
            m = f"**{m}**"
        return f"{d} / {m}"

    lines = [
        f"# {datasets[0]}: DICE (x100) / MSE",
        "",
        "| Strategy | " + " | ".join(_backbone_label(b) for b in backbones) + " |",
        "|---" * (len(backbones) + 1) + "|",
    ]
    row_keys: List[Optional[str]] = list(strategies)
    if crf_placeholder:
        # CRF sits right after the plain backbone row
        row_keys.insert(1 if Strategy.BACKBONE_ONLY.value in strategies else 0, None)
    for s in row_keys:
        if s is None:
            lines.append(f"| {CRF_LABEL}* | " + " | ".join("N/A" for _ in backbones) + " |")
        else:
            lines.append(
                f"| {_strategy_label(s)} | " + " | ".join(cell(s, b) for b in backbones) + " |"
            )
    if crf_placeholder:
        lines += ["", f"\\* {CRF_FOOTNOTE}"]
    text = "\n".join(lines) + "\n"

    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def emit_tables(
    reports: Sequence[EvalReport], out_dir: PathLike, *, crf_placeholder: bool = False
) -> List[Path]:
    """One ``table_<dataset>.md`` per dataset."""
    by_dataset: Dict[str, List[EvalReport]] = defaultdict(list)
    for r in reports:
        by_dataset[r.dataset].append(r)
    paths = []
    for dataset in sorted(by_dataset):
        path = Path(out_dir) / f"table_{dataset}.md"
        emit_table(by_dataset[dataset], path, crf_placeholder=crf_placeholder)
        paths.append(path)
    return paths


def emit_pr_plot(
    curves: Mapping[str, Mapping[str, Sequence[PRPoint]]],
    path: PathLike,
    title: str = "",
) -> Path:
    """Precision against recall; one panel per backbone, one line per strategy.

    ``curves`` maps backbone -> strategy -> PR points. Single-point curves
    are drawn as markers.
    """
    if not curves or not any(curves.values()):
        raise ConfigError("emit_pr_plot needs at least one curve")
    backbones = _ordered(curves, [k.value for k in BackboneKind])
    fig = Figure(figsize=(4.5 * len(backbones), 4.5))
    axes = fig.subplots(1, len(backbones), squeeze=False)[0]
    for ax, backbone in zip(axes, backbones):
        for strategy in _ordered(curves[backbone], [s.value for s in Strategy]):
            points = curves[backbone][strategy]
            recall = [p.recall for p in points]
            precision = [p.precision for p in points]
            style = {"marker": "o", "linestyle": "none"} if len(points) == 1 else {}
            ax.plot(recall, precision, label=_strategy_label(strategy), **style)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_title(_backbone_label(backbone))
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower left")
    if title:
        fig.suptitle(title)
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    logger.info("Wrote PR plot %s", path)
    return path


def emit_prob_maps(
    models: Mapping[str, Mapping[str, nn.Module]],
    samples: Sequence[Sample],
    path: PathLike,
    *,
    scale: int = 1,
    gap: int = 2,
) -> Path:
    """Grid of probability maps rendered with a fixed [0, 1] -> [black, white] scale.

    One row per (backbone, sample); columns are the input image, the
    ground truth, then one column per strategy. A strategy missing for a
    backbone leaves a black panel.
    """
    if not models or not samples:
        raise ConfigError("emit_prob_maps needs at least one model and one sample")
    backbones = _ordered(models, [k.value for k in BackboneKind])
    strategies = _ordered(
        {s for per in models.values() for s in per}, [s.value for s in Strategy]
    )
    batch = Dataset(samples, name="preview")
    h, w = samples[0].image.size
    blank = Image.new("L", (w, h), 0)

    rows = []
    for backbone in backbones:
        maps = {s: predict(m, batch) for s, m in models[backbone].items()}
        for i, sample in enumerate(samples):
            row = [image_to_pil(sample.image), map_to_pil(sample.mask)]
            for s in strategies:
                row.append(map_to_pil(maps[s][i]) if s in maps else blank)
            rows.append([scale_nearest(p, scale) for p in row])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panel_grid(rows, gap=gap).save(str(path), format="PNG")
    logger.info("Wrote probability-map grid %s (%d rows)", path, len(rows))
    return path
