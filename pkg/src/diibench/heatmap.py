"""Layer × region heatmaps written as plain SVG 1.1."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .metrics import OddsGrid

LOW_RGB = (255, 255, 255)
HIGH_RGB = (8, 48, 107)
CELL_W, CELL_H = 56, 26
MARGIN_LEFT, MARGIN_TOP, MARGIN_BOTTOM = 70, 40, 110


@dataclass(frozen=True)
class HeatmapSpec:
    grid: OddsGrid
    vmin: float
    vmax: float
    x_labels: tuple[str, ...]
    y_labels: tuple[str, ...]
    title: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.vmin) and math.isfinite(self.vmax)) or self.vmax < self.vmin:
            raise ValueError("color bounds must be finite with vmin ≤ vmax")
        rows, cols = self.grid.values.shape
        if rows == 0 or cols == 0:
            raise ValueError("empty grid")
        if len(self.x_labels) != cols or len(self.y_labels) != rows:
            raise ValueError("label counts must match grid shape")

    @classmethod
    def for_grid(cls, grid: OddsGrid, x_labels: Sequence[str] | None = None, title: str = "") -> HeatmapSpec:
        v = grid.values
        return cls(
            grid=grid,
            vmin=min(0.0, float(v.min())),
            vmax=max(0.0, float(v.max())),
            x_labels=tuple(x_labels) if x_labels is not None else grid.regions,
            y_labels=tuple(f"layer {l}" for l in grid.layers),
            title=title,
        )


def ramp(value: float, vmin: float, vmax: float) -> tuple[int, int, int]:
    """Linear white-to-dark interpolation, clamped to the bounds, rounded half up."""
    t = 0.0 if vmax == vmin else min(1.0, max(0.0, (value - vmin) / (vmax - vmin)))
    return tuple(int(math.floor(lo + t * (hi - lo) + 0.5)) for lo, hi in zip(LOW_RGB, HIGH_RGB))


def hex_color(rgb: tuple[int, int, int]) -> str:
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_svg(spec: HeatmapSpec) -> str:
    v = spec.grid.values
    rows, cols = v.shape
    width = MARGIN_LEFT + cols * CELL_W + 20
    height = MARGIN_TOP + rows * CELL_H + MARGIN_BOTTOM
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<title>{escape(spec.title)}</title>',
        f'<text x="{MARGIN_LEFT}" y="20" font-size="13">{escape(spec.title)}</text>',
    ]
    # layer 0 at the bottom, as in the usual layer-by-token plots
    for i in range(rows):
        y = MARGIN_TOP + (rows - 1 - i) * CELL_H
        for j in range(cols):
            x = MARGIN_LEFT + j * CELL_W
            fill = hex_color(ramp(float(v[i, j]), spec.vmin, spec.vmax))
            out.append(
                f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" '
                f'stroke="#cccccc" stroke-width="0.5"><title>{v[i, j]:.4g}</title></rect>'
            )
        out.append(
            f'<text x="{MARGIN_LEFT - 6}" y="{y + CELL_H / 2 + 4:g}" text-anchor="end">{escape(spec.y_labels[i])}</text>'
        )
    base_y = MARGIN_TOP + rows * CELL_H + 12
    for j, label in enumerate(spec.x_labels):
        x = MARGIN_LEFT + j * CELL_W + CELL_W / 2
        out.append(
            f'<text x="{x:g}" y="{base_y}" text-anchor="end" transform="rotate(-45 {x:g} {base_y})">{escape(label)}</text>'
        )
    out.append(
        f'<text x="{width - 10}" y="{height - 8}" text-anchor="end" fill="#555555">'
        f"scale {spec.vmin:.3g} .. {spec.vmax:.3g}</text>"
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(spec: HeatmapSpec, path: str | Path) -> str:
    doc = render_svg(spec)
    Path(path).write_text(doc, encoding="utf-8")
    return doc


def grid_from_site_rows(rows: Sequence[dict], task: str, method: str, checkpoint: str | None = None) -> OddsGrid:
    """Rebuild an OddsGrid from site-CSV rows (layers and regions in first-seen order)."""
    sel = [r for r in rows if r["task"] == task and r["method"] == method]
    if checkpoint is not None:
        sel = [r for r in sel if r["checkpoint"] == checkpoint]
    elif len({r["checkpoint"] for r in sel}) > 1:
        raise ValueError("rows span several checkpoints; pick one")
    if not sel:
        raise ValueError(f"no rows for task={task!r} method={method!r}")
    layers: list[int] = []
    regions: list[str] = []
    for r in sel:
        if int(r["layer"]) not in layers:
            layers.append(int(r["layer"]))
        if r["region"] not in regions:
            regions.append(r["region"])
    layers.sort()
    v = np.full((len(layers), len(regions)), np.nan)
    for r in sel:
        v[layers.index(int(r["layer"])), regions.index(r["region"])] = float(r["avg_odds"])
    if np.isnan(v).any():
        raise ValueError("site rows do not cover a full layer × region grid")
    return OddsGrid(v, tuple(layers), tuple(regions), int(sel[0].get("n_eval", 0) or 0))
