"""Element label transfer between layouts.

Two matchers: argmax of the network's cross-graph attention with semantics
masked, and the maximum pixel-overlap baseline.
"""

from __future__ import annotations

import html
import json
from dataclasses import dataclass

import numpy as np

from .graph import FULLY_CONNECTED, build_graph, mask_semantics
from .layout import DEFAULT_RESOLUTION, Layout, cell_centers
from .model import ModelParams, match_pair

ATTENTION = "attention"
PIXEL_OVERLAP = "pixel_overlap"


@dataclass(frozen=True)
class Assignment:
    target_index: int
    source_index: int
    score: float
    zero_overlap: bool = False


@dataclass
class Matching:
    method: str
    assignments: list[Assignment]

    def labels(self, source: Layout) -> list[int]:
        return [source.elements[a.source_index].category for a in self.assignments]

    def to_records(self, source: Layout, target: Layout) -> list[dict]:
        out = []
        for a in self.assignments:
            rec = {
                "target_id": target.elements[a.target_index].id,
                "source_id": source.elements[a.source_index].id,
                "label": source.elements[a.source_index].category,
                "score": a.score,
                "method": self.method,
            }
            if a.zero_overlap:
                rec["zero_overlap"] = True
            out.append(rec)
        return out


def attention_match(
    source: Layout,
    target: Layout,
    params: ModelParams,
    round_index: int = -1,
    graph_mode: str = FULLY_CONNECTED,
    adjacency_eps: float = 0.02,
) -> Matching:
    """Assign each target element the source element it attends to most.

    Semantics are masked on both graphs, so only geometry drives the match.
    ``round_index`` picks which propagation round's attention is used (final
    by default). A poorly trained checkpoint cannot be detected here.
    """
    gs = mask_semantics(build_graph(source, graph_mode, adjacency_eps))
    gt = mask_semantics(build_graph(target, graph_mode, adjacency_eps))
    result = match_pair(gt, gs, params)
    att = result.attention[round_index][0]  # target rows over source columns
    best = np.argmax(att, axis=1)  # first maximum, i.e. lowest source index on ties
    return Matching(
        ATTENTION,
        [Assignment(i, int(j), float(att[i, j])) for i, j in enumerate(best)],
    )


def element_masks(layout: Layout, resolution: int) -> np.ndarray:
    """(n, R, R) per-element occupancy using the same cell-center rule as rasterize."""
    cx = cell_centers(layout.width, resolution)
    cy = cell_centers(layout.height, resolution)
    out = np.zeros((len(layout.elements), resolution, resolution), dtype=bool)
    for k, e in enumerate(layout.elements):
        out[k] = ((cy >= e.y0) & (cy < e.y1))[:, None] & ((cx >= e.x0) & (cx < e.x1))[None, :]
    return out


def pixel_overlap_match(source: Layout, target: Layout, resolution: int = DEFAULT_RESOLUTION) -> Matching:
    """Category-agnostic maximum raster overlap.

    Score is overlap cells over target cells. Targets overlapping nothing fall
    back to the nearest source center and are flagged.
    """
    ms = element_masks(source, resolution).reshape(len(source.elements), -1).astype(np.int64)
    mt = element_masks(target, resolution).reshape(len(target.elements), -1).astype(np.int64)
    overlap = mt @ ms.T
    assignments = []
    for i, row in enumerate(overlap):
        t_area = int(mt[i].sum())
        if row.max() > 0:
            j = int(np.argmax(row))
            score = min(1.0, row[j] / t_area) if t_area else 0.0
            assignments.append(Assignment(i, j, float(score)))
        else:
            te = target.elements[i]
            d = [(e.x - te.x) ** 2 + (e.y - te.y) ** 2 for e in source.elements]
            assignments.append(Assignment(i, int(np.argmin(d)), 0.0, zero_overlap=True))
    return Matching(PIXEL_OVERLAP, assignments)


def label_accuracy(matching: Matching, source: Layout, target: Layout) -> float:
    pred = matching.labels(source)
    truth = [e.category for e in target.elements]
    return float(np.mean([p == t for p, t in zip(pred, truth)]))


def matching_json(matchings: list[Matching], source: Layout, target: Layout) -> str:
    records = []
    for m in matchings:
        records.extend(m.to_records(source, target))
    return json.dumps(records, indent=1, sort_keys=True)


_PALETTE = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
    "#bcf60c", "#fabebe", "#008080", "#e6beff", "#9a6324", "#fffac8", "#800000", "#aaffc3",
    "#808000", "#ffd8b1", "#000075", "#808080", "#ffffff", "#000000", "#a9a9a9", "#dcbeff", "#469990",
]


def render_svg(source: Layout, target: Layout, matching: Matching, panel: float = 300.0) -> str:
    """Side-by-side SVG: source with its labels, target colored by transferred labels."""
    labels = matching.labels(source)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * panel + 30:g}" height="{panel + 30:g}">',
        f'<text x="5" y="15" font-size="12">source {html.escape(source.id)}</text>',
        f'<text x="{panel + 25:g}" y="15" font-size="12">target {html.escape(target.id)} ({matching.method})</text>',
    ]
    for offset, layout, cats in ((5.0, source, [e.category for e in source.elements]), (panel + 25, target, labels)):
        sx = panel / layout.width
        sy = panel / layout.height
        parts.append(f'<rect x="{offset:g}" y="25" width="{panel:g}" height="{panel:g}" fill="none" stroke="#333"/>')
        for e, c in zip(layout.elements, cats):
            parts.append(
                f'<rect x="{offset + e.x0 * sx:.2f}" y="{25 + e.y0 * sy:.2f}" width="{e.w * sx:.2f}" '
                f'height="{e.h * sy:.2f}" fill="{_PALETTE[c % len(_PALETTE)]}" fill-opacity="0.6" stroke="#000"/>'
            )
            parts.append(
                f'<text x="{offset + e.x * sx:.2f}" y="{25 + e.y * sy:.2f}" font-size="10" '
                f'text-anchor="middle">{c}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
