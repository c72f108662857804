"""Layout graphs: per-node geometry vectors and per-edge spatial vectors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .layout import Element, Layout, box_iou

FULLY_CONNECTED = "fully_connected"
ADJACENCY = "adjacency"
MODES = (FULLY_CONNECTED, ADJACENCY)
DEFAULT_ADJACENCY_EPS = 0.02

NODE_DIM = 5
EDGE_DIM = 8


def node_geometry(e: Element, W: float, H: float) -> np.ndarray:
    g = np.array([e.x / W, e.y / H, e.w / W, e.h / H, e.w * e.h / math.sqrt(W * H)])
    g[:4] = np.clip(g[:4], 0.0, 1.0)
    return g


def edge_vector(ei: Element, ej: Element, W: float, H: float) -> np.ndarray:
    dx = ej.x - ei.x
    dy = ej.y - ei.y
    root_ai = math.sqrt(ei.area)
    theta = 0.0 if dx == 0 and dy == 0 else math.atan2(dy, dx)
    return np.array(
        [
            dx / root_ai,
            dy / root_ai,
            math.sqrt(ej.area / ei.area),
            box_iou(ei, ej),
            ei.w / ei.h,
            ej.w / ej.h,
            math.hypot(dx, dy) / math.hypot(W, H),
            theta,
        ]
    )


def boxes_adjacent(a: Element, b: Element, tol: float) -> bool:
    """Overlapping boxes, or boxes whose boundary gap is at most ``tol``.

    A slack of 1e-9 of the larger box extent absorbs the rounding of
    center-based coordinates, so touching boxes count as adjacent at tol=0.
    """
    gap_x = max(a.x0, b.x0) - min(a.x1, b.x1)
    gap_y = max(a.y0, b.y0) - min(a.y1, b.y1)
    slack = 1e-9 * max(a.w, a.h, b.w, b.h)
    return max(gap_x, gap_y) <= tol + slack


@dataclass(frozen=True)
class LayoutGraph:
    layout_id: str
    categories: np.ndarray  # (n,) int
    geometry: np.ndarray  # (n, 5)
    src: np.ndarray  # (E,) int
    dst: np.ndarray  # (E,) int
    edge_features: np.ndarray  # (E, 8)
    mode: str = FULLY_CONNECTED
    num_categories: int = 0
    semantics_masked: bool = False

    @property
    def num_nodes(self) -> int:
        return len(self.categories)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def to_dict(self) -> dict:
        return {
            "layout_id": self.layout_id,
            "mode": self.mode,
            "num_categories": self.num_categories,
            "nodes": [
                {"category": int(c), "geometry": [float(v) for v in g]}
                for c, g in zip(self.categories, self.geometry)
            ],
            "edges": [
                {"src": int(s), "dst": int(d), "vector": [float(v) for v in f]}
                for s, d, f in zip(self.src, self.dst, self.edge_features)
            ],
        }


def build_graph(layout: Layout, mode: str = FULLY_CONNECTED, adjacency_eps: float = DEFAULT_ADJACENCY_EPS) -> LayoutGraph:
    if mode not in MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    if adjacency_eps < 0:
        raise ValueError("adjacency_eps must be >= 0")
    W, H = layout.width, layout.height
    els = layout.elements
    n = len(els)
    tol = adjacency_eps * max(W, H)
    src, dst, feats = [], [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if mode == ADJACENCY and not boxes_adjacent(els[i], els[j], tol):
                continue
            src.append(i)
            dst.append(j)
            feats.append(edge_vector(els[i], els[j], W, H))
    return LayoutGraph(
        layout_id=layout.id,
        categories=np.array([e.category for e in els], dtype=np.int64),
        geometry=np.array([node_geometry(e, W, H) for e in els]).reshape(n, NODE_DIM),
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        edge_features=np.array(feats).reshape(len(src), EDGE_DIM),
        mode=mode,
        num_categories=layout.categories,
    )


def mask_semantics(g: LayoutGraph) -> LayoutGraph:
    """Flag the graph so the encoder uses an all-ones semantic code per node."""
    return replace(g, semantics_masked=True)


def dump_graph(g: LayoutGraph) -> str:
    return json.dumps(g.to_dict(), sort_keys=True)
