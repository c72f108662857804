"""Layouts, JSON ingestion, multi-channel rasterization and raster IoU."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-6
DEFAULT_RESOLUTION = 64


class LayoutError(ValueError):
    """Schema or invariant violation in layout data."""


@dataclass(frozen=True)
class Element:
    id: str
    category: int
    x: float  # box center
    y: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.x - self.w / 2

    @property
    def x1(self) -> float:
        return self.x + self.w / 2

    @property
    def y0(self) -> float:
        return self.y - self.h / 2

    @property
    def y1(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, id: str, category: int, x0: float, y0: float, x1: float, y1: float) -> "Element":
        return cls(id, category, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Layout:
    id: str
    width: float
    height: float
    categories: int
    elements: tuple[Element, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.width > 0 or not self.height > 0:
            raise LayoutError(f"layout {self.id}: canvas must be positive, got {self.width}x{self.height}")
        if self.categories < 1:
            raise LayoutError(f"layout {self.id}: category count must be >= 1")
        if not self.elements:
            raise LayoutError(f"layout {self.id}: no elements")
        seen = set()
        for e in self.elements:
            if not (e.w > 0 and e.h > 0):
                raise LayoutError(f"layout {self.id}: element {e.id} has non-positive extent ({e.w}, {e.h})")
            if not 0 <= e.category < self.categories:
                raise LayoutError(
                    f"layout {self.id}: element {e.id} category {e.category} outside [0, {self.categories})"
                )
            if (
                e.x0 < -CLAMP_TOL
                or e.y0 < -CLAMP_TOL
                or e.x1 > self.width + CLAMP_TOL
                or e.y1 > self.height + CLAMP_TOL
            ):
                raise LayoutError(f"layout {self.id}: element {e.id} lies outside the canvas")
            if e.id in seen:
                raise LayoutError(f"layout {self.id}: duplicate element id {e.id}")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.elements)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "categories": self.categories,
            "elements": [
                {"id": e.id, "category": e.category, "x": e.x, "y": e.y, "w": e.w, "h": e.h}
                for e in self.elements
            ],
        }

    def with_id(self, new_id: str) -> "Layout":
        return replace(self, id=new_id)


def _clamp_element(e: Element, W: float, H: float, layout_id: str) -> Element:
    x0, y0 = max(e.x0, 0.0), max(e.y0, 0.0)
    x1, y1 = min(e.x1, W), min(e.y1, H)
    if (x0, y0, x1, y1) == (e.x0, e.y0, e.x1, e.y1):
        return e
    if x1 <= x0 or y1 <= y0:
        raise LayoutError(f"layout {layout_id}: element {e.id} lies entirely off the canvas")
    log.warning("layout %s: clamping element %s to the canvas", layout_id, e.id)
    return Element.from_corners(e.id, e.category, x0, y0, x1, y1)


def layout_from_dict(doc: dict) -> Layout:
    if not isinstance(doc, dict):
        raise LayoutError("layout document must be a JSON object")
    try:
        lid = str(doc["id"])
        W, H = float(doc["width"]), float(doc["height"])
        C = int(doc["categories"])
        raw = doc["elements"]
    except KeyError as exc:
        raise LayoutError(f"layout {doc.get('id', '?')}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise LayoutError(f"layout {doc.get('id', '?')}: bad header value ({exc})") from None
    if not isinstance(raw, list):
        raise LayoutError(f"layout {lid}: 'elements' must be a list")
    if not (W > 0 and H > 0):
        raise LayoutError(f"layout {lid}: canvas must be positive, got {W}x{H}")
    elements = []
    for k, item in enumerate(raw):
        eid = str(item.get("id", f"#{k}")) if isinstance(item, dict) else f"#{k}"
        try:
            e = Element(
                eid,
                int(item["category"]),
                float(item["x"]),
                float(item["y"]),
                float(item["w"]),
                float(item["h"]),
            )
        except KeyError as exc:
            raise LayoutError(f"layout {lid}: element {eid} missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise LayoutError(f"layout {lid}: element {eid} has a bad value ({exc})") from None
        if not all(np.isfinite([e.x, e.y, e.w, e.h])):
            raise LayoutError(f"layout {lid}: element {eid} has non-finite geometry")
        if not (e.w > 0 and e.h > 0):
            raise LayoutError(f"layout {lid}: element {eid} has non-positive extent ({e.w}, {e.h})")
        if not 0 <= e.category < C:
            raise LayoutError(f"layout {lid}: element {eid} category {e.category} outside [0, {C})")
        elements.append(_clamp_element(e, W, H, lid))
    return Layout(lid, W, H, C, tuple(elements))


def parse_layout(text: str) -> Layout:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError(f"malformed JSON: {exc}") from None
    return layout_from_dict(doc)


def dump_layout(layout: Layout) -> str:
    return json.dumps(layout.to_dict(), sort_keys=True)


def iter_layouts_jsonl(lines: Iterable[str]) -> Iterator[Layout]:
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            yield parse_layout(line)
        except LayoutError as exc:
            raise LayoutError(f"line {n}: {exc}") from None


def load_layouts(path: str | Path) -> list[Layout]:
    """Read a JSON-lines dataset, a single-layout JSON file, or a directory of them."""
    path = Path(path)
    if path.is_dir():
        out = []
        for p in sorted(path.iterdir()):
            if p.suffix in (".json", ".jsonl"):
                out.extend(load_layouts(p))
        return out
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return [parse_layout(text)]
    return list(iter_layouts_jsonl(text.splitlines()))


def save_layouts(layouts: Iterable[Layout], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for layout in layouts:
            fh.write(dump_layout(layout) + "\n")


# ---------------------------------------------------------------------------
# rasterization


def cell_centers(length: float, resolution: int) -> np.ndarray:
    return (np.arange(resolution) + 0.5) * (length / resolution)


def rasterize(layout: Layout, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Boolean mask of shape (C, R, R); rows index y, columns index x.

    A cell belongs to channel k when its center lies inside a category-k box
    (half-open on the right/bottom edge).
    """
    if resolution < 8:
        raise ValueError("raster resolution must be >= 8")
    cx = cell_centers(layout.width, resolution)
    cy = cell_centers(layout.height, resolution)
    mask = np.zeros((layout.categories, resolution, resolution), dtype=bool)
    for e in layout.elements:
        cols_in = (cx >= e.x0) & (cx < e.x1)
        rows_in = (cy >= e.y0) & (cy < e.y1)
        mask[e.category] |= rows_in[:, None] & cols_in[None, :]
    return mask


def _check_pair(a: Layout, b: Layout) -> None:
    if a.categories != b.categories:
        raise LayoutError(f"category count mismatch: {a.id} has {a.categories}, {b.id} has {b.categories}")


def iou_from_masks(ma: np.ndarray, mb: np.ndarray, mode: str = "micro") -> float:
    """IoU of two masks. Two empty masks are identical images and score 1.

    A non-empty layout can still rasterize to nothing when every box falls
    between cell centers, so the empty case is reachable.
    """
    inter = np.logical_and(ma, mb).sum(axis=(1, 2))
    union = np.logical_or(ma, mb).sum(axis=(1, 2))
    if mode == "micro":
        u = int(union.sum())
        return 1.0 if u == 0 else int(inter.sum()) / u
    if mode == "macro":
        used = union > 0
        if not used.any():
            return 1.0
        return float(np.mean(inter[used] / union[used]))
    raise ValueError(f"unknown iou mode {mode!r}")


def layout_iou(a: Layout, b: Layout, resolution: int = DEFAULT_RESOLUTION, mode: str = "micro") -> float:
    _check_pair(a, b)
    return iou_from_masks(rasterize(a, resolution), rasterize(b, resolution), mode)


def pairwise_iou(layouts: list[Layout], resolution: int = DEFAULT_RESOLUTION, mode: str = "micro") -> np.ndarray:
    """Full IoU matrix; entries equal ``layout_iou`` exactly (integer counts)."""
    if not layouts:
        return np.zeros((0, 0))
    for other in layouts[1:]:
        _check_pair(layouts[0], other)
    masks = np.stack([rasterize(l, resolution) for l in layouts])
    n = len(layouts)
    if mode == "micro":
        flat = masks.reshape(n, -1).astype(np.float64)
        inter = flat @ flat.T  # counts below 2**53, exact
        sizes = flat.sum(axis=1)
        union = sizes[:, None] + sizes[None, :] - inter
        inter_i = np.rint(inter).astype(np.int64)
        union_i = np.rint(union).astype(np.int64)
        out = np.ones((n, n))
        nz = union_i > 0
        out[nz] = inter_i[nz] / union_i[nz]
        return out
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = iou_from_masks(masks[i], masks[j], mode)
    return out


def box_iou(a: Element, b: Element) -> float:
    """Analytic IoU of two axis-aligned boxes.

    Everything is computed from corners so identical boxes give exactly 1.
    """
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    return min(1.0, inter / (area_a + area_b - inter))
