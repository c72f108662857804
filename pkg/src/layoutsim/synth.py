"""Seeded synthetic floorplans and UI screens.

Layouts come in clusters: each template is rendered several times with small
perturbations so that high-IoU pairs exist for triplet mining.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .layout import Element, Layout

FLOORPLAN = "floorplan"
UI = "ui"
PROFILES = (FLOORPLAN, UI)

FLOORPLAN_CATEGORIES = 9
FLOORPLAN_MAX_ROOMS = 8
UI_CATEGORIES = 25
FLOORPLAN_SIZE = 1.0
UI_SIZE = (0.5625, 1.0)


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream per (seed, label) so modules never share RNG state."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])


# ---------------------------------------------------------------------------
# floorplans: guillotine partitions of a rectangular footprint


@dataclass
class _Split:
    room: int
    axis: int  # 0 splits along x, 1 along y
    ratio: float


@dataclass
class FloorplanTemplate:
    footprint: tuple[float, float, float, float]  # x0, y0, x1, y1 as canvas fractions
    splits: list[_Split]
    categories: list[int]

    def render(self, size: float) -> list[tuple[float, float, float, float]]:
        x0, y0, x1, y1 = self.footprint
        rooms = [(x0 * size, y0 * size, x1 * size, y1 * size)]
        for s in self.splits:
            rx0, ry0, rx1, ry1 = rooms[s.room]
            if s.axis == 0:
                cut = rx0 + s.ratio * (rx1 - rx0)
                rooms[s.room] = (rx0, ry0, cut, ry1)
                rooms.append((cut, ry0, rx1, ry1))
            else:
                cut = ry0 + s.ratio * (ry1 - ry0)
                rooms[s.room] = (rx0, ry0, rx1, cut)
                rooms.append((rx0, cut, rx1, ry1))
        return rooms


def _floorplan_template(rng: np.random.Generator) -> FloorplanTemplate:
    fw, fh = rng.uniform(0.7, 1.0, size=2)
    fx, fy = rng.uniform(0, 1 - fw), rng.uniform(0, 1 - fh)
    n_rooms = int(rng.integers(2, FLOORPLAN_MAX_ROOMS + 1))
    rooms = [(fx, fy, fx + fw, fy + fh)]
    splits = []
    while len(rooms) < n_rooms:
        areas = [(r[2] - r[0]) * (r[3] - r[1]) for r in rooms]
        k = int(np.argmax(areas))
        rx0, ry0, rx1, ry1 = rooms[k]
        axis = 0 if (rx1 - rx0) >= (ry1 - ry0) else 1
        ratio = float(rng.uniform(0.3, 0.7))
        splits.append(_Split(k, axis, ratio))
        if axis == 0:
            cut = rx0 + ratio * (rx1 - rx0)
            rooms[k] = (rx0, ry0, cut, ry1)
            rooms.append((cut, ry0, rx1, ry1))
        else:
            cut = ry0 + ratio * (ry1 - ry0)
            rooms[k] = (rx0, ry0, rx1, cut)
            rooms.append((rx0, cut, rx1, ry1))
    # category 0 (living room) is the most common, one per plan
    cats = [0] + [int(c) for c in rng.integers(1, FLOORPLAN_CATEGORIES, size=n_rooms - 1)]
    order = rng.permutation(n_rooms)
    return FloorplanTemplate((fx, fy, fx + fw, fy + fh), splits, [cats[i] for i in order])


def _perturb_floorplan(t: FloorplanTemplate, rng: np.random.Generator, jitter: float) -> FloorplanTemplate:
    x0, y0, x1, y1 = t.footprint
    d = rng.uniform(-jitter, jitter, size=4) * 0.5
    fp = (
        float(np.clip(x0 + d[0], 0.0, 1.0)),
        float(np.clip(y0 + d[1], 0.0, 1.0)),
        float(np.clip(x1 + d[2], 0.0, 1.0)),
        float(np.clip(y1 + d[3], 0.0, 1.0)),
    )
    if fp[2] - fp[0] < 0.5 or fp[3] - fp[1] < 0.5:
        fp = t.footprint
    splits = [
        _Split(s.room, s.axis, float(np.clip(s.ratio + rng.uniform(-jitter, jitter), 0.2, 0.8))) for s in t.splits
    ]
    return FloorplanTemplate(fp, splits, list(t.categories))


def _floorplan_layout(t: FloorplanTemplate, lid: str) -> Layout:
    size = FLOORPLAN_SIZE
    els = [
        Element.from_corners(f"r{k}", t.categories[k], *box)
        for k, box in enumerate(t.render(size))
    ]
    return Layout(lid, size, size, FLOORPLAN_CATEGORIES, tuple(els))


# ---------------------------------------------------------------------------
# UI screens: stacked rows split into aligned columns


@dataclass
class UiTemplate:
    rows: list[tuple[float, list[float], list[int]]]  # (row height weight, column widths, categories)
    margin: float

    def render(self, W: float, H: float) -> list[tuple[float, float, float, float, int]]:
        m = self.margin * W
        total = sum(r[0] for r in self.rows)
        y = 0.0
        out = []
        for height, widths, cats in self.rows:
            h = height / total * H
            x = m
            span = W - 2 * m
            wsum = sum(widths)
            for w, c in zip(widths, cats):
                cw = w / wsum * span
                out.append((x + m / 4, y + m / 4, x + cw - m / 4, y + h - m / 4, c))
                x += cw
            y += h
        return out


def _ui_template(rng: np.random.Generator) -> UiTemplate:
    target = int(rng.integers(3, 31))
    rows = [(0.6, [1.0], [0])]  # toolbar
    count = 1
    while count < target:
        ncol = int(min(rng.integers(1, 4), target - count))
        widths = [float(w) for w in rng.uniform(0.5, 1.5, size=ncol)]
        cats = [int(c) for c in rng.integers(1, UI_CATEGORIES, size=ncol)]
        rows.append((float(rng.uniform(0.5, 2.0)), widths, cats))
        count += ncol
    return UiTemplate(rows, float(rng.uniform(0.01, 0.04)))


def _perturb_ui(t: UiTemplate, rng: np.random.Generator, jitter: float) -> UiTemplate:
    rows = []
    for height, widths, cats in t.rows:
        height = height * float(1 + rng.uniform(-jitter, jitter))
        widths = [w * float(1 + rng.uniform(-jitter, jitter)) for w in widths]
        rows.append((height, widths, list(cats)))
    return UiTemplate(rows, t.margin)


def _ui_layout(t: UiTemplate, lid: str) -> Layout:
    W, H = UI_SIZE
    els = [Element.from_corners(f"e{k}", c, x0, y0, x1, y1) for k, (x0, y0, x1, y1, c) in enumerate(t.render(W, H))]
    return Layout(lid, W, H, UI_CATEGORIES, tuple(els))


# ---------------------------------------------------------------------------


def synth_generate(
    n: int,
    seed: int = 0,
    profile: str = FLOORPLAN,
    cluster_size: int = 3,
    jitter: float = 0.04,
    prefix: str | None = None,
) -> list[Layout]:
    """Generate ``n`` layouts in clusters of up to ``cluster_size`` perturbed copies.

    Every member of a cluster is perturbed (no exact duplicates).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    rng = derive_rng(seed, f"synth/{profile}")
    prefix = prefix if prefix is not None else ("fp" if profile == FLOORPLAN else "ui")
    out: list[Layout] = []
    while len(out) < n:
        size = int(rng.integers(1, cluster_size + 1))
        if profile == FLOORPLAN:
            base = _floorplan_template(rng)
            for _ in range(size):
                if len(out) == n:
                    break
                out.append(_floorplan_layout(_perturb_floorplan(base, rng, jitter), f"{prefix}{len(out):05d}"))
        else:
            base = _ui_template(rng)
            for _ in range(size):
                if len(out) == n:
                    break
                out.append(_ui_layout(_perturb_ui(base, rng, jitter * 2), f"{prefix}{len(out):05d}"))
    return out


def jitter_layout(layout: Layout, rng: np.random.Generator, amount: float, new_id: str | None = None) -> Layout:
    """Move each element center by up to ``amount`` of the canvas, keeping it inside."""
    W, H = layout.width, layout.height
    els = []
    for e in layout.elements:
        dx, dy = rng.uniform(-amount, amount, size=2)
        x = float(np.clip(e.x + dx * W, e.w / 2, W - e.w / 2))
        y = float(np.clip(e.y + dy * H, e.h / 2, H - e.h / 2))
        els.append(Element(e.id, e.category, x, y, e.w, e.h))
    return Layout(new_id or layout.id, W, H, layout.categories, tuple(els))


def translate_layout(layout: Layout, dx: float, dy: float, new_id: str | None = None) -> Layout:
    """Shift every element by (dx, dy) canvas fractions; elements must stay on canvas."""
    W, H = layout.width, layout.height
    els = tuple(Element(e.id, e.category, e.x + dx * W, e.y + dy * H, e.w, e.h) for e in layout.elements)
    return Layout(new_id or layout.id, W, H, layout.categories, els)


def shrink_layout(layout: Layout, factor: float, new_id: str | None = None) -> Layout:
    """Scale the whole arrangement toward the origin corner by ``factor``."""
    els = tuple(Element(e.id, e.category, e.x * factor, e.y * factor, e.w * factor, e.h * factor) for e in layout.elements)
    return Layout(new_id or layout.id, layout.width, layout.height, layout.categories, els)
