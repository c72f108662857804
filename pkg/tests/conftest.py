import numpy as np
import pytest
from hypothesis import strategies as st

from layoutsim.layout import Element, Layout


def random_layout(rng: np.random.Generator, lid: str, categories: int = 4, n: int | None = None,
                  width: float = 1.0, height: float = 1.0) -> Layout:
    """Boxes with random corners on the canvas; no structure."""
    n = n if n is not None else int(rng.integers(1, 7))
    els = []
    for k in range(n):
        x0, x1 = np.sort(rng.uniform(0, width, 2))
        y0, y1 = np.sort(rng.uniform(0, height, 2))
        x1, y1 = max(x1, x0 + 1e-3 * width), max(y1, y0 + 1e-3 * height)
        x1, y1 = min(x1, width), min(y1, height)
        els.append(Element.from_corners(f"e{k}", int(rng.integers(categories)), x0, y0, x1, y1))
    return Layout(lid, width, height, categories, tuple(els))


def brute_force_mask(layout: Layout, R: int) -> np.ndarray:
    """Per-cell, per-element loop: cell (r, c) is on when its center is inside a box."""
    out = np.zeros((layout.categories, R, R), dtype=bool)
    for r in range(R):
        cy = (r + 0.5) * layout.height / R
        for c in range(R):
            cx = (c + 0.5) * layout.width / R
            for e in layout.elements:
                if e.x0 <= cx < e.x1 and e.y0 <= cy < e.y1:
                    out[e.category, r, c] = True
    return out


def brute_force_iou(a: Layout, b: Layout, R: int) -> float:
    ma, mb = brute_force_mask(a, R), brute_force_mask(b, R)
    inter = union = 0
    for k in range(a.categories):
        for r in range(R):
            for c in range(R):
                inter += ma[k, r, c] and mb[k, r, c]
                union += ma[k, r, c] or mb[k, r, c]
    return inter / union if union else 1.0


@st.composite
def layouts(draw, categories: int = 4, max_elements: int = 6, lid: str = "L"):
    n = draw(st.integers(1, max_elements))
    els = []
    for k in range(n):
        x0 = draw(st.floats(0.0, 0.9))
        y0 = draw(st.floats(0.0, 0.9))
        w = draw(st.floats(0.02, 1.0 - x0))
        h = draw(st.floats(0.02, 1.0 - y0))
        c = draw(st.integers(0, categories - 1))
        els.append(Element.from_corners(f"e{k}", c, x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0)))
    return Layout(lid, 1.0, 1.0, categories, tuple(els))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed together at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"ACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
