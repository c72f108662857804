"""Corpus ranking (network or IoU scorer) and retrieval metrics."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .graph import DEFAULT_ADJACENCY_EPS, FULLY_CONNECTED, LayoutGraph, build_graph
from .layout import DEFAULT_RESOLUTION, Layout, iou_from_masks, rasterize
from .model import ModelParams, attention_to_dict, match_pair, pair_distance
from .training import Triplet


class MissingJudgment(KeyError):
    pass


@dataclass
class RankedList:
    query_id: str
    entries: list[tuple[str, float]]  # (layout id, distance), ascending

    @property
    def ids(self) -> list[str]:
        return [lid for lid, _ in self.entries]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "results": [{"id": lid, "distance": d} for lid, d in self.entries],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RankedList":
        return cls(str(doc["query_id"]), [(str(r["id"]), float(r["distance"])) for r in doc["results"]])


def _sorted_list(query_id: str, scored: list[tuple[str, float]], k: int | None) -> RankedList:
    scored = sorted(scored, key=lambda e: (e[1], e[0]))
    return RankedList(query_id, scored if k is None else scored[:k])


def _candidates(query: Layout, corpus: Sequence[Layout]) -> list[Layout]:
    if not corpus:
        raise ValueError("empty corpus")
    out = [c for c in corpus if c.id != query.id]
    if not out:
        raise ValueError("corpus has no candidates besides the query")
    return out


def rank(
    query: Layout,
    corpus: Sequence[Layout],
    params: ModelParams,
    k: int | None = None,
    threads: int = 1,
    graph_mode: str = FULLY_CONNECTED,
    adjacency_eps: float = DEFAULT_ADJACENCY_EPS,
    graph_cache: dict[str, LayoutGraph] | None = None,
) -> RankedList:
    """Score every candidate against the query and sort by distance, then id.

    Candidates are scored independently, so the output does not depend on
    ``threads``.
    """
    candidates = _candidates(query, corpus)

    def graph_of(l: Layout) -> LayoutGraph:
        if graph_cache is not None and l.id in graph_cache:
            return graph_cache[l.id]
        return build_graph(l, graph_mode, adjacency_eps)

    gq = graph_of(query)

    def score(c: Layout) -> tuple[str, float]:
        return c.id, pair_distance(match_pair(gq, graph_of(c), params))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            scored = list(pool.map(score, candidates))
    else:
        scored = [score(c) for c in candidates]
    return _sorted_list(query.id, scored, k)


def iou_rank(
    query: Layout,
    corpus: Sequence[Layout],
    resolution: int = DEFAULT_RESOLUTION,
    k: int | None = None,
    mode: str = "micro",
) -> RankedList:
    """IoU baseline: descending IoU, reported as distance ``1 - iou``."""
    candidates = _candidates(query, corpus)
    mq = rasterize(query, resolution)
    scored = []
    for c in candidates:
        if c.categories != query.categories:
            raise ValueError(f"category count mismatch between {query.id} and {c.id}")
        scored.append((c.id, 1.0 - iou_from_masks(mq, rasterize(c, resolution), mode)))
    return _sorted_list(query.id, scored, k)


def attention_dump(
    query: Layout,
    ranked: RankedList,
    corpus: Sequence[Layout],
    params: ModelParams,
    graph_mode: str = FULLY_CONNECTED,
    adjacency_eps: float = DEFAULT_ADJACENCY_EPS,
) -> list[dict]:
    """Per-round attention matrices for the query against each listed result."""
    by_id = {c.id: c for c in corpus}
    gq = build_graph(query, graph_mode, adjacency_eps)
    out = []
    for lid, _ in ranked.entries:
        other = by_id[lid]
        r = match_pair(gq, build_graph(other, graph_mode, adjacency_eps), params)
        doc = attention_to_dict(r, [e.id for e in query.elements], [e.id for e in other.elements])
        doc.update({"query_id": query.id, "result_id": lid})
        out.append(doc)
    return out


# ---------------------------------------------------------------------------
# metrics


def precision_at_k(
    queries: Sequence[str],
    lists: Mapping[str, Sequence[str]],
    judgments: Mapping[tuple[str, str], int],
    k: int,
) -> float:
    """Mean fraction of relevant results among each query's top ``k``."""
    if k < 1 or not queries:
        raise ValueError("need k >= 1 and at least one query")
    hits = 0
    for q in queries:
        top = list(lists[q])[:k]
        if len(top) < k:
            raise ValueError(f"ranked list for {q} has fewer than {k} entries")
        for r in top:
            try:
                rel = judgments[(q, r)]
            except KeyError:
                raise MissingJudgment(f"no relevance judgment for query {q!r}, result {r!r}") from None
            hits += 1 if rel else 0
    return hits / (k * len(queries))


def overlap_at_k(
    queries: Sequence[str],
    q_lists: Mapping[str, Sequence[str]],
    top1_lists: Mapping[str, Sequence[str]],
    k: int,
    mode: str = "positional",
) -> float:
    """Agreement between each query's top-k and the top-k of its own top-1 result.

    ``top1_lists[q]`` is the ranked list retrieved for ``top1(q)``. The default
    positional mode counts positions j where both lists hold the same result;
    ``mode="set"`` counts the size of the top-k intersection instead.
    """
    if k < 1 or not queries:
        raise ValueError("need k >= 1 and at least one query")
    if mode not in ("positional", "set"):
        raise ValueError(f"unknown overlap mode {mode!r}")
    agree = 0
    for q in queries:
        a, b = list(q_lists[q])[:k], list(top1_lists[q])[:k]
        if len(a) < k or len(b) < k:
            raise ValueError(f"ranked lists for {q} are shorter than {k}")
        if mode == "positional":
            agree += sum(x == y for x, y in zip(a, b))
        else:
            agree += len(set(a) & set(b))
    return agree / (k * len(queries))


def top1_lists(lists: Mapping[str, Sequence[str]]) -> dict[str, list[str]]:
    """For each query whose top-1 result also has a list, map query -> that list."""
    out = {}
    for q, ids in lists.items():
        if ids and ids[0] in lists:
            out[q] = list(lists[ids[0]])
    return out


def triplet_accuracy(
    triplets: Sequence[Triplet],
    params: ModelParams,
    graphs: Mapping[str, LayoutGraph],
) -> float:
    """Fraction of triplets with d(anchor, positive) < d(anchor, negative); ties are wrong."""
    if not triplets:
        raise ValueError("no triplets")
    correct = 0
    for t in triplets:
        ga = graphs[t.anchor_id]
        d_ap = pair_distance(match_pair(ga, graphs[t.positive_id], params))
        d_an = pair_distance(match_pair(ga, graphs[t.negative_id], params))
        correct += d_ap < d_an
    return correct / len(triplets)


def iou_judge(
    lists: Mapping[str, Sequence[str]],
    layouts: Mapping[str, Layout],
    threshold: float = 0.6,
    resolution: int = DEFAULT_RESOLUTION,
) -> dict[tuple[str, str], int]:
    """Scripted relevance: a result is relevant when its IoU with the query reaches ``threshold``."""
    masks: dict[str, np.ndarray] = {}

    def mask(lid: str) -> np.ndarray:
        if lid not in masks:
            masks[lid] = rasterize(layouts[lid], resolution)
        return masks[lid]

    out = {}
    for q, ids in lists.items():
        for r in ids:
            out[(q, r)] = int(iou_from_masks(mask(q), mask(r)) >= threshold)
    return out


# ---------------------------------------------------------------------------
# files


def read_judgments(path: str | Path) -> dict[tuple[str, str], int]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2].strip() not in ("0", "1"):
            raise ValueError(f"{path}:{n}: expected query_id<TAB>result_id<TAB>0|1")
        out[(parts[0], parts[1])] = int(parts[2])
    return out


def write_judgments(judgments: Mapping[tuple[str, str], int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (q, r), v in sorted(judgments.items()):
            fh.write(f"{q}\t{r}\t{int(v)}\n")


def dump_ranked_lists(lists: Sequence[RankedList]) -> str:
    return json.dumps([rl.to_dict() for rl in lists], indent=1, sort_keys=True) + "\n"


def load_ranked_lists(path: str | Path) -> list[RankedList]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = [doc]
    return [RankedList.from_dict(d) for d in doc]
