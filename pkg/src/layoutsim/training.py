"""IoU-thresholded triplet mining and margin-loss training of the matching network."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import DEFAULT_ADJACENCY_EPS, FULLY_CONNECTED, MODES, LayoutGraph, build_graph
from .layout import DEFAULT_RESOLUTION, Layout, pairwise_iou
from .model import (
    GRAPH_DIM,
    HIDDEN,
    ROUNDS,
    ModelParams,
    init_params,
    propagate_pair,
    readout,
)
from .numerics import NumericError
from .synth import derive_rng

log = logging.getLogger(__name__)

NEGATIVE_RULES = ("relative", "absolute")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class Triplet:
    anchor_id: str
    positive_id: str
    negative_id: str
    iou_ap: float
    iou_an: float


@dataclass
class TrainConfig:
    margin: float = 5.0
    positive_threshold: float = 0.6
    gap: float = 0.1
    negative_rule: str = "relative"
    lr: float = 1e-4
    batch_size: int = 10
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    resolution: int = DEFAULT_RESOLUTION
    iou_mode: str = "micro"
    graph_mode: str = FULLY_CONNECTED
    adjacency_eps: float = DEFAULT_ADJACENCY_EPS
    hidden: int = HIDDEN
    graph_dim: int = GRAPH_DIM
    rounds: int = ROUNDS
    use_edges: bool = True
    use_positions: bool = True
    use_semantics: bool = True
    state_norm: bool = True
    threads: int = 1

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.margin > 0:
            problems.append("margin must be > 0")
        if not 0 < self.positive_threshold < 1:
            problems.append("positive_threshold must lie in (0, 1)")
        if not self.gap > 0:
            problems.append("gap must be > 0")
        if self.negative_rule not in NEGATIVE_RULES:
            problems.append(f"negative_rule must be one of {NEGATIVE_RULES}")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            problems.append("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.resolution < 8:
            problems.append("resolution must be >= 8")
        if self.iou_mode not in ("micro", "macro"):
            problems.append("iou_mode must be micro or macro")
        if self.graph_mode not in MODES:
            problems.append(f"graph_mode must be one of {MODES}")
        if self.adjacency_eps < 0:
            problems.append("adjacency_eps must be >= 0")
        if self.rounds < 1:
            problems.append("rounds must be >= 1")
        if self.threads < 1:
            problems.append("threads must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# mining


def negative_ok(iou_ap: float, iou_an: float, cfg: TrainConfig) -> bool:
    if cfg.negative_rule == "relative":
        return iou_an <= iou_ap - cfg.gap
    return iou_an <= cfg.positive_threshold - cfg.gap


def mine_triplets(
    dataset: Sequence[Layout],
    cfg: TrainConfig,
    resolution: int | None = None,
    max_per_anchor: int = 5,
    iou: np.ndarray | None = None,
) -> list[Triplet]:
    """Weakly labeled triplets from raster IoU thresholds.

    Positives for an anchor have IoU >= ``positive_threshold``; negatives sit at
    least ``gap`` below the chosen positive (or below the threshold, with the
    absolute rule). Up to ``max_per_anchor`` (positive, negative) pairs are
    sampled per anchor without replacement.
    """
    if len(dataset) < 3:
        raise ValueError("mining needs at least three layouts")
    resolution = resolution or cfg.resolution
    if iou is None:
        iou = pairwise_iou(list(dataset), resolution, cfg.iou_mode)
    rng = derive_rng(cfg.seed, "mine")
    n = len(dataset)
    out: list[Triplet] = []
    for a in range(n):
        row = iou[a]
        positives = [p for p in range(n) if p != a and row[p] >= cfg.positive_threshold]
        pairs = []
        for p in positives:
            for q in range(n):
                if q != a and q != p and negative_ok(row[p], row[q], cfg):
                    pairs.append((p, q))
        if not pairs:
            continue
        take = min(max_per_anchor, len(pairs))
        chosen = sorted(rng.choice(len(pairs), size=take, replace=False))
        for k in chosen:
            p, q = pairs[k]
            out.append(Triplet(dataset[a].id, dataset[p].id, dataset[q].id, float(row[p]), float(row[q])))
    return out


def write_triplets(triplets: Sequence[Triplet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            fh.write(f"{t.anchor_id}\t{t.positive_id}\t{t.negative_id}\t{t.iou_ap!r}\t{t.iou_an!r}\n")


def read_triplets(path: str | Path) -> list[Triplet]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            out.append(Triplet(parts[0], parts[1], parts[2], float(parts[3]), float(parts[4])))
        except ValueError:
            raise ValueError(f"{path}:{n}: bad IoU value") from None
    return out


# ---------------------------------------------------------------------------
# loss and training


def triplet_loss(d_ap: float, d_an: float, margin: float = 5.0) -> float:
    return max(0.0, margin + d_ap - d_an)


def triplet_loss_tensor(graphs: tuple[LayoutGraph, LayoutGraph, LayoutGraph], p: ModelParams, margin: float):
    """Margin loss for one triplet; the anchor is matched separately against each partner.

    The four final node-state sets share a single readout pass.
    """
    ga, gp, gn = graphs
    a1, hp, _ = propagate_pair(ga, gp, p)
    a2, hn, _ = propagate_pair(ga, gn, p)
    with nx.fp_guard():
        e_a1, e_p, e_a2, e_n = readout([a1, hp, a2, hn], p)
        d_ap = nx.l2_norm(nx.sub(e_a1, e_p))
        d_an = nx.l2_norm(nx.sub(e_a2, e_n))
        loss = nx.relu(nx.add(nx.sub(d_ap, d_an), margin))
    return loss, d_ap.item(), d_an.item()


class Adam:
    def __init__(self, params: Sequence[nx.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = 0.0
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    def __init__(self, params: Sequence[nx.Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: dict) -> None:
        if self.lr == 0:
            return
        for p in self.params:
            g = grads.get(p)
            if g is not None:
                p.data -= self.lr * g


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    triplet_accuracy: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochRecord] = field(default_factory=list)


def _triplet_step(graphs, p: ModelParams, margin: float):
    with nx.Tape() as tape:
        loss, d_ap, d_an = triplet_loss_tensor(graphs, p, margin)
    value = loss.item()
    grads = nx.backward(tape, loss) if value > 0 else {}
    return value, d_ap, d_an, grads


def build_graphs(dataset: Sequence[Layout], cfg: TrainConfig) -> dict[str, LayoutGraph]:
    return {l.id: build_graph(l, cfg.graph_mode, cfg.adjacency_eps) for l in dataset}


def train(
    dataset: Sequence[Layout],
    triplets: Sequence[Triplet],
    cfg: TrainConfig,
    params: ModelParams | None = None,
) -> TrainResult:
    """Optimize shared matching-network weights on a fixed triplet set.

    Per-epoch accuracy is measured on the forward passes of that epoch, i.e.
    before each batch's update.
    """
    cfg.validate()
    if not triplets:
        raise ValueError("no triplets to train on")
    graphs = build_graphs(dataset, cfg)
    for t in triplets:
        for lid in (t.anchor_id, t.positive_id, t.negative_id):
            if lid not in graphs:
                raise KeyError(f"triplet references unknown layout {lid!r}")
    if params is None:
        params = init_params(
            dataset[0].categories,
            seed=int(derive_rng(cfg.seed, "init").integers(2**31)),
            hidden=cfg.hidden,
            graph_dim=cfg.graph_dim,
            rounds=cfg.rounds,
            use_edges=cfg.use_edges,
            use_positions=cfg.use_positions,
            use_semantics=cfg.use_semantics,
            state_norm=cfg.state_norm,
        )
    tensors = params.tensors()
    if cfg.optimizer == "adam":
        opt = Adam(tensors, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    else:
        opt = Sgd(tensors, cfg.lr)
    rng = derive_rng(cfg.seed, "batches")
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    history: list[EpochRecord] = []
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(triplets))
            losses, correct = [], 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [triplets[i] for i in order[start:start + cfg.batch_size]]
                jobs = [(graphs[t.anchor_id], graphs[t.positive_id], graphs[t.negative_id]) for t in batch]
                try:
                    if pool is None:
                        results = [_triplet_step(j, params, cfg.margin) for j in jobs]
                    else:
                        results = list(pool.map(lambda j: _triplet_step(j, params, cfg.margin), jobs))
                except NumericError as exc:
                    ids = [(t.anchor_id, t.positive_id, t.negative_id) for t in batch]
                    raise NumericError(f"non-finite value at step {step} (epoch {epoch}), triplets {ids}: {exc}") from exc
                total: dict = {}
                scale = 1.0 / len(batch)
                for (loss, d_ap, d_an, grads), t in zip(results, batch):
                    if not np.isfinite(loss):
                        raise NumericError(f"NaN loss at step {step}, triplet {(t.anchor_id, t.positive_id, t.negative_id)}")
                    losses.append(loss)
                    correct += d_ap < d_an
                    for key, g in grads.items():
                        prev = total.get(key)
                        total[key] = g * scale if prev is None else prev + g * scale
                opt.step(total)
                step += 1
            rec = EpochRecord(epoch, float(np.mean(losses)), correct / len(triplets))
            history.append(rec)
            log.info("epoch %d loss %.6g acc %.4f", rec.epoch, rec.mean_loss, rec.triplet_accuracy)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, history)


def format_loss_log(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss", "triplet_accuracy"])
    for r in records:
        w.writerow([r.epoch, repr(r.mean_loss), repr(r.triplet_accuracy)])
    return buf.getvalue()
