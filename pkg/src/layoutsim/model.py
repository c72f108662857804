"""Graph matching network over pairs of layout graphs.

Forward pass per pair: encode nodes/edges, run ``rounds`` synchronous rounds of
intra-graph messages plus cross-graph attention, then gate-and-sum each graph's
node states into a graph embedding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import EDGE_DIM, NODE_DIM, LayoutGraph
from .numerics import DimensionError, MlpParams, Tensor

HIDDEN = 128
GRAPH_DIM = 1024
ROUNDS = 5

MAGIC = b"LGMN"
FORMAT_VERSION = 1

# name -> (layer widths as a function of (hidden, graph_dim)); ReLU between layers, none at the end
_MLP_NAMES = ("geo_mlp", "node_mlp", "edge_mlp", "intra_mlp", "update_mlp", "gate_mlp", "value_mlp", "out_mlp")


def mlp_dims(hidden: int = HIDDEN, graph_dim: int = GRAPH_DIM) -> dict[str, list[int]]:
    return {
        "geo_mlp": [NODE_DIM, hidden, hidden],
        "node_mlp": [2 * hidden, hidden],
        "edge_mlp": [EDGE_DIM, hidden],
        "intra_mlp": [3 * hidden, hidden, hidden],
        "update_mlp": [3 * hidden, hidden, hidden],
        "gate_mlp": [hidden, graph_dim],
        "value_mlp": [hidden, graph_dim],
        "out_mlp": [graph_dim, graph_dim],
    }


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    semantic_table: Tensor
    geo_mlp: MlpParams
    node_mlp: MlpParams
    edge_mlp: MlpParams
    intra_mlp: MlpParams
    update_mlp: MlpParams
    gate_mlp: MlpParams
    value_mlp: MlpParams
    out_mlp: MlpParams
    rounds: int = ROUNDS
    use_edges: bool = True
    use_positions: bool = True
    use_semantics: bool = True
    state_norm: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise DimensionError("rounds must be >= 1")
        expected = mlp_dims(self.hidden, self.graph_dim)
        for name in _MLP_NAMES:
            mlp: MlpParams = getattr(self, name)
            dims = [mlp.in_dim] + [w.shape[0] for w in mlp.weights]
            if dims != expected[name]:
                raise DimensionError(f"{name}: layer widths {dims}, expected {expected[name]}")
        if self.intra_mlp.activations != ["relu", "none"]:
            raise DimensionError("intra_mlp must be affine-relu-affine")

    @property
    def num_categories(self) -> int:
        return self.semantic_table.shape[0]

    @property
    def hidden(self) -> int:
        return self.semantic_table.shape[1]

    @property
    def graph_dim(self) -> int:
        return self.out_mlp.out_dim

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("semantic_table", self.semantic_table)]
        for name in _MLP_NAMES:
            mlp: MlpParams = getattr(self, name)
            for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out.append((f"{name}.{k}.weight", w))
                out.append((f"{name}.{k}.bias", b))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def flags(self) -> int:
        return (
            int(self.use_edges)
            | int(self.use_positions) << 1
            | int(self.use_semantics) << 2
            | int(self.state_norm) << 3
        )

    def copy(self) -> "ModelParams":
        return _assemble(
            self.num_categories,
            self.hidden,
            self.graph_dim,
            {name: t.data.copy() for name, t in self.named_tensors()},
            rounds=self.rounds,
            flags=self.flags(),
        )


def init_params(
    num_categories: int,
    seed: int = 0,
    hidden: int = HIDDEN,
    graph_dim: int = GRAPH_DIM,
    rounds: int = ROUNDS,
    use_edges: bool = True,
    use_positions: bool = True,
    use_semantics: bool = True,
    state_norm: bool = True,
) -> ModelParams:
    if num_categories < 1:
        raise DimensionError("need at least one semantic category")
    rng = np.random.default_rng([seed, 0x6D6F64])
    limit = np.sqrt(6.0 / (num_categories + hidden))
    table = Tensor(rng.uniform(-limit, limit, size=(num_categories, hidden)), requires_grad=True)
    mlps = {name: nx.init_mlp(rng, dims) for name, dims in mlp_dims(hidden, graph_dim).items()}
    return ModelParams(
        table,
        **mlps,
        rounds=rounds,
        use_edges=use_edges,
        use_positions=use_positions,
        use_semantics=use_semantics,
        state_norm=state_norm,
    )


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class EncodedGraph:
    h0: Tensor  # (n, hidden)
    edge_codes: Tensor | None  # (E, hidden)
    graph: LayoutGraph


@dataclass
class MatchResult:
    h_g1: Tensor  # (1, graph_dim)
    h_g2: Tensor
    attention: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        return self.h_g1.data.reshape(-1), self.h_g2.data.reshape(-1)


def encode(g: LayoutGraph, p: ModelParams) -> EncodedGraph:
    n = g.num_nodes
    if n and (g.categories.min() < 0 or g.categories.max() >= p.num_categories):
        bad = int(g.categories[(g.categories < 0) | (g.categories >= p.num_categories)][0])
        raise DimensionError(f"graph {g.layout_id}: category {bad} outside [0, {p.num_categories})")
    geometry = g.geometry if p.use_positions else np.zeros_like(g.geometry)
    geo = nx.mlp_apply(p.geo_mlp, geometry)
    if g.semantics_masked:
        sem = Tensor(np.ones((n, p.hidden)))
    elif not p.use_semantics:
        sem = Tensor(np.zeros((n, p.hidden)))
    else:
        sem = nx.gather_rows(p.semantic_table, g.categories)
    h0 = nx.mlp_apply(p.node_mlp, nx.concat_cols([geo, sem]))
    codes = None
    if p.use_edges and g.num_edges:
        codes = nx.mlp_apply(p.edge_mlp, g.edge_features)
    return EncodedGraph(h0, codes, g)


class _IntraMessages:
    """Per-graph message sums for one pair, reusing round-invariant edge terms.

    ``f_intra`` is affine-relu-affine, so with W1 split as [dst | src | edge]
    the first layer is ``A[dst] + B[src] + (r W_e + b1)`` and the final affine
    layer commutes with the per-node sum.
    """

    def __init__(self, enc: EncodedGraph, p: ModelParams):
        g = enc.graph
        self.n = g.num_nodes
        self.dst = g.dst
        self.src = g.src
        self.active = enc.edge_codes is not None
        if not self.active:
            return
        k = p.hidden
        w1, b1 = p.intra_mlp.weights[0], p.intra_mlp.biases[0]
        self.w_dst = nx.cols(w1, 0, k)
        self.w_src = nx.cols(w1, k, 2 * k)
        self.edge_term = nx.linear(enc.edge_codes, nx.cols(w1, 2 * k, 3 * k), b1)
        self.w2, self.b2 = p.intra_mlp.weights[1], p.intra_mlp.biases[1]
        degree = np.bincount(self.dst, minlength=self.n).astype(np.float64)
        self.degree = degree[:, None]

    def __call__(self, h: Tensor, hidden: int) -> Tensor:
        if not self.active:
            return Tensor(np.zeros((self.n, hidden)))
        pre = nx.add(
            nx.add(nx.gather_rows(nx.linear(h, self.w_dst), self.dst), nx.gather_rows(nx.linear(h, self.w_src), self.src)),
            self.edge_term,
        )
        summed = nx.segment_sum(nx.relu(pre), self.dst, self.n)
        return nx.add(nx.linear(summed, self.w2), nx.mul(self.degree, self.b2))


def cross_attention(h_self: Tensor, h_other: Tensor) -> tuple[Tensor, Tensor]:
    """Attention of each node over the other graph's nodes and the matching vector.

    Returns ``(a, mu)`` with ``a[i, p] = softmax_p(h_i . h_p)`` and
    ``mu[i] = h_i - sum_p a[i, p] h_p``.
    """
    a = nx.softmax_rows(nx.matmul(h_self, nx.transpose(h_other)))
    mu = nx.sub(h_self, nx.matmul(a, h_other))
    return a, mu


def propagate_round(h1: Tensor, h2: Tensor, msg1, msg2, p: ModelParams):
    """One synchronous round; both graphs read only the pre-round states.

    With ``state_norm`` the updated states are row-standardized, which keeps
    their scale fixed across rounds (summed messages otherwise compound).
    """
    n1 = h1.shape[0]
    m1 = msg1(h1, p.hidden)
    m2 = msg2(h2, p.hidden)
    a1, mu1 = cross_attention(h1, h2)
    a2, mu2 = cross_attention(h2, h1)
    # both graphs share f_update, so run it once on the stacked rows
    stacked = nx.concat_rows([nx.concat_cols([h1, m1, mu1]), nx.concat_cols([h2, m2, mu2])])
    new = nx.mlp_apply(p.update_mlp, stacked)
    if p.state_norm:
        new = nx.layer_norm_rows(new)
    return nx.rows(new, 0, n1), nx.rows(new, n1, new.shape[0]), (a1.data, a2.data)


def readout(states: Sequence[Tensor], p: ModelParams) -> list[Tensor]:
    """Gated-sum graph embeddings (1 x graph_dim each) for several graphs in one stacked pass."""
    sizes = [s.shape[0] for s in states]
    h = nx.concat_rows(states)
    segment = np.repeat(np.arange(len(states)), sizes)
    gate = nx.sigmoid(nx.mlp_apply(p.gate_mlp, h))
    value = nx.mlp_apply(p.value_mlp, h)
    out = nx.mlp_apply(p.out_mlp, nx.segment_sum(nx.mul(gate, value), segment, len(states)))
    return [nx.rows(out, i, i + 1) for i in range(len(states))]


def aggregate(h: Tensor, p: ModelParams) -> Tensor:
    return readout([h], p)[0]


def _check_pair(ga: LayoutGraph, gb: LayoutGraph) -> None:
    if ga.num_categories and gb.num_categories and ga.num_categories != gb.num_categories:
        raise DimensionError(
            f"category count mismatch: {ga.layout_id} has {ga.num_categories}, {gb.layout_id} has {gb.num_categories}"
        )


def propagate_pair(ga: LayoutGraph, gb: LayoutGraph, p: ModelParams):
    """Run all propagation rounds; returns final node states and per-round attention."""
    _check_pair(ga, gb)
    with nx.fp_guard():
        ea, eb = encode(ga, p), encode(gb, p)
        msg_a, msg_b = _IntraMessages(ea, p), _IntraMessages(eb, p)
        h1, h2 = ea.h0, eb.h0
        history = []
        for _ in range(p.rounds):
            h1, h2, att = propagate_round(h1, h2, msg_a, msg_b, p)
            history.append(att)
    return h1, h2, history


def match_pair(ga: LayoutGraph, gb: LayoutGraph, p: ModelParams) -> MatchResult:
    h1, h2, history = propagate_pair(ga, gb, p)
    with nx.fp_guard():
        e1, e2 = readout([h1, h2], p)
    return MatchResult(e1, e2, history)


def distance_tensor(r: MatchResult) -> Tensor:
    return nx.l2_norm(nx.sub(r.h_g1, r.h_g2))


def pair_distance(r: MatchResult) -> float:
    with nx.fp_guard():
        d = r.h_g1.data - r.h_g2.data
        return float(np.sqrt(np.sum(d * d)))


def attention_to_dict(r: MatchResult, ids1: list[str] | None = None, ids2: list[str] | None = None) -> dict:
    rounds = []
    for t, (a12, a21) in enumerate(r.attention, 1):
        rounds.append({"round": t, "g1_over_g2": a12.tolist(), "g2_over_g1": a21.tolist()})
    out = {"rounds": rounds}
    if ids1 is not None:
        out["g1_nodes"] = list(ids1)
    if ids2 is not None:
        out["g2_nodes"] = list(ids2)
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# header: magic, then little-endian u32 version, C, hidden, graph_dim, rounds,
# flags, field count; each field: u16 name length, name, u8 ndim, u32 dims,
# then float64 data.

_HEADER = struct.Struct("<4s7I")


def save_checkpoint(p: ModelParams, path: str | Path) -> None:
    fields = p.named_tensors()
    chunks = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, p.num_categories, p.hidden, p.graph_dim, p.rounds, p.flags(), len(fields))
    ]
    for name, t in fields:
        raw = name.encode("ascii")
        chunks.append(struct.pack("<HB", len(raw), t.data.ndim) + raw)
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _assemble(C: int, hidden: int, graph_dim: int, arrays: dict[str, np.ndarray], rounds: int, flags: int) -> ModelParams:
    mlps = {}
    for name, dims in mlp_dims(hidden, graph_dim).items():
        ws, bs, acts = [], [], []
        for k in range(len(dims) - 1):
            ws.append(Tensor(arrays[f"{name}.{k}.weight"], requires_grad=True))
            bs.append(Tensor(arrays[f"{name}.{k}.bias"], requires_grad=True))
            acts.append("relu" if k < len(dims) - 2 else "none")
        mlps[name] = MlpParams(ws, bs, acts)
    return ModelParams(
        Tensor(arrays["semantic_table"], requires_grad=True),
        **mlps,
        rounds=rounds,
        use_edges=bool(flags & 1),
        use_positions=bool(flags & 2),
        use_semantics=bool(flags & 4),
        state_norm=bool(flags & 8),
    )


def _expected_shapes(C: int, hidden: int, graph_dim: int) -> dict[str, tuple[int, ...]]:
    out = {"semantic_table": (C, hidden)}
    for name, dims in mlp_dims(hidden, graph_dim).items():
        for k in range(len(dims) - 1):
            out[f"{name}.{k}.weight"] = (dims[k + 1], dims[k])
            out[f"{name}.{k}.bias"] = (dims[k + 1],)
    return out


def load_checkpoint(path: str | Path, expected_categories: int | None = None) -> ModelParams:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, C, hidden, graph_dim, rounds, flags, nfields = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r}); unsupported format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if expected_categories is not None and C != expected_categories:
        raise DimensionError(f"semantic_table: checkpoint has {C} categories, expected {expected_categories}")
    expected = _expected_shapes(C, hidden, graph_dim)
    offset = _HEADER.size
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(nfields):
            name_len, ndim = struct.unpack_from("<HB", buf, offset)
            offset += 3
            name = buf[offset:offset + name_len].decode("ascii")
            offset += name_len
            shape = struct.unpack_from(f"<{ndim}I", buf, offset)
            offset += 4 * ndim
            if name not in expected:
                raise CheckpointError(f"unknown checkpoint field {name!r}")
            if tuple(shape) != expected[name]:
                raise DimensionError(f"{name}: stored shape {tuple(shape)}, expected {expected[name]}")
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if offset + nbytes > len(buf):
                raise CheckpointError(f"truncated checkpoint in field {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += nbytes
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after checkpoint data")
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint missing fields: {sorted(missing)}")
    return _assemble(C, hidden, graph_dim, arrays, rounds, flags)


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of every float plus matching hyperparameters."""
    if (a.rounds, a.flags()) != (b.rounds, b.flags()):
        return False
    ta, tb = a.named_tensors(), b.named_tensors()
    if [n for n, _ in ta] != [n for n, _ in tb]:
        return False
    return all(x.shape == y.shape and x.data.tobytes() == y.data.tobytes() for (_, x), (_, y) in zip(ta, tb))
