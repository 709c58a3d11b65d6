"""Reference models on real-valued features: a plain message-passing GNN and EGNN.

The GNN reads raw coordinates and is therefore not rotation equivariant; it
serves as the negative control of the equivariance suite. EGNN follows the
E(n)-equivariant graph convolution:

    m_ij     = phi_m(h_i, h_j, |x_i - x_j|^2, e_ij)
    x_i'     = x_i + phi_v(h_i) v_i + 1/(M-1) sum_{j != i} (x_i - x_j) phi_x(m_ij)
    h_i'     = phi_h(h_i, sum_{j in N(i)} m_ij)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from services.autodiff import (
    Tape,
    Variable,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    reshape,
    scalar_nonlin,
    segment_sum,
    square,
    sub,
)
from services.cgegnn import ModelConfig, check_graph
from services.errors import ShapeError
from services.equivariant_layers import bind_params
from services.geograph import GeometricGraph, k_hop


@dataclass
class MLPParams:
    weights: list = field(default_factory=list)  # (in, out) per layer
    biases: list = field(default_factory=list)  # (out,) per layer
    activation: str = "relu"


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int, *,
             depth: int = 2) -> MLPParams:
    """depth hidden layers of width hidden, fan-in uniform weights, zero biases."""
    dims = [in_dim] + [hidden] * depth + [out_dim]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(max(a, 1))
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.zeros(b))
    return MLPParams(weights=weights, biases=biases)


def mlp_forward(x: Variable, p: MLPParams) -> Variable:
    if x.shape[1] != np.shape(_data(p.weights[0]))[0]:
        raise ShapeError(f"MLP expects {np.shape(_data(p.weights[0]))[0]} inputs, got {x.shape[1]}")
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        x = add(matmul(x, w), b)
        if i < last:
            x = scalar_nonlin(x, p.activation)
    return x


def _data(leaf):
    return leaf.data if isinstance(leaf, Variable) else leaf


# ---------------------------------------------------------------------------
# batching


@dataclass
class PairPlan:
    graph: GeometricGraph
    src: np.ndarray  # receiving node i
    dst: np.ndarray  # sending node j
    edge_attrs: np.ndarray  # (P, e), zeros for pairs that are not edges
    neighbor: np.ndarray  # (P,) 1.0 where j in N^k(i)


@dataclass
class PairBatch:
    positions: np.ndarray
    vector_features: np.ndarray
    scalar_features: np.ndarray
    node_graph: np.ndarray
    num_graphs: int
    src: np.ndarray
    dst: np.ndarray
    edge_attrs: np.ndarray
    neighbor: np.ndarray
    pair_norm: np.ndarray  # (P, 1) with 1/(M_g - 1) of the pair's graph

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]


def plan_pairs(graph: GeometricGraph, cfg: ModelConfig, *, all_pairs: bool) -> PairPlan:
    """Ordered pairs (i, j): every j != i when all_pairs, else only j in N^k(i)."""
    check_graph(graph, cfg)
    neigh = k_hop(graph, cfg.k)
    lookup = graph.edge_lookup()
    m = graph.num_nodes
    src, dst, attrs, mask = [], [], [], []
    for i in range(m):
        members = set(neigh[i])
        candidates = [j for j in range(m) if j != i] if all_pairs else list(neigh[i])
        for j in candidates:
            src.append(i)
            dst.append(j)
            mask.append(1.0 if j in members else 0.0)
            if cfg.edge_dim:
                attr = lookup.get((i, j))
                attrs.append(np.zeros(cfg.edge_dim) if attr is None else attr)
    return PairPlan(
        graph=graph,
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        edge_attrs=np.asarray(attrs, dtype=np.float64).reshape(len(src), cfg.edge_dim),
        neighbor=np.asarray(mask, dtype=np.float64),
    )


def collate_pairs(plans: Sequence[PairPlan]) -> PairBatch:
    if not plans:
        raise ShapeError("empty batch")
    sizes = [p.graph.num_nodes for p in plans]
    offsets = np.cumsum([0] + sizes)
    norm = [np.full(p.src.shape[0], 1.0 / max(size - 1, 1)) for p, size in zip(plans, sizes)]
    return PairBatch(
        positions=np.concatenate([p.graph.positions for p in plans]),
        vector_features=np.concatenate([p.graph.vector_features for p in plans]),
        scalar_features=np.concatenate([p.graph.scalar_features for p in plans]),
        node_graph=np.repeat(np.arange(len(plans)), sizes),
        num_graphs=len(plans),
        src=np.concatenate([p.src + off for p, off in zip(plans, offsets)]),
        dst=np.concatenate([p.dst + off for p, off in zip(plans, offsets)]),
        edge_attrs=np.concatenate([p.edge_attrs for p in plans]),
        neighbor=np.concatenate([p.neighbor for p in plans]),
        pair_norm=np.concatenate(norm)[:, None],
    )


def _scalar_readout(h: Variable, head: MLPParams, cfg: ModelConfig, batch: PairBatch) -> Variable:
    per_node = reshape(mlp_forward(h, head), (h.shape[0],))
    if cfg.pool == "none":
        return per_node
    return segment_sum(per_node, batch.node_graph, batch.num_graphs)


# ---------------------------------------------------------------------------
# GNN


@dataclass
class GnnLayerParams:
    message: MLPParams
    update: MLPParams


@dataclass
class GnnParams:
    embed: MLPParams
    layers: list[GnnLayerParams]
    head: MLPParams


def gnn_input_width(cfg: ModelConfig) -> int:
    return cfg.n + cfg.vector_features * cfg.n + cfg.scalar_features


def init_gnn(cfg: ModelConfig, rng: np.random.Generator) -> GnnParams:
    width = cfg.width
    out = cfg.n if cfg.head == "vector" else 1
    return GnnParams(
        embed=init_mlp(rng, gnn_input_width(cfg), width, cfg.nf),
        layers=[
            GnnLayerParams(
                message=init_mlp(rng, 2 * cfg.nf + cfg.edge_dim, width, cfg.nf),
                update=init_mlp(rng, 2 * cfg.nf, width, cfg.nf),
            )
            for _ in range(cfg.layers)
        ],
        head=init_mlp(rng, cfg.nf, width, out),
    )


def gnn_forward(batch: PairBatch, cfg: ModelConfig, params: GnnParams) -> Variable:
    """Message passing over raw coordinates; vector head predicts x_i + f(h_i)."""
    m = batch.num_nodes
    raw = np.concatenate(
        [batch.positions, batch.vector_features.reshape(m, -1), batch.scalar_features], axis=1
    )
    h = mlp_forward(Variable(raw), params.embed)
    for layer in params.layers:
        parts = [gather_rows(h, batch.src), gather_rows(h, batch.dst)]
        if cfg.edge_dim:
            parts.append(Variable(batch.edge_attrs))
        messages = mlp_forward(concat(parts, axis=1), layer.message)
        agg = segment_sum(messages, batch.src, m)
        h = mlp_forward(concat([h, agg], axis=1), layer.update)
    if cfg.head == "vector":
        return add(mlp_forward(h, params.head), batch.positions)
    return _scalar_readout(h, params.head, cfg, batch)


# ---------------------------------------------------------------------------
# EGNN


@dataclass
class EgnnLayerParams:
    """Nets whose output cannot reach the prediction are left out (None)."""

    message: MLPParams
    coord: MLPParams | None
    velocity: MLPParams | None
    update: MLPParams | None


@dataclass
class EgnnParams:
    embed: MLPParams
    layers: list[EgnnLayerParams]
    head: MLPParams | None  # scalar head only


def egnn_input_width(cfg: ModelConfig) -> int:
    # constant channel, scalar features, norms of the vector features
    return 1 + cfg.scalar_features + cfg.vector_features


def init_egnn(cfg: ModelConfig, rng: np.random.Generator) -> EgnnParams:
    """The vector head reads positions, so the last h update and the readout are skipped;
    the scalar head reads h, so the last position update is skipped."""
    width = cfg.width
    vector_head = cfg.head == "vector"
    layers = []
    for i in range(cfg.layers):
        last = i == cfg.layers - 1
        moves_x = vector_head or not last
        layers.append(EgnnLayerParams(
            message=init_mlp(rng, 2 * cfg.nf + 1 + cfg.edge_dim, width, cfg.nf),
            coord=init_mlp(rng, cfg.nf, width, 1) if moves_x else None,
            velocity=init_mlp(rng, cfg.nf, width, 1) if moves_x and cfg.vector_features else None,
            update=None if vector_head and last else init_mlp(rng, 2 * cfg.nf, width, cfg.nf),
        ))
    return EgnnParams(
        embed=init_mlp(rng, egnn_input_width(cfg), width, cfg.nf),
        layers=layers,
        head=None if vector_head else init_mlp(rng, cfg.nf, width, 1),
    )


def egnn_invariants(batch: PairBatch) -> np.ndarray:
    m = batch.num_nodes
    norms = np.linalg.norm(batch.vector_features, axis=2)
    return np.concatenate([np.ones((m, 1)), batch.scalar_features, norms], axis=1)


def egnn_forward(batch: PairBatch, cfg: ModelConfig, params: EgnnParams) -> Variable:
    m = batch.num_nodes
    if np.any(np.bincount(batch.node_graph) < 2):
        raise ShapeError("EGNN needs at least two nodes per graph")
    h = mlp_forward(Variable(egnn_invariants(batch)), params.embed)
    x = Variable(batch.positions)
    ones_n = np.ones((cfg.n, 1))
    velocity = batch.vector_features[:, 0, :] if cfg.vector_features else None
    for layer in params.layers:
        rel = sub(gather_rows(x, batch.src), gather_rows(x, batch.dst))
        dist2 = matmul(square(rel), ones_n)
        parts = [gather_rows(h, batch.src), gather_rows(h, batch.dst), dist2]
        if cfg.edge_dim:
            parts.append(Variable(batch.edge_attrs))
        messages = mlp_forward(concat(parts, axis=1), layer.message)
        if layer.coord is not None:
            weights = mul(mlp_forward(messages, layer.coord), batch.pair_norm)
            shift = segment_sum(mul(rel, weights), batch.src, m)
            if layer.velocity is not None:
                shift = add(shift, mul(mlp_forward(h, layer.velocity), velocity))
            x = add(x, shift)
        if layer.update is not None:
            agg = segment_sum(mul(messages, batch.neighbor[:, None]), batch.src, m)
            h = mlp_forward(concat([h, agg], axis=1), layer.update)
    if cfg.head == "vector":
        return x
    return _scalar_readout(h, params.head, cfg, batch)


class GnnModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init(self, rng: np.random.Generator) -> GnnParams:
        return init_gnn(self.cfg, rng)

    def plan(self, graph: GeometricGraph) -> PairPlan:
        return plan_pairs(graph, self.cfg, all_pairs=False)

    def collate(self, plans: Sequence[PairPlan]) -> PairBatch:
        return collate_pairs(plans)

    def forward(self, batch: PairBatch, params: GnnParams) -> Variable:
        return gnn_forward(batch, self.cfg, params)

    def bind(self, params: GnnParams, tape: Tape) -> GnnParams:
        return bind_params(params, tape)

    def predict(self, graphs: Sequence[GeometricGraph], params: GnnParams) -> np.ndarray:
        return self.forward(self.collate([self.plan(g) for g in graphs]), params).data


class EgnnModel(GnnModel):
    def init(self, rng: np.random.Generator) -> EgnnParams:
        return init_egnn(self.cfg, rng)

    def plan(self, graph: GeometricGraph) -> PairPlan:
        return plan_pairs(graph, self.cfg, all_pairs=True)

    def forward(self, batch: PairBatch, params: EgnnParams) -> Variable:
        return egnn_forward(batch, self.cfg, params)
