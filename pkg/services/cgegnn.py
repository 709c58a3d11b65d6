"""CG-EGNN: embedding, high-order Clifford graph convolutions, projection.

Forward pass for a batch of graphs (disjoint union):

    h0      = phi_embed(x_i - mean(x), v_i1..v_ir, a_i1..a_is)
    m_iA    = phi_m^(d)(h_i, sum_{j in A} h_j [, edge attrs])   for A in N^k(i), |A| = d
    m_i^(d) = sum_A m_iA
    h'      = phi_h(h_i, m_i^(1), ..., m_i^(D))
    out     = x_i + phi_x(h_i^L)^(1)            (vector head)
            = sum_i phi_output(h_i^L)^(0)       (scalar head, sum pooled)

Orders missing from the configured set feed zeros into phi_h so the
parameter shapes only depend on D.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

import config as app_config
from services.autodiff import (
    MvTensor,
    Tape,
    Variable,
    add,
    concat,
    constant_mv,
    gather_rows,
    mv_scalar_part,
    mv_vector_part,
    segment_sum,
)
from services.clifford_core import build_cayley_table
from services.equivariant_layers import (
    CliffordMLPParams,
    CliffordMLPSpec,
    bind_params,
    clifford_mlp_forward,
    init_clifford_mlp,
)
from services.errors import ConfigError, ShapeError
from services.geograph import GeometricGraph, NeighborhoodIndex, enumerate_subsets, k_hop

logger = logging.getLogger(__name__)

HEADS = ("vector", "scalar")
POOLS = ("sum", "none")
MODELS = ("cgegnn", "gnn", "egnn")


@dataclass(frozen=True)
class ModelConfig:
    model: str = "cgegnn"
    n: int = 3
    nf: int = 8
    layers: int = 4
    orders: tuple[int, ...] = (1,)
    k: int = 1
    vector_features: int = 0
    scalar_features: int = 0
    edge_dim: int = 0
    head: str = "vector"
    pool: str = "sum"
    hidden: int = 0  # internal width of every phi; 0 means nf
    mlp_repeats: int = 2
    fully_connected: bool = True
    max_subsets_per_node: int = app_config.MAX_SUBSETS_PER_NODE

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(sorted(set(int(d) for d in self.orders))))
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if not 1 <= self.n <= 8:
            raise ConfigError(f"n must be in 1..8, got {self.n}")
        if self.nf < 1 or self.layers < 1 or self.k < 1:
            raise ConfigError("nf, layers and k must all be >= 1")
        if not self.orders or min(self.orders) < 1:
            raise ConfigError(f"message orders must be positive integers, got {self.orders}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.pool not in POOLS:
            raise ConfigError(f"pool must be one of {POOLS}, got {self.pool!r}")
        if min(self.vector_features, self.scalar_features, self.edge_dim, self.hidden) < 0:
            raise ConfigError("feature counts must be non-negative")

    @property
    def max_order(self) -> int:
        return max(self.orders)

    @property
    def width(self) -> int:
        return self.hidden or self.nf

    @property
    def label(self) -> str:
        if self.model != "cgegnn":
            return self.model
        return "cgegnn-" + "-".join(str(d) for d in self.orders)

    def embed_spec(self) -> CliffordMLPSpec:
        return CliffordMLPSpec.default(1 + self.vector_features + self.scalar_features, self.width, self.nf,
                                       repeats=self.mlp_repeats, fully_connected=self.fully_connected)

    def message_spec(self) -> CliffordMLPSpec:
        return CliffordMLPSpec.default(2 * self.nf + self.edge_dim, self.width, self.nf,
                                       repeats=self.mlp_repeats, fully_connected=self.fully_connected)

    def update_spec(self) -> CliffordMLPSpec:
        return CliffordMLPSpec.default((1 + self.max_order) * self.nf, self.width, self.nf,
                                       repeats=self.mlp_repeats, fully_connected=self.fully_connected)

    def head_spec(self) -> CliffordMLPSpec:
        return CliffordMLPSpec.readout(self.nf, self.width, 1, fully_connected=self.fully_connected)


@dataclass
class ConvLayerParams:
    messages: dict[str, CliffordMLPParams]
    update: CliffordMLPParams


@dataclass
class ModelParams:
    embed: CliffordMLPParams
    layers: list[ConvLayerParams]
    head: CliffordMLPParams


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Serialization order: embed, then per layer the message nets by order and the update net, then head."""
    embed = init_clifford_mlp(rng, cfg.embed_spec(), cfg.n)
    layers = []
    for _ in range(cfg.layers):
        messages = {str(d): init_clifford_mlp(rng, cfg.message_spec(), cfg.n) for d in cfg.orders}
        layers.append(ConvLayerParams(messages=messages, update=init_clifford_mlp(rng, cfg.update_spec(), cfg.n)))
    return ModelParams(embed=embed, layers=layers, head=init_clifford_mlp(rng, cfg.head_spec(), cfg.n))


# ---------------------------------------------------------------------------
# message structure


@dataclass
class OrderPlan:
    targets: np.ndarray  # (P,) receiving node per subset
    members: np.ndarray  # (P, d) nodes of each subset
    edge_attrs: np.ndarray  # (P, e) mean edge attribute of the subset


@dataclass
class GraphPlan:
    """Per-graph arrays needed by the forward pass; cheap to collate."""

    graph: GeometricGraph
    inputs: np.ndarray  # (M, 1 + r + s, 2^n)
    orders: dict[int, OrderPlan] = field(default_factory=dict)


@dataclass
class GraphBatch:
    inputs: MvTensor
    positions: np.ndarray  # original, un-centered
    node_graph: np.ndarray
    num_graphs: int
    orders: dict[int, OrderPlan]

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]


def embed_inputs(graph: GeometricGraph) -> np.ndarray:
    """Mean-subtracted positions and vector features at grade 1, scalars at grade 0."""
    t = build_cayley_table(graph.dim)
    m = graph.num_nodes
    centered = graph.positions - graph.positions.mean(axis=0)
    chans = 1 + graph.num_vector_features + graph.num_scalar_features
    out = np.zeros((m, chans, t.size))
    out[:, 0, t.vector_blades] = centered
    r = graph.num_vector_features
    if r:
        out[:, 1:1 + r, t.vector_blades] = graph.vector_features
    out[:, 1 + r:, 0] = graph.scalar_features
    return out


def order_plan(graph: GeometricGraph, neigh: NeighborhoodIndex, d: int, edge_dim: int,
               limit: int | None = None) -> OrderPlan:
    lookup = graph.edge_lookup()
    targets, members, attrs = [], [], []
    for i in range(graph.num_nodes):
        for subset in enumerate_subsets(neigh[i], d, limit):
            targets.append(i)
            members.append(subset)
            if edge_dim:
                found = [lookup.get((i, j)) for j in subset]
                attrs.append(np.mean(found, axis=0) if all(a is not None for a in found) else np.zeros(edge_dim))
    return OrderPlan(
        targets=np.asarray(targets, dtype=np.int64),
        members=np.asarray(members, dtype=np.int64).reshape(len(targets), d),
        edge_attrs=np.asarray(attrs, dtype=np.float64).reshape(len(targets), edge_dim),
    )


def plan_graph(graph: GeometricGraph, cfg: ModelConfig) -> GraphPlan:
    check_graph(graph, cfg)
    neigh = k_hop(graph, cfg.k)
    orders = {d: order_plan(graph, neigh, d, cfg.edge_dim, cfg.max_subsets_per_node) for d in cfg.orders}
    return GraphPlan(graph=graph, inputs=embed_inputs(graph), orders=orders)


def check_graph(graph: GeometricGraph, cfg: ModelConfig) -> None:
    if graph.dim != cfg.n:
        raise ShapeError(f"graph lives in R^{graph.dim}, model expects R^{cfg.n}")
    if graph.num_vector_features != cfg.vector_features or graph.num_scalar_features != cfg.scalar_features:
        raise ShapeError(
            f"graph has {graph.num_vector_features} vector / {graph.num_scalar_features} scalar features, "
            f"model expects {cfg.vector_features} / {cfg.scalar_features}"
        )
    if cfg.edge_dim and graph.edge_dim != cfg.edge_dim:
        raise ShapeError(f"graph edge attributes have width {graph.edge_dim}, model expects {cfg.edge_dim}")


def collate(plans: Sequence[GraphPlan]) -> GraphBatch:
    if not plans:
        raise ShapeError("empty batch")
    offsets = np.cumsum([0] + [p.graph.num_nodes for p in plans])
    orders: dict[int, OrderPlan] = {}
    for d in plans[0].orders:
        orders[d] = OrderPlan(
            targets=np.concatenate([p.orders[d].targets + off for p, off in zip(plans, offsets)]),
            members=np.concatenate([p.orders[d].members + off for p, off in zip(plans, offsets)]),
            edge_attrs=np.concatenate([p.orders[d].edge_attrs for p in plans]),
        )
    return GraphBatch(
        inputs=constant_mv(np.concatenate([p.inputs for p in plans])),
        positions=np.concatenate([p.graph.positions for p in plans]),
        node_graph=np.repeat(np.arange(len(plans)), [p.graph.num_nodes for p in plans]),
        num_graphs=len(plans),
        orders=orders,
    )


def batch_graphs(graphs: Sequence[GeometricGraph], cfg: ModelConfig) -> GraphBatch:
    return collate([plan_graph(g, cfg) for g in graphs])


# ---------------------------------------------------------------------------
# forward


def embed(batch: GraphBatch, params: ModelParams, cfg: ModelConfig) -> MvTensor:
    return clifford_mlp_forward(batch.inputs, cfg.embed_spec(), params.embed)


def _edge_channels(plan: OrderPlan, n: int) -> MvTensor:
    t = build_cayley_table(n)
    out = np.zeros((plan.targets.shape[0], plan.edge_attrs.shape[1], t.size))
    out[:, :, 0] = plan.edge_attrs
    return constant_mv(out)


def order_message(h: MvTensor, plan: OrderPlan, net: CliffordMLPParams, cfg: ModelConfig) -> MvTensor:
    """m_i^(d): phi_m^(d) over every d-subset, summed per receiving node."""
    num_nodes = h.batch
    if plan.targets.shape[0] == 0:
        return constant_mv(np.zeros(h.shape))
    subset_sum = gather_rows(h, plan.members[:, 0])
    for col in range(1, plan.members.shape[1]):
        subset_sum = add(subset_sum, gather_rows(h, plan.members[:, col]))
    parts = [gather_rows(h, plan.targets), subset_sum]
    if cfg.edge_dim:
        parts.append(_edge_channels(plan, cfg.n))
    messages = clifford_mlp_forward(concat(parts, axis=1), cfg.message_spec(), net)
    return segment_sum(messages, plan.targets, num_nodes)


def convolve(h: MvTensor, orders: dict[int, OrderPlan], layer: ConvLayerParams, cfg: ModelConfig) -> MvTensor:
    slots = [h]
    for d in range(1, cfg.max_order + 1):
        if d in cfg.orders:
            slots.append(order_message(h, orders[d], layer.messages[str(d)], cfg))
        else:
            slots.append(constant_mv(np.zeros(h.shape)))
    return clifford_mlp_forward(concat(slots, axis=1), cfg.update_spec(), layer.update)


def project_vector(h: MvTensor, positions: np.ndarray, head: CliffordMLPParams, cfg: ModelConfig) -> Variable:
    """x_i^L = x_i + phi_x(h_i^L)^(1), residual on the original positions."""
    if cfg.head != "vector":
        raise ConfigError(f"vector projection requested for a {cfg.head} head")
    return add(mv_vector_part(clifford_mlp_forward(h, cfg.head_spec(), head)), positions)


def project_scalar(h: MvTensor, head: CliffordMLPParams, cfg: ModelConfig,
                   node_graph: np.ndarray | None = None, num_graphs: int = 1) -> Variable:
    """phi_output(h_i^L)^(0), sum-pooled per graph unless pool is none."""
    if cfg.head != "scalar":
        raise ConfigError(f"scalar projection requested for a {cfg.head} head")
    per_node = mv_scalar_part(clifford_mlp_forward(h, cfg.head_spec(), head))
    if cfg.pool == "none":
        return per_node
    if node_graph is None:
        node_graph = np.zeros(h.batch, dtype=np.int64)
    return segment_sum(per_node, node_graph, num_graphs)


def forward(batch: GraphBatch, cfg: ModelConfig, params: ModelParams) -> Variable:
    h = embed(batch, params, cfg)
    for layer in params.layers:
        h = convolve(h, batch.orders, layer, cfg)
    if cfg.head == "vector":
        return project_vector(h, batch.positions, params.head, cfg)
    return project_scalar(h, params.head, cfg, batch.node_graph, batch.num_graphs)


class CgegnnModel:
    """Uniform model interface used by training and the property suites."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init(self, rng: np.random.Generator) -> ModelParams:
        return init_params(self.cfg, rng)

    def plan(self, graph: GeometricGraph) -> GraphPlan:
        return plan_graph(graph, self.cfg)

    def collate(self, plans: Sequence[GraphPlan]) -> GraphBatch:
        return collate(plans)

    def forward(self, batch: GraphBatch, params: ModelParams) -> Variable:
        return forward(batch, self.cfg, params)

    def bind(self, params: ModelParams, tape: Tape) -> ModelParams:
        return bind_params(params, tape)

    def predict(self, graphs: Sequence[GeometricGraph], params: ModelParams) -> np.ndarray:
        return self.forward(self.collate([self.plan(g) for g in graphs]), params).data
