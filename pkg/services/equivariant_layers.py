"""Clifford-group equivariant layers and the small Clifford networks built from them.

Layer family:
 - linear: per-grade channel mixing
 - (fully connected) geometric product: grade-weighted products of x with a linear image z
 - normalization: per-grade rescaling with a learnable sigmoid gate
 - nonlinear: ReLU on the scalar part, sigmoid(q) gating on the other grades

Parameter containers are plain dataclasses whose leaves are numpy arrays, or
Variables once bound to a tape. ``iter_params``/``map_params`` walk them in a
fixed order, which is also the serialization order of a model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

import numpy as np

from services.autodiff import (
    MvTensor,
    Tape,
    Variable,
    add,
    as_variable,
    concat,
    div,
    mul,
    mv_grade_q,
    mv_grade_scale,
    mv_linear,
    mv_weighted_product,
    sigmoid,
    sub,
    take,
)
from services.errors import ShapeError

LINEAR = "linear"
GEOM_PRODUCT = "geom_product"
FC_GEOM_PRODUCT = "fc_geom_product"
NORMALIZATION = "normalization"
NONLINEAR = "nonlinear"
LAYER_KINDS = (LINEAR, GEOM_PRODUCT, FC_GEOM_PRODUCT, NORMALIZATION, NONLINEAR)

Leaf = Any  # np.ndarray | Variable


@dataclass
class LinearLayerParams:
    weight: Leaf  # (q_out, p_in, n+1)
    bias: Leaf  # (q_out,), scalar blade only


@dataclass
class GeomProductLayerParams:
    pre_linear: LinearLayerParams
    mix: Leaf  # (q_out, p_in, n+1, n+1, n+1) or (p, n+1, n+1, n+1)
    fully_connected: bool = True


@dataclass
class NormLayerParams:
    phi: Leaf  # (channels, n+1)


@dataclass
class NonlinearLayerParams:
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int


@dataclass(frozen=True)
class CliffordMLPSpec:
    in_width: int
    layers: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        width = self.in_width
        if width < 1:
            raise ShapeError(f"input width must be positive, got {width}")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.width < 1:
                raise ShapeError(f"layer {i}: width must be positive")
            if layer.kind in (GEOM_PRODUCT, NORMALIZATION, NONLINEAR) and layer.width != width:
                raise ShapeError(f"layer {i}: {layer.kind} keeps width {width}, got {layer.width}")
            width = layer.width

    @property
    def out_width(self) -> int:
        return self.layers[-1].width if self.layers else self.in_width

    @classmethod
    def default(cls, in_width: int, hidden: int, out_width: int, *, repeats: int = 2,
                fully_connected: bool = True) -> CliffordMLPSpec:
        product = FC_GEOM_PRODUCT if fully_connected else GEOM_PRODUCT
        block = (
            LayerSpec(LINEAR, hidden),
            LayerSpec(product, hidden),
            LayerSpec(NORMALIZATION, hidden),
            LayerSpec(NONLINEAR, hidden),
        )
        return cls(in_width, block * repeats + (LayerSpec(LINEAR, out_width),))

    @classmethod
    def readout(cls, in_width: int, hidden: int, out_width: int, *,
                fully_connected: bool = True) -> CliffordMLPSpec:
        """linear -> geometric product -> linear.

        No gate follows the product, so grade-0 outputs see the inner products
        of the vector (and higher-grade) channels directly.
        """
        product = FC_GEOM_PRODUCT if fully_connected else GEOM_PRODUCT
        return cls(in_width, (LayerSpec(LINEAR, hidden), LayerSpec(product, hidden), LayerSpec(LINEAR, out_width)))


@dataclass
class CliffordMLPParams:
    layers: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameter tree helpers


def _is_leaf(v) -> bool:
    return isinstance(v, (np.ndarray, Variable))


def iter_params(tree, prefix: str = "") -> Iterator[tuple[str, Leaf]]:
    """Yield (dotted name, leaf) pairs in serialization order."""
    if _is_leaf(tree):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            yield from iter_params(getattr(tree, f.name), _join(prefix, f.name))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from iter_params(item, _join(prefix, str(i)))
    elif isinstance(tree, dict):
        for key in tree:
            yield from iter_params(tree[key], _join(prefix, str(key)))


def map_params(tree, fn: Callable[[str, Leaf], Leaf], prefix: str = ""):
    """Rebuild the tree with every leaf replaced by fn(name, leaf)."""
    if _is_leaf(tree):
        return fn(prefix, tree)
    if dataclasses.is_dataclass(tree):
        changes = {f.name: map_params(getattr(tree, f.name), fn, _join(prefix, f.name))
                   for f in dataclasses.fields(tree)}
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, list):
        return [map_params(item, fn, _join(prefix, str(i))) for i, item in enumerate(tree)]
    if isinstance(tree, tuple):
        return tuple(map_params(item, fn, _join(prefix, str(i))) for i, item in enumerate(tree))
    if isinstance(tree, dict):
        return {key: map_params(tree[key], fn, _join(prefix, str(key))) for key in tree}
    return tree


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def bind_params(tree, tape: Tape, prefix: str = ""):
    """Register every leaf as a tape parameter; returns the tree of Variables."""
    return map_params(tree, lambda name, leaf: tape.param(name, _raw(leaf)), prefix)


def _raw(leaf: Leaf) -> np.ndarray:
    return leaf.data if isinstance(leaf, Variable) else np.asarray(leaf, dtype=np.float64)


def count_params(tree) -> int:
    return sum(_raw(leaf).size for _, leaf in iter_params(tree))


# ---------------------------------------------------------------------------
# initialisation


def _fan_in_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng: np.random.Generator, p_in: int, q_out: int, n: int) -> LinearLayerParams:
    return LinearLayerParams(
        weight=_fan_in_uniform(rng, p_in, (q_out, p_in, n + 1)),
        bias=np.zeros(q_out),
    )


def init_geom_product(rng: np.random.Generator, p_in: int, q_out: int, n: int, *,
                      fully_connected: bool = True) -> GeomProductLayerParams:
    g1 = n + 1
    if fully_connected:
        mix = _fan_in_uniform(rng, p_in, (q_out, p_in, g1, g1, g1))
    else:
        if q_out != p_in:
            raise ShapeError(f"plain geometric product layer is square, got {p_in} -> {q_out}")
        mix = _fan_in_uniform(rng, p_in, (p_in, g1, g1, g1))
    return GeomProductLayerParams(
        pre_linear=init_linear(rng, p_in, p_in, n),
        mix=mix,
        fully_connected=fully_connected,
    )


def init_normalization(channels: int, n: int) -> NormLayerParams:
    # sigmoid(0) = 0.5, a mild start
    return NormLayerParams(phi=np.zeros((channels, n + 1)))


def init_clifford_mlp(rng: np.random.Generator, spec: CliffordMLPSpec, n: int) -> CliffordMLPParams:
    layers = []
    width = spec.in_width
    for layer in spec.layers:
        if layer.kind == LINEAR:
            layers.append(init_linear(rng, width, layer.width, n))
        elif layer.kind in (GEOM_PRODUCT, FC_GEOM_PRODUCT):
            layers.append(init_geom_product(rng, width, layer.width, n,
                                            fully_connected=layer.kind == FC_GEOM_PRODUCT))
        elif layer.kind == NORMALIZATION:
            layers.append(init_normalization(width, n))
        else:
            layers.append(NonlinearLayerParams())
        width = layer.width
    return CliffordMLPParams(layers=layers)


# ---------------------------------------------------------------------------
# forwards


def linear_forward(x: MvTensor, p: LinearLayerParams) -> MvTensor:
    weight = as_variable(p.weight)
    if weight.shape[1] != x.channels:
        raise ShapeError(f"linear layer expects {weight.shape[1]} channels, got {x.channels}")
    return mv_linear(x, weight, p.bias)


def geom_product_forward(x: MvTensor, p: GeomProductLayerParams, fully_connected: bool | None = None) -> MvTensor:
    fc = p.fully_connected if fully_connected is None else fully_connected
    z = linear_forward(x, p.pre_linear)
    return mv_weighted_product(x, z, p.mix, fully_connected=fc)


def normalization_forward(x: MvTensor, p: NormLayerParams) -> MvTensor:
    """x^(m) / (sigmoid(phi_m) (q(x^(m)) - 1) + 1); denominator >= 1 - sigmoid(phi_m) > 0."""
    gate = sigmoid(as_variable(p.phi))
    denom = add(mul(gate, sub(mv_grade_q(x), 1.0)), 1.0)
    return mv_grade_scale(x, div(1.0, denom))


def nonlinear_forward(x: MvTensor) -> MvTensor:
    """ReLU(x^(0)) and sigmoid(q(x^(m))) x^(m) for m >= 1."""
    grades = x.dim + 1
    gates = sigmoid(mv_grade_q(x))
    # x0 * 1[x0 > 0] is ReLU(x0) with the zero subgradient at 0
    step = Variable((x.data[..., :1] > 0).astype(np.float64))
    scale = concat([step, take(gates, np.arange(1, grades), axis=2)], axis=2)
    return mv_grade_scale(x, scale)


def layer_forward(x: MvTensor, kind: str, p) -> MvTensor:
    if kind == LINEAR:
        return linear_forward(x, p)
    if kind == GEOM_PRODUCT:
        return geom_product_forward(x, p, fully_connected=False)
    if kind == FC_GEOM_PRODUCT:
        return geom_product_forward(x, p, fully_connected=True)
    if kind == NORMALIZATION:
        return normalization_forward(x, p)
    if kind == NONLINEAR:
        return nonlinear_forward(x)
    raise ShapeError(f"unknown layer kind {kind!r}")


def clifford_mlp_forward(x: MvTensor, spec: CliffordMLPSpec, params: CliffordMLPParams) -> MvTensor:
    if x.channels != spec.in_width:
        raise ShapeError(f"network expects {spec.in_width} channels, got {x.channels}")
    if len(params.layers) != len(spec.layers):
        raise ShapeError(f"{len(spec.layers)} layers specified, {len(params.layers)} parameter sets given")
    for layer, p in zip(spec.layers, params.layers):
        x = layer_forward(x, layer.kind, p)
    return x
