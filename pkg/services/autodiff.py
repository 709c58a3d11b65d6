"""Tape-based reverse-mode differentiation over numpy arrays.

A ``Tape`` records every operation whose inputs are tracked. Nodes are
appended in evaluation order, so the insertion order is a topological order
and the backward pass simply walks the list in reverse.

``Variable`` wraps any float64 array; ``MvTensor`` is a Variable of shape
(batch, channels, 2^n) holding multivector channels. The ``mv_*`` functions
are the multivector-aware operations used by the Clifford layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from services.clifford_core import CayleyTable, build_cayley_table
from services.errors import GradeError, ShapeError, TapeError

Vjp = Callable[[np.ndarray], np.ndarray]


@dataclass
class _Node:
    kind: str
    parents: tuple[int, ...]
    vjps: tuple[Vjp, ...]
    shape: tuple[int, ...]
    name: str | None = None


@dataclass(eq=False)
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, name: str, value: np.ndarray, *, mv: bool = False) -> Variable:
        """Register a leaf that gradients are reported for."""
        if name in self.params:
            raise TapeError(f"parameter {name!r} already on tape")
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("param", (), (), value.shape, name))
        node = len(self.nodes) - 1
        self.params[name] = node
        cls = MvTensor if mv else Variable
        return cls(value, self, node)

    def record(self, kind: str, shape: tuple[int, ...], parents: Sequence[tuple[int, Vjp]]) -> int:
        self.nodes.append(
            _Node(kind, tuple(p for p, _ in parents), tuple(v for _, v in parents), tuple(shape))
        )
        return len(self.nodes) - 1

    def gradients(self, loss: Variable) -> dict[int, np.ndarray]:
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a single real value, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if parent in grads:
                    grads[parent] = grads[parent] + contrib
                else:
                    grads[parent] = contrib
        return grads


@dataclass(eq=False)
class Variable:
    data: np.ndarray
    tape: Tape | None = None
    node: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class MvTensor(Variable):
    """Batch of multivector channels, data shape (B, C, 2^n)."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.ndim != 3:
            raise ShapeError(f"MvTensor needs (batch, channels, 2^n) data, got {self.data.shape}")
        blades = self.data.shape[-1]
        if blades < 2 or blades & (blades - 1):
            raise ShapeError(f"last axis must be 2^n with n >= 1, got {blades}")

    @property
    def dim(self) -> int:
        return self.data.shape[-1].bit_length() - 1

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def table(self) -> CayleyTable:
        return build_cayley_table(self.dim)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x, dtype=np.float64))


def constant_mv(data: np.ndarray) -> MvTensor:
    return MvTensor(np.asarray(data, dtype=np.float64))


def _common_tape(vars_: Iterable[Variable]) -> Tape | None:
    tape = None
    for v in vars_:
        if v.tape is None or v.node is None:
            continue
        if tape is None:
            tape = v.tape
        elif v.tape is not tape:
            raise TapeError("operands belong to different tapes")
    return tape


def _result(kind: str, value: np.ndarray, parents: Sequence[tuple[Variable, Vjp]], cls=Variable) -> Variable:
    tape = _common_tape(p for p, _ in parents)
    if tape is None:
        return cls(value)
    tracked = [(p.node, vjp) for p, vjp in parents if p.node is not None]
    node = tape.record(kind, value.shape, tracked)
    return cls(value, tape, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _same_class(*vars_: Variable):
    return MvTensor if all(isinstance(v, MvTensor) for v in vars_) else Variable


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    out = a.data + b.data
    return _result(
        "add",
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        _result_cls(out, a, b),
    )


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    out = a.data - b.data
    return _result(
        "sub",
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))],
        _result_cls(out, a, b),
    )


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    out = a.data * b.data
    return _result(
        "mul",
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
        _result_cls(out, a, b),
    )


def div(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    out = a.data / b.data
    return _result(
        "div",
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ],
        _result_cls(out, a, b),
    )


def neg(a: Variable) -> Variable:
    return scale(a, -1.0)


def scale(a: Variable, c: float) -> Variable:
    c = float(c)
    return _result("scale", a.data * c, [(a, lambda g: g * c)], type(a))


def _result_cls(out: np.ndarray, *vars_: Variable):
    for v in vars_:
        if isinstance(v, MvTensor) and v.shape == out.shape:
            return MvTensor
    return Variable


def square(a: Variable) -> Variable:
    return _result("square", a.data * a.data, [(a, lambda g: 2.0 * g * a.data)], type(a))


def relu(a: Variable) -> Variable:
    # subgradient at 0 is 0
    mask = (a.data > 0).astype(np.float64)
    return _result("relu", a.data * mask, [(a, lambda g: g * mask)], type(a))


def sigmoid(a: Variable) -> Variable:
    s = _sigmoid(a.data)
    return _result("sigmoid", s, [(a, lambda g: g * s * (1.0 - s))], type(a))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def scalar_nonlin(x: Variable, kind: str) -> Variable:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def sum_all(a: Variable) -> Variable:
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum()), [(a, lambda g: np.broadcast_to(g, shape).copy())])


def mean_all(a: Variable) -> Variable:
    return scale(sum_all(a), 1.0 / max(a.data.size, 1))


def reshape(a: Variable, shape: tuple[int, ...]) -> Variable:
    old = a.shape
    out = a.data.reshape(shape)
    cls = MvTensor if out.ndim == 3 and isinstance(a, MvTensor) else Variable
    return _result("reshape", out, [(a, lambda g: g.reshape(old))], cls)


def matmul(a: Variable, w: Variable) -> Variable:
    """(B, I) @ (I, O)."""
    a, w = as_variable(a), as_variable(w)
    if a.data.ndim != 2 or w.data.ndim != 2 or a.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {w.shape}")
    return _result(
        "matmul",
        a.data @ w.data,
        [(a, lambda g: g @ w.data.T), (w, lambda g: a.data.T @ g)],
    )


def concat(vars_: Sequence[Variable], axis: int) -> Variable:
    vars_ = [as_variable(v) for v in vars_]
    if not vars_:
        raise ShapeError("nothing to concatenate")
    out = np.concatenate([v.data for v in vars_], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vars_])
    parents = []
    for v, lo, hi in zip(vars_, bounds[:-1], bounds[1:]):
        def vjp(g, lo=lo, hi=hi):
            return np.take(g, np.arange(lo, hi), axis=axis)

        parents.append((v, vjp))
    return _result("concat", out, parents, _same_class(*vars_) if out.ndim == 3 else Variable)


def _scatter_rows(values: np.ndarray, idx: np.ndarray, num: int) -> np.ndarray:
    """out[s] = sum of values[r] over rows r with idx[r] == s.

    Rows are grouped with a stable sort and reduced segment by segment, so the
    result does not depend on anything but (values, idx).
    """
    out = np.zeros((num,) + values.shape[1:])
    if idx.shape[0] == 0:
        return out
    order = np.argsort(idx, kind="stable")
    ordered = idx[order]
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]])
    out[ordered[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def take(a: Variable, idx: Sequence[int] | np.ndarray, axis: int) -> Variable:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        summed = _scatter_rows(np.moveaxis(g, axis, 0), idx, shape[axis])
        return np.moveaxis(summed, 0, axis)

    out = np.take(a.data, idx, axis=axis)
    cls = MvTensor if isinstance(a, MvTensor) and out.ndim == 3 and axis % 3 != 2 else Variable
    return _result("take", out, [(a, vjp)], cls)


def gather_rows(a: Variable, idx: np.ndarray) -> Variable:
    """a[idx] along the batch axis."""
    return take(a, idx, axis=0)


def segment_sum(a: Variable, segments: np.ndarray, num_segments: int) -> Variable:
    """out[s] = sum of rows of a whose segment id is s; empty segments are zero."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeError(f"{segments.shape[0]} segment ids for {a.shape[0]} rows")
    out = _scatter_rows(a.data, segments, num_segments)
    return _result("segment_sum", out, [(a, lambda g: g[segments])], type(a))


# ---------------------------------------------------------------------------
# multivector ops


@lru_cache(maxsize=None)
def _pair_scatter(n: int) -> np.ndarray:
    """(2^n * 2^n) x 2^n one-hot map from blade pair (i, j) to i XOR j."""
    t = build_cayley_table(n)
    s = np.zeros((t.size * t.size, t.size))
    s[np.arange(t.size * t.size), t.result.ravel()] = 1.0
    s.setflags(write=False)
    return s


@lru_cache(maxsize=None)
def _xor_layout(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Blade pairs grouped by the blade they multiply onto.

    The pair (i, i XOR k) is the only one with blade i on the left that lands
    on blade k. Returns, all indexed [i, k]: the partner blade i XOR k, the
    product sign, the flat index of the grade triple (|i|, |i XOR k|, |k|) in an
    (n+1)^3 cube, and the one-hot (4^n, (n+1)^3) of that triple index.
    """
    t = build_cayley_table(n)
    g1 = t.dim + 1
    blades = np.arange(t.size)
    partner = blades[:, None] ^ blades[None, :]
    sign = t.sign[blades[:, None], partner].astype(np.float64)
    triple = (t.grades[:, None] * g1 + t.grades[partner]) * g1 + t.grades[None, :]
    onehot = np.zeros((t.size * t.size, g1 ** 3))
    onehot[np.arange(t.size * t.size), triple.ravel()] = 1.0
    for arr in (partner, sign, triple, onehot):
        arr.setflags(write=False)
    return partner, sign, triple, onehot


def _check_mv(*xs: Variable) -> None:
    for x in xs:
        if not isinstance(x, MvTensor):
            raise ShapeError(f"expected MvTensor, got {type(x).__name__}")


def _check_same(a: MvTensor, b: MvTensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _check_broadcast(a: MvTensor, b: Variable) -> None:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    if shape != a.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def mv_add(a: MvTensor, b) -> MvTensor:
    _check_mv(a)
    b = as_variable(b)
    _check_broadcast(a, b)
    return add(a, b)


def mv_sub(a: MvTensor, b) -> MvTensor:
    _check_mv(a)
    b = as_variable(b)
    _check_broadcast(a, b)
    return sub(a, b)


def mv_scale(a: MvTensor, b) -> MvTensor:
    """Scale by a real number, or elementwise by a broadcastable tensor."""
    _check_mv(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_variable(b)
    _check_broadcast(a, b)
    return mul(a, b)


def mv_geometric_product(a: MvTensor, b: MvTensor) -> MvTensor:
    """Channelwise geometric product."""
    _check_mv(a, b)
    _check_same(a, b)
    t = a.table
    batch, chans, blades = a.shape
    scatter = _pair_scatter(t.dim)
    pairs = a.data[..., :, None] * b.data[..., None, :] * t.sign
    out = pairs.reshape(batch, chans, blades * blades) @ scatter

    def signed_cotangent(g):
        return g[..., t.result] * t.sign

    return _result(
        "mv_geometric_product",
        out,
        [
            (a, lambda g: np.einsum("bcij,bcj->bci", signed_cotangent(g), b.data)),
            (b, lambda g: np.einsum("bcij,bci->bcj", signed_cotangent(g), a.data)),
        ],
        MvTensor,
    )


def mv_grade_scale(x: MvTensor, w) -> MvTensor:
    """Multiply each grade-k slice of channel c by w[..., c, k]."""
    _check_mv(x)
    w = as_variable(w)
    t = x.table
    if w.shape[-1] != t.dim + 1 or w.shape[-2] != x.channels:
        raise GradeError(f"grade weights of shape {w.shape} do not fit {x.channels} channels x {t.dim + 1} grades")
    wb = w.data[..., t.grades]
    out = x.data * wb
    return _result(
        "mv_grade_scale",
        out,
        [
            (x, lambda g: g * wb),
            (w, lambda g: _unbroadcast(g * x.data, wb.shape) @ t.grade_indicator.T),
        ],
        MvTensor,
    )


def mv_grade_mask(x: MvTensor, m: int) -> MvTensor:
    _check_mv(x)
    t = x.table
    if not 0 <= m <= t.dim:
        raise GradeError(f"grade {m} outside 0..{t.dim}")
    mask = (t.grades == m).astype(np.float64)
    return _result("mv_grade_mask", x.data * mask, [(x, lambda g: g * mask)], MvTensor)


def mv_grade_q(x: MvTensor) -> Variable:
    """q of every grade slice, shape (B, C, n+1)."""
    _check_mv(x)
    t = x.table
    out = (x.data * x.data) @ t.grade_indicator.T
    return _result("mv_grade_q", out, [(x, lambda g: 2.0 * x.data * g[..., t.grades])])


def mv_linear(x: MvTensor, weight: Variable, bias: Variable | None = None) -> MvTensor:
    """y_o^(k) = sum_c weight[o, c, k] x_c^(k) (+ bias_o on the scalar blade)."""
    _check_mv(x)
    weight = as_variable(weight)
    t = x.table
    if weight.data.ndim != 3 or weight.shape[1] != x.channels or weight.shape[2] != t.dim + 1:
        raise ShapeError(f"linear weight {weight.shape} does not fit input {x.shape}")
    # blade-major stacks: one (B, C) @ (C, O) matmul per blade
    wt = weight.data[:, :, t.grades].transpose(2, 1, 0)
    xt = x.data.transpose(2, 0, 1)
    out = np.ascontiguousarray((xt @ wt).transpose(1, 2, 0))

    def weight_cotangent(g):
        per_blade = xt.transpose(0, 2, 1) @ g.transpose(2, 0, 1)
        return per_blade.transpose(2, 1, 0) @ t.grade_indicator.T

    parents = [
        (x, lambda g: (g.transpose(2, 0, 1) @ wt.transpose(0, 2, 1)).transpose(1, 2, 0)),
        (weight, weight_cotangent),
    ]
    if bias is not None:
        bias = as_variable(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias {bias.shape} does not fit {weight.shape[0]} outputs")
        out[:, :, 0] += bias.data
        parents.append((bias, lambda g: g[:, :, 0].sum(axis=0)))
    return _result("mv_linear", out, parents, MvTensor)


def mv_weighted_product(x: MvTensor, z: MvTensor, phi: Variable, *, fully_connected: bool = True) -> MvTensor:
    """Grade-weighted geometric products sum_ij phi[.., i, j, k] (x^(i) z^(j))^(k).

    fully_connected: phi has shape (O, C, n+1, n+1, n+1) and output channel o
    sums over all input channels c. Otherwise phi is (C, n+1, n+1, n+1) and
    channels pair up one to one.

    Only the 2^n pairs (i, i XOR k) reach blade k, so the Cayley contraction is
    carried out on terms[b, c, i, k] = x_i z_(i XOR k) instead of all 4^n pairs
    per output blade.
    """
    _check_mv(x, z)
    _check_same(x, z)
    phi = as_variable(phi)
    t = x.table
    g1 = t.dim + 1
    batch, chans, blades = x.shape
    partner, sign, triple, onehot = _xor_layout(t.dim)
    cols = np.broadcast_to(np.arange(blades), partner.shape)
    terms = x.data[..., :, None] * z.data[..., partner]

    if fully_connected:
        if phi.data.ndim != 5 or phi.shape[1] != chans or phi.shape[2:] != (g1, g1, g1):
            raise ShapeError(f"product weights {phi.shape} do not fit input {x.shape}")
        outs = phi.shape[0]
        coupling = phi.data.reshape(outs, chans, g1 ** 3)[:, :, triple] * sign
        # per product blade k: (B, C*2^n) @ (C*2^n, O)
        weights = coupling.transpose(3, 1, 2, 0).reshape(blades, chans * blades, outs)
        stacked = terms.transpose(3, 0, 1, 2).reshape(blades, batch, chans * blades)
        out = np.ascontiguousarray((stacked @ weights).transpose(1, 2, 0))
    else:
        if phi.data.ndim != 4 or phi.shape[0] != chans or phi.shape[1:] != (g1, g1, g1):
            raise ShapeError(f"product weights {phi.shape} do not fit input {x.shape}")
        coupling = phi.data.reshape(chans, g1 ** 3)[:, triple] * sign
        out = (terms * coupling).sum(axis=2)

    def terms_cotangent(g):
        if fully_connected:
            back = g.transpose(2, 0, 1) @ weights.transpose(0, 2, 1)
            return back.reshape(blades, batch, chans, blades).transpose(1, 2, 3, 0)
        return g[:, :, None, :] * coupling

    # x and z share the terms cotangent of one backward step
    shared: list = [None, None]

    def shared_cotangent(g):
        if shared[0] is not g:
            shared[0], shared[1] = g, terms_cotangent(g)
        return shared[1]

    def x_cotangent(g):
        return (shared_cotangent(g) * z.data[..., partner]).sum(axis=3)

    def z_cotangent(g):
        gt = shared_cotangent(g)
        shared[0] = shared[1] = None
        return (gt[..., partner, cols] * x.data[..., partner]).sum(axis=3)

    def phi_cotangent(g):
        if fully_connected:
            per_blade = stacked.transpose(0, 2, 1) @ g.transpose(2, 0, 1)
            gc = per_blade.reshape(blades, chans, blades, outs).transpose(3, 1, 2, 0) * sign
            return (gc.reshape(outs, chans, blades * blades) @ onehot).reshape(phi.shape)
        gc = np.einsum("bcik,bck->cik", terms, g) * sign
        return (gc.reshape(chans, blades * blades) @ onehot).reshape(phi.shape)

    return _result(
        "mv_weighted_product",
        out,
        [(x, x_cotangent), (z, z_cotangent), (phi, phi_cotangent)],
        MvTensor,
    )


def mv_vector_part(x: MvTensor, channel: int = 0) -> Variable:
    """Grade-1 coefficients of one channel as (B, n) real vectors."""
    _check_mv(x)
    t = x.table
    picked = take(take(x, [channel], axis=1), t.vector_blades, axis=2)
    return reshape(picked, (x.batch, t.dim))


def mv_scalar_part(x: MvTensor, channel: int = 0) -> Variable:
    _check_mv(x)
    picked = take(take(x, [channel], axis=1), [0], axis=2)
    return reshape(picked, (x.batch,))


def backward(loss: Variable) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter registered on its tape."""
    if loss.tape is None or loss.node is None:
        raise TapeError("loss does not depend on any tape")
    tape = loss.tape
    grads = tape.gradients(loss)
    out: dict[str, np.ndarray] = {}
    for name, node in tape.params.items():
        g = grads.get(node)
        out[name] = np.zeros(tape.nodes[node].shape) if g is None else np.asarray(g, dtype=np.float64)
    return out
