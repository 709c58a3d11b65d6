"""Executable property suites behind ``main.py check``.

Each suite runs a number of seeded trials and returns a ``CheckReport`` with
the worst error seen. Trials draw from ``default_rng([seed, trial])`` so the
outcome does not depend on how many worker threads run them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from services.autodiff import MvTensor, Tape, Variable, backward, mul, sum_all
from services.cgegnn import ModelConfig
from services.clifford_core import Multivector, build_cayley_table, geometric_product, random_orthogonal
from services.equivariant_layers import (
    FC_GEOM_PRODUCT,
    GEOM_PRODUCT,
    LINEAR,
    NONLINEAR,
    NORMALIZATION,
    CliffordMLPSpec,
    LayerSpec,
    clifford_mlp_forward,
    init_clifford_mlp,
)
from services.errors import PropertyViolation
from services.geograph import (
    as_point_set,
    hausdorff_distance,
    lattice_points,
    random_geometric_graph,
    snap_to_lattice,
    universality_bump,
    universality_phi_m,
    universality_tau,
)
from services.training import build_model, flatten_params, mse_loss, unflatten_params

logger = logging.getLogger(__name__)

SCALAR_INVARIANCE_TOL = 1e-8
GNN_COUNTEREXAMPLE = 1e-3
GNN_ATTEMPTS = 20
FD_STEP = 1e-5
# below this magnitude both gradients are compared in absolute terms
FD_FLOOR = 1e-7


@dataclass
class CheckReport:
    kind: str
    trials: int
    tol: float
    worst: float
    passed: bool
    details: dict = field(default_factory=dict)

    def summary_line(self) -> str:
        extra = " ".join(f"{k}={v}" for k, v in self.details.items())
        status = "PASS" if self.passed else "FAIL"
        line = f"check kind={self.kind} status={status} trials={self.trials} worst={self.worst:.3e} tol={self.tol:g}"
        return f"{line} {extra}".rstrip()

    def raise_on_failure(self) -> None:
        if not self.passed:
            raise PropertyViolation(self.summary_line())


def _run_trials(fn: Callable[[int], float], trials: int, threads: int) -> list[float]:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fn, range(trials)))


# ---------------------------------------------------------------------------
# algebra


def reduce_word(word) -> tuple[int, tuple[int, ...]]:
    """Normal form of a product of generators e_{w0} e_{w1} ... in the tensor algebra
    modulo v v = q(v): bubble sort with a sign flip per swap, contracting equal
    neighbours to +1."""
    word = list(word)
    sign = 1
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(word) - 1:
            if word[i] == word[i + 1]:
                del word[i:i + 2]
                changed = True
            elif word[i] > word[i + 1]:
                word[i], word[i + 1] = word[i + 1], word[i]
                sign = -sign
                changed = True
                i += 1
            else:
                i += 1
    return sign, tuple(word)


def _blade_word(bits: int) -> list[int]:
    return [i for i in range(bits.bit_length()) if bits >> i & 1]


def oracle_product(a: Multivector, b: Multivector) -> Multivector:
    """Geometric product by reducing every pair of blade words."""
    size = 1 << a.dim
    out = np.zeros(size)
    for i in range(size):
        if a.coeffs[i] == 0.0:
            continue
        for j in range(size):
            if b.coeffs[j] == 0.0:
                continue
            sign, word = reduce_word(_blade_word(i) + _blade_word(j))
            out[sum(1 << g for g in word)] += sign * a.coeffs[i] * b.coeffs[j]
    return Multivector(a.dim, out)


def check_algebra(trials: int = 1000, tol: float = 1e-12, *, seed: int = 0, dims=(1, 2, 3, 4),
                  threads: int = 1) -> CheckReport:
    """Cayley-table product against the word-reduction oracle."""

    def trial(index: int) -> float:
        rng = np.random.default_rng([seed, index])
        worst = 0.0
        for n in dims:
            a = Multivector(n, rng.standard_normal(1 << n))
            b = Multivector(n, rng.standard_normal(1 << n))
            diff = geometric_product(a, b).coeffs - oracle_product(a, b).coeffs
            worst = max(worst, float(np.max(np.abs(diff))))
        return worst

    errors = _run_trials(trial, trials, threads)
    worst = max(errors, default=0.0)

    # table-level associativity, exhaustive for small n
    assoc = 0
    for n in dims:
        t = build_cayley_table(n)
        r, s = t.result, t.sign
        rows = np.arange(t.size)[:, None, None]
        left = s[:, :, None] * s[r]
        right = s[None, :, :] * s[rows, r[None, :, :]]
        assoc += int(np.count_nonzero(left != right))
    return CheckReport("algebra", trials, tol, worst, worst <= tol and assoc == 0,
                       {"associativity_failures": assoc})


# ---------------------------------------------------------------------------
# equivariance


def _random_model_config(rng: np.random.Generator, kind: str, head: str) -> ModelConfig:
    orders = tuple(d for d in (1, 2, 3) if rng.random() < 0.5) or (1,)
    return ModelConfig(
        model=kind,
        n=3,
        nf=3,
        hidden=3,
        mlp_repeats=1,
        layers=int(rng.integers(1, 3)),
        orders=orders,
        k=int(rng.integers(1, 3)),
        vector_features=int(rng.integers(0, 2)),
        scalar_features=int(rng.integers(0, 2)),
        edge_dim=int(rng.integers(0, 2)),
        head=head,
    )


def _random_graph(rng: np.random.Generator, cfg: ModelConfig, max_nodes: int = 8):
    return random_geometric_graph(
        rng,
        int(rng.integers(2, max_nodes + 1)),
        cfg.n,
        edge_prob=0.6,
        vector_features=cfg.vector_features,
        scalar_features=cfg.scalar_features,
        edge_dim=cfg.edge_dim,
    )


def equivariance_error(model, params, graph, q: np.ndarray, g: np.ndarray) -> float:
    """Vector head: |f(Qx+g) - (Q f(x) + g)| / (1 + |Q f(x) + g|); scalar head: |f(Qx+g) - f(x)| / (1 + |f(x)|)."""
    out = model.predict([graph], params)
    moved = model.predict([graph.transformed(q, g)], params)
    if model.cfg.head == "vector":
        expected = out @ q.T + g
    else:
        expected = out
    return float(np.linalg.norm(moved - expected) / (1.0 + np.linalg.norm(expected)))


def check_equivariance(trials: int = 100, tol: float = 1e-6, *, seed: int = 0, threads: int = 1,
                       restored=None) -> CheckReport:
    """E(n) suite over random models and graphs; the GNN baseline must fail it.

    restored: optional (model, params) from a checkpoint, tested instead of random models.
    """

    def trial_for(kind: str, head: str, suite: int):
        def trial(index: int) -> float:
            rng = np.random.default_rng([seed, suite, index])
            if restored is not None:
                model, params = restored
            else:
                model = build_model(_random_model_config(rng, kind, head))
                params = model.init(rng)
            graph = _random_graph(rng, model.cfg)
            q = random_orthogonal(model.cfg.n, rng).matrix
            g = rng.standard_normal(q.shape[0])
            return equivariance_error(model, params, graph, q, g)

        return trial

    details = {}
    passed = True
    worst = 0.0
    suites = [("cgegnn", "vector", tol), ("cgegnn", "scalar", SCALAR_INVARIANCE_TOL),
              ("egnn", "vector", tol), ("egnn", "scalar", SCALAR_INVARIANCE_TOL)]
    if restored is not None:
        cfg = restored[0].cfg
        suites = [(cfg.model, cfg.head, tol if cfg.head == "vector" else SCALAR_INVARIANCE_TOL)]
    for suite, (kind, head, limit) in enumerate(suites):
        err = max(_run_trials(trial_for(kind, head, suite), trials, threads), default=0.0)
        details[f"{kind}_{head}"] = f"{err:.3e}"
        passed = passed and err <= limit
        worst = max(worst, err)

    if restored is None:
        gnn = gnn_counterexample(seed=seed)
        details["gnn_counterexample"] = f"{gnn:.3e}"
        passed = passed and gnn > GNN_COUNTEREXAMPLE
    return CheckReport("equivariance", trials, tol, worst, passed, details)


def gnn_counterexample(*, seed: int = 0, attempts: int = GNN_ATTEMPTS) -> float:
    """Largest rotation error of the plain GNN over a few random rotations."""
    rng = np.random.default_rng([seed, 7])
    cfg = ModelConfig(model="gnn", n=3, nf=8, layers=2, head="vector")
    model = build_model(cfg)
    params = model.init(rng)
    graph = random_geometric_graph(rng, 5, 3, edge_prob=1.0)
    found = 0.0
    for _ in range(attempts):
        q = random_orthogonal(3, rng).matrix
        out = model.predict([graph], params)
        moved = model.predict([graph.transformed(q)], params)
        found = max(found, float(np.linalg.norm(moved - out @ q.T)))
        if found > GNN_COUNTEREXAMPLE:
            break
    return found


# ---------------------------------------------------------------------------
# gradients


def gradcheck(loss_fn: Callable[[dict[str, Variable]], Variable], values: dict[str, np.ndarray],
              rng: np.random.Generator, *, samples: int = 50, mv_names=(), h: float = FD_STEP) -> float:
    """Worst relative error between tape gradients and central differences."""
    tape = Tape()
    bound = {k: tape.param(k, v, mv=k in mv_names) for k, v in values.items()}
    grads = backward(loss_fn(bound))

    def evaluate(name: str, flat_index: int, delta: float) -> float:
        shifted = {}
        for k, v in values.items():
            arr = v.copy()
            if k == name:
                arr.reshape(-1)[flat_index] += delta
            shifted[k] = MvTensor(arr) if k in mv_names else Variable(arr)
        return loss_fn(shifted).item()

    names = [k for k, v in values.items() if v.size]
    sizes = np.array([values[k].size for k in names], dtype=np.float64)
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        idx = int(rng.integers(values[name].size))
        fd = (evaluate(name, idx, h) - evaluate(name, idx, -h)) / (2.0 * h)
        an = float(grads[name].reshape(-1)[idx])
        if max(abs(an), abs(fd)) < FD_FLOOR:
            err = abs(an - fd)
        else:
            err = abs(an - fd) / (abs(an) + 1e-8)
        worst = max(worst, err)
    return worst


def _projection_loss(out: Variable, weights: np.ndarray) -> Variable:
    return sum_all(mul(out, weights))


def layer_gradcheck(kind: str, rng: np.random.Generator, *, n: int = 3, channels: int = 2,
                    samples: int = 50) -> float:
    width = channels if kind != LINEAR else channels + 1
    spec = CliffordMLPSpec(channels, (LayerSpec(kind, width),))
    template = init_clifford_mlp(rng, spec, n)
    if kind == NORMALIZATION:
        template.layers[0].phi = rng.standard_normal(template.layers[0].phi.shape)
    values = flatten_params(template)
    values["input"] = rng.standard_normal((3, channels, 1 << n))
    weights = rng.standard_normal((3, width, 1 << n))

    def loss_fn(bound):
        params = unflatten_params(template, {k: v for k, v in bound.items() if k != "input"})
        return _projection_loss(clifford_mlp_forward(bound["input"], spec, params), weights)

    return gradcheck(loss_fn, values, rng, samples=samples, mv_names=("input",))


def model_gradcheck(kind: str, head: str, rng: np.random.Generator, *, samples: int = 50) -> float:
    cfg = ModelConfig(model=kind, n=3, nf=3, hidden=3, mlp_repeats=1, layers=2, orders=(1, 2), k=1,
                      vector_features=1, scalar_features=1, edge_dim=1, head=head)
    model = build_model(cfg)
    template = model.init(rng)
    batch = model.collate([model.plan(_random_graph(rng, cfg, max_nodes=5)) for _ in range(2)])
    pred = model.forward(batch, template).data
    target = pred + rng.standard_normal(pred.shape)

    def loss_fn(bound):
        return mse_loss(model.forward(batch, unflatten_params(template, bound)), target)

    return gradcheck(loss_fn, flatten_params(template), rng, samples=samples)


def check_grad(trials: int = 50, tol: float = 1e-4, *, seed: int = 0, threads: int = 1) -> CheckReport:
    """Central differences against the tape for every layer kind and every model."""
    cases: dict[str, Callable[[np.random.Generator], float]] = {}
    for kind in (LINEAR, GEOM_PRODUCT, FC_GEOM_PRODUCT, NORMALIZATION, NONLINEAR):
        cases[kind] = lambda rng, kind=kind: layer_gradcheck(kind, rng, samples=trials)
    for kind in ("cgegnn", "egnn", "gnn"):
        for head in ("vector", "scalar"):
            cases[f"{kind}_{head}"] = lambda rng, kind=kind, head=head: model_gradcheck(kind, head, rng, samples=trials)

    names = list(cases)

    def run(i: int) -> float:
        return cases[names[i]](np.random.default_rng([seed, i]))

    errors = _run_trials(run, len(names), threads)
    details = {name: f"{err:.2e}" for name, err in zip(names, errors)}
    worst = max(errors)
    return CheckReport("grad", trials, tol, worst, worst <= tol, details)


# ---------------------------------------------------------------------------
# universality


def random_point_set(rng: np.random.Generator, resolution: int, m: int, d: int) -> np.ndarray:
    """m points in [0, 1]^d, each strictly inside its own lattice cell when K^d >= m."""
    cells = lattice_points(resolution, d)
    replace = cells.shape[0] < m
    picked = cells[rng.choice(cells.shape[0], size=m, replace=replace)]
    half = 0.5 / resolution
    return picked + rng.uniform(-half, half, size=picked.shape) * (1.0 - 1e-9)


def universality_trial(rng: np.random.Generator, resolution: int, m: int, d: int) -> dict:
    points = random_point_set(rng, resolution, m, d)
    snapped = snap_to_lattice(points, resolution)
    expected = as_point_set(snapped)
    lattice = lattice_points(resolution, d)
    pooled = sum(universality_phi_m(z, resolution) for z in points)
    coverage = all(
        (sum(universality_bump(c, resolution, z) for z in points) > 0) == (tuple(c) in set(expected))
        for c in (tuple(float(v) for v in row) for row in lattice)
    )
    recovery = universality_tau(pooled, resolution, d) == expected
    return {
        "coverage": coverage,
        "recovery": recovery,
        "hausdorff": hausdorff_distance(points, snapped),
    }


def check_universality(trials: int = 100, *, resolutions=(2, 3, 4), sizes=(2, 3), dims=(1, 2), seed: int = 0,
                       threads: int = 1) -> CheckReport:
    """Lattice pooling recovers the snapped point set exactly; d_H(G, snapped G) <= 1/(2K)."""
    cases = [(k, m, d) for k in resolutions for m in sizes for d in dims]
    failures = {"coverage": 0, "recovery": 0, "hausdorff": 0}
    worst_ratio = 0.0

    def run(i: int):
        rng = np.random.default_rng([seed, i])
        out = []
        for k, m, d in cases:
            res = universality_trial(rng, k, m, d)
            res["bound"] = 0.5 / k
            out.append(res)
        return out

    for results in _run_trials(run, trials, threads):
        for res in results:
            failures["coverage"] += int(not res["coverage"])
            failures["recovery"] += int(not res["recovery"])
            failures["hausdorff"] += int(res["hausdorff"] > res["bound"])
            worst_ratio = max(worst_ratio, res["hausdorff"] / res["bound"])
    passed = not any(failures.values())
    return CheckReport("universality", trials, 0.0, float(sum(failures.values())), passed,
                       {**failures, "max_hausdorff_ratio": f"{worst_ratio:.3f}", "cases": len(cases)})
