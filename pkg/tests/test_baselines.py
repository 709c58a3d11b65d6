import numpy as np
import pytest

from services.autodiff import Tape, Variable, backward, square, sum_all
from services.baselines import (
    EgnnModel,
    GnnModel,
    collate_pairs,
    egnn_forward,
    init_mlp,
    mlp_forward,
    plan_pairs,
)
from services.cgegnn import ModelConfig
from services.checks import equivariance_error, gnn_counterexample, model_gradcheck
from services.clifford_core import random_orthogonal
from services.errors import ShapeError
from services.geograph import GeometricGraph, random_geometric_graph

SMALL = dict(nf=4, hidden=6, layers=2)


def test_mlp_shapes_and_zero_weights(rng):
    p = init_mlp(rng, 3, 5, 2)
    assert [w.shape for w in p.weights] == [(3, 5), (5, 5), (5, 2)]
    x = Variable(rng.standard_normal((4, 3)))
    assert mlp_forward(x, p).shape == (4, 2)
    p.weights = [np.zeros_like(w) for w in p.weights]
    p.biases[-1] = np.array([1.5, -2.0])
    assert np.array_equal(mlp_forward(x, p).data, np.tile([1.5, -2.0], (4, 1)))
    with pytest.raises(ShapeError):
        mlp_forward(Variable(np.ones((2, 4))), p)


def test_pair_plans(rng):
    g = GeometricGraph(rng.standard_normal((3, 3)), np.zeros((3, 0, 3)), np.zeros((3, 0)),
                       edges=((0, 1),), edge_attrs=np.array([2.5]))
    cfg = ModelConfig(model="egnn", edge_dim=1)
    full = plan_pairs(g, cfg, all_pairs=True)
    assert full.src.shape == (6,)
    assert full.neighbor.sum() == 2.0
    attrs = {(int(i), int(j)): float(a) for i, j, a in zip(full.src, full.dst, full.edge_attrs[:, 0])}
    assert attrs[(1, 0)] == 2.5
    assert attrs[(0, 2)] == 0.0
    local = plan_pairs(g, cfg, all_pairs=False)
    assert list(zip(local.src, local.dst)) == [(0, 1), (1, 0)]


def test_pair_norm_per_graph(rng):
    cfg = ModelConfig(model="egnn")
    graphs = [random_geometric_graph(rng, m, 3) for m in (2, 5)]
    batch = collate_pairs([plan_pairs(g, cfg, all_pairs=True) for g in graphs])
    assert np.allclose(batch.pair_norm[:2, 0], 1.0)
    assert np.allclose(batch.pair_norm[2:, 0], 0.25)
    assert batch.src.max() == 6


@pytest.mark.parametrize("head", ["vector", "scalar"])
def test_egnn_is_e3_equivariant(rng, head):
    tol = 1e-6 if head == "vector" else 1e-8
    for _ in range(10):
        cfg = ModelConfig(model="egnn", vector_features=1, scalar_features=1, edge_dim=1, head=head, **SMALL)
        model = EgnnModel(cfg)
        params = model.init(rng)
        g = random_geometric_graph(rng, int(rng.integers(2, 8)), 3, edge_prob=0.5, vector_features=1,
                                   scalar_features=1, edge_dim=1)
        q = random_orthogonal(3, rng).matrix
        assert equivariance_error(model, params, g, q, rng.standard_normal(3)) <= tol


def test_egnn_coincident_pair_does_not_move(rng):
    cfg = ModelConfig(model="egnn", layers=1, nf=4)
    model = EgnnModel(cfg)
    params = model.init(rng)
    g = GeometricGraph.complete(np.ones((2, 3)))
    assert np.allclose(model.predict([g], params), np.ones((2, 3)), atol=0)


def test_egnn_needs_two_nodes(rng):
    cfg = ModelConfig(model="egnn")
    model = EgnnModel(cfg)
    params = model.init(rng)
    batch = model.collate([model.plan(GeometricGraph.complete(np.zeros((1, 3))))])
    with pytest.raises(ShapeError):
        egnn_forward(batch, cfg, params)


def test_egnn_permutation_equivariant(rng):
    cfg = ModelConfig(model="egnn", **SMALL)
    model = EgnnModel(cfg)
    params = model.init(rng)
    g = random_geometric_graph(rng, 6, 3, edge_prob=0.5)
    perm = rng.permutation(6)
    assert np.allclose(model.predict([g.permuted(perm)], params), model.predict([g], params)[perm], atol=1e-12)


def test_gnn_permutation_equivariant(rng):
    cfg = ModelConfig(model="gnn", scalar_features=2, **SMALL)
    model = GnnModel(cfg)
    params = model.init(rng)
    g = random_geometric_graph(rng, 6, 3, edge_prob=0.5, scalar_features=2)
    perm = rng.permutation(6)
    assert np.allclose(model.predict([g.permuted(perm)], params), model.predict([g], params)[perm], atol=1e-12)


def test_gnn_zero_weights_is_constant(rng):
    cfg = ModelConfig(model="gnn", head="scalar", pool="none", **SMALL)
    model = GnnModel(cfg)
    params = model.init(rng)
    params.head.weights = [np.zeros_like(w) for w in params.head.weights]
    params.head.biases[-1] = np.array([0.7])
    out = model.predict([random_geometric_graph(rng, 5, 3)], params)
    assert np.array_equal(out, np.full(5, 0.7))


def test_gnn_is_not_rotation_equivariant():
    assert gnn_counterexample(seed=3) > 1e-3


def test_scalar_heads_pool_per_graph(rng):
    for kind, cls in (("gnn", GnnModel), ("egnn", EgnnModel)):
        cfg = ModelConfig(model=kind, head="scalar", **SMALL)
        model = cls(cfg)
        params = model.init(rng)
        graphs = [random_geometric_graph(rng, m, 3, edge_prob=0.5) for m in (3, 4)]
        joint = model.predict(graphs, params)
        assert joint.shape == (2,)
        assert np.allclose(joint, [model.predict([g], params)[0] for g in graphs], atol=1e-12)


@pytest.mark.parametrize("kind", ["gnn", "egnn"])
@pytest.mark.parametrize("head", ["vector", "scalar"])
def test_gradients_match_finite_differences(rng, kind, head):
    assert model_gradcheck(kind, head, rng, samples=30) <= 1e-4


@pytest.mark.parametrize("head", ["vector", "scalar"])
def test_every_egnn_parameter_reaches_the_output(rng, head):
    cfg = ModelConfig(model="egnn", vector_features=1, scalar_features=1, edge_dim=1, head=head, **SMALL)
    model = EgnnModel(cfg)
    params = model.init(rng)
    assert (params.head is None) == (head == "vector")
    assert (params.layers[-1].update is None) == (head == "vector")
    assert (params.layers[-1].coord is None) == (head == "scalar")
    graphs = [random_geometric_graph(rng, m, 3, edge_prob=0.5, vector_features=1, scalar_features=1, edge_dim=1)
              for m in (4, 5)]
    tape = Tape()
    out = model.forward(model.collate([model.plan(g) for g in graphs]), model.bind(params, tape))
    grads = backward(sum_all(square(out)))
    assert grads
    assert [name for name, g in grads.items() if not g.any()] == []


def test_egnn_without_vector_features_has_no_velocity_nets(rng):
    params = EgnnModel(ModelConfig(model="egnn", **SMALL)).init(rng)
    assert all(layer.velocity is None for layer in params.layers)
