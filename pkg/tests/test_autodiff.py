import numpy as np
import pytest

from services.autodiff import (
    MvTensor,
    Tape,
    Variable,
    add,
    backward,
    concat,
    constant_mv,
    div,
    gather_rows,
    matmul,
    mean_all,
    mul,
    mv_geometric_product,
    mv_grade_mask,
    mv_grade_q,
    mv_grade_scale,
    mv_linear,
    mv_scalar_part,
    mv_vector_part,
    mv_weighted_product,
    relu,
    scale,
    segment_sum,
    sigmoid,
    square,
    sum_all,
)
from services.checks import gradcheck
from services.clifford_core import Multivector, build_cayley_table, extended_q, geometric_product, grade_project
from services.errors import GradeError, ShapeError, TapeError

TOL = 1e-4


def test_product_rule():
    tape = Tape()
    a = tape.param("a", [1.0, 2.0, 3.0])
    b = tape.param("b", [4.0, -5.0, 6.0])
    grads = backward(sum_all(mul(a, b)))
    assert np.array_equal(grads["a"], [4.0, -5.0, 6.0])
    assert np.array_equal(grads["b"], [1.0, 2.0, 3.0])


def test_shared_subexpression_accumulates():
    tape = Tape()
    x = tape.param("x", [0.5, -2.0])
    y = x * x + x
    grads = backward(sum_all(y))
    assert np.allclose(grads["x"], 2 * np.array([0.5, -2.0]) + 1.0)


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    x = tape.param("x", [1.0, 2.0])
    tape.param("unused", np.ones((2, 3)))
    grads = backward(sum_all(square(x)))
    assert np.array_equal(grads["unused"], np.zeros((2, 3)))


def test_relu_subgradient_at_zero():
    tape = Tape()
    x = tape.param("x", [-1.0, 0.0, 2.0])
    grads = backward(sum_all(relu(x)))
    assert np.array_equal(grads["x"], [0.0, 0.0, 1.0])


def test_sigmoid_is_finite_for_large_inputs():
    out = sigmoid(Variable(np.array([-1000.0, 0.0, 1000.0])))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [0.0, 0.5, 1.0])


def test_broadcast_gradient_is_reduced():
    tape = Tape()
    x = tape.param("x", np.ones((4, 3)))
    b = tape.param("b", np.zeros(3))
    grads = backward(sum_all(x + b))
    assert grads["b"].shape == (3,)
    assert np.array_equal(grads["b"], [4.0, 4.0, 4.0])


def test_loss_must_be_scalar():
    tape = Tape()
    x = tape.param("x", [1.0, 2.0])
    with pytest.raises(TapeError):
        backward(square(x))


def test_untracked_loss_rejected():
    with pytest.raises(TapeError):
        backward(sum_all(Variable(np.ones(3))))


def test_duplicate_parameter_rejected():
    tape = Tape()
    tape.param("w", [1.0])
    with pytest.raises(TapeError):
        tape.param("w", [2.0])


def test_operands_on_different_tapes():
    a = Tape().param("a", [1.0])
    b = Tape().param("b", [1.0])
    with pytest.raises(TapeError):
        mul(a, b)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Variable(np.ones((2, 3))), Variable(np.ones((2, 3))))


def test_mv_tensor_shape_checked():
    with pytest.raises(ShapeError):
        MvTensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        MvTensor(np.ones((2, 3, 6)))


def test_geometric_product_matches_reference(rng):
    a = rng.standard_normal((4, 2, 8))
    b = rng.standard_normal((4, 2, 8))
    out = mv_geometric_product(constant_mv(a), constant_mv(b)).data
    for i in range(4):
        for c in range(2):
            want = geometric_product(Multivector(3, a[i, c]), Multivector(3, b[i, c])).coeffs
            assert np.allclose(out[i, c], want, atol=1e-12)


def test_geometric_product_shape_mismatch():
    with pytest.raises(ShapeError):
        mv_geometric_product(constant_mv(np.ones((1, 2, 8))), constant_mv(np.ones((1, 3, 8))))


def test_grade_q_matches_reference(rng):
    x = rng.standard_normal((2, 3, 8))
    q = mv_grade_q(constant_mv(x)).data
    assert q.shape == (2, 3, 4)
    mv = Multivector(3, x[1, 2])
    assert np.allclose(q[1, 2], [extended_q(mv, m) for m in range(4)])


def test_grade_mask_matches_projection(rng):
    x = rng.standard_normal((1, 1, 8))
    out = mv_grade_mask(constant_mv(x), 2).data[0, 0]
    assert np.allclose(out, grade_project(Multivector(3, x[0, 0]), 2).coeffs)
    with pytest.raises(GradeError):
        mv_grade_mask(constant_mv(x), 4)


def test_grade_scale_rejects_wrong_shape():
    with pytest.raises(GradeError):
        mv_grade_scale(constant_mv(np.ones((1, 2, 8))), np.ones((2, 3)))


def test_linear_bias_only_on_scalar_blade(rng):
    x = constant_mv(np.zeros((2, 3, 8)))
    out = mv_linear(x, rng.standard_normal((4, 3, 4)), np.array([1.0, 2.0, 3.0, 4.0])).data
    assert np.array_equal(out[:, :, 0], np.tile([1.0, 2.0, 3.0, 4.0], (2, 1)))
    assert not out[:, :, 1:].any()


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        mv_linear(constant_mv(np.ones((1, 2, 8))), np.ones((3, 3, 4)))


def test_vector_and_scalar_parts():
    x = np.arange(16, dtype=float).reshape(1, 2, 8)
    assert np.array_equal(mv_vector_part(constant_mv(x)).data, [[1.0, 2.0, 4.0]])
    assert np.array_equal(mv_scalar_part(constant_mv(x), channel=1).data, [8.0])


def test_segment_sum_order_and_rows():
    x = Variable(np.array([[1.0], [2.0], [3.0], [4.0]]))
    out = segment_sum(x, np.array([1, 0, 1, 2]), 4).data
    assert np.array_equal(out[:, 0], [2.0, 4.0, 4.0, 0.0])
    with pytest.raises(ShapeError):
        segment_sum(x, np.array([0, 1]), 2)


# finite-difference agreement ---------------------------------------------------


def test_gradcheck_elementwise(rng):
    values = {"a": rng.standard_normal((3, 4)), "b": rng.uniform(1.0, 2.0, (3, 4))}

    def loss(p):
        return mean_all(sigmoid(div(p["a"], p["b"]) * p["a"]) + square(p["b"]))

    assert gradcheck(loss, values, rng) <= TOL


def test_gradcheck_structural(rng):
    values = {"a": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 2))}
    weights = rng.standard_normal((4, 5))

    def loss(p):
        h = concat([matmul(p["a"], p["w"]), p["a"]], axis=1)
        pooled = segment_sum(h, np.array([0, 1, 1, 3, 0]), 4)
        return sum_all(mul(square(pooled), weights))

    assert gradcheck(loss, values, rng) <= TOL


def test_gradcheck_gather(rng):
    values = {"a": rng.standard_normal((4, 3))}
    weights = rng.standard_normal((5, 3))

    def loss(p):
        return sum_all(mul(square(gather_rows(p["a"], np.array([0, 2, 2, 3, 1]))), weights))

    assert gradcheck(loss, values, rng) <= TOL


def test_gradcheck_geometric_product(rng):
    values = {"x": rng.standard_normal((2, 3, 8)), "z": rng.standard_normal((2, 3, 8))}
    weights = rng.standard_normal((2, 3, 8))

    def loss(p):
        return sum_all(mul(mv_geometric_product(p["x"], p["z"]), weights))

    assert gradcheck(loss, values, rng, mv_names=("x", "z")) <= TOL


@pytest.mark.parametrize("fully_connected", [True, False])
def test_gradcheck_weighted_product(rng, fully_connected):
    shape = (4, 2, 4, 4, 4) if fully_connected else (2, 4, 4, 4)
    values = {
        "x": rng.standard_normal((3, 2, 8)),
        "z": rng.standard_normal((3, 2, 8)),
        "phi": rng.standard_normal(shape),
    }
    outs = 4 if fully_connected else 2
    weights = rng.standard_normal((3, outs, 8))

    def loss(p):
        out = mv_weighted_product(p["x"], p["z"], p["phi"], fully_connected=fully_connected)
        return sum_all(mul(out, weights))

    assert gradcheck(loss, values, rng, samples=80, mv_names=("x", "z")) <= TOL


def test_gradcheck_grade_ops(rng):
    values = {
        "x": rng.standard_normal((2, 3, 8)),
        "w": rng.standard_normal((3, 4)),
        "lin": rng.standard_normal((2, 3, 4)),
        "bias": rng.standard_normal(2),
    }
    weights = rng.standard_normal((2, 2, 8))

    def loss(p):
        scaled = mv_grade_scale(p["x"], p["w"])
        q = sum_all(sigmoid(mv_grade_q(scaled)))
        return q + sum_all(mul(mv_linear(scaled, p["lin"], p["bias"]), weights))

    assert gradcheck(loss, values, rng, samples=60, mv_names=("x",)) <= TOL


def test_weighted_product_single_weight_is_geometric_product(rng):
    # phi = 1 everywhere recovers the plain channelwise product
    x = constant_mv(rng.standard_normal((2, 3, 8)))
    z = constant_mv(rng.standard_normal((2, 3, 8)))
    out = mv_weighted_product(x, z, np.ones((3, 4, 4, 4)), fully_connected=False).data
    assert np.allclose(out, mv_geometric_product(x, z).data, atol=1e-12)


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("fully_connected", [True, False])
def test_weighted_product_matches_blade_pair_sum(rng, n, fully_connected):
    t = build_cayley_table(n)
    g = t.grades
    chans, outs = 3, (2 if fully_connected else 3)
    x = rng.standard_normal((2, chans, t.size))
    z = rng.standard_normal((2, chans, t.size))
    phi = rng.standard_normal((outs, chans, n + 1, n + 1, n + 1) if fully_connected else (chans, n + 1, n + 1, n + 1))
    want = np.zeros((2, outs, t.size))
    for o in range(outs):
        for c in (range(chans) if fully_connected else [o]):
            w = phi[o, c] if fully_connected else phi[c]
            for i in range(t.size):
                for j in range(t.size):
                    k = t.result[i, j]
                    want[:, o, k] += w[g[i], g[j], g[k]] * t.sign[i, j] * x[:, c, i] * z[:, c, j]
    got = mv_weighted_product(constant_mv(x), constant_mv(z), phi, fully_connected=fully_connected).data
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_segment_sum_and_gather_match_unbuffered_add(rng):
    ids = rng.integers(0, 9, size=40)
    ids[ids == 4] = 5  # segment 4 stays empty
    rows = rng.standard_normal((40, 3, 2))
    want = np.zeros((9, 3, 2))
    np.add.at(want, ids, rows)
    assert np.allclose(segment_sum(Variable(rows), ids, 9).data, want, rtol=0, atol=1e-12)

    tape = Tape()
    a = tape.param("a", rng.standard_normal((9, 3, 2)))
    grads = backward(sum_all(mul(gather_rows(a, ids), rows)))
    assert np.allclose(grads["a"], want, rtol=0, atol=1e-12)
    assert not grads["a"][4].any()


# tape properties ----------------------------------------------------------------


def _clifford_loss(rng):
    tape = Tape()
    x = tape.param("x", rng.standard_normal((6, 2, 8)), mv=True)
    phi = tape.param("phi", rng.standard_normal((3, 2, 4, 4, 4)))
    lin = tape.param("lin", rng.standard_normal((2, 2, 4)))
    z = mv_linear(x, lin)
    prod = mv_weighted_product(x, z, phi)
    pooled = segment_sum(prod, np.array([0, 1, 1, 2, 0, 2]), 3)
    first = sum_all(sigmoid(mv_grade_q(pooled)))
    second = sum_all(square(mv_vector_part(pooled)))
    return tape, first, second


def test_backward_twice_is_bitwise_identical(rng):
    _, first, second = _clifford_loss(rng)
    loss = first + second
    a = backward(loss)
    b = backward(loss)
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_gradient_is_linear_in_the_loss(rng):
    _, first, second = _clifford_loss(rng)
    alpha, beta = 0.7, -2.5
    combined = backward(add(scale(first, alpha), scale(second, beta)))
    g1, g2 = backward(first), backward(second)
    for name in combined:
        assert np.allclose(combined[name], alpha * g1[name] + beta * g2[name], rtol=1e-12, atol=1e-12)


def test_gradient_of_q_is_twice_the_multivector(rng):
    tape = Tape()
    value = rng.standard_normal((1, 1, 8))
    x = tape.param("x", value, mv=True)
    grads = backward(sum_all(mv_grade_q(x)))
    assert sum_all(mv_grade_q(constant_mv(value))).item() == pytest.approx(extended_q(Multivector(3, value[0, 0])))
    assert np.array_equal(grads["x"], 2.0 * value)
