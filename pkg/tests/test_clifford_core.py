import numpy as np
import pytest

from services.checks import oracle_product, reduce_word
from services.clifford_core import (
    Multivector,
    OrthogonalMap,
    Versor,
    apply_orthogonal,
    blade_name,
    build_cayley_table,
    embed_scalar,
    embed_vector,
    extended_q,
    extract_scalar,
    extract_vector,
    geometric_product,
    grade_project,
    main_involution,
    random_multivector,
    random_orthogonal,
    twisted_conjugation,
)
from services.errors import DimensionError, GradeError, NotInvertibleError, OrthogonalityError

E1, E2, E3 = 0b001, 0b010, 0b100
E12, E13, E23 = 0b011, 0b101, 0b110


def mv(n, **terms):
    names = {"s": 0, "e1": E1, "e2": E2, "e3": E3, "e12": E12, "e13": E13, "e23": E23}
    c = np.zeros(1 << n)
    for name, value in terms.items():
        c[names[name]] = value
    return Multivector(n, c)


def test_cayley_entries():
    t2 = build_cayley_table(2)
    assert t2.entry(E1, E1) == (0, 1)
    assert t2.entry(E2, E1) == (E12, -1)
    assert build_cayley_table(3).entry(E12, E23) == (E13, 1)


@pytest.mark.parametrize("n", [0, 9, -1])
def test_unsupported_dimension(n):
    with pytest.raises(DimensionError):
        build_cayley_table(n)


def test_blade_names():
    assert blade_name(0) == "1"
    assert blade_name(E13) == "e13"


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_table_associative(n):
    t = build_cayley_table(n)
    for a in range(t.size):
        for b in range(t.size):
            for c in range(t.size):
                left = t.sign[a, b] * t.sign[t.result[a, b], c]
                right = t.sign[b, c] * t.sign[a, t.result[b, c]]
                assert left == right


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_grade_slices_have_binomial_sizes(n):
    from math import comb

    grades = build_cayley_table(n).grades
    assert [int(np.sum(grades == m)) for m in range(n + 1)] == [comb(n, m) for m in range(n + 1)]


def test_reduce_word():
    assert reduce_word([1, 0]) == (-1, (0, 1))
    assert reduce_word([0, 1, 1, 2]) == (1, (0, 2))
    assert reduce_word([2, 1, 0]) == (-1, (0, 1, 2))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_product_matches_word_oracle(n, rng):
    for _ in range(200):
        a, b = random_multivector(n, rng), random_multivector(n, rng)
        assert np.max(np.abs(geometric_product(a, b).coeffs - oracle_product(a, b).coeffs)) <= 1e-12


def test_product_examples():
    assert (mv(2, s=1, e1=1) * mv(2, s=1, e2=1)).allclose(mv(2, s=1, e1=1, e2=1, e12=1))
    x = embed_vector([3.0, 4.0])
    assert (x * x).allclose(embed_scalar(25.0, 2))


def test_unit_and_distributivity(rng):
    one = embed_scalar(1.0, 3)
    for _ in range(100):
        a, b, c = (random_multivector(3, rng) for _ in range(3))
        assert (a * one).allclose(a)
        assert (a * (b + c)).allclose(a * b + a * c, atol=1e-10)
        assert ((a * b) * c).allclose(a * (b * c), atol=1e-10)


def test_product_dimension_mismatch():
    with pytest.raises(DimensionError):
        geometric_product(Multivector.zero(2), Multivector.zero(3))


def test_vector_square_is_q(rng):
    for _ in range(50):
        v = embed_vector(rng.standard_normal(4))
        sq = v * v
        assert sq.allclose(embed_scalar(extended_q(v), 4), atol=1e-12)


def test_grade_project():
    x = mv(2, s=2, e1=3, e12=5)
    assert grade_project(x, 1).allclose(mv(2, e1=3))
    unit = embed_vector([0.0, 1.0, 0.0])
    assert extract_scalar(grade_project(unit * unit, 0)) == 1.0
    with pytest.raises(GradeError):
        grade_project(x, 3)


def test_grade_projections_partition(rng):
    x = random_multivector(3, rng)
    total = Multivector.zero(3)
    for m in range(4):
        part = grade_project(x, m)
        assert grade_project(part, m).allclose(part)
        total = total + part
    assert total.allclose(x)


def test_main_involution(rng):
    assert main_involution(mv(2, s=1, e1=1, e12=1)).allclose(mv(2, s=1, e1=-1, e12=1))
    assert main_involution(embed_scalar(7.0, 3)).allclose(embed_scalar(7.0, 3))
    x = random_multivector(3, rng)
    assert main_involution(main_involution(x)).allclose(x)


def test_extended_q(rng):
    assert extended_q(embed_vector([3.0, 4.0])) == 25.0
    assert extended_q(mv(2, s=2, e12=1), 0) == 4.0
    x = random_multivector(3, rng)
    assert extended_q(x) == pytest.approx(sum(extended_q(x, m) for m in range(4)), rel=1e-14)
    assert extended_q(x) >= 0


def test_embed_round_trip(rng):
    v = rng.standard_normal(3)
    assert np.array_equal(extract_vector(grade_project(embed_vector(v), 1)), v)
    assert embed_vector([1.0, 0.0, 0.0]).allclose(Multivector.blade(3, E1))
    assert embed_scalar(0.0, 3).allclose(Multivector.zero(3))


def test_twisted_conjugation_reflects():
    w = Versor.of([1.0, 0.0])
    assert twisted_conjugation(w, embed_vector([1.0, 0.0])).allclose(embed_vector([-1.0, 0.0]))
    assert twisted_conjugation(w, embed_vector([0.0, 1.0])).allclose(embed_vector([0.0, 1.0]))


def test_twisted_conjugation_scalar_is_identity(rng):
    x = random_multivector(3, rng)
    assert twisted_conjugation(Versor.of(scale=-2.5, dim=3), x).allclose(x, atol=1e-12)


def test_twisted_conjugation_commutes_with_grades(rng):
    for _ in range(20):
        w = Versor.of(*rng.standard_normal((int(rng.integers(1, 4)), 3)))
        x = random_multivector(3, rng)
        for m in range(4):
            lhs = twisted_conjugation(w, grade_project(x, m))
            rhs = grade_project(twisted_conjugation(w, x), m)
            assert lhs.allclose(rhs, atol=1e-10)


def test_twisted_conjugation_is_automorphism(rng):
    for _ in range(20):
        w = Versor.of(*rng.standard_normal((2, 3)))
        x, y = random_multivector(3, rng), random_multivector(3, rng)
        lhs = twisted_conjugation(w, x * y)
        rhs = twisted_conjugation(w, x) * twisted_conjugation(w, y)
        assert lhs.allclose(rhs, atol=1e-9)


def test_twisted_conjugation_matches_orthogonal_action(rng):
    for _ in range(20):
        w = Versor.of(*rng.standard_normal((3, 3)))
        q = w.to_orthogonal()
        v = rng.standard_normal(3)
        got = extract_vector(twisted_conjugation(w, embed_vector(v)))
        want = q.apply_vectors(v)
        assert np.linalg.norm(got - want) <= 1e-10 * np.linalg.norm(want)
        x = random_multivector(3, rng)
        assert twisted_conjugation(w, x).allclose(apply_orthogonal(q, x), atol=1e-9)


def test_null_factor_not_invertible():
    with pytest.raises(NotInvertibleError):
        twisted_conjugation(Versor.of([0.0, 0.0, 0.0]), embed_vector([1.0, 0.0, 0.0]))


def test_apply_orthogonal_examples():
    x = embed_vector([0.3, -1.0])
    assert apply_orthogonal(OrthogonalMap(np.eye(2)), x).allclose(x)
    rot = OrthogonalMap(np.array([[0.0, -1.0], [1.0, 0.0]]))
    assert apply_orthogonal(rot, Multivector.blade(2, E1)).allclose(Multivector.blade(2, E2))
    assert apply_orthogonal(rot, Multivector.blade(2, E12)).allclose(Multivector.blade(2, E12))


def test_apply_orthogonal_fixes_scalars(orthogonal):
    assert apply_orthogonal(orthogonal, embed_scalar(7.0, 3)).allclose(embed_scalar(7.0, 3))


def test_orthogonal_action_is_algebra_homomorphism(rng):
    for _ in range(50):
        q = random_orthogonal(3, rng)
        x, y, z = (random_multivector(3, rng) for _ in range(3))
        assert apply_orthogonal(q, x * y).allclose(apply_orthogonal(q, x) * apply_orthogonal(q, y), atol=1e-10)
        lhs = apply_orthogonal(q, x * y * z)
        rhs = apply_orthogonal(q, x) * apply_orthogonal(q, y) * apply_orthogonal(q, z)
        assert lhs.allclose(rhs, atol=1e-9)
        for m in range(4):
            assert apply_orthogonal(q, grade_project(x, m)).allclose(grade_project(apply_orthogonal(q, x), m),
                                                                     atol=1e-10)


def test_orthogonal_action_composes(rng):
    q1, q2 = random_orthogonal(3, rng), random_orthogonal(3, rng)
    x = random_multivector(3, rng)
    assert apply_orthogonal(q1.compose(q2), x).allclose(apply_orthogonal(q1, apply_orthogonal(q2, x)), atol=1e-10)


def test_non_orthogonal_rejected():
    with pytest.raises(OrthogonalityError):
        OrthogonalMap(np.array([[1.0, 0.0], [0.0, 2.0]]))


def test_random_orthogonal_determinant(rng):
    assert np.linalg.det(random_orthogonal(3, rng, proper=True).matrix) > 0
    assert np.linalg.det(random_orthogonal(3, rng, proper=False).matrix) < 0


def test_multivector_is_read_only():
    x = Multivector.zero(2)
    with pytest.raises(ValueError):
        x.coeffs[0] = 1.0
