"""Clifford algebra Cl(R^n) with the Euclidean quadratic form.

Blades are bitmasks: bit i set means e_{i+1} is a factor. A multivector is a
dense vector of 2^n coefficients indexed by blade mask. Products go through a
precomputed Cayley table; the orthogonal group acts through the multiplicative
extension of Q to blades.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

from services.errors import (
    DimensionError,
    GradeError,
    NotInvertibleError,
    OrthogonalityError,
)

MAX_DIM = 8
ORTHOGONALITY_TOL = 1e-10


def blade_grade(bits: int) -> int:
    return int(bits).bit_count()


def blade_sign(a: int, b: int) -> int:
    """Sign of e_A e_B after sorting the concatenated factor list.

    Counts the transpositions needed to move every factor of B left past the
    larger factors of A. Repeated factors contract to +1 (Euclidean metric).
    """
    a >>= 1
    swaps = 0
    while a:
        swaps += (a & b).bit_count()
        a >>= 1
    return -1 if swaps & 1 else 1


def blade_name(bits: int) -> str:
    if bits == 0:
        return "1"
    return "e" + "".join(str(i + 1) for i in range(bits.bit_length()) if bits >> i & 1)


@dataclass(frozen=True)
class CayleyTable:
    dim: int
    result: np.ndarray = field(repr=False)
    sign: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return 1 << self.dim

    @cached_property
    def grades(self) -> np.ndarray:
        return np.array([blade_grade(a) for a in range(self.size)], dtype=np.int64)

    @cached_property
    def grade_indicator(self) -> np.ndarray:
        """(n+1) x 2^n matrix, row m selects the grade-m blades."""
        r = np.zeros((self.dim + 1, self.size))
        r[self.grades, np.arange(self.size)] = 1.0
        return r

    @cached_property
    def structure(self) -> np.ndarray:
        """Dense structure constants G[i, j, k]: e_i e_j = sum_k G[i,j,k] e_k."""
        n = self.size
        g = np.zeros((n, n, n))
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        g[ii, jj, self.result] = self.sign
        return g

    @cached_property
    def vector_blades(self) -> np.ndarray:
        return np.array([1 << i for i in range(self.dim)], dtype=np.int64)

    def entry(self, a: int, b: int) -> tuple[int, int]:
        return int(self.result[a, b]), int(self.sign[a, b])


@lru_cache(maxsize=None)
def build_cayley_table(n: int) -> CayleyTable:
    if not 1 <= n <= MAX_DIM:
        raise DimensionError(f"dimension {n} unsupported, expected 1..{MAX_DIM}")
    size = 1 << n
    idx = np.arange(size)
    result = idx[:, None] ^ idx[None, :]
    sign = np.array([[blade_sign(a, b) for b in range(size)] for a in range(size)], dtype=np.float64)
    result.setflags(write=False)
    sign.setflags(write=False)
    return CayleyTable(dim=n, result=result, sign=sign)


@dataclass(frozen=True, eq=False)
class Multivector:
    dim: int
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.float64, copy=True).reshape(-1)
        if self.dim < 1 or coeffs.shape[0] != 1 << self.dim:
            raise DimensionError(
                f"expected {1 << max(self.dim, 0)} coefficients for dim {self.dim}, got {coeffs.shape[0]}"
            )
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def zero(cls, n: int) -> Multivector:
        return cls(n, np.zeros(1 << n))

    @classmethod
    def blade(cls, n: int, bits: int, value: float = 1.0) -> Multivector:
        c = np.zeros(1 << n)
        c[bits] = value
        return cls(n, c)

    @property
    def table(self) -> CayleyTable:
        return build_cayley_table(self.dim)

    def _check(self, other: Multivector) -> None:
        if other.dim != self.dim:
            raise DimensionError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other: Multivector) -> Multivector:
        self._check(other)
        return Multivector(self.dim, self.coeffs + other.coeffs)

    def __sub__(self, other: Multivector) -> Multivector:
        self._check(other)
        return Multivector(self.dim, self.coeffs - other.coeffs)

    def __neg__(self) -> Multivector:
        return Multivector(self.dim, -self.coeffs)

    def __mul__(self, other):
        if isinstance(other, Multivector):
            return geometric_product(self, other)
        return Multivector(self.dim, self.coeffs * float(other))

    def __rmul__(self, other):
        return Multivector(self.dim, self.coeffs * float(other))

    def allclose(self, other: Multivector, atol: float = 1e-12) -> bool:
        return self.dim == other.dim and bool(np.allclose(self.coeffs, other.coeffs, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        terms = [f"{c:+g}{'' if a == 0 else blade_name(a)}" for a, c in enumerate(self.coeffs) if c != 0]
        return f"Multivector({' '.join(terms) or '0'}, dim={self.dim})"


def geometric_product(a: Multivector, b: Multivector) -> Multivector:
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    t = build_cayley_table(a.dim)
    terms = t.sign * np.outer(a.coeffs, b.coeffs)
    out = np.bincount(t.result.ravel(), weights=terms.ravel(), minlength=t.size)
    return Multivector(a.dim, out)


def _check_grade(x: Multivector, m: int) -> None:
    if not 0 <= m <= x.dim:
        raise GradeError(f"grade {m} outside 0..{x.dim}")


def grade_project(x: Multivector, m: int) -> Multivector:
    _check_grade(x, m)
    return Multivector(x.dim, np.where(x.table.grades == m, x.coeffs, 0.0))


def even_part(x: Multivector) -> Multivector:
    return Multivector(x.dim, np.where(x.table.grades % 2 == 0, x.coeffs, 0.0))


def odd_part(x: Multivector) -> Multivector:
    return Multivector(x.dim, np.where(x.table.grades % 2 == 1, x.coeffs, 0.0))


def main_involution(x: Multivector) -> Multivector:
    signs = np.where(x.table.grades % 2 == 0, 1.0, -1.0)
    return Multivector(x.dim, x.coeffs * signs)


def extended_q(x: Multivector, m: int | None = None) -> float:
    """q(x) as the sum of squared blade coefficients, optionally on one grade."""
    if m is None:
        return float(np.dot(x.coeffs, x.coeffs))
    _check_grade(x, m)
    sel = x.coeffs[x.table.grades == m]
    return float(np.dot(sel, sel))


def embed_vector(v: Sequence[float] | np.ndarray) -> Multivector:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    t = build_cayley_table(v.shape[0])
    c = np.zeros(t.size)
    c[t.vector_blades] = v
    return Multivector(t.dim, c)


def embed_scalar(s: float, n: int) -> Multivector:
    return Multivector.blade(n, 0, float(s))


def extract_vector(x: Multivector) -> np.ndarray:
    return x.coeffs[x.table.vector_blades].copy()


def extract_scalar(x: Multivector) -> float:
    return float(x.coeffs[0])


@dataclass(frozen=True, eq=False)
class Versor:
    """Clifford group element c * v_1 ... v_k given by its factors."""

    dim: int
    factors: tuple[np.ndarray, ...] = ()
    scale: float = 1.0

    @classmethod
    def of(cls, *vectors, scale: float = 1.0, dim: int | None = None) -> Versor:
        factors = tuple(np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors)
        if dim is None:
            if not factors:
                raise DimensionError("dimension required for a scalar versor")
            dim = factors[0].shape[0]
        if any(f.shape[0] != dim for f in factors):
            raise DimensionError("versor factors must share one dimension")
        return cls(dim=dim, factors=factors, scale=float(scale))

    def _check_invertible(self) -> None:
        if self.scale == 0.0:
            raise NotInvertibleError("zero scalar factor")
        for i, v in enumerate(self.factors):
            if float(np.dot(v, v)) == 0.0:
                raise NotInvertibleError(f"factor {i} has q(v) = 0")

    def element(self) -> Multivector:
        w = embed_scalar(self.scale, self.dim)
        for v in self.factors:
            w = w * embed_vector(v)
        return w

    def inverse(self) -> Multivector:
        self._check_invertible()
        w = embed_scalar(1.0 / self.scale, self.dim)
        for v in reversed(self.factors):
            w = w * embed_vector(v / np.dot(v, v))
        return w

    def to_orthogonal(self) -> OrthogonalMap:
        """Composition of the reflections in the factors, leftmost applied last."""
        self._check_invertible()
        q = np.eye(self.dim)
        for v in self.factors:
            q = q @ reflection_matrix(v)
        return OrthogonalMap(q)


def twisted_conjugation(w: Versor, x: Multivector) -> Multivector:
    """rho(w)(x) = w x^[0] w^-1 + alpha(w) x^[1] w^-1."""
    if w.dim != x.dim:
        raise DimensionError(f"dimension mismatch: {w.dim} vs {x.dim}")
    w_inv = w.inverse()
    elem = w.element()
    return elem * even_part(x) * w_inv + main_involution(elem) * odd_part(x) * w_inv


def reflection_matrix(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    qv = float(np.dot(v, v))
    if qv == 0.0:
        raise NotInvertibleError("cannot reflect in a null vector")
    return np.eye(v.shape[0]) - 2.0 * np.outer(v, v) / qv


@dataclass(frozen=True, eq=False)
class OrthogonalMap:
    matrix: np.ndarray

    def __post_init__(self):
        q = np.array(self.matrix, dtype=np.float64, copy=True)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise DimensionError(f"orthogonal map must be square, got shape {q.shape}")
        err = np.max(np.abs(q.T @ q - np.eye(q.shape[0])))
        if err > ORTHOGONALITY_TOL:
            raise OrthogonalityError(f"|Q^T Q - I|_inf = {err:.3e} exceeds {ORTHOGONALITY_TOL}")
        q.setflags(write=False)
        object.__setattr__(self, "matrix", q)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def compose(self, other: OrthogonalMap) -> OrthogonalMap:
        return OrthogonalMap(self.matrix @ other.matrix)

    @cached_property
    def blade_action(self) -> np.ndarray:
        """2^n x 2^n matrix; column A holds the image of e_A."""
        t = build_cayley_table(self.dim)
        action = np.zeros((t.size, t.size))
        action[0, 0] = 1.0
        images = [embed_vector(self.matrix[:, i]) for i in range(self.dim)]
        for a in range(1, t.size):
            low = (a & -a).bit_length() - 1
            rest = Multivector(self.dim, action[:, a ^ (1 << low)])
            action[:, a] = (images[low] * rest).coeffs
        action.setflags(write=False)
        return action

    def apply_vectors(self, v: np.ndarray) -> np.ndarray:
        """Rotate row vectors (..., n)."""
        return np.asarray(v) @ self.matrix.T


def apply_orthogonal(q: OrthogonalMap, x: Multivector) -> Multivector:
    if q.dim != x.dim:
        raise DimensionError(f"dimension mismatch: {q.dim} vs {x.dim}")
    return Multivector(x.dim, q.blade_action @ x.coeffs)


def random_orthogonal(n: int, rng: np.random.Generator, *, proper: bool | None = None) -> OrthogonalMap:
    """Haar-distributed element of O(n); proper=True forces det +1, False forces -1."""
    z = rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    q = q * np.sign(np.diag(r))
    if proper is not None and (np.linalg.det(q) > 0) != proper:
        q[:, 0] = -q[:, 0]
    return OrthogonalMap(q)


def random_multivector(n: int, rng: np.random.Generator) -> Multivector:
    return Multivector(n, rng.standard_normal(1 << n))
