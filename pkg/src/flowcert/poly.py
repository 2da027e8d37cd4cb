"""Sparse multivariate polynomial arithmetic.

Polynomials over n real variables are stored as a sparse map from exponent
vectors to float coefficients. All higher layers (semialgebraic sets, SOS
compilation, learned dynamics) are built on this representation.

Monomials are plain tuples of non-negative integer exponents, one entry per
variable. The canonical term order is graded lexicographic: ascending total
degree, and within a degree block descending lexicographic on the exponent
vector (so for n=2, d=1 the basis reads [1, x1, x2]).
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

Monomial = tuple[int, ...]


class DimensionMismatchError(ValueError):
    """Raised when operands or evaluation points disagree on dimension."""


def monomial_degree(mono: Monomial) -> int:
    return sum(mono)


def monomial_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(ea + eb for ea, eb in zip(a, b))


def grlex_key(mono: Monomial) -> tuple:
    """Sort key realizing the canonical graded lexicographic order."""
    return (sum(mono), tuple(-e for e in mono))


def _iter_exponents(n: int, total: int) -> Iterator[Monomial]:
    """All exponent vectors of length n with the exact given total degree."""
    if n == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in _iter_exponents(n - 1, total - head):
            yield (head,) + tail


def monomial_basis(n: int, d: int) -> list[Monomial]:
    """All monomials in n variables of total degree <= d, in grlex order.

    The count is C(n+d, d). The order is deterministic and is the single
    canonical order every Gram-matrix index in this package relies on.
    """
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    if d < 0:
        raise ValueError(f"degree must be >= 0, got {d}")
    basis: list[Monomial] = []
    for total in range(d + 1):
        basis.extend(_iter_exponents(n, total))
    return basis


def basis_size(n: int, d: int) -> int:
    return math.comb(n + d, d)


class Polynomial:
    """Immutable sparse polynomial in n variables with float coefficients.

    Zero coefficients are never stored, so equality of term maps is equality
    of polynomials. Instances are safe to share across threads.
    """

    __slots__ = ("dimension", "terms")

    def __init__(self, dimension: int, terms: Mapping[Monomial, float] | None = None):
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        clean: dict[Monomial, float] = {}
        if terms:
            for mono, coef in terms.items():
                mono = tuple(int(e) for e in mono)
                if len(mono) != dimension:
                    raise DimensionMismatchError(
                        f"monomial {mono} has length {len(mono)}, expected {dimension}"
                    )
                if any(e < 0 for e in mono):
                    raise ValueError(f"negative exponent in monomial {mono}")
                coef = float(coef)
                if coef != 0.0:
                    clean[mono] = clean.get(mono, 0.0) + coef
                    if clean[mono] == 0.0:
                        del clean[mono]
        object.__setattr__(self, "dimension", dimension)
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, name, value):
        raise AttributeError("Polynomial is immutable")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(dimension: int) -> "Polynomial":
        return Polynomial(dimension, {})

    @staticmethod
    def constant(value: float, dimension: int) -> "Polynomial":
        return Polynomial(dimension, {(0,) * dimension: value})

    @staticmethod
    def variable(index: int, dimension: int) -> "Polynomial":
        if not 0 <= index < dimension:
            raise ValueError(f"variable index {index} out of range for n={dimension}")
        mono = tuple(1 if k == index else 0 for k in range(dimension))
        return Polynomial(dimension, {mono: 1.0})

    @staticmethod
    def norm_squared(dimension: int) -> "Polynomial":
        """The polynomial ||x||^2 = x1^2 + ... + xn^2."""
        terms = {}
        for k in range(dimension):
            mono = tuple(2 if j == k else 0 for j in range(dimension))
            terms[mono] = 1.0
        return Polynomial(dimension, terms)

    # -- basic queries -----------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    @property
    def degree(self) -> int:
        """Max total degree over stored monomials; 0 for the zero polynomial."""
        if not self.terms:
            return 0
        return max(monomial_degree(m) for m in self.terms)

    @property
    def min_degree(self) -> int:
        """Min total degree over stored monomials; 0 for the zero polynomial."""
        if not self.terms:
            return 0
        return min(monomial_degree(m) for m in self.terms)

    def coefficient(self, mono: Monomial) -> float:
        return self.terms.get(tuple(mono), 0.0)

    def max_abs_coefficient(self) -> float:
        if not self.terms:
            return 0.0
        return max(abs(c) for c in self.terms.values())

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0]))

    # -- arithmetic --------------------------------------------------------

    def _check_same_dim(self, other: "Polynomial") -> None:
        if self.dimension != other.dimension:
            raise DimensionMismatchError(
                f"dimension mismatch: {self.dimension} vs {other.dimension}"
            )

    def __add__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(float(other), self.dimension)
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check_same_dim(other)
        terms = dict(self.terms)
        for mono, coef in other.terms.items():
            terms[mono] = terms.get(mono, 0.0) + coef
        return Polynomial(self.dimension, terms)

    __radd__ = __add__

    def __sub__(self, other) -> "Polynomial":
        return self + (-1.0) * (
            other
            if isinstance(other, Polynomial)
            else Polynomial.constant(float(other), self.dimension)
        )

    def __rsub__(self, other) -> "Polynomial":
        return (-1.0) * self + other

    def __neg__(self) -> "Polynomial":
        return (-1.0) * self

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial(
                self.dimension,
                {m: c * float(other) for m, c in self.terms.items()},
            )
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check_same_dim(other)
        terms: dict[Monomial, float] = {}
        for ma, ca in self.terms.items():
            for mb, cb in other.terms.items():
                mono = monomial_mul(ma, mb)
                terms[mono] = terms.get(mono, 0.0) + ca * cb
        return Polynomial(self.dimension, terms)

    __rmul__ = __mul__

    def __pow__(self, exponent: int) -> "Polynomial":
        if exponent < 0:
            raise ValueError("negative powers are not polynomials")
        result = Polynomial.constant(1.0, self.dimension)
        for _ in range(exponent):
            result = result * self
        return result

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Polynomial)
            and self.dimension == other.dimension
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.dimension, frozenset(self.terms.items())))

    # -- calculus and evaluation -------------------------------------------

    def evaluate(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"point of shape {x.shape} incompatible with dimension {self.dimension}"
            )
        total = 0.0
        for mono, coef in self.terms.items():
            term = coef
            for xk, ek in zip(x, mono):
                if ek:
                    term *= xk**ek
            total += term
        return total

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at each row of an (m, n) array; returns shape (m,)."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.dimension:
            raise DimensionMismatchError(
                f"points of shape {points.shape} incompatible with dimension {self.dimension}"
            )
        out = np.zeros(points.shape[0])
        for mono, coef in self.terms.items():
            term = np.full(points.shape[0], coef)
            for k, ek in enumerate(mono):
                if ek:
                    term *= points[:, k] ** ek
            out += term
        return out

    def differentiate(self, axis: int) -> "Polynomial":
        if not 0 <= axis < self.dimension:
            raise ValueError(f"axis {axis} out of range for n={self.dimension}")
        terms: dict[Monomial, float] = {}
        for mono, coef in self.terms.items():
            e = mono[axis]
            if e == 0:
                continue
            lowered = tuple(
                ek - 1 if k == axis else ek for k, ek in enumerate(mono)
            )
            terms[lowered] = terms.get(lowered, 0.0) + coef * e
        return Polynomial(self.dimension, terms)

    def gradient(self) -> "PolynomialVector":
        return PolynomialVector(
            [self.differentiate(k) for k in range(self.dimension)]
        )

    def compose_affine(
        self, scale: Sequence[float], offset: Sequence[float]
    ) -> "Polynomial":
        """Substitute x_k := scale_k * x_k + offset_k for every variable."""
        scale = np.asarray(scale, dtype=float)
        offset = np.asarray(offset, dtype=float)
        if scale.shape != (self.dimension,) or offset.shape != (self.dimension,):
            raise DimensionMismatchError("scale/offset length must match dimension")
        substitutes = [
            Polynomial(
                self.dimension,
                {
                    tuple(1 if j == k else 0 for j in range(self.dimension)): scale[k],
                    (0,) * self.dimension: offset[k],
                },
            )
            for k in range(self.dimension)
        ]
        result = Polynomial.zero(self.dimension)
        for mono, coef in self.terms.items():
            term = Polynomial.constant(coef, self.dimension)
            for k, ek in enumerate(mono):
                if ek:
                    term = term * substitutes[k] ** ek
            result = result + term
        return result

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dimension,
            "terms": [
                {"exp": list(mono), "coef": coef}
                for mono, coef in self.sorted_terms()
            ],
        }

    @staticmethod
    def from_json_dict(data: Mapping) -> "Polynomial":
        return Polynomial(
            int(data["dim"]),
            {tuple(t["exp"]): float(t["coef"]) for t in data["terms"]},
        )

    def __repr__(self) -> str:
        if not self.terms:
            return "Polynomial(0)"
        parts = []
        for mono, coef in self.sorted_terms():
            factors = [
                f"x{k + 1}^{e}" if e > 1 else f"x{k + 1}"
                for k, e in enumerate(mono)
                if e
            ]
            parts.append(f"{coef:+g}" + ("*" + "*".join(factors) if factors else ""))
        return "Polynomial(" + " ".join(parts) + ")"


class PolynomialVector:
    """Ordered list of polynomials sharing one ambient dimension.

    Used for vector fields f : R^n -> R^n and for gradients.
    """

    __slots__ = ("components",)

    def __init__(self, components: Iterable[Polynomial]):
        comps = list(components)
        if not comps:
            raise ValueError("PolynomialVector needs at least one component")
        dim = comps[0].dimension
        for p in comps:
            if p.dimension != dim:
                raise DimensionMismatchError("components disagree on dimension")
        object.__setattr__(self, "components", comps)

    def __setattr__(self, name, value):
        raise AttributeError("PolynomialVector is immutable")

    @property
    def dimension(self) -> int:
        return self.components[0].dimension

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, k: int) -> Polynomial:
        return self.components[k]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PolynomialVector)
            and self.components == other.components
        )

    def evaluate(self, x: Sequence[float]) -> np.ndarray:
        return np.array([p.evaluate(x) for p in self.components])

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at each row of (m, n); returns (m, len(self))."""
        return np.column_stack([p.evaluate_many(points) for p in self.components])

    def dot(self, other: "PolynomialVector") -> Polynomial:
        """Pointwise inner product, e.g. a gradient contracted with a field."""
        if len(self) != len(other):
            raise DimensionMismatchError("component count mismatch in dot product")
        total = Polynomial.zero(self.dimension)
        for a, b in zip(self.components, other.components):
            total = total + a * b
        return total

    def to_json_dict(self) -> list:
        return [p.to_json_dict() for p in self.components]

    @staticmethod
    def from_json_dict(data: Sequence) -> "PolynomialVector":
        return PolynomialVector([Polynomial.from_json_dict(d) for d in data])

    def __repr__(self) -> str:
        return "PolynomialVector(" + ", ".join(repr(p) for p in self.components) + ")"
