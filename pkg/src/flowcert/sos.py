"""Sum-of-squares constraint compilation.

An SOS constraint "expression is a sum of squares" over a polynomial whose
coefficients are affine in scalar decision variables compiles to one
symmetric Gram block G >= 0 plus one affine coefficient-matching equality
per monomial: z(x)^T G z(x) must reproduce the expression, where z is a
monomial basis vector.

Three layers live here:

* LinExpr / AffinePoly: polynomials with coefficients affine in a global
  decision vector (the coefficient space).
* CoefficientSpace: allocation of named decision blocks (polynomial
  coefficients, Gram entries, scalars) with stable contiguous indices.
* SymExpr: a tiny symbolic algebra over named blocks, used to state
  constraints once, report their bilinear structure, and lower them to
  AffinePoly form after fixing one side of every bilinear pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .poly import (
    DimensionMismatchError,
    Monomial,
    Polynomial,
    PolynomialVector,
    grlex_key,
    monomial_basis,
    monomial_degree,
    monomial_mul,
)
from .sdp import SdpBuilder


class SosCompileError(ValueError):
    """Raised for expressions outside the compilable fragment."""


class OddDegreeError(SosCompileError):
    """Raised when a fixed odd-degree polynomial is claimed to be SOS."""


# ---------------------------------------------------------------------------
# Affine coefficient layer
# ---------------------------------------------------------------------------


class LinExpr:
    """Affine expression  const + sum_i coeffs[i] * y_i  over decision vars."""

    __slots__ = ("const", "coeffs")

    def __init__(self, const: float = 0.0, coeffs: Mapping[int, float] | None = None):
        self.const = float(const)
        self.coeffs: dict[int, float] = {}
        if coeffs:
            for i, c in coeffs.items():
                c = float(c)
                if c != 0.0:
                    self.coeffs[i] = c

    @staticmethod
    def variable(index: int, scale: float = 1.0) -> "LinExpr":
        return LinExpr(0.0, {index: scale})

    def is_zero(self) -> bool:
        return self.const == 0.0 and not self.coeffs

    def copy(self) -> "LinExpr":
        return LinExpr(self.const, dict(self.coeffs))

    def __add__(self, other) -> "LinExpr":
        if isinstance(other, (int, float)):
            return LinExpr(self.const + float(other), dict(self.coeffs))
        out = dict(self.coeffs)
        for i, c in other.coeffs.items():
            v = out.get(i, 0.0) + c
            if v == 0.0:
                out.pop(i, None)
            else:
                out[i] = v
        return LinExpr(self.const + other.const, out)

    def __mul__(self, scalar: float) -> "LinExpr":
        scalar = float(scalar)
        return LinExpr(self.const * scalar, {i: c * scalar for i, c in self.coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "LinExpr":
        return self * -1.0

    def value(self, y: np.ndarray) -> float:
        return self.const + sum(c * y[i] for i, c in self.coeffs.items())

    def __repr__(self):
        return f"LinExpr({self.const!r}, {self.coeffs!r})"


class AffinePoly:
    """Polynomial whose coefficients are LinExpr values in the decision vars."""

    __slots__ = ("dimension", "terms")

    def __init__(self, dimension: int, terms: Mapping[Monomial, LinExpr] | None = None):
        self.dimension = dimension
        self.terms: dict[Monomial, LinExpr] = {}
        if terms:
            for mono, lin in terms.items():
                if len(mono) != dimension:
                    raise DimensionMismatchError(
                        f"monomial {mono} incompatible with dimension {dimension}"
                    )
                if not lin.is_zero():
                    self.terms[tuple(mono)] = lin

    @staticmethod
    def from_fixed(p: Polynomial) -> "AffinePoly":
        return AffinePoly(
            p.dimension, {m: LinExpr(c) for m, c in p.terms.items()}
        )

    def __add__(self, other) -> "AffinePoly":
        if isinstance(other, Polynomial):
            other = AffinePoly.from_fixed(other)
        if other.dimension != self.dimension:
            raise DimensionMismatchError("dimension mismatch in AffinePoly add")
        terms = {m: lin.copy() for m, lin in self.terms.items()}
        for mono, lin in other.terms.items():
            if mono in terms:
                terms[mono] = terms[mono] + lin
            else:
                terms[mono] = lin.copy()
        return AffinePoly(self.dimension, terms)

    def scale(self, scalar: float) -> "AffinePoly":
        return AffinePoly(
            self.dimension, {m: lin * scalar for m, lin in self.terms.items()}
        )

    def __sub__(self, other) -> "AffinePoly":
        if isinstance(other, Polynomial):
            other = AffinePoly.from_fixed(other)
        return self + other.scale(-1.0)

    def mul_fixed(self, p: Polynomial) -> "AffinePoly":
        """Multiply by a fixed polynomial (keeps coefficients affine)."""
        if p.dimension != self.dimension:
            raise DimensionMismatchError("dimension mismatch in AffinePoly multiply")
        terms: dict[Monomial, LinExpr] = {}
        for ma, lin in self.terms.items():
            for mb, coef in p.terms.items():
                mono = monomial_mul(ma, mb)
                contrib = lin * coef
                if mono in terms:
                    terms[mono] = terms[mono] + contrib
                else:
                    terms[mono] = contrib
        return AffinePoly(self.dimension, terms)

    def differentiate(self, axis: int) -> "AffinePoly":
        terms: dict[Monomial, LinExpr] = {}
        for mono, lin in self.terms.items():
            e = mono[axis]
            if e == 0:
                continue
            lowered = tuple(ek - 1 if k == axis else ek for k, ek in enumerate(mono))
            contrib = lin * float(e)
            if lowered in terms:
                terms[lowered] = terms[lowered] + contrib
            else:
                terms[lowered] = contrib
        return AffinePoly(self.dimension, terms)

    @property
    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(monomial_degree(m) for m in self.terms)

    @property
    def min_degree(self) -> int:
        if not self.terms:
            return 0
        return min(monomial_degree(m) for m in self.terms)

    def evaluate(self, x: Sequence[float]) -> LinExpr:
        """Value at a fixed point, as an affine function of the decisions."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise DimensionMismatchError("point incompatible with dimension")
        total = LinExpr()
        for mono, lin in self.terms.items():
            w = 1.0
            for xk, ek in zip(x, mono):
                if ek:
                    w *= xk**ek
            total = total + lin * w
        return total

    def substitute(self, y: np.ndarray) -> Polynomial:
        """Instantiate the decisions, producing a concrete Polynomial."""
        return Polynomial(
            self.dimension, {m: lin.value(y) for m, lin in self.terms.items()}
        )


# ---------------------------------------------------------------------------
# Coefficient space
# ---------------------------------------------------------------------------


@dataclass
class BlockInfo:
    name: str
    kind: str  # 'poly' | 'poly_vector' | 'gram' | 'scalar'
    indices: list[int]
    dimension: int = 0
    degree: int = 0
    monomials: list[Monomial] = field(default_factory=list)
    basis: list[Monomial] = field(default_factory=list)


class GramBlock:
    """Symmetric matrix of decision variables over a monomial basis."""

    def __init__(self, name: str, basis: list[Monomial], var_grid: np.ndarray):
        self.name = name
        self.basis = basis
        self.var_grid = var_grid  # (k, k) int array of decision indices

    @property
    def size(self) -> int:
        return len(self.basis)

    def expansion(self, dimension: int) -> AffinePoly:
        """z(x)^T G z(x) as an AffinePoly in the Gram entries."""
        terms: dict[Monomial, LinExpr] = {}
        k = self.size
        for i in range(k):
            for j in range(i, k):
                mono = monomial_mul(self.basis[i], self.basis[j])
                weight = 1.0 if i == j else 2.0
                contrib = LinExpr.variable(int(self.var_grid[i, j]), weight)
                if mono in terms:
                    terms[mono] = terms[mono] + contrib
                else:
                    terms[mono] = contrib
        return AffinePoly(dimension, terms)

    def matrix_coeffs(self) -> dict[int, np.ndarray]:
        """Affine map entries for the SDP block G(y) >= 0."""
        k = self.size
        coeffs: dict[int, np.ndarray] = {}
        for i in range(k):
            for j in range(i, k):
                mat = np.zeros((k, k))
                mat[i, j] = 1.0
                mat[j, i] = 1.0
                coeffs[int(self.var_grid[i, j])] = mat
        return coeffs

    def value(self, y: np.ndarray) -> np.ndarray:
        k = self.size
        out = np.empty((k, k))
        for i in range(k):
            for j in range(i, k):
                out[i, j] = out[j, i] = y[self.var_grid[i, j]]
        return out


class CoefficientSpace:
    """Named decision blocks with a stable global variable index.

    Every scalar decision (a polynomial coefficient, a Gram entry, an
    epigraph or slack scalar) owns one contiguous position; SOS compilation
    and the SDP builder share this numbering.
    """

    def __init__(self):
        self.blocks: dict[str, BlockInfo] = {}
        self.n_vars = 0

    def _register(self, info: BlockInfo) -> BlockInfo:
        if info.name in self.blocks:
            raise SosCompileError(f"decision block {info.name!r} already exists")
        self.blocks[info.name] = info
        return info

    def _alloc(self, count: int) -> list[int]:
        idx = list(range(self.n_vars, self.n_vars + count))
        self.n_vars += count
        return idx

    def poly_monomials(
        self, dimension: int, degree: int, *, exclude_constant=False, exclude_linear=False
    ) -> list[Monomial]:
        monos = monomial_basis(dimension, degree)
        if exclude_constant:
            monos = [m for m in monos if monomial_degree(m) != 0]
        if exclude_linear:
            monos = [m for m in monos if monomial_degree(m) != 1]
        return monos

    def new_polynomial(
        self,
        name: str,
        dimension: int,
        degree: int,
        *,
        exclude_constant: bool = False,
        exclude_linear: bool = False,
    ) -> AffinePoly:
        monos = self.poly_monomials(
            dimension, degree, exclude_constant=exclude_constant, exclude_linear=exclude_linear
        )
        idx = self._alloc(len(monos))
        self._register(
            BlockInfo(name, "poly", idx, dimension, degree, monomials=list(monos))
        )
        return AffinePoly(
            dimension, {m: LinExpr.variable(i) for m, i in zip(monos, idx)}
        )

    def new_polynomial_vector(
        self,
        name: str,
        dimension: int,
        degree: int,
        *,
        exclude_constant: bool = True,
    ) -> list[AffinePoly]:
        monos = self.poly_monomials(dimension, degree, exclude_constant=exclude_constant)
        idx = self._alloc(len(monos) * dimension)
        self._register(
            BlockInfo(name, "poly_vector", idx, dimension, degree, monomials=list(monos))
        )
        comps = []
        for k in range(dimension):
            base = k * len(monos)
            comps.append(
                AffinePoly(
                    dimension,
                    {m: LinExpr.variable(idx[base + j]) for j, m in enumerate(monos)},
                )
            )
        return comps

    def new_gram(self, name: str, basis: list[Monomial]) -> GramBlock:
        k = len(basis)
        idx = self._alloc(k * (k + 1) // 2)
        grid = np.zeros((k, k), dtype=int)
        pos = 0
        for i in range(k):
            for j in range(i, k):
                grid[i, j] = grid[j, i] = idx[pos]
                pos += 1
        info = BlockInfo(name, "gram", idx, basis=list(basis))
        self._register(info)
        return GramBlock(name, list(basis), grid)

    def new_scalar(self, name: str) -> int:
        idx = self._alloc(1)
        self._register(BlockInfo(name, "scalar", idx))
        return idx[0]

    def extract_polynomial(self, name: str, y: np.ndarray, dimension: int) -> Polynomial:
        info = self.blocks[name]
        if info.kind != "poly":
            raise SosCompileError(f"block {name!r} is not a polynomial block")
        return Polynomial(
            dimension, {m: y[i] for m, i in zip(info.monomials, info.indices)}
        )

    def extract_polynomial_vector(self, name: str, y: np.ndarray) -> PolynomialVector:
        info = self.blocks[name]
        if info.kind != "poly_vector":
            raise SosCompileError(f"block {name!r} is not a polynomial-vector block")
        per = len(info.monomials)
        comps = []
        for k in range(info.dimension):
            base = k * per
            comps.append(
                Polynomial(
                    info.dimension,
                    {
                        m: y[info.indices[base + j]]
                        for j, m in enumerate(info.monomials)
                    },
                )
            )
        return PolynomialVector(comps)


# ---------------------------------------------------------------------------
# Gram certificates
# ---------------------------------------------------------------------------


@dataclass
class GramCertificate:
    """PSD Gram matrix witnessing an SOS decomposition over a basis."""

    basis: list[Monomial]
    matrix: np.ndarray
    constraint: str = ""

    def min_eigenvalue(self) -> float:
        if self.matrix.size == 0:
            return 0.0
        return float(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))[0])

    def reconstruct(self, dimension: int) -> Polynomial:
        """z^T G z as a concrete polynomial."""
        terms: dict[Monomial, float] = {}
        k = len(self.basis)
        for i in range(k):
            for j in range(k):
                mono = monomial_mul(self.basis[i], self.basis[j])
                terms[mono] = terms.get(mono, 0.0) + self.matrix[i, j]
        return Polynomial(dimension, terms)

    def verify(
        self,
        target: Polynomial,
        eig_tol: float = 1e-8,
        coef_tol: float = 1e-6,
    ) -> tuple[bool, dict]:
        """Independent re-verification: PSD within eig_tol and coefficient
        reproduction within coef_tol (max absolute residual)."""
        min_eig = self.min_eigenvalue()
        residual = self.reconstruct(target.dimension) - target
        coef_err = residual.max_abs_coefficient()
        ok = min_eig >= -eig_tol and coef_err <= coef_tol
        return ok, {"min_eigenvalue": min_eig, "coefficient_residual": coef_err}

    def to_json_dict(self) -> dict:
        return {
            "constraint": self.constraint,
            "basis": [list(m) for m in self.basis],
            "matrix": self.matrix.tolist(),
        }

    @staticmethod
    def from_json_dict(data: Mapping) -> "GramCertificate":
        return GramCertificate(
            basis=[tuple(m) for m in data["basis"]],
            matrix=np.array(data["matrix"], dtype=float),
            constraint=data.get("constraint", ""),
        )


# ---------------------------------------------------------------------------
# SOS constraint compilation
# ---------------------------------------------------------------------------


@dataclass
class CompiledSosConstraint:
    """A Gram block plus the coefficient-matching equality rows."""

    name: str
    gram: GramBlock
    equalities: list[tuple[dict[int, float], float]]
    degree_bound: int

    def install(self, builder: SdpBuilder):
        builder.add_block(
            self.name,
            self.gram.size,
            np.zeros((self.gram.size, self.gram.size)),
            self.gram.matrix_coeffs(),
        )
        for coeffs, rhs in self.equalities:
            builder.add_equality(coeffs, rhs)


def sos_basis_for(
    dimension: int,
    max_degree: int,
    min_degree: int = 0,
) -> list[Monomial]:
    """Gram basis covering monomials of total degree in [min_degree, max_degree].

    Basis degrees run from ceil(min_degree/2) to floor(max_degree/2); any SOS
    polynomial supported on that degree range admits a Gram over this basis.
    """
    lo = (min_degree + 1) // 2
    hi = max_degree // 2
    return [m for m in monomial_basis(dimension, hi) if monomial_degree(m) >= lo]


def compile_sos_constraint(
    expr: AffinePoly,
    space: CoefficientSpace,
    name: str,
    *,
    basis: list[Monomial] | None = None,
    min_degree: int = 0,
    allow_odd: bool = False,
) -> CompiledSosConstraint:
    """Compile "expr is SOS" into a fresh Gram block plus equalities.

    A new symmetric Gram block G over the monomial basis (full basis up to
    half the degree bound by default) is added to the space; one equality per
    monomial equates the Gram expansion with expr's coefficient. When the
    structural degree bound is odd, the top-degree coefficients cannot be
    covered by any Gram term: with allow_odd they become forced-cancellation
    equalities (decision coefficients pinned so the instantiated expression
    has even degree), otherwise the expression is rejected.
    """
    bound = expr.degree
    if bound % 2 == 1 and not allow_odd:
        raise OddDegreeError(
            f"constraint {name!r}: degree bound {bound} is odd; no SOS "
            "representation possible"
        )
    if basis is None:
        basis = sos_basis_for(expr.dimension, bound, min_degree)
    gram = space.new_gram(f"{name}.gram", basis)
    expansion = gram.expansion(expr.dimension)

    monos = set(expr.terms) | set(expansion.terms)
    equalities: list[tuple[dict[int, float], float]] = []
    for mono in sorted(monos, key=grlex_key):
        lhs = expr.terms.get(mono, LinExpr())
        rhs = expansion.terms.get(mono, LinExpr())
        row = dict(lhs.coeffs)
        for i, c in rhs.coeffs.items():
            row[i] = row.get(i, 0.0) - c
        equalities.append((row, rhs.const - lhs.const))
    return CompiledSosConstraint(name, gram, equalities, bound)


def check_sos(
    p: Polynomial,
    eig_tol: float = 1e-8,
    coef_tol: float = 1e-6,
) -> GramCertificate | None:
    """Search for an SOS certificate of a fixed polynomial.

    Solves the Gram feasibility problem with a maximum-minimum-eigenvalue
    objective (bounded, and it returns the best-conditioned certificate), and
    re-verifies the result independently before returning it. Returns None
    when the polynomial is not SOS.
    """
    from . import sdp as sdp_mod

    if p.degree % 2 == 1:
        raise OddDegreeError(
            f"polynomial of odd degree {p.degree} cannot be a sum of squares"
        )
    space = CoefficientSpace()
    expr = AffinePoly.from_fixed(p)
    compiled = compile_sos_constraint(expr, space, "sos_check")
    lam = space.new_scalar("margin")

    builder = SdpBuilder()
    builder.new_vars(space.n_vars)
    # Block: G - lam * I >= 0, with objective max lam.
    k = compiled.gram.size
    coeffs = compiled.gram.matrix_coeffs()
    coeffs[lam] = -np.eye(k)
    builder.add_block("gram_margin", k, np.zeros((k, k)), coeffs)
    for row, rhs in compiled.equalities:
        builder.add_equality(row, rhs)
    builder.add_objective_term(lam, -1.0)

    solution = sdp_mod.solve(builder.build())
    if solution.x is None:
        if solution.status == sdp_mod.STATUS_INFEASIBLE:
            return None
        raise RuntimeError(
            f"SOS check failed to solve: {solution.status} ({solution.message})"
        )
    margin = solution.x[lam]
    if solution.status not in (
        sdp_mod.STATUS_OPTIMAL,
        sdp_mod.STATUS_MAX_ITERATIONS,
    ):
        raise RuntimeError(
            f"SOS check failed to solve: {solution.status} ({solution.message})"
        )
    if margin < -1e-9:
        return None
    cert = GramCertificate(
        basis=list(compiled.gram.basis),
        matrix=compiled.gram.value(solution.x),
        constraint="sos_check",
    )
    ok, _ = cert.verify(p, eig_tol=eig_tol, coef_tol=coef_tol)
    return cert if ok else None


# ---------------------------------------------------------------------------
# Symbolic expressions over named blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    """Reference to (a component / partial derivative of) a named block."""

    block: str
    component: int | None = None
    diff_axis: int | None = None


@dataclass
class SymTerm:
    coef: float
    fixed: tuple[Polynomial, ...]
    refs: tuple[Ref, ...]


class SymExpr:
    """Sum of products of fixed polynomials and named block references.

    Constraints are stated once in this form; bilinear_structure reports
    which block pairs multiply, and lowering substitutes fixed values for
    one side of every pair to produce a compilable AffinePoly.
    """

    def __init__(self, terms: list[SymTerm] | None = None):
        self.terms = terms or []

    @staticmethod
    def fixed(p: Polynomial, coef: float = 1.0) -> "SymExpr":
        return SymExpr([SymTerm(coef, (p,), ())])

    @staticmethod
    def ref(block: str, component: int | None = None, diff_axis: int | None = None) -> "SymExpr":
        return SymExpr([SymTerm(1.0, (), (Ref(block, component, diff_axis),))])

    @staticmethod
    def constant(value: float, dimension: int) -> "SymExpr":
        return SymExpr.fixed(Polynomial.constant(value, dimension))

    @staticmethod
    def grad_dot(scalar_block: str, field_block: str, dimension: int) -> "SymExpr":
        """The Lie-derivative pattern  sum_k (d scalar / d x_k) * field_k."""
        terms = [
            SymTerm(
                1.0,
                (),
                (Ref(scalar_block, None, k), Ref(field_block, k, None)),
            )
            for k in range(dimension)
        ]
        return SymExpr(terms)

    def __add__(self, other: "SymExpr") -> "SymExpr":
        return SymExpr(self.terms + other.terms)

    def __sub__(self, other: "SymExpr") -> "SymExpr":
        return self + other.scale(-1.0)

    def scale(self, scalar: float) -> "SymExpr":
        return SymExpr(
            [SymTerm(t.coef * scalar, t.fixed, t.refs) for t in self.terms]
        )

    def __neg__(self) -> "SymExpr":
        return self.scale(-1.0)

    def __mul__(self, other: "SymExpr") -> "SymExpr":
        out = []
        for a in self.terms:
            for b in other.terms:
                out.append(
                    SymTerm(a.coef * b.coef, a.fixed + b.fixed, a.refs + b.refs)
                )
        return SymExpr(out)


@dataclass
class BilinearReport:
    """Which decision-block pairs appear multiplied in an expression."""

    pairs: set[tuple[str, str]]
    self_quadratic: set[str]

    def violations(self, free: set[str]) -> set[tuple[str, str]]:
        """Pairs with both sides free: not solvable as a single convex SDP."""
        return {p for p in self.pairs if p[0] in free and p[1] in free}


def bilinear_structure(expr: SymExpr, free: set[str]) -> BilinearReport:
    """Report distinct free-block pairs multiplied together, and free blocks
    appearing with power >= 2 in some term (e.g. B^2 in the barrier band
    condition, which the learner handles by linearization, not by fixing)."""
    pairs: set[tuple[str, str]] = set()
    self_quad: set[str] = set()
    for term in expr.terms:
        names = [r.block for r in term.refs if r.block in free]
        unique = sorted(set(names))
        for i in range(len(unique)):
            for j in range(i + 1, len(unique)):
                pairs.add((unique[i], unique[j]))
        for name in unique:
            if names.count(name) >= 2:
                self_quad.add(name)
    return BilinearReport(pairs=pairs, self_quadratic=self_quad)


def _resolve_fixed(ref: Ref, value) -> Polynomial:
    if isinstance(value, PolynomialVector):
        if ref.component is None:
            raise SosCompileError(
                f"block {ref.block!r} is a vector; component index required"
            )
        p = value[ref.component]
    else:
        if ref.component is not None:
            raise SosCompileError(f"block {ref.block!r} is scalar-valued")
        p = value
    if ref.diff_axis is not None:
        p = p.differentiate(ref.diff_axis)
    return p


def _resolve_free(ref: Ref, value) -> AffinePoly:
    if isinstance(value, list):
        if ref.component is None:
            raise SosCompileError(
                f"block {ref.block!r} is a vector; component index required"
            )
        p = value[ref.component]
    else:
        if ref.component is not None:
            raise SosCompileError(f"block {ref.block!r} is scalar-valued")
        p = value
    if ref.diff_axis is not None:
        p = p.differentiate(ref.diff_axis)
    return p


def lower(
    expr: SymExpr,
    dimension: int,
    free: Mapping[str, AffinePoly | list[AffinePoly]],
    fixed: Mapping[str, Polynomial | PolynomialVector],
) -> AffinePoly:
    """Lower a symbolic expression to an AffinePoly.

    Every reference must resolve through `free` (decision polynomials) or
    `fixed` (concrete values); any term still containing two free references
    after substitution is a bilinear leftover and is rejected.
    """
    result = AffinePoly(dimension)
    for term in expr.terms:
        fixed_part = Polynomial.constant(term.coef, dimension)
        for p in term.fixed:
            fixed_part = fixed_part * p
        decision: AffinePoly | None = None
        for ref in term.refs:
            if ref.block in fixed:
                fixed_part = fixed_part * _resolve_fixed(ref, fixed[ref.block])
            elif ref.block in free:
                if decision is not None:
                    raise SosCompileError(
                        f"bilinear term: two free references in one product "
                        f"(second is {ref.block!r})"
                    )
                decision = _resolve_free(ref, free[ref.block])
            else:
                raise SosCompileError(f"unknown decision block {ref.block!r}")
        if decision is None:
            result = result + AffinePoly.from_fixed(fixed_part)
        else:
            result = result + decision.mul_fixed(fixed_part)
    return result
