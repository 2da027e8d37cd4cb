"""Assembly of the convex SOS subproblems solved during learning.

The full problem couples the dynamics f, the Lyapunov function V, the
barrier B and the band multiplier phi through bilinear products (V with f,
B with f, phi with B). Each phase here fixes one side of every bilinear
pair, yielding a genuine SDP:

* field phase: fix V, B, phi; solve f and the set multipliers, minimizing
  the velocity-matching objective.
* certificate phase: fix f and phi; solve V, B and the set multipliers.
  The B^2 term in the band condition is replaced by its affine minorant
  2*B*B_prev - B_prev^2, a sound restriction since phi >= 0 and
  B^2 >= 2*B*B_prev - B_prev^2.
* band-multiplier phase: fix f, V, B; solve phi and the set multipliers.
* Lyapunov phase (barrier-free learning): fix f; solve V, minimizing hinge
  violations of the decrease condition at the data, which steers V toward
  the demonstrated flow before the next field phase.

The band condition optionally carries a scalar slack (penalized in the
objective) so early rounds stay feasible while the alternation pulls the
iterates toward an exactly feasible certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..poly import Polynomial, PolynomialVector, monomial_basis
from ..sdp import SdpBuilder, SdpSolution, solve as sdp_solve
from ..sdp import (
    STATUS_INFEASIBLE,
    STATUS_MAX_ITERATIONS,
    STATUS_OPTIMAL,
)
from ..semialg import BasicSemialgebraicSet
from ..sos import (
    AffinePoly,
    CoefficientSpace,
    GramCertificate,
    LinExpr,
    SymExpr,
    bilinear_structure,
    compile_sos_constraint,
    lower,
)
from .dataset import TrajectoryDataset


class PhaseInfeasibleError(RuntimeError):
    """A convex phase came back infeasible at the configured degrees."""

    def __init__(self, phase: str, message: str, suggestion: str = ""):
        super().__init__(f"{phase}: {message}" + (f" ({suggestion})" if suggestion else ""))
        self.phase = phase
        self.suggestion = suggestion


def _even_up(d: int) -> int:
    return d if d % 2 == 0 else d + 1


@dataclass
class DegreePlan:
    """Resolved degrees for every decision polynomial, parity-consistent.

    Multiplier degrees default to the smallest values that keep each
    localized constraint's degree bound even; any bump away from the
    configured value is recorded.
    """

    deg_f: int
    deg_v: int
    deg_b: int
    deg_phi: int
    deg_tau: list[int]
    deg_sigma: list[list[int]]
    adjustments: list[str] = field(default_factory=list)

    @staticmethod
    def create(
        dimension: int,
        deg_f: int,
        deg_v: int,
        deg_b: int | None,
        x0_set: BasicSemialgebraicSet | None,
        unsafe_sets: Sequence[BasicSemialgebraicSet],
        deg_tau: int | None = None,
        deg_sigma: int | None = None,
        deg_phi: int = 0,
    ) -> "DegreePlan":
        adjustments: list[str] = []
        if deg_v % 2 != 0 or deg_v < 2:
            raise ValueError(f"deg_V must be a positive even integer, got {deg_v}")
        if deg_f < 1:
            raise ValueError(f"deg_f must be >= 1, got {deg_f}")

        def multiplier_degree(configured: int | None, target: int, g_deg: int, name: str) -> int:
            rule = 2 * max(0, -(-(target - g_deg) // 2))  # 2*ceil((target-g)/2), >= 0
            d = rule if configured is None else configured
            if (d + g_deg) % 2 != 0 and max(target, d + g_deg) % 2 != 0:
                adjustments.append(f"{name}: degree raised {d} -> {d + 1} for parity")
                d += 1
            return d

        taus: list[int] = []
        if x0_set is not None:
            for i, g in enumerate(x0_set.inequalities):
                taus.append(multiplier_degree(deg_tau, deg_b or 0, g.degree, f"tau{i}"))
        sigmas: list[list[int]] = []
        for o, unsafe in enumerate(unsafe_sets):
            sigmas.append(
                [
                    multiplier_degree(deg_sigma, deg_b or 0, g.degree, f"sigma{o}_{j}")
                    for j, g in enumerate(unsafe.inequalities)
                ]
            )

        phi = deg_phi
        if deg_b is not None:
            if phi % 2 != 0:
                adjustments.append(f"phi: degree raised {phi} -> {phi + 1} (SOS parity)")
                phi += 1
            lie_deg = deg_b - 1 + deg_f
            # Band bound max(lie_deg, phi + 2*deg_b) must be even.
            while max(lie_deg, phi + 2 * deg_b) % 2 != 0:
                adjustments.append(
                    f"phi: degree raised {phi} -> {phi + 2} to even the band condition"
                )
                phi += 2
        return DegreePlan(
            deg_f=deg_f,
            deg_v=deg_v,
            deg_b=deg_b if deg_b is not None else 0,
            deg_phi=phi,
            deg_tau=taus,
            deg_sigma=sigmas,
            adjustments=adjustments,
        )


# ---------------------------------------------------------------------------
# Symbolic constraint statements
# ---------------------------------------------------------------------------


def stability_positivity(n: int, eps3: float) -> SymExpr:
    """V(x) - eps3*||x||^2 is SOS."""
    return SymExpr.ref("V") - SymExpr.fixed(Polynomial.norm_squared(n), eps3)


def stability_decrease(n: int, eps3: float) -> SymExpr:
    """-grad(V)^T f - eps3*||x||^2 is SOS."""
    return -SymExpr.grad_dot("V", "f", n) - SymExpr.fixed(
        Polynomial.norm_squared(n), eps3
    )


def initial_containment(x0_set: BasicSemialgebraicSet, margin: float = 0.0) -> SymExpr:
    """-B - margin - sum_i tau_i * g_i is SOS (forces B <= -margin on the
    initial set). A margin above sqrt(eps1) keeps the initial set out of the
    band where B must strictly decrease, which is unachievable at the
    attractor itself (f(0) = 0 pins grad(B)^T f there)."""
    n = x0_set.dimension
    expr = -SymExpr.ref("B")
    if margin:
        expr = expr - SymExpr.constant(margin, n)
    for i, g in enumerate(x0_set.inequalities):
        expr = expr - SymExpr.ref(f"tau{i}") * SymExpr.fixed(g)
    return expr


def unsafe_exclusion(obstacle_idx: int, unsafe: BasicSemialgebraicSet, eps2: float) -> SymExpr:
    """B - eps2 - sum_j sigma_j * g_j is SOS (forces B >= eps2 on the unsafe set)."""
    n = unsafe.dimension
    expr = SymExpr.ref("B") - SymExpr.constant(eps2, n)
    for j, g in enumerate(unsafe.inequalities):
        expr = expr - SymExpr.ref(f"sigma{obstacle_idx}_{j}") * SymExpr.fixed(g)
    return expr


def band_decrease(n: int, eps1: float, eps2: float) -> SymExpr:
    """-grad(B)^T f - phi*(eps1 - B^2) - eps2*||x||^2 is SOS."""
    phi = SymExpr.ref("phi")
    return (
        -SymExpr.grad_dot("B", "f", n)
        - phi.scale(eps1)
        + phi * SymExpr.ref("B") * SymExpr.ref("B")
        - SymExpr.fixed(Polynomial.norm_squared(n), eps2)
    )


def band_decrease_linearized(
    n: int, eps1: float, eps2: float, b_prev: Polynomial
) -> SymExpr:
    """Band condition with B^2 minorized at b_prev: 2*B*b_prev - b_prev^2."""
    phi = SymExpr.ref("phi")
    return (
        -SymExpr.grad_dot("B", "f", n)
        - phi.scale(eps1)
        + (phi * SymExpr.ref("B") * SymExpr.fixed(b_prev)).scale(2.0)
        - phi * SymExpr.fixed(b_prev * b_prev)
        - SymExpr.fixed(Polynomial.norm_squared(n), eps2)
    )


# Canonical constraint labels used in certificates and diagnostics.
LBL_STAB_POS = "lyapunov_positivity"
LBL_STAB_DEC = "lyapunov_decrease"
LBL_INIT = "barrier_initial_set"
LBL_UNSAFE = "barrier_unsafe_set_{o}"
LBL_BAND = "barrier_band_decrease"
LBL_SOS = "sos_multiplier_{name}"


@dataclass
class PhaseResult:
    """Outcome of one convex phase."""

    status: str
    values: dict  # role name -> Polynomial | PolynomialVector
    certificates: dict[str, GramCertificate]
    certificate_targets: dict[str, Polynomial]
    objective: float | None
    mse_term: float | None = None
    slack: float = 0.0
    iterations: int = 0
    solver_message: str = ""


class PhaseAssembler:
    """Shared machinery: allocate free blocks, lower + compile constraints,
    install everything into one SdpBuilder with aligned variable indexing."""

    def __init__(self, dimension: int):
        self.n = dimension
        self.space = CoefficientSpace()
        self.free: dict[str, AffinePoly | list[AffinePoly]] = {}
        self.fixed: dict[str, Polynomial | PolynomialVector] = {}
        self.compiled: list = []
        self.cert_exprs: dict[str, AffinePoly] = {}
        self.slack_vars: dict[str, int] = {}
        self._pending_ineqs: list[tuple[str, dict[int, float], float]] = []

    # -- decision blocks ----------------------------------------------------

    def free_field(self, degree: int) -> None:
        self.free["f"] = self.space.new_polynomial_vector(
            "f", self.n, degree, exclude_constant=True
        )

    def free_poly(self, role: str, degree: int, *, no_constant=False, no_linear=False):
        self.free[role] = self.space.new_polynomial(
            role, self.n, degree, exclude_constant=no_constant, exclude_linear=no_linear
        )

    def fix(self, role: str, value: Polynomial | PolynomialVector) -> None:
        self.fixed[role] = value

    # -- constraints ----------------------------------------------------------

    def add_sos(
        self,
        label: str,
        expr: SymExpr,
        *,
        min_degree: int = 0,
        slack: bool = False,
    ) -> None:
        """Lower a symbolic constraint and compile it to a Gram block.

        The schedule must have fixed one side of every bilinear pair first;
        leftovers raise. With slack=True a scalar s >= 0 is added through
        s * (1 + ||x||^2)^(bound/2), relaxing the constraint; the phase
        objective penalizes s.
        """
        report = bilinear_structure(expr, set(self.free))
        leftovers = report.violations(set(self.free))
        if leftovers:
            raise ValueError(f"{label}: unresolved bilinear pairs {sorted(leftovers)}")
        lowered = lower(expr, self.n, self.free, self.fixed)
        bound = lowered.degree
        if slack:
            s_idx = self.space.new_scalar(f"slack.{label}")
            self.slack_vars[label] = s_idx
            envelope = (
                Polynomial.constant(1.0, self.n) + Polynomial.norm_squared(self.n)
            ) ** (_even_up(bound) // 2)
            slack_terms = AffinePoly(
                self.n,
                {m: LinExpr.variable(s_idx, c) for m, c in envelope.terms.items()},
            )
            lowered = lowered + slack_terms
        compiled = compile_sos_constraint(
            lowered, self.space, label, min_degree=min_degree, allow_odd=True
        )
        self.compiled.append(compiled)
        self.cert_exprs[label] = lowered

    def add_multiplier_sos(self, role: str) -> None:
        poly = self.free[role]
        self.add_sos(LBL_SOS.format(name=role), SymExpr.ref(role))

    def add_upper_bound_rows(self, label: str, expr: AffinePoly, points: np.ndarray):
        """Rows expr(x_i) <= 0 for each point (linear in the decisions)."""
        for i, x in enumerate(points):
            lin = expr.evaluate(x)
            self._pending_ineqs.append(
                (f"{label}[{i}]", {v: -c for v, c in lin.coeffs.items()}, lin.const)
            )

    def bound_coefficients(self, role: str, bound: float):
        """Box constraints |coef| <= bound on a polynomial block. Keeps the
        free scale of B and phi from drifting to magnitudes that destabilize
        the cone solve (their constraints do not pin the scale otherwise)."""
        info = self.space.blocks[role]
        for pos, idx in enumerate(info.indices):
            self._pending_ineqs.append((f"cap_hi.{role}[{pos}]", {idx: -1.0}, -bound))
            self._pending_ineqs.append((f"cap_lo.{role}[{pos}]", {idx: 1.0}, -bound))

    # -- finalize -------------------------------------------------------------

    def make_builder(self) -> SdpBuilder:
        builder = SdpBuilder()
        builder.new_vars(self.space.n_vars)
        for compiled in self.compiled:
            compiled.install(builder)
        for name, coeffs, lower_bound in self._pending_ineqs:
            builder.add_scalar_inequality(name, coeffs, lower_bound)
        for label, s_idx in self.slack_vars.items():
            builder.add_scalar_inequality(f"slack_nonneg.{label}", {s_idx: 1.0}, 0.0)
        return builder

    def field_var_indices(self) -> list[int]:
        return list(self.space.blocks["f"].indices)

    def field_residual_system(
        self, positions: np.ndarray, velocities: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Residual rows of sum_i ||v_i - f(x_i)||^2 over f's coefficients."""
        info = self.space.blocks["f"]
        monos = info.monomials
        mono_vals = np.column_stack(
            [
                np.prod(positions ** np.array(m, dtype=float), axis=1)
                for m in monos
            ]
        )
        n_pts = positions.shape[0]
        per = len(monos)
        lhs = np.zeros((n_pts * self.n, self.n * per))
        rhs = np.zeros(n_pts * self.n)
        for k in range(self.n):
            lhs[k::self.n, k * per : (k + 1) * per] = mono_vals
            rhs[k::self.n] = velocities[:, k]
        return lhs, rhs

    def extract(self, solution: SdpSolution, problem_blocks) -> PhaseResult:
        y = solution.x
        values: dict = {}
        for role, entry in self.free.items():
            if isinstance(entry, list):
                values[role] = self.space.extract_polynomial_vector(role, y)
            else:
                values[role] = self.space.extract_polynomial(role, y, self.n)
        certificates: dict[str, GramCertificate] = {}
        targets: dict[str, Polynomial] = {}
        block_index = {blk.name: i for i, blk in enumerate(problem_blocks)}
        for compiled in self.compiled:
            idx = block_index[compiled.name]
            gram_matrix = (
                solution.block_slacks[idx]
                if solution.block_slacks is not None
                else None
            )
            if gram_matrix is None:
                gram_matrix = compiled.gram.value(y)
            certificates[compiled.name] = GramCertificate(
                basis=list(compiled.gram.basis),
                matrix=np.asarray(gram_matrix, dtype=float),
                constraint=compiled.name,
            )
            targets[compiled.name] = self.cert_exprs[compiled.name].substitute(y)
        slack_total = float(
            sum(max(y[s], 0.0) for s in self.slack_vars.values())
        )
        return PhaseResult(
            status=solution.status,
            values=values,
            certificates=certificates,
            certificate_targets=targets,
            objective=solution.objective,
            slack=slack_total,
            iterations=solution.iterations,
            solver_message=solution.message,
        )


def _run(
    assembler: PhaseAssembler,
    builder: SdpBuilder,
    phase: str,
    tol: float,
    max_iter: int,
    suggestion: str,
) -> tuple[PhaseResult, SdpSolution]:
    problem = builder.build()
    solution = sdp_solve(problem, tol=tol, max_iter=max_iter)
    if solution.status == STATUS_INFEASIBLE:
        raise PhaseInfeasibleError(phase, "subproblem infeasible", suggestion)
    if solution.status not in (STATUS_OPTIMAL, STATUS_MAX_ITERATIONS) or solution.x is None:
        raise PhaseInfeasibleError(
            phase, f"solver failure: {solution.status} ({solution.message})", suggestion
        )
    result = assembler.extract(solution, problem.blocks)
    return result, solution


# ---------------------------------------------------------------------------
# Concrete phases
# ---------------------------------------------------------------------------


def solve_warm_start(
    positions: np.ndarray,
    velocities: np.ndarray,
    eps3: float,
    tol: float = 1e-7,
    max_iter: int = 200,
) -> tuple[np.ndarray, SdpSolution]:
    """Convex warm start: linear f(x) = A x with V(x) = x^T x.

    Minimizes sum ||v_i - A x_i||^2 subject to -(A + A^T) - 2*eps3*I >= 0,
    which makes the Lyapunov decrease condition hold for V = x^T x.
    """
    n = positions.shape[1]
    builder = SdpBuilder()
    a_vars = builder.new_vars(n * n)  # row-major A entries

    coeffs: dict[int, np.ndarray] = {}
    for i in range(n):
        for j in range(n):
            mat = np.zeros((n, n))
            mat[i, j] -= 1.0
            mat[j, i] -= 1.0
            idx = a_vars[i * n + j]
            coeffs[idx] = coeffs.get(idx, np.zeros((n, n))) + mat
    builder.add_block("stability", n, -2.0 * eps3 * np.eye(n), coeffs)

    n_pts = positions.shape[0]
    lhs = np.zeros((n_pts * n, n * n))
    rhs = np.zeros(n_pts * n)
    for k in range(n):
        lhs[k::n, k * n : (k + 1) * n] = positions
        rhs[k::n] = velocities[:, k]
    t_idx = builder.add_least_squares_epigraph("fit", a_vars, lhs, rhs)
    builder.add_objective_term(t_idx, 1.0)

    solution = sdp_solve(builder.build(), tol=tol, max_iter=max_iter)
    if solution.status == STATUS_INFEASIBLE:
        raise PhaseInfeasibleError("warm_start", "stability LMI infeasible")
    if solution.x is None:
        raise PhaseInfeasibleError(
            "warm_start", f"solver failure: {solution.status} ({solution.message})"
        )
    a = solution.x[np.array(a_vars)].reshape(n, n)
    return a, solution


def solve_field_phase(
    dataset_positions: np.ndarray,
    dataset_velocities: np.ndarray,
    plan: DegreePlan,
    eps1: float,
    eps2: float,
    eps3: float,
    v_fixed: Polynomial,
    b_fixed: Polynomial | None,
    phi_fixed: Polynomial | None,
    x0_set: BasicSemialgebraicSet | None,
    unsafe_sets: Sequence[BasicSemialgebraicSet],
    *,
    band_slack: bool,
    slack_penalty: float,
    tol: float,
    max_iter: int,
) -> PhaseResult:
    """Fix V, B, phi; fit f (and set multipliers) to the data."""
    n = dataset_positions.shape[1]
    asm = PhaseAssembler(n)
    asm.free_field(plan.deg_f)
    asm.fix("V", v_fixed)
    asm.add_sos(LBL_STAB_DEC, stability_decrease(n, eps3), min_degree=2)
    if b_fixed is not None:
        asm.fix("B", b_fixed)
        asm.fix("phi", phi_fixed)
        if x0_set is not None:
            for i, d in enumerate(plan.deg_tau):
                asm.free_poly(f"tau{i}", d)
                asm.add_multiplier_sos(f"tau{i}")
            asm.add_sos(LBL_INIT, initial_containment(x0_set))
        for o, unsafe in enumerate(unsafe_sets):
            for j, d in enumerate(plan.deg_sigma[o]):
                asm.free_poly(f"sigma{o}_{j}", d)
                asm.add_multiplier_sos(f"sigma{o}_{j}")
            asm.add_sos(LBL_UNSAFE.format(o=o), unsafe_exclusion(o, unsafe, eps2))
        asm.add_sos(LBL_BAND, band_decrease(n, eps1, eps2), slack=band_slack)

    builder = asm.make_builder()
    lhs, rhs = asm.field_residual_system(dataset_positions, dataset_velocities)
    t_idx = builder.add_least_squares_epigraph("fit", asm.field_var_indices(), lhs, rhs)
    builder.add_objective_term(t_idx, 1.0)
    for s_idx in asm.slack_vars.values():
        builder.add_objective_term(s_idx, slack_penalty)

    result, solution = _run(
        asm,
        builder,
        "field_phase",
        tol,
        max_iter,
        "increase deg_f (or the multiplier degrees) and retry",
    )
    result.mse_term = max(float(solution.x[t_idx]), 0.0) / dataset_positions.shape[0]
    return result


def solve_lyapunov_phase(
    dataset_positions: np.ndarray,
    dataset_velocities: np.ndarray,
    plan: DegreePlan,
    eps3: float,
    f_fixed: PolynomialVector,
    *,
    tol: float,
    max_iter: int,
) -> PhaseResult:
    """Fix f; solve V, minimizing hinge violations of grad(V)^T v <= 0 at
    the data so the next field phase can track the demonstrations."""
    n = dataset_positions.shape[1]
    asm = PhaseAssembler(n)
    asm.free_poly("V", plan.deg_v, no_constant=True, no_linear=True)
    asm.fix("f", f_fixed)
    asm.add_sos(LBL_STAB_POS, stability_positivity(n, eps3), min_degree=2)
    asm.add_sos(LBL_STAB_DEC, stability_decrease(n, eps3), min_degree=2)

    builder = asm.make_builder()
    v_poly = asm.free["V"]
    grad = [v_poly.differentiate(k) for k in range(n)]
    for i in range(dataset_positions.shape[0]):
        x = dataset_positions[i]
        v = dataset_velocities[i]
        lin = LinExpr()
        for k in range(n):
            lin = lin + grad[k].evaluate(x) * float(v[k])
        s_idx = builder.new_var()
        # s_i >= grad V(x_i) . v_i  and  s_i >= 0
        row = {v_idx: -c for v_idx, c in lin.coeffs.items()}
        row[s_idx] = row.get(s_idx, 0.0) + 1.0
        builder.add_scalar_inequality(f"hinge[{i}]", row, lin.const)
        builder.add_scalar_inequality(f"hinge_pos[{i}]", {s_idx: 1.0}, 0.0)
        builder.add_objective_term(s_idx, 1.0 / dataset_positions.shape[0])

    result, _ = _run(
        asm,
        builder,
        "lyapunov_phase",
        tol,
        max_iter,
        "increase deg_V and retry",
    )
    return result


def solve_certificate_phase(
    dataset_positions: np.ndarray,
    plan: DegreePlan,
    eps1: float,
    eps2: float,
    eps3: float,
    f_fixed: PolynomialVector,
    phi_fixed: Polynomial,
    b_prev: Polynomial,
    x0_set: BasicSemialgebraicSet,
    unsafe_sets: Sequence[BasicSemialgebraicSet],
    *,
    slack_penalty: float,
    tol: float,
    max_iter: int,
    coeff_bound: float = 50.0,
    demo_margin: float = 0.0,
) -> PhaseResult:
    """Fix f and phi; solve V, B, tau, sigma with the band condition
    linearized around b_prev. Keeps B <= -demo_margin at every reference
    sample (and on the initial set), so the demonstrations never enter the
    band where strict barrier decrease is demanded."""
    n = dataset_positions.shape[1]
    asm = PhaseAssembler(n)
    asm.free_poly("V", plan.deg_v, no_constant=True, no_linear=True)
    asm.free_poly("B", plan.deg_b)
    asm.fix("f", f_fixed)
    asm.fix("phi", phi_fixed)
    asm.add_sos(LBL_STAB_POS, stability_positivity(n, eps3), min_degree=2)
    asm.add_sos(LBL_STAB_DEC, stability_decrease(n, eps3), min_degree=2)
    for i, d in enumerate(plan.deg_tau):
        asm.free_poly(f"tau{i}", d)
        asm.add_multiplier_sos(f"tau{i}")
    asm.add_sos(LBL_INIT, initial_containment(x0_set, demo_margin))
    for o, unsafe in enumerate(unsafe_sets):
        for j, d in enumerate(plan.deg_sigma[o]):
            asm.free_poly(f"sigma{o}_{j}", d)
            asm.add_multiplier_sos(f"sigma{o}_{j}")
        asm.add_sos(LBL_UNSAFE.format(o=o), unsafe_exclusion(o, unsafe, eps2))
    asm.add_sos(
        LBL_BAND,
        band_decrease_linearized(n, eps1, eps2, b_prev),
        slack=True,
    )
    demo_expr = asm.free["B"] + Polynomial.constant(demo_margin, n)
    asm.add_upper_bound_rows("demo_below_band", demo_expr, dataset_positions)
    asm.bound_coefficients("B", coeff_bound)

    builder = asm.make_builder()
    for s_idx in asm.slack_vars.values():
        builder.add_objective_term(s_idx, 1.0)

    result, _ = _run(
        asm,
        builder,
        "certificate_phase",
        tol,
        max_iter,
        "increase deg_B or the multiplier degrees and retry",
    )
    return result


def solve_band_multiplier_phase(
    plan: DegreePlan,
    eps1: float,
    eps2: float,
    f_fixed: PolynomialVector,
    b_fixed: Polynomial,
    x0_set: BasicSemialgebraicSet,
    unsafe_sets: Sequence[BasicSemialgebraicSet],
    *,
    slack_penalty: float,
    tol: float,
    max_iter: int,
    coeff_bound: float = 100.0,
) -> PhaseResult:
    """Fix f, V, B; re-optimize the band multiplier phi (true band condition,
    affine in phi once B is fixed) together with the set multipliers."""
    n = b_fixed.dimension
    asm = PhaseAssembler(n)
    asm.free_poly("phi", plan.deg_phi)
    asm.fix("f", f_fixed)
    asm.fix("B", b_fixed)
    asm.add_multiplier_sos("phi")
    asm.bound_coefficients("phi", coeff_bound)
    for i, d in enumerate(plan.deg_tau):
        asm.free_poly(f"tau{i}", d)
        asm.add_multiplier_sos(f"tau{i}")
    asm.add_sos(LBL_INIT, initial_containment(x0_set))
    for o, unsafe in enumerate(unsafe_sets):
        for j, d in enumerate(plan.deg_sigma[o]):
            asm.free_poly(f"sigma{o}_{j}", d)
            asm.add_multiplier_sos(f"sigma{o}_{j}")
        asm.add_sos(LBL_UNSAFE.format(o=o), unsafe_exclusion(o, unsafe, eps2))
    asm.add_sos(LBL_BAND, band_decrease(n, eps1, eps2), slack=True)

    builder = asm.make_builder()
    for s_idx in asm.slack_vars.values():
        builder.add_objective_term(s_idx, 1.0)

    result, _ = _run(
        asm,
        builder,
        "band_multiplier_phase",
        tol,
        max_iter,
        "increase deg_phi and retry",
    )
    return result
