"""Block-diagonal semidefinite programming layer.

Problems are stated in linear-matrix-inequality form: a decision vector y,
a linear objective, affine symmetric-matrix-valued block maps required to be
positive semidefinite, and an affine equality system. This is the compile
target of every SOS constraint in the package.

Equalities are eliminated by nullspace projection before the cone solve
(coefficient-matching systems are large and highly redundant), and the
reduced cone problem is handed to cvxopt's primal-dual interior-point
method with Nesterov-Todd scaling. Solutions are re-verified post hoc by
independent eigenvalue and residual computation; solver internals are not
trusted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITERATIONS = "max_iterations"
STATUS_NUMERICAL_FAILURE = "numerical_failure"


class SdpInputError(ValueError):
    """Raised for malformed problems (bad shapes, indefinite objectives)."""


@dataclass
class SdpBlock:
    """Affine symmetric-matrix map  F(y) = const + sum_i y_i * coeffs[i]."""

    name: str
    size: int
    const: np.ndarray
    coeffs: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.const = np.asarray(self.const, dtype=float)
        if self.const.shape != (self.size, self.size):
            raise SdpInputError(
                f"block {self.name}: const shape {self.const.shape} != {(self.size, self.size)}"
            )
        for i, mat in list(self.coeffs.items()):
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (self.size, self.size):
                raise SdpInputError(
                    f"block {self.name}: coeff {i} shape {mat.shape} != {(self.size, self.size)}"
                )
            self.coeffs[i] = mat

    def value(self, y: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for i, mat in self.coeffs.items():
            out += y[i] * mat
        return 0.5 * (out + out.T)


@dataclass
class SdpProblem:
    """Linear objective over PSD block constraints and affine equalities."""

    n_vars: int
    objective: np.ndarray
    blocks: list[SdpBlock]
    eq_coeffs: np.ndarray  # shape (m, n_vars)
    eq_rhs: np.ndarray  # shape (m,)
    objective_offset: float = 0.0

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).reshape(-1)
        if self.objective.shape != (self.n_vars,):
            raise SdpInputError("objective length != n_vars")
        self.eq_coeffs = np.asarray(self.eq_coeffs, dtype=float).reshape(
            -1, self.n_vars if self.n_vars else 0
        )
        self.eq_rhs = np.asarray(self.eq_rhs, dtype=float).reshape(-1)
        if self.eq_coeffs.shape[0] != self.eq_rhs.shape[0]:
            raise SdpInputError("equality system row count mismatch")

    def block_values(self, y: np.ndarray) -> list[np.ndarray]:
        return [blk.value(y) for blk in self.blocks]

    def equality_residual(self, y: np.ndarray) -> float:
        if self.eq_coeffs.shape[0] == 0:
            return 0.0
        return float(np.max(np.abs(self.eq_coeffs @ y - self.eq_rhs)))

    def min_eigenvalues(self, y: np.ndarray) -> list[float]:
        return [float(np.linalg.eigvalsh(v)[0]) for v in self.block_values(y)]

    # -- JSON debug dump ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "n_vars": self.n_vars,
            "objective": self.objective.tolist(),
            "objective_offset": self.objective_offset,
            "blocks": [
                {
                    "name": blk.name,
                    "size": blk.size,
                    "const": blk.const.tolist(),
                    "coeffs": [
                        {"var": int(i), "mat": blk.coeffs[i].tolist()}
                        for i in sorted(blk.coeffs)
                    ],
                }
                for blk in self.blocks
            ],
            "equalities": {
                "coeffs": self.eq_coeffs.tolist(),
                "rhs": self.eq_rhs.tolist(),
            },
        }

    @staticmethod
    def from_json_dict(data: Mapping) -> "SdpProblem":
        n = int(data["n_vars"])
        blocks = [
            SdpBlock(
                name=b["name"],
                size=int(b["size"]),
                const=np.array(b["const"], dtype=float),
                coeffs={
                    int(c["var"]): np.array(c["mat"], dtype=float)
                    for c in b["coeffs"]
                },
            )
            for b in data["blocks"]
        ]
        eq = data["equalities"]
        return SdpProblem(
            n_vars=n,
            objective=np.array(data["objective"], dtype=float),
            blocks=blocks,
            eq_coeffs=np.array(eq["coeffs"], dtype=float).reshape(-1, n),
            eq_rhs=np.array(eq["rhs"], dtype=float),
            objective_offset=float(data.get("objective_offset", 0.0)),
        )


@dataclass
class SdpSolution:
    """Solve outcome plus independently recomputed feasibility measures."""

    status: str
    x: np.ndarray | None
    objective: float | None
    block_min_eigs: list[float]
    eq_residual: float
    iterations: int = 0
    message: str = ""
    # Cone-feasible slack matrices from the interior-point iterate, in block
    # order. Preferred source for Gram certificates: they sit inside the PSD
    # cone while matching F(x) up to the primal residual.
    block_slacks: list[np.ndarray] | None = None
    infeasibility_certificate: dict | None = None
    # Threshold the post-hoc feasibility re-verification enforced; 'optimal'
    # guarantees min eigenvalue >= -feasibility_tolerance and equality
    # residual within it.
    feasibility_tolerance: float = 0.0


def _nullspace(a: np.ndarray, rcond: float = 1e-11) -> tuple[np.ndarray, int]:
    """Orthonormal nullspace basis of a (columns) and the numerical rank."""
    if a.shape[0] == 0:
        return np.eye(a.shape[1]), 0
    u, s, vt = np.linalg.svd(a, full_matrices=True)
    cutoff = rcond * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    return vt[rank:].T.copy(), rank


def solve(problem: SdpProblem, tol: float = 1e-7, max_iter: int = 200) -> SdpSolution:
    """Solve the SDP; deterministic for identical inputs.

    Statuses: 'optimal' (KKT residuals within tol, re-verified),
    'infeasible' (with dual improving-ray witness when available),
    'max_iterations' (stalled; best iterate returned), 'numerical_failure'.
    """
    if not 0.0 < tol < 1.0:
        raise SdpInputError(f"tol must lie in (0, 1), got {tol}")
    if max_iter < 1:
        raise SdpInputError(f"max_iter must be >= 1, got {max_iter}")

    a, b = problem.eq_coeffs, problem.eq_rhs
    if a.shape[0]:
        # Row equilibration: coefficient-matching systems mix magnitudes
        # wildly, which would defeat the SVD rank cutoff below.
        row_scale = np.max(np.abs(a), axis=1)
        zero_rows = row_scale == 0.0
        if np.any(zero_rows & (np.abs(b) > 1e-12)):
            return SdpSolution(
                status=STATUS_INFEASIBLE,
                x=None,
                objective=None,
                block_min_eigs=[],
                eq_residual=float(np.max(np.abs(b[zero_rows]))),
                message="equality system inconsistent (0 = nonzero row)",
            )
        keep = ~zero_rows
        a = a[keep] / row_scale[keep, None]
        b = b[keep] / row_scale[keep]
    if a.shape[0]:
        x0, *_ = np.linalg.lstsq(a, b, rcond=None)
        scale = 1.0 + float(np.max(np.abs(b))) if b.size else 1.0
        if np.max(np.abs(a @ x0 - b)) > 1e-8 * scale:
            return SdpSolution(
                status=STATUS_INFEASIBLE,
                x=None,
                objective=None,
                block_min_eigs=[],
                eq_residual=float(np.max(np.abs(a @ x0 - b))),
                message="equality system inconsistent",
            )
        basis, _ = _nullspace(a)
    else:
        x0 = np.zeros(problem.n_vars)
        basis = np.eye(problem.n_vars)

    n_red = basis.shape[1]
    c_red = basis.T @ problem.objective

    # Reduced affine block maps: F_j(x0 + N z) = C_j + sum_k z_k M_jk.
    reduced: list[tuple[np.ndarray, np.ndarray]] = []
    for blk in problem.blocks:
        const = blk.value(x0)
        maps = np.zeros((n_red, blk.size, blk.size))
        for i, mat in blk.coeffs.items():
            row = basis[i]
            nz = np.nonzero(row)[0]
            for k in nz:
                maps[k] += row[k] * mat
        reduced.append((const, maps))

    # Drop reduced directions that touch no block; they are either irrelevant
    # (zero objective: pin to 0) or make the problem unbounded.
    active = np.zeros(n_red, dtype=bool)
    for _, maps in reduced:
        active |= np.abs(maps).reshape(n_red, -1).any(axis=1)
    if not np.all(active):
        if np.max(np.abs(c_red[~active])) > 1e-12:
            return SdpSolution(
                status=STATUS_NUMERICAL_FAILURE,
                x=None,
                objective=None,
                block_min_eigs=[],
                eq_residual=0.0,
                message="objective unbounded along constraint-free direction",
            )
        basis = basis[:, active]
        c_red = c_red[active]
        reduced = [(const, maps[active]) for const, maps in reduced]
        n_red = basis.shape[1]

    if n_red == 0:
        # Fully determined by the equalities; just verify feasibility.
        eigs = problem.min_eigenvalues(x0)
        feasible = all(e >= -10 * tol for e in eigs)
        return SdpSolution(
            status=STATUS_OPTIMAL if feasible else STATUS_INFEASIBLE,
            x=x0,
            objective=float(problem.objective @ x0) + problem.objective_offset,
            block_min_eigs=eigs,
            eq_residual=problem.equality_residual(x0),
            block_slacks=problem.block_values(x0),
            message="" if feasible else "pinned solution violates cone constraints",
        )

    lin_rows: list[tuple[int, float, np.ndarray]] = []  # (block idx, h, g row)
    psd_entries: list[tuple[int, np.ndarray, np.ndarray]] = []
    for j, (const, maps) in enumerate(reduced):
        size = problem.blocks[j].size
        if size == 1:
            lin_rows.append((j, float(const[0, 0]), -maps[:, 0, 0]))
        else:
            g = -maps.reshape(n_red, size * size).T
            psd_entries.append((j, np.asarray(const), g))

    gl = hl = None
    if lin_rows:
        gl = cvx_matrix(np.array([row for _, _, row in lin_rows], dtype=float))
        hl = cvx_matrix(np.array([h for _, h, _ in lin_rows], dtype=float))
    gs = [cvx_matrix(g) for _, _, g in psd_entries]
    hs = [cvx_matrix(const) for _, const, _ in psd_entries]

    options = {
        "show_progress": False,
        "maxiters": int(max_iter),
        "abstol": tol,
        "reltol": max(tol, 1e-9) * 10,
        "feastol": tol,
    }
    try:
        sol = cvx_solvers.sdp(
            cvx_matrix(c_red), Gl=gl, hl=hl, Gs=gs, hs=hs, options=options
        )
    except (ValueError, ZeroDivisionError, ArithmeticError) as exc:
        return SdpSolution(
            status=STATUS_NUMERICAL_FAILURE,
            x=None,
            objective=None,
            block_min_eigs=[],
            eq_residual=0.0,
            message=f"cone solver raised {type(exc).__name__}: {exc}",
        )

    raw_status = sol["status"]
    iterations = int(sol.get("iterations", 0))

    if raw_status == "primal infeasible":
        cert = {}
        if sol.get("zl") is not None:
            cert["linear"] = np.array(sol["zl"]).reshape(-1).tolist()
        if sol.get("zs"):
            cert["psd"] = [np.array(z).tolist() for z in sol["zs"]]
        return SdpSolution(
            status=STATUS_INFEASIBLE,
            x=None,
            objective=None,
            block_min_eigs=[],
            eq_residual=0.0,
            iterations=iterations,
            message="cone problem infeasible",
            infeasibility_certificate=cert or None,
        )
    if raw_status == "dual infeasible":
        return SdpSolution(
            status=STATUS_NUMERICAL_FAILURE,
            x=None,
            objective=None,
            block_min_eigs=[],
            eq_residual=0.0,
            iterations=iterations,
            message="problem unbounded (dual infeasible certificate)",
        )
    if sol["x"] is None:
        return SdpSolution(
            status=STATUS_NUMERICAL_FAILURE,
            x=None,
            objective=None,
            block_min_eigs=[],
            eq_residual=0.0,
            iterations=iterations,
            message=f"no iterate returned (solver status {raw_status!r})",
        )

    z = np.array(sol["x"]).reshape(-1)
    x = x0 + basis @ z
    eigs = problem.min_eigenvalues(x)
    eq_res = problem.equality_residual(x)
    objective = float(problem.objective @ x) + problem.objective_offset

    # Reassemble cone-feasible slacks in original block order.
    slacks: list[np.ndarray] = [np.zeros((0, 0))] * len(problem.blocks)
    if lin_rows:
        sl = np.array(sol["sl"]).reshape(-1)
        for row_idx, (j, _, _) in enumerate(lin_rows):
            slacks[j] = np.array([[sl[row_idx]]])
    for list_idx, (j, _, _) in enumerate(psd_entries):
        size = problem.blocks[j].size
        slacks[j] = np.array(sol["ss"][list_idx]).reshape(size, size)

    feas_tol = max(100 * tol, 1e-9)
    # Scalar rows (coefficient caps, slack bounds, sample inequalities) sit
    # actively at their bound and may dip below zero by the primal residual;
    # only matrix cones back certificates and get the tight threshold.
    scalar_tol = max(1e3 * tol, 1e-6)
    if raw_status == "optimal":
        cone_ok = all(
            e >= -(scalar_tol if blk.size == 1 else feas_tol)
            for blk, e in zip(problem.blocks, eigs)
        )
        if cone_ok and eq_res <= feas_tol * (
            1.0 + float(np.max(np.abs(problem.eq_rhs))) if problem.eq_rhs.size else 1.0
        ):
            status, message = STATUS_OPTIMAL, ""
        else:
            status = STATUS_NUMERICAL_FAILURE
            message = (
                "solver claimed optimality but independent re-verification "
                f"failed (min eig {min(eigs, default=0.0):.3e}, eq residual {eq_res:.3e})"
            )
    else:  # 'unknown': stalled before reaching tolerance
        status, message = STATUS_MAX_ITERATIONS, "stalled; best iterate returned"

    return SdpSolution(
        status=status,
        x=x,
        objective=objective,
        block_min_eigs=eigs,
        eq_residual=eq_res,
        iterations=iterations,
        message=message,
        block_slacks=slacks,
        feasibility_tolerance=feas_tol,
    )


class SdpBuilder:
    """Incremental assembly of an SdpProblem."""

    def __init__(self):
        self.n_vars = 0
        self._objective: dict[int, float] = {}
        self._objective_offset = 0.0
        self._blocks: list[SdpBlock] = []
        self._eq_rows: list[dict[int, float]] = []
        self._eq_rhs: list[float] = []

    def new_vars(self, count: int) -> list[int]:
        idx = list(range(self.n_vars, self.n_vars + count))
        self.n_vars += count
        return idx

    def new_var(self) -> int:
        return self.new_vars(1)[0]

    def add_block(self, name: str, size: int, const: np.ndarray, coeffs: dict[int, np.ndarray]):
        self._blocks.append(SdpBlock(name=name, size=size, const=const, coeffs=coeffs))

    def add_scalar_inequality(self, name: str, coeffs: dict[int, float], lower: float):
        """Constraint  sum_i coeffs[i] * y_i >= lower  as a 1x1 block."""
        self.add_block(
            name,
            1,
            np.array([[-lower]]),
            {i: np.array([[c]]) for i, c in coeffs.items() if c != 0.0},
        )

    def add_equality(self, coeffs: dict[int, float], rhs: float):
        self._eq_rows.append({i: c for i, c in coeffs.items() if c != 0.0})
        self._eq_rhs.append(float(rhs))

    def add_objective_term(self, var: int, coef: float):
        self._objective[var] = self._objective.get(var, 0.0) + float(coef)

    def add_objective_offset(self, value: float):
        self._objective_offset += float(value)

    def add_least_squares_epigraph(
        self, name: str, var_idxs: Sequence[int], lhs: np.ndarray, rhs: np.ndarray
    ) -> int:
        """Epigraph reduction of the convex quadratic ||lhs @ u - rhs||^2.

        Introduces a scalar t with the Schur-complement arrow block
        [[I, R u - c], [(R u - c)^T, t - rho]] >= 0 and returns t's index;
        minimizing t is equivalent to minimizing the quadratic. Tall systems
        are first compressed by QR so the block stays (k+1) x (k+1).
        """
        lhs = np.asarray(lhs, dtype=float)
        rhs = np.asarray(rhs, dtype=float).reshape(-1)
        k = len(var_idxs)
        if lhs.shape != (rhs.shape[0], k):
            raise SdpInputError(
                f"least-squares shapes inconsistent: {lhs.shape} vs ({rhs.shape[0]}, {k})"
            )
        if lhs.shape[0] > k:
            q, r = np.linalg.qr(lhs)
            c = q.T @ rhs
            rho = max(float(rhs @ rhs - c @ c), 0.0)
            lhs, rhs = r, c
        else:
            rho = 0.0
        m = lhs.shape[0]
        t_idx = self.new_var()
        const = np.zeros((m + 1, m + 1))
        const[:m, :m] = np.eye(m)
        const[:m, m] = -rhs
        const[m, :m] = -rhs
        const[m, m] = -rho
        coeffs: dict[int, np.ndarray] = {}
        for j, var in enumerate(var_idxs):
            mat = np.zeros((m + 1, m + 1))
            mat[:m, m] = lhs[:, j]
            mat[m, :m] = lhs[:, j]
            if var in coeffs:
                coeffs[var] = coeffs[var] + mat
            else:
                coeffs[var] = mat
        t_mat = np.zeros((m + 1, m + 1))
        t_mat[m, m] = 1.0
        coeffs[t_idx] = t_mat
        self.add_block(name, m + 1, const, coeffs)
        return t_idx

    def build(self) -> SdpProblem:
        obj = np.zeros(self.n_vars)
        for i, c in self._objective.items():
            obj[i] = c
        eq_a = np.zeros((len(self._eq_rows), self.n_vars))
        for r, row in enumerate(self._eq_rows):
            for i, c in row.items():
                eq_a[r, i] = c
        return SdpProblem(
            n_vars=self.n_vars,
            objective=obj,
            blocks=list(self._blocks),
            eq_coeffs=eq_a,
            eq_rhs=np.array(self._eq_rhs, dtype=float),
            objective_offset=self._objective_offset,
        )


def factor_convex_quadratic(
    q: np.ndarray, tol: float = 1e-9
) -> np.ndarray:
    """Factor a PSD matrix as L with L^T L = q, rejecting indefinite input."""
    q = np.asarray(q, dtype=float)
    q = 0.5 * (q + q.T)
    vals, vecs = np.linalg.eigh(q)
    scale = max(float(vals[-1]), 1.0)
    if vals[0] < -tol * scale:
        raise SdpInputError(
            f"quadratic form is indefinite (min eigenvalue {vals[0]:.3e})"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)).T
