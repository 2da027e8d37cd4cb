"""End-to-end learning pipelines.

Two entry points:

* learn_unconstrained: stability only. Convex warm start (linear f,
  V = x^T x), then alternate Lyapunov and field phases until the
  velocity-matching objective stalls.
* learn: stability plus barrier synthesis against user-supplied initial and
  unsafe sets. After a short unconstrained pre-training, each round runs
  certificate -> band-multiplier -> field phases; the band condition carries
  a penalized slack so early rounds stay feasible, and the result is only
  accepted once a final slack-free field phase certifies every constraint.

Both operate in normalized coordinates (attractor at the origin, positions
in [-1, 1] per axis); denormalize() maps a result back to original
coordinates through the recorded scaling.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..poly import Polynomial, PolynomialVector, monomial_basis
from ..semialg import BasicSemialgebraicSet
from ..sos import GramCertificate
from . import dataset as ds_mod
from .dataset import ScalingRecord, TrajectoryDataset
from .program import (
    LBL_BAND,
    LBL_STAB_DEC,
    LBL_STAB_POS,
    DegreePlan,
    PhaseInfeasibleError,
    solve_band_multiplier_phase,
    solve_certificate_phase,
    solve_field_phase,
    solve_lyapunov_phase,
    solve_warm_start,
)

logger = logging.getLogger(__name__)


class LearnError(RuntimeError):
    """Learning failed; carries diagnostics and the last iterate if any."""

    def __init__(self, message: str, diagnostics: dict | None = None, last_result=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.last_result = last_result


@dataclass
class LearnConfig:
    """Degrees, margins and schedule controls for the learner."""

    deg_f: int = 5
    deg_V: int = 2
    deg_B: int = 4
    deg_tau: int | None = None  # None: smallest parity-consistent value
    deg_sigma: int | None = None
    deg_phi: int = 0
    eps1: float = 1e-2
    eps2: float = 1e-3
    eps3: float = 1e-4
    max_rounds: int = 30
    objective_tol: float = 1e-4  # relative objective-decrease stop threshold
    seed: int = 0
    subsample_count: int | None = 100
    pretrain_rounds: int = 2
    slack_penalty: float = 1e4
    slack_tol: float = 1e-7
    phi_init: float = 1.0
    barrier_margin: float | None = None  # None: 2*sqrt(eps1)
    solver_tol: float = 1e-7
    solver_max_iter: int = 200

    def __post_init__(self):
        if min(self.eps1, self.eps2, self.eps3) <= 0:
            raise ValueError("eps1, eps2, eps3 must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    @staticmethod
    def from_json_dict(data: Mapping) -> "LearnConfig":
        known = {f.name for f in dataclasses.fields(LearnConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return LearnConfig(**data)


@dataclass
class LearnResult:
    """Learned dynamics with certificates and provenance.

    f has no constant terms (f(0) = 0 by construction) and V no constant or
    linear terms; both are assertable from the term maps. Positions are in
    the coordinates described by `scaling` (normalized space right after
    learning; original space after denormalize()).
    """

    dimension: int
    f: PolynomialVector
    V: Polynomial
    B: Polynomial | None
    tau: list[Polynomial]
    sigma: list[list[Polynomial]]
    phi: Polynomial | None
    gram_certificates: list[GramCertificate]
    certificate_targets: dict[str, Polynomial]
    mse: float
    scaling: ScalingRecord
    config: LearnConfig
    diagnostics: dict = field(default_factory=dict)

    def certificate(self, label: str) -> GramCertificate | None:
        for cert in self.gram_certificates:
            if cert.constraint == label:
                return cert
        return None

    def verify_certificates(
        self, eig_tol: float = 1e-8, coef_tol: float = 1e-6
    ) -> dict[str, dict]:
        """Re-verify every Gram against its target polynomial."""
        report = {}
        for cert in self.gram_certificates:
            target = self.certificate_targets.get(cert.constraint)
            if target is None:
                report[cert.constraint] = {"error": "no target recorded"}
                continue
            ok, info = cert.verify(target, eig_tol=eig_tol, coef_tol=coef_tol)
            info["passed"] = ok
            report[cert.constraint] = info
        return report

    def to_json_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "f": self.f.to_json_dict(),
            "V": self.V.to_json_dict(),
            "B": self.B.to_json_dict() if self.B is not None else None,
            "tau": [p.to_json_dict() for p in self.tau],
            "sigma": [[p.to_json_dict() for p in row] for row in self.sigma],
            "phi": self.phi.to_json_dict() if self.phi is not None else None,
            "gram_certificates": [c.to_json_dict() for c in self.gram_certificates],
            "certificate_targets": {
                k: v.to_json_dict() for k, v in sorted(self.certificate_targets.items())
            },
            "mse": self.mse,
            "scaling": self.scaling.to_json_dict(),
            "config": self.config.to_json_dict(),
            "diagnostics": self.diagnostics,
        }

    @staticmethod
    def from_json_dict(data: Mapping) -> "LearnResult":
        return LearnResult(
            dimension=int(data["dimension"]),
            f=PolynomialVector.from_json_dict(data["f"]),
            V=Polynomial.from_json_dict(data["V"]),
            B=Polynomial.from_json_dict(data["B"]) if data["B"] is not None else None,
            tau=[Polynomial.from_json_dict(p) for p in data["tau"]],
            sigma=[
                [Polynomial.from_json_dict(p) for p in row] for row in data["sigma"]
            ],
            phi=Polynomial.from_json_dict(data["phi"]) if data["phi"] is not None else None,
            gram_certificates=[
                GramCertificate.from_json_dict(c) for c in data["gram_certificates"]
            ],
            certificate_targets={
                k: Polynomial.from_json_dict(v)
                for k, v in data["certificate_targets"].items()
            },
            mse=float(data["mse"]),
            scaling=ScalingRecord.from_json_dict(data["scaling"]),
            config=LearnConfig.from_json_dict(data["config"]),
            diagnostics=dict(data.get("diagnostics", {})),
        )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def preprocess(
    ds: TrajectoryDataset, config: LearnConfig
) -> tuple[TrajectoryDataset, ScalingRecord]:
    """recenter -> terminal-attractor fixup -> normalize -> subsample."""
    ds, shift_record = ds_mod.recenter(ds)
    ds = ds_mod.ensure_terminal_attractor(ds)
    ds, scale_record = ds_mod.normalize(ds)
    if config.subsample_count is not None:
        ds = ds_mod.subsample(ds, config.subsample_count)
    return ds, scale_record.compose(shift_record)


# ---------------------------------------------------------------------------
# Warm start
# ---------------------------------------------------------------------------


def warm_start(ds: TrajectoryDataset, eps3: float, *, solver_tol: float = 1e-7,
               solver_max_iter: int = 200) -> LearnResult:
    """Linear dynamics f(x) = A x under -(A + A^T) >= 2*eps3*I, V = x^T x."""
    n = ds.dimension
    positions = ds.all_positions()
    velocities = ds.all_velocities()
    a, solution = solve_warm_start(
        positions, velocities, eps3, tol=solver_tol, max_iter=solver_max_iter
    )
    comps = []
    for k in range(n):
        terms = {}
        for j in range(n):
            mono = tuple(1 if i == j else 0 for i in range(n))
            terms[mono] = a[k, j]
        comps.append(Polynomial(n, terms))
    f = PolynomialVector(comps)
    v = Polynomial.norm_squared(n)

    # Direct quadratic-form Grams over the linear monomial basis.
    lin_basis = [m for m in monomial_basis(n, 1) if sum(m) == 1]
    pos_cert = GramCertificate(
        basis=lin_basis, matrix=(1.0 - eps3) * np.eye(n), constraint=LBL_STAB_POS
    )
    dec_matrix = -(a + a.T) - eps3 * np.eye(n)
    dec_cert = GramCertificate(
        basis=lin_basis, matrix=dec_matrix, constraint=LBL_STAB_DEC
    )
    norm2 = Polynomial.norm_squared(n)
    targets = {
        LBL_STAB_POS: v - eps3 * norm2,
        LBL_STAB_DEC: -(v.gradient().dot(f)) - eps3 * norm2,
    }
    return LearnResult(
        dimension=n,
        f=f,
        V=v,
        B=None,
        tau=[],
        sigma=[],
        phi=None,
        gram_certificates=[pos_cert, dec_cert],
        certificate_targets=targets,
        mse=ds_mod.mse(f, ds),
        scaling=ScalingRecord.identity(n),
        config=LearnConfig(deg_f=1, deg_V=2, eps3=eps3),
        diagnostics={
            "warm_start": {
                "solver_status": solution.status,
                "iterations": solution.iterations,
            }
        },
    )


# ---------------------------------------------------------------------------
# Barrier-free learning
# ---------------------------------------------------------------------------


def learn_unconstrained(
    ds: TrajectoryDataset,
    config: LearnConfig,
    *,
    max_rounds: int | None = None,
) -> LearnResult:
    """Stability-only learning: alternate Lyapunov and field phases."""
    n = ds.dimension
    positions = ds.all_positions()
    velocities = ds.all_velocities()
    plan = DegreePlan.create(n, config.deg_f, config.deg_V, None, None, [])
    rounds = config.max_rounds if max_rounds is None else max_rounds

    ws = warm_start(
        ds, config.eps3, solver_tol=config.solver_tol,
        solver_max_iter=config.solver_max_iter,
    )
    f_cur = ws.f
    mse_cur = ws.mse
    certs: dict[str, GramCertificate] = {
        c.constraint: c for c in ws.gram_certificates
    }
    targets: dict[str, Polynomial] = dict(ws.certificate_targets)
    trace = [mse_cur]
    statuses = []

    v_cur = ws.V
    for rnd in range(rounds):
        lyap = solve_lyapunov_phase(
            positions, velocities, plan, config.eps3, f_cur,
            tol=config.solver_tol, max_iter=config.solver_max_iter,
        )
        v_cur = lyap.values["V"]
        certs[LBL_STAB_POS] = lyap.certificates[LBL_STAB_POS]
        targets[LBL_STAB_POS] = lyap.certificate_targets[LBL_STAB_POS]

        fld = solve_field_phase(
            positions, velocities, plan,
            config.eps1, config.eps2, config.eps3,
            v_cur, None, None, None, [],
            band_slack=False, slack_penalty=config.slack_penalty,
            tol=config.solver_tol, max_iter=config.solver_max_iter,
        )
        f_cur = fld.values["f"]
        certs[LBL_STAB_DEC] = fld.certificates[LBL_STAB_DEC]
        targets[LBL_STAB_DEC] = fld.certificate_targets[LBL_STAB_DEC]
        statuses.append({"round": rnd, "lyapunov": lyap.status, "field": fld.status})

        mse_new = fld.mse_term if fld.mse_term is not None else mse_cur
        trace.append(mse_new)
        if rnd >= 1 and mse_cur - mse_new < config.objective_tol * max(mse_cur, 1e-12):
            mse_cur = min(mse_cur, mse_new)
            break
        mse_cur = min(mse_cur, mse_new)

    return LearnResult(
        dimension=n,
        f=f_cur,
        V=v_cur,
        B=None,
        tau=[],
        sigma=[],
        phi=None,
        gram_certificates=list(certs.values()),
        certificate_targets=targets,
        mse=ds_mod.mse(f_cur, ds),
        scaling=ScalingRecord.identity(n),
        config=config,
        diagnostics={
            "mode": "unconstrained",
            "objective_trace": trace,
            "phase_statuses": statuses,
            "degree_adjustments": plan.adjustments,
        },
    )


# ---------------------------------------------------------------------------
# Barrier-certified learning
# ---------------------------------------------------------------------------


def _sample_members(
    region: BasicSemialgebraicSet,
    box_lo: np.ndarray,
    box_hi: np.ndarray,
    count: int,
    rng: np.random.Generator,
    max_draws: int = 20000,
) -> np.ndarray:
    dim = region.dimension
    hits: list[np.ndarray] = []
    drawn = 0
    while len(hits) < count and drawn < max_draws:
        batch = rng.uniform(box_lo, box_hi, size=(256, dim))
        drawn += 256
        mask = region.contains_many(batch)
        hits.extend(batch[mask])
    if not hits:
        raise LearnError(
            "could not sample any member of a constraint set within the data "
            "bounding box; the set may lie outside the demonstrated region"
        )
    return np.array(hits[:count])


def _initial_barrier_guess(
    positions: np.ndarray,
    x0_samples: np.ndarray,
    unsafe_samples: list[np.ndarray],
    deg_b: int,
    n: int,
) -> Polynomial:
    """Least-squares separator: +1 on unsafe samples, -1 on data and initial
    samples, shifted to be <= -0.1 at the data. Only a linearization point
    for the first certificate phase, not a certificate itself; its scale is
    capped because the certificate phase inherits it."""
    neg_pts = np.vstack([positions, x0_samples])
    pos_pts = np.vstack(unsafe_samples)
    pts = np.vstack([neg_pts, pos_pts])
    target = np.concatenate([-np.ones(len(neg_pts)), np.ones(len(pos_pts))])
    monos = monomial_basis(n, deg_b)
    vand = np.column_stack(
        [np.prod(pts ** np.array(m, dtype=float), axis=1) for m in monos]
    )
    reg = 1e-4 * np.eye(vand.shape[1])
    coefs = np.linalg.solve(vand.T @ vand + reg, vand.T @ target)
    b = Polynomial(n, dict(zip(monos, coefs)))
    peak = b.max_abs_coefficient()
    if peak > 5.0:
        b = b * (5.0 / peak)
    shift = float(np.max(b.evaluate_many(neg_pts)))
    return b - (max(shift, 0.0) + 0.1)


def learn(
    ds: TrajectoryDataset,
    x0_set: BasicSemialgebraicSet,
    unsafe_sets: Sequence[BasicSemialgebraicSet],
    config: LearnConfig,
) -> LearnResult:
    """Joint stability + barrier synthesis (normalized coordinates).

    Preconditions: the origin and every reference sample must lie outside
    every unsafe set. Raises LearnError (with the last iterate attached)
    when the alternation cannot reach an exactly feasible certificate.
    """
    n = ds.dimension
    unsafe_sets = list(unsafe_sets)
    if not unsafe_sets:
        raise ValueError("learn() needs at least one unsafe set; "
                         "use learn_unconstrained otherwise")
    origin = np.zeros(n)
    for o, unsafe in enumerate(unsafe_sets):
        if unsafe.contains(origin):
            raise ValueError(
                f"unsafe set {o} contains the attractor; no stable safe system exists"
            )
    positions = ds.all_positions()
    velocities = ds.all_velocities()
    for o, unsafe in enumerate(unsafe_sets):
        inside = unsafe.contains_many(positions)
        if np.any(inside):
            idx = int(np.argmax(inside))
            raise ValueError(
                f"reference sample {idx} at {positions[idx]} lies inside unsafe set {o}"
            )

    plan = DegreePlan.create(
        n, config.deg_f, config.deg_V, config.deg_B,
        x0_set, unsafe_sets,
        deg_tau=config.deg_tau, deg_sigma=config.deg_sigma, deg_phi=config.deg_phi,
    )
    if plan.adjustments:
        logger.info("degree adjustments: %s", plan.adjustments)

    pre = learn_unconstrained(ds, config, max_rounds=config.pretrain_rounds)
    f_cur, v_cur = pre.f, pre.V

    demo_margin = (
        config.barrier_margin
        if config.barrier_margin is not None
        else 2.0 * float(np.sqrt(config.eps1))
    )
    rng = np.random.default_rng(config.seed)
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    box_lo = lo - 0.25 * span
    box_hi = hi + 0.25 * span
    x0_samples = _sample_members(x0_set, box_lo, box_hi, 100, rng)
    unsafe_samples = [
        _sample_members(u, box_lo, box_hi, 200, rng) for u in unsafe_sets
    ]
    b_cur = _initial_barrier_guess(
        positions, x0_samples, unsafe_samples, plan.deg_b, n
    )
    phi_cur = Polynomial.constant(config.phi_init, n)

    certs: dict[str, GramCertificate] = {}
    targets: dict[str, Polynomial] = {}
    statuses: list[dict] = []
    slack_trace: list[float] = []
    objective_trace: list[float] = []
    combined_prev = np.inf
    mse_cur = pre.mse

    def snapshot(tag: str) -> LearnResult:
        return LearnResult(
            dimension=n, f=f_cur, V=v_cur, B=b_cur,
            tau=[], sigma=[], phi=phi_cur,
            gram_certificates=list(certs.values()),
            certificate_targets=dict(targets),
            mse=ds_mod.mse(f_cur, ds),
            scaling=ScalingRecord.identity(n),
            config=config,
            diagnostics={"mode": "barrier", "stage": tag,
                         "phase_statuses": statuses,
                         "slack_trace": slack_trace,
                         "objective_trace": objective_trace},
        )

    converged = False
    for rnd in range(config.max_rounds):
        try:
            cert = solve_certificate_phase(
                positions, plan,
                config.eps1, config.eps2, config.eps3,
                f_cur, phi_cur, b_cur, x0_set, unsafe_sets,
                slack_penalty=config.slack_penalty,
                tol=config.solver_tol, max_iter=config.solver_max_iter,
                demo_margin=demo_margin,
            )
        except PhaseInfeasibleError as exc:
            raise LearnError(
                f"certificate phase infeasible in round {rnd}: {exc}",
                diagnostics={"phase_statuses": statuses},
                last_result=snapshot("certificate_phase_infeasible") if rnd else None,
            ) from exc
        v_cur, b_cur = cert.values["V"], cert.values["B"]
        certs[LBL_STAB_POS] = cert.certificates[LBL_STAB_POS]
        targets[LBL_STAB_POS] = cert.certificate_targets[LBL_STAB_POS]

        phi_phase = solve_band_multiplier_phase(
            plan, config.eps1, config.eps2,
            f_cur, b_cur, x0_set, unsafe_sets,
            slack_penalty=config.slack_penalty,
            tol=config.solver_tol, max_iter=config.solver_max_iter,
        )
        phi_cur = phi_phase.values["phi"]
        certs["sos_multiplier_phi"] = phi_phase.certificates["sos_multiplier_phi"]
        targets["sos_multiplier_phi"] = phi_phase.certificate_targets["sos_multiplier_phi"]

        fld = solve_field_phase(
            positions, velocities, plan,
            config.eps1, config.eps2, config.eps3,
            v_cur, b_cur, phi_cur, x0_set, unsafe_sets,
            band_slack=True, slack_penalty=config.slack_penalty,
            tol=config.solver_tol, max_iter=config.solver_max_iter,
        )
        f_cur = fld.values["f"]
        mse_cur = fld.mse_term if fld.mse_term is not None else mse_cur

        statuses.append({
            "round": rnd,
            "certificate": cert.status, "cert_slack": cert.slack,
            "band_multiplier": phi_phase.status, "phi_slack": phi_phase.slack,
            "field": fld.status, "field_slack": fld.slack,
            "mse": mse_cur,
        })
        slack = max(cert.slack, phi_phase.slack, fld.slack)
        slack_trace.append(slack)
        combined = mse_cur + config.slack_penalty * fld.slack
        objective_trace.append(combined)
        if slack <= config.slack_tol and rnd >= 1:
            if combined_prev - combined < config.objective_tol * max(combined_prev, 1e-12):
                converged = True
                break
        combined_prev = combined

    if not converged and (not slack_trace or slack_trace[-1] > config.slack_tol):
        raise LearnError(
            f"band condition slack did not vanish within {config.max_rounds} rounds "
            f"(last slack {slack_trace[-1] if slack_trace else float('nan'):.3e}); "
            "consider raising deg_B/deg_phi or enlarging the data-obstacle gap",
            diagnostics={"phase_statuses": statuses, "slack_trace": slack_trace},
            last_result=snapshot("slack_stalled"),
        )

    # Final slack-free field phase: every certificate in the result is a
    # genuine Gram for the unrelaxed constraint at the returned values.
    try:
        final = solve_field_phase(
            positions, velocities, plan,
            config.eps1, config.eps2, config.eps3,
            v_cur, b_cur, phi_cur, x0_set, unsafe_sets,
            band_slack=False, slack_penalty=config.slack_penalty,
            tol=config.solver_tol, max_iter=config.solver_max_iter,
        )
    except PhaseInfeasibleError as exc:
        raise LearnError(
            f"final exact field phase infeasible: {exc}",
            diagnostics={"phase_statuses": statuses, "slack_trace": slack_trace},
            last_result=snapshot("final_phase_infeasible"),
        ) from exc
    f_cur = final.values["f"]
    mse_cur = final.mse_term
    for label, cert_obj in final.certificates.items():
        certs[label] = cert_obj
        targets[label] = final.certificate_targets[label]

    # Tiny constant shift keeps max B(x_ref) <= 0 exactly; the affected
    # certificate targets move by well under the verification tolerance.
    tau = [final.values[f"tau{i}"] for i in range(len(plan.deg_tau))]
    sigma = [
        [final.values[f"sigma{o}_{j}"] for j in range(len(plan.deg_sigma[o]))]
        for o in range(len(unsafe_sets))
    ]
    b_shift = float(np.max(b_cur.evaluate_many(positions)))
    if b_shift > 0:
        if b_shift > 1e-7:
            raise LearnError(
                f"barrier exceeds 0 at a reference sample by {b_shift:.3e}",
                last_result=snapshot("demo_constraint_violated"),
            )
        b_cur = b_cur - b_shift

    result = LearnResult(
        dimension=n,
        f=f_cur,
        V=v_cur,
        B=b_cur,
        tau=tau,
        sigma=sigma,
        phi=phi_cur,
        gram_certificates=list(certs.values()),
        certificate_targets=targets,
        mse=ds_mod.mse(f_cur, ds),
        scaling=ScalingRecord.identity(n),
        config=config,
        diagnostics={
            "mode": "barrier",
            "rounds": len(statuses),
            "phase_statuses": statuses,
            "slack_trace": slack_trace,
            "objective_trace": objective_trace,
            "degree_adjustments": plan.adjustments,
            "barrier_shift": b_shift if b_shift > 0 else 0.0,
            "pretrain_mse": pre.mse,
        },
    )
    return result


# ---------------------------------------------------------------------------
# Coordinate mapping
# ---------------------------------------------------------------------------


def denormalize(result: LearnResult, scaling: ScalingRecord) -> LearnResult:
    """Map a result learned in normalized coordinates back to original ones.

    With y = S (x - t) the original-coordinate field is S^-1 f(S(x - t)),
    and scalar certificates compose as V(S(x - t)). Gram certificates remain
    attached but certify the normalized-space constraints.
    """
    s = scaling.position_scale
    t = scaling.translation
    offset = -s * t

    def to_original(p: Polynomial) -> Polynomial:
        return p.compose_affine(s, offset)

    f_out = PolynomialVector(
        [
            to_original(comp) * (1.0 / scaling.velocity_scale[k])
            for k, comp in enumerate(result.f.components)
        ]
    )
    diagnostics = dict(result.diagnostics)
    diagnostics["coordinates"] = "original"
    diagnostics["normalized_scaling"] = scaling.to_json_dict()
    return LearnResult(
        dimension=result.dimension,
        f=f_out,
        V=to_original(result.V),
        B=to_original(result.B) if result.B is not None else None,
        tau=[to_original(p) for p in result.tau],
        sigma=[[to_original(p) for p in row] for row in result.sigma],
        phi=to_original(result.phi) if result.phi is not None else None,
        gram_certificates=result.gram_certificates,
        certificate_targets=result.certificate_targets,
        mse=result.mse,
        scaling=ScalingRecord.identity(result.dimension),
        config=result.config,
        diagnostics=diagnostics,
    )
