"""Trajectory simulation and certificate falsification.

Rollouts use classic fixed-step fourth-order Runge-Kutta. Falsification is
seeded sampling over the learned certificates' defining inequalities: the
desk-scale substitute for exact post-verification, intended to catch the
numerical-soundness failures that high-degree SOS problems can produce.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .poly import DimensionMismatchError, Polynomial, PolynomialVector
from .semialg import BasicSemialgebraicSet

REACHED_ATTRACTOR = "reached_attractor"
HORIZON = "horizon"
LEFT_DOMAIN = "left_domain"
NUMERICAL_FAILURE = "numerical_failure"

# Margins smaller than this are solver/certificate dust, not violations;
# matches the Gram tolerances (coefficient residual 1e-6, eigenvalue 1e-8).
DEFAULT_VIOLATION_TOL = 1e-6


@dataclass
class Trajectory:
    """A simulated rollout with uniform step and a termination reason."""

    times: np.ndarray  # (m,)
    states: np.ndarray  # (m, n)
    step: float
    termination: str

    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"x{k + 1}" for k in range(n)])
            for t, x in zip(self.times, self.states):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def integrate(
    f: PolynomialVector,
    x0: Sequence[float],
    dt: float,
    horizon: float,
    *,
    attractor_radius: float = 1e-3,
    domain: tuple[Sequence[float], Sequence[float]] | None = None,
) -> Trajectory:
    """Fixed-step RK4 rollout of dx/dt = f(x).

    Stops early with reason 'reached_attractor' once ||x|| drops below the
    attractor radius, 'left_domain' when exiting the domain box, or
    'numerical_failure' on non-finite states (last valid state kept).
    """
    if dt <= 0 or horizon <= 0 or dt > horizon:
        raise ValueError(f"need 0 < dt <= horizon, got dt={dt}, horizon={horizon}")
    x = np.asarray(x0, dtype=float)
    if x.shape != (f.dimension,):
        raise DimensionMismatchError("initial state incompatible with field dimension")
    lo = hi = None
    if domain is not None:
        lo = np.asarray(domain[0], dtype=float)
        hi = np.asarray(domain[1], dtype=float)

    n_steps = int(round(horizon / dt))
    times = [0.0]
    states = [x.copy()]
    reason = HORIZON
    for i in range(n_steps):
        k1 = f.evaluate(x)
        k2 = f.evaluate(x + 0.5 * dt * k1)
        k3 = f.evaluate(x + 0.5 * dt * k2)
        k4 = f.evaluate(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            reason = NUMERICAL_FAILURE
            break
        times.append((i + 1) * dt)
        states.append(x.copy())
        if float(np.linalg.norm(x)) <= attractor_radius:
            reason = REACHED_ATTRACTOR
            break
        if lo is not None and (np.any(x < lo) or np.any(x > hi)):
            reason = LEFT_DOMAIN
            break
    return Trajectory(
        times=np.array(times), states=np.array(states), step=dt, termination=reason
    )


def is_certified_safe(b: Polynomial, x: Sequence[float]) -> bool:
    """Membership in the certified safe set {x : B(x) <= 0}."""
    x = np.asarray(x, dtype=float)
    if x.shape != (b.dimension,):
        raise DimensionMismatchError("point incompatible with barrier dimension")
    return b.evaluate(x) <= 0.0


# ---------------------------------------------------------------------------
# Falsification
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    """Verdict for one certificate condition."""

    name: str
    n_samples: int
    worst_margin: float
    counterexamples: list[list[float]] = field(default_factory=list)
    passed: bool = True
    note: str = ""

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "n_samples": self.n_samples,
            "worst_margin": self.worst_margin,
            "counterexamples": self.counterexamples,
            "passed": self.passed,
            "note": self.note,
        }


@dataclass
class FalsificationReport:
    conditions: dict[str, ConditionReport]

    def all_passed(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    def to_json_dict(self) -> dict:
        return {name: c.to_json_dict() for name, c in sorted(self.conditions.items())}

    @staticmethod
    def from_json_dict(data: Mapping) -> "FalsificationReport":
        conditions = {}
        for name, c in data.items():
            conditions[name] = ConditionReport(
                name=c["name"],
                n_samples=int(c["n_samples"]),
                worst_margin=float(c["worst_margin"]),
                counterexamples=[list(map(float, p)) for p in c["counterexamples"]],
                passed=bool(c["passed"]),
                note=c.get("note", ""),
            )
        return FalsificationReport(conditions)


def _condition_from_margins(
    name: str,
    points: np.ndarray,
    margins: np.ndarray,
    threshold: float,
    note: str = "",
) -> ConditionReport:
    """Pass unless some margin falls below the threshold."""
    bad = margins < threshold
    counterexamples = [points[i].tolist() for i in np.nonzero(bad)[0][:10]]
    return ConditionReport(
        name=name,
        n_samples=int(points.shape[0]),
        worst_margin=float(np.min(margins)) if margins.size else float("inf"),
        counterexamples=counterexamples,
        passed=not bool(np.any(bad)),
        note=note,
    )


def _sampling_failure(name: str, note: str) -> ConditionReport:
    return ConditionReport(
        name=name,
        n_samples=0,
        worst_margin=float("nan"),
        passed=False,
        note=f"sampling-failure: {note}",
    )


def _rejection_sample(
    region: BasicSemialgebraicSet,
    lo: np.ndarray,
    hi: np.ndarray,
    n: int,
    rng: np.random.Generator,
    max_draws: int = 2_000_000,
) -> np.ndarray:
    hits: list[np.ndarray] = []
    drawn = 0
    batch_size = max(n, 512)
    while len(hits) < n and drawn < max_draws:
        batch = rng.uniform(lo, hi, size=(batch_size, lo.shape[0]))
        drawn += batch_size
        mask = region.contains_many(batch)
        hits.extend(batch[mask])
    return np.array(hits[:n]) if hits else np.empty((0, lo.shape[0]))


def _band_sample(
    b: Polynomial,
    half_width: float,
    lo: np.ndarray,
    hi: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, str]:
    """Sample the band |B| <= half_width: rejection first, then Newton
    projection of box samples onto the zero level set when the band is too
    thin for rejection (acceptance < 0.1%)."""
    dim = b.dimension
    draws = rng.uniform(lo, hi, size=(max(1000, 20 * n), dim))
    vals = b.evaluate_many(draws)
    hits = draws[np.abs(vals) <= half_width]
    if hits.shape[0] >= max(n // 10, 1) and hits.shape[0] >= 10:
        return hits[:n], "rejection"
    if hits.shape[0] >= n:
        return hits[:n], "rejection"

    grad = b.gradient()
    seeds = rng.uniform(lo, hi, size=(2 * n, dim))
    projected: list[np.ndarray] = list(hits)
    for x in seeds:
        y = x.copy()
        for _ in range(40):
            val = b.evaluate(y)
            if abs(val) <= 0.9 * half_width:
                break
            g = grad.evaluate(y)
            denom = float(g @ g)
            if denom < 1e-14:
                break
            y = y - (val / denom) * g
        if abs(b.evaluate(y)) <= half_width and np.all(y >= lo) and np.all(y <= hi):
            projected.append(y)
            if len(projected) >= n:
                break
    return np.array(projected[:n]) if projected else np.empty((0, dim)), "projection"


def falsify(
    result,
    x0_set: BasicSemialgebraicSet | None,
    unsafe_sets: Sequence[BasicSemialgebraicSet],
    domain: tuple[Sequence[float], Sequence[float]],
    n: int,
    seed: int,
    *,
    violation_tol: float = DEFAULT_VIOLATION_TOL,
    origin_exclusion_radius: float = 1e-3,
) -> FalsificationReport:
    """Seeded sampling falsification of all certificate conditions.

    Checks, over the given domain box: barrier sign conditions on the
    initial/unsafe sets, barrier decrease on the band |B| <= sqrt(eps1),
    Lyapunov positivity V >= eps3*||x||^2 and decrease
    grad(V)^T f <= -eps3*||x||^2 (the latter two outside a small ball at
    the origin, where the margins vanish by construction). A condition
    passes only with zero counterexamples among its samples.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    lo = np.asarray(domain[0], dtype=float)
    hi = np.asarray(domain[1], dtype=float)
    rng = np.random.default_rng(seed)
    f, v, b = result.f, result.V, result.B
    eps1 = result.config.eps1
    eps3 = result.config.eps3
    conditions: dict[str, ConditionReport] = {}

    if b is not None:
        if x0_set is not None:
            pts = _rejection_sample(x0_set, lo, hi, n, rng)
            if pts.shape[0] == 0:
                conditions["initial_nonpositive"] = _sampling_failure(
                    "initial_nonpositive", "no initial-set member found in domain box"
                )
            else:
                conditions["initial_nonpositive"] = _condition_from_margins(
                    "initial_nonpositive", pts, -b.evaluate_many(pts), -violation_tol
                )
        pos_pts = []
        for unsafe in unsafe_sets:
            pts = _rejection_sample(unsafe, lo, hi, n, rng)
            pos_pts.append(pts)
        stacked = np.vstack([p for p in pos_pts if p.shape[0]]) if pos_pts else np.empty((0, lo.shape[0]))
        if unsafe_sets and stacked.shape[0] == 0:
            conditions["unsafe_positive"] = _sampling_failure(
                "unsafe_positive", "no unsafe-set member found in domain box"
            )
        elif unsafe_sets:
            # Strict inequality: any non-positive value is a counterexample.
            conditions["unsafe_positive"] = _condition_from_margins(
                "unsafe_positive", stacked, b.evaluate_many(stacked), 0.0,
                note="strict condition B > 0; threshold 0",
            )
        band_pts, how = _band_sample(b, float(np.sqrt(eps1)), lo, hi, n, rng)
        if band_pts.shape[0] == 0:
            conditions["band_decrease"] = _sampling_failure(
                "band_decrease", "no band member found (rejection and projection)"
            )
        else:
            lie = b.gradient().dot(f)
            conditions["band_decrease"] = _condition_from_margins(
                "band_decrease", band_pts, -lie.evaluate_many(band_pts),
                -violation_tol, note=f"band sampled by {how}",
            )

    dom_pts = rng.uniform(lo, hi, size=(n, lo.shape[0]))
    keep = np.linalg.norm(dom_pts, axis=1) > origin_exclusion_radius
    dom_pts = dom_pts[keep]
    norms2 = np.sum(dom_pts**2, axis=1)
    conditions["lyapunov_positivity"] = _condition_from_margins(
        "lyapunov_positivity",
        dom_pts,
        v.evaluate_many(dom_pts) - eps3 * norms2,
        -violation_tol,
    )
    v_lie = v.gradient().dot(f)
    conditions["lyapunov_decrease"] = _condition_from_margins(
        "lyapunov_decrease",
        dom_pts,
        -v_lie.evaluate_many(dom_pts) - eps3 * norms2,
        -violation_tol,
    )
    return FalsificationReport(conditions)


# ---------------------------------------------------------------------------
# Rollout safety check
# ---------------------------------------------------------------------------


@dataclass
class RolloutCheckReport:
    passed: bool
    n_trajectories: int
    unsafe_entries: list[dict] = field(default_factory=list)
    barrier_crossings: list[dict] = field(default_factory=list)
    max_barrier_value: float = float("-inf")
    terminations: dict[str, int] = field(default_factory=dict)
    warning: str = ""

    def to_json_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_trajectories": self.n_trajectories,
            "unsafe_entries": self.unsafe_entries,
            "barrier_crossings": self.barrier_crossings,
            "max_barrier_value": self.max_barrier_value,
            "terminations": self.terminations,
            "warning": self.warning,
        }


def safe_rollout_check(
    result,
    x0_set: BasicSemialgebraicSet,
    unsafe_sets: Sequence[BasicSemialgebraicSet],
    n_trajs: int,
    dt: float,
    horizon: float,
    seed: int,
    *,
    domain: tuple[Sequence[float], Sequence[float]],
    crossing_budget: float = 1e-6,
) -> RolloutCheckReport:
    """Roll out from seeded initial-set samples and look for safety breaches.

    Fails iff any state enters any unsafe set. Barrier zero-crossings beyond
    the integration-error budget are recorded separately (a valid certificate
    rules them out for trajectories starting in the safe set).
    """
    if result.B is None:
        raise ValueError("safe_rollout_check requires a result with a barrier")
    if n_trajs == 0:
        return RolloutCheckReport(
            passed=True,
            n_trajectories=0,
            warning="vacuous pass: no rollouts requested",
        )
    lo = np.asarray(domain[0], dtype=float)
    hi = np.asarray(domain[1], dtype=float)
    rng = np.random.default_rng(seed)
    starts = _rejection_sample(x0_set, lo, hi, n_trajs, rng)
    if starts.shape[0] < n_trajs:
        return RolloutCheckReport(
            passed=False,
            n_trajectories=int(starts.shape[0]),
            warning="sampling-failure: could not draw enough initial states",
        )
    b = result.B
    report = RolloutCheckReport(passed=True, n_trajectories=n_trajs)
    for idx in range(n_trajs):
        traj = integrate(
            result.f, starts[idx], dt, horizon, domain=(lo, hi)
        )
        report.terminations[traj.termination] = (
            report.terminations.get(traj.termination, 0) + 1
        )
        b_vals = b.evaluate_many(traj.states)
        report.max_barrier_value = max(report.max_barrier_value, float(np.max(b_vals)))
        for o, unsafe in enumerate(unsafe_sets):
            mask = unsafe.contains_many(traj.states)
            if np.any(mask):
                step = int(np.argmax(mask))
                report.unsafe_entries.append(
                    {
                        "trajectory": idx,
                        "step": step,
                        "state": traj.states[step].tolist(),
                        "unsafe_set": o,
                    }
                )
                report.passed = False
                break
        crossings = np.nonzero(b_vals > crossing_budget)[0]
        if crossings.size:
            step = int(crossings[0])
            report.barrier_crossings.append(
                {
                    "trajectory": idx,
                    "step": step,
                    "state": traj.states[step].tolist(),
                    "barrier_value": float(b_vals[step]),
                }
            )
    return report
