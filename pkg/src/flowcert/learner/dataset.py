"""Demonstration trajectory datasets and their preprocessing.

The learner consumes N position/velocity sample pairs grouped into
trajectories that all end at a common attractor. Preprocessing shifts the
attractor to the origin, rescales per axis so coordinates live in [-1, 1]
(high-degree monomial coefficients otherwise spread over many orders of
magnitude and destabilize the solver), and subsamples to a fixed number of
points per trajectory.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..poly import DimensionMismatchError, PolynomialVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DemoTrajectory:
    """One demonstration: positions, velocities, and timestamps."""

    positions: np.ndarray  # (m, n)
    velocities: np.ndarray  # (m, n)
    times: np.ndarray  # (m,)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        vel = np.asarray(self.velocities, dtype=float)
        t = np.asarray(self.times, dtype=float)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("positions must be a non-empty (m, n) array")
        if vel.shape != pos.shape:
            raise DimensionMismatchError(
                f"velocities shape {vel.shape} != positions shape {pos.shape}"
            )
        if t.shape != (pos.shape[0],):
            raise DimensionMismatchError("times length must match sample count")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "times", t)

    @property
    def n_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def dimension(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class TrajectoryDataset:
    """Demonstrations sharing one ambient dimension and one attractor."""

    trajectories: tuple[DemoTrajectory, ...]
    attractor: np.ndarray  # (n,)

    def __init__(self, trajectories: Sequence[DemoTrajectory], attractor: Sequence[float]):
        trajs = tuple(trajectories)
        if not trajs:
            raise ValueError("dataset needs at least one trajectory")
        attractor = np.asarray(attractor, dtype=float)
        n = trajs[0].dimension
        if attractor.shape != (n,):
            raise DimensionMismatchError("attractor dimension mismatch")
        for tr in trajs:
            if tr.dimension != n:
                raise DimensionMismatchError("trajectories disagree on dimension")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "attractor", attractor)

    @property
    def dimension(self) -> int:
        return self.trajectories[0].dimension

    @property
    def n_samples(self) -> int:
        return sum(tr.n_samples for tr in self.trajectories)

    def all_positions(self) -> np.ndarray:
        return np.vstack([tr.positions for tr in self.trajectories])

    def all_velocities(self) -> np.ndarray:
        return np.vstack([tr.velocities for tr in self.trajectories])

    def start_points(self) -> np.ndarray:
        return np.vstack([tr.positions[0] for tr in self.trajectories])


@dataclass(frozen=True)
class ScalingRecord:
    """Affine data normalization: x_norm = scale * (x - translation).

    Velocities share the per-axis position factors (time is not rescaled),
    so a DS learned in normalized coordinates maps back by the chain rule.
    """

    translation: np.ndarray  # (n,)
    position_scale: np.ndarray  # (n,)
    velocity_scale: np.ndarray  # (n,)

    def __init__(self, translation, position_scale, velocity_scale):
        object.__setattr__(self, "translation", np.asarray(translation, dtype=float))
        object.__setattr__(self, "position_scale", np.asarray(position_scale, dtype=float))
        object.__setattr__(self, "velocity_scale", np.asarray(velocity_scale, dtype=float))

    @staticmethod
    def identity(n: int) -> "ScalingRecord":
        return ScalingRecord(np.zeros(n), np.ones(n), np.ones(n))

    def compose(self, inner: "ScalingRecord") -> "ScalingRecord":
        """Record equivalent to applying `inner` first, then self."""
        # self(inner(x)) = s2*(s1*(x - t1) - t2) = (s2*s1)*(x - (t1 + t2/s1))
        s1, t1 = inner.position_scale, inner.translation
        s2, t2 = self.position_scale, self.translation
        return ScalingRecord(
            t1 + t2 / s1,
            s2 * s1,
            self.velocity_scale * inner.velocity_scale,
        )

    def apply_positions(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.translation) * self.position_scale

    def invert_positions(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) / self.position_scale + self.translation

    def apply_velocities(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.velocity_scale

    def invert_velocities(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) / self.velocity_scale

    def to_json_dict(self) -> dict:
        return {
            "translation": self.translation.tolist(),
            "position_scale": self.position_scale.tolist(),
            "velocity_scale": self.velocity_scale.tolist(),
        }

    @staticmethod
    def from_json_dict(data: Mapping) -> "ScalingRecord":
        return ScalingRecord(
            data["translation"], data["position_scale"], data["velocity_scale"]
        )


def recenter(ds: TrajectoryDataset) -> tuple[TrajectoryDataset, ScalingRecord]:
    """Shift positions so the attractor is the origin. Velocities unchanged."""
    shift = ds.attractor
    trajs = [
        DemoTrajectory(tr.positions - shift, tr.velocities, tr.times)
        for tr in ds.trajectories
    ]
    n = ds.dimension
    record = ScalingRecord(shift, np.ones(n), np.ones(n))
    return TrajectoryDataset(trajs, np.zeros(n)), record


def ensure_terminal_attractor(
    ds: TrajectoryDataset, tol: float = 1e-9
) -> TrajectoryDataset:
    """Make every trajectory end exactly at (attractor, 0).

    Trajectories already ending within tol are snapped; others get one
    appended terminal sample. Exact duplicate positions within a trajectory
    are dropped with a warning (the optimization assumes distinct samples).
    """
    attractor = ds.attractor
    out = []
    for idx, tr in enumerate(ds.trajectories):
        pos, vel, times = tr.positions, tr.velocities, tr.times
        seen: dict[tuple, int] = {}
        keep = []
        for i in range(pos.shape[0]):
            key = tuple(pos[i])
            if key in seen:
                continue
            seen[key] = i
            keep.append(i)
        if len(keep) < pos.shape[0]:
            logger.warning(
                "trajectory %d: dropped %d duplicate position samples",
                idx,
                pos.shape[0] - len(keep),
            )
            pos, vel, times = pos[keep], vel[keep], times[keep]
        if np.linalg.norm(pos[-1] - attractor) <= tol:
            pos = pos.copy()
            vel = vel.copy()
            pos[-1] = attractor
            vel[-1] = 0.0
        else:
            dt = float(np.median(np.diff(times))) if times.shape[0] > 1 else 1.0
            pos = np.vstack([pos, attractor])
            vel = np.vstack([vel, np.zeros(ds.dimension)])
            times = np.append(times, times[-1] + dt)
        out.append(DemoTrajectory(pos, vel, times))
    return TrajectoryDataset(out, attractor)


def normalize(ds: TrajectoryDataset) -> tuple[TrajectoryDataset, ScalingRecord]:
    """Rescale a recentered dataset so each axis' max |coordinate| is 1.

    Velocities pick up the same per-axis factors, keeping velocities
    consistent with positions under the unscaled time base.
    """
    if np.any(ds.attractor != 0.0):
        raise ValueError("normalize expects a recentered dataset (attractor at 0)")
    pos = ds.all_positions()
    spread = np.max(np.abs(pos), axis=0)
    for axis, s in enumerate(spread):
        if s == 0.0:
            raise ValueError(f"degenerate axis {axis}: zero positional spread")
    scale = 1.0 / spread
    trajs = [
        DemoTrajectory(tr.positions * scale, tr.velocities * scale, tr.times)
        for tr in ds.trajectories
    ]
    record = ScalingRecord(np.zeros(ds.dimension), scale, scale)
    return TrajectoryDataset(trajs, np.zeros(ds.dimension)), record


def subsample(ds: TrajectoryDataset, count: int) -> TrajectoryDataset:
    """Uniformly strided subsequence per trajectory, keeping both endpoints."""
    if count < 2:
        raise ValueError(f"count must be >= 2 to retain both endpoints, got {count}")
    trajs = []
    for idx, tr in enumerate(ds.trajectories):
        m = tr.n_samples
        if m < count:
            raise ValueError(
                f"trajectory {idx} has {m} samples, fewer than requested {count}"
            )
        sel = [(j * (m - 1)) // (count - 1) for j in range(count)]
        trajs.append(
            DemoTrajectory(tr.positions[sel], tr.velocities[sel], tr.times[sel])
        )
    return TrajectoryDataset(trajs, ds.attractor)


def mse(f: PolynomialVector, ds: TrajectoryDataset) -> float:
    """Mean squared error between reference velocities and f at the samples."""
    if f.dimension != ds.dimension:
        raise DimensionMismatchError(
            f"field dimension {f.dimension} != dataset dimension {ds.dimension}"
        )
    if ds.n_samples == 0:
        raise ValueError("empty dataset")
    pos = ds.all_positions()
    vel = ds.all_velocities()
    residual = vel - f.evaluate_many(pos)
    return float(np.mean(np.sum(residual**2, axis=1)))


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def load_trajectories_csv(path) -> TrajectoryDataset:
    """Read trajectories from CSV with header traj_id,t,x1..xn[,v1..vn].

    When velocity columns are absent they are estimated by central
    differences over t. The attractor is the mean of the final positions.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty trajectory file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "traj_id" or header[1] != "t":
            raise ValueError(
                f"{path}: expected header traj_id,t,x1..xn[,v1..vn], got {header}"
            )
        x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
        v_cols = [i for i, h in enumerate(header) if h.startswith("v")]
        n = len(x_cols)
        if n == 0:
            raise ValueError(f"{path}: no position columns found")
        if v_cols and len(v_cols) != n:
            raise ValueError(f"{path}: {len(v_cols)} velocity columns for {n} axes")
        groups: dict[str, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} fields")
            tid = row[0].strip()
            t = float(row[1])
            x = [float(row[i]) for i in x_cols]
            v = [float(row[i]) for i in v_cols] if v_cols else None
            groups.setdefault(tid, []).append((t, x, v))
    if not groups:
        raise ValueError(f"{path}: no data rows")

    trajs = []
    for tid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        pos = np.array([r[1] for r in rows])
        if v_cols:
            vel = np.array([r[2] for r in rows])
        else:
            if len(rows) < 3:
                raise ValueError(
                    f"{path}: trajectory {tid} too short for velocity estimation"
                )
            vel = np.gradient(pos, times, axis=0)
        trajs.append(DemoTrajectory(pos, vel, times))
    attractor = np.mean([tr.positions[-1] for tr in trajs], axis=0)
    return TrajectoryDataset(trajs, attractor)


def save_trajectories_csv(ds: TrajectoryDataset, path) -> None:
    n = ds.dimension
    header = (
        ["traj_id", "t"]
        + [f"x{k + 1}" for k in range(n)]
        + [f"v{k + 1}" for k in range(n)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for tid, tr in enumerate(ds.trajectories):
            for i in range(tr.n_samples):
                writer.writerow(
                    [tid, repr(float(tr.times[i]))]
                    + [repr(float(v)) for v in tr.positions[i]]
                    + [repr(float(v)) for v in tr.velocities[i]]
                )
