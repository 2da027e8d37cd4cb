"""Basic semialgebraic initial and unsafe sets.

A basic semialgebraic set is the conjunction of finitely many polynomial
inequalities g_i(x) >= 0. Initial sets are balls around demonstration start
points; unsafe sets wrap obstacles, either exactly (ellipses, balls) or via
a fitted polynomial sublevel set for polygonal obstacles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .poly import DimensionMismatchError, Polynomial

if TYPE_CHECKING:  # pragma: no cover
    from .learner.dataset import TrajectoryDataset


class InfeasibleFitError(RuntimeError):
    """Obstacle fit failed its validation grid after the conservative offset."""

    def __init__(self, message: str, worst_point=None, worst_value=None):
        super().__init__(message)
        self.worst_point = worst_point
        self.worst_value = worst_value


@dataclass(frozen=True)
class BasicSemialgebraicSet:
    """Finite conjunction of polynomial inequalities g_i(x) >= 0."""

    dimension: int
    inequalities: tuple[Polynomial, ...]

    def __init__(self, dimension: int, inequalities: Sequence[Polynomial]):
        inequalities = tuple(inequalities)
        if not inequalities:
            raise ValueError("a basic semialgebraic set needs >= 1 inequality")
        for g in inequalities:
            if g.dimension != dimension:
                raise DimensionMismatchError(
                    f"inequality of dimension {g.dimension} in set of dimension {dimension}"
                )
        object.__setattr__(self, "dimension", dimension)
        object.__setattr__(self, "inequalities", inequalities)

    def contains(self, x: Sequence[float]) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"point of shape {x.shape} incompatible with dimension {self.dimension}"
            )
        return all(g.evaluate(x) >= 0.0 for g in self.inequalities)

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized membership for an (m, n) array of points."""
        points = np.asarray(points, dtype=float)
        mask = np.ones(points.shape[0], dtype=bool)
        for g in self.inequalities:
            mask &= g.evaluate_many(points) >= 0.0
        return mask

    def min_inequality(self, x: Sequence[float]) -> float:
        """Worst (smallest) inequality value; >= 0 iff the point is a member."""
        return min(g.evaluate(np.asarray(x, dtype=float)) for g in self.inequalities)

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dimension,
            "inequalities": [g.to_json_dict() for g in self.inequalities],
        }

    @staticmethod
    def from_json_dict(data: Mapping) -> "BasicSemialgebraicSet":
        return BasicSemialgebraicSet(
            int(data["dim"]),
            [Polynomial.from_json_dict(g) for g in data["inequalities"]],
        )


def ball_set(center: Sequence[float], radius: float) -> BasicSemialgebraicSet:
    """The closed ball  r^2 - ||x - c||^2 >= 0."""
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    n = center.shape[0]
    g = Polynomial.constant(radius**2, n)
    for k in range(n):
        xk = Polynomial.variable(k, n)
        g = g - (xk - center[k]) * (xk - center[k])
    return BasicSemialgebraicSet(n, [g])


def ellipse_set(
    center: Sequence[float],
    semi_axes: Sequence[float],
    rotation: float = 0.0,
) -> BasicSemialgebraicSet:
    """The closed rotated ellipse  1 - (x-c)^T E (x-c) >= 0  in the plane.

    E = R diag(1/a^2, 1/b^2) R^T with R the rotation by the given angle, so
    the set contains its center and has the requested semi-axes.
    """
    center = np.asarray(center, dtype=float)
    semi_axes = np.asarray(semi_axes, dtype=float)
    if center.shape != (2,) or semi_axes.shape != (2,):
        raise DimensionMismatchError("ellipse_set is planar: center and axes are 2D")
    if np.any(semi_axes <= 0):
        raise ValueError(f"semi-axes must be positive, got {semi_axes}")
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    quad = rot @ np.diag(1.0 / semi_axes**2) @ rot.T
    x1 = Polynomial.variable(0, 2) - center[0]
    x2 = Polynomial.variable(1, 2) - center[1]
    g = (
        Polynomial.constant(1.0, 2)
        - quad[0, 0] * x1 * x1
        - quad[1, 1] * x2 * x2
        - 2.0 * quad[0, 1] * x1 * x2
    )
    return BasicSemialgebraicSet(2, [g])


def make_initial_set(dataset: "TrajectoryDataset", padding: float) -> BasicSemialgebraicSet:
    """Ball around the demonstration start points.

    Centered at the mean start, with radius reaching the farthest start plus
    the given padding, so every recorded start point is a member.
    """
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    starts = dataset.start_points()
    if starts.shape[0] == 0:
        raise ValueError("dataset has no trajectories")
    center = starts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(starts - center, axis=1))) + padding
    if radius <= 0:
        raise ValueError(
            "degenerate initial set: single start point and zero padding"
        )
    return ball_set(center, radius)


# ---------------------------------------------------------------------------
# Polygonal obstacles
# ---------------------------------------------------------------------------


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-14:
            return 0
        return 1 if v > 0 else -1

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


@dataclass(frozen=True)
class Polygon2D:
    """Simple planar polygon with counter-clockwise vertex order."""

    vertices: np.ndarray  # (m, 2)

    def __init__(self, vertices: Sequence[Sequence[float]]):
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise ValueError("polygon needs >= 3 planar vertices")
        if np.any(np.all(verts == np.roll(verts, -1, axis=0), axis=1)):
            raise ValueError("polygon has repeated adjacent vertices")
        area2 = float(
            np.sum(
                verts[:, 0] * np.roll(verts[:, 1], -1)
                - np.roll(verts[:, 0], -1) * verts[:, 1]
            )
        )
        if abs(area2) < 1e-14:
            raise ValueError("polygon is degenerate (zero area)")
        if area2 < 0:  # normalize to counter-clockwise
            verts = verts[::-1].copy()
        m = verts.shape[0]
        for i in range(m):
            a1, a2 = verts[i], verts[(i + 1) % m]
            for j in range(i + 1, m):
                if j == i or (j + 1) % m == i or (i + 1) % m == j:
                    continue
                b1, b2 = verts[j], verts[(j + 1) % m]
                if _segments_properly_intersect(a1, a2, b1, b2):
                    raise ValueError("polygon is self-intersecting")
        object.__setattr__(self, "vertices", verts)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def contains(self, point: Sequence[float], boundary_tol: float = 1e-12) -> bool:
        """Point-in-polygon by crossing number; boundary points count as inside."""
        x, y = float(point[0]), float(point[1])
        verts = self.vertices
        m = verts.shape[0]
        inside = False
        for i in range(m):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % m]
            # on-segment check
            dx, dy = x2 - x1, y2 - y1
            seg_len2 = dx * dx + dy * dy
            t = ((x - x1) * dx + (y - y1) * dy) / seg_len2
            t = min(max(t, 0.0), 1.0)
            if (x - (x1 + t * dx)) ** 2 + (y - (y1 + t * dy)) ** 2 <= boundary_tol:
                return True
            if (y1 > y) != (y2 > y):
                x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
                if x < x_cross:
                    inside = not inside
        return inside

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.contains(p) for p in np.asarray(points, dtype=float)])

    def dilate(self, margin: float) -> "Polygon2D":
        """Offset every vertex outward along its angle bisector by the margin.

        Miter lengths are clamped at 4x the margin for near-degenerate spikes.
        Adequate for the modest footprint-inflation margins used here; large
        margins on concave polygons may self-intersect.
        """
        if margin < 0:
            raise ValueError(f"margin must be non-negative, got {margin}")
        if margin == 0:
            return self
        verts = self.vertices
        m = verts.shape[0]
        edges = np.roll(verts, -1, axis=0) - verts
        lengths = np.linalg.norm(edges, axis=1)
        dirs = edges / lengths[:, None]
        normals = np.column_stack([dirs[:, 1], -dirs[:, 0]])  # outward for CCW
        out = np.empty_like(verts)
        for i in range(m):
            n_prev = normals[i - 1]
            n_cur = normals[i]
            denom = 1.0 + float(n_prev @ n_cur)
            bisector = n_prev + n_cur
            norm = np.linalg.norm(bisector)
            if denom < 0.125 or norm < 1e-9:
                step = 4.0 * margin * (bisector / norm if norm >= 1e-9 else n_cur)
            else:
                step = margin * bisector / denom
            out[i] = verts[i] + step
        return Polygon2D(out)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the polygon boundary."""
        points = np.asarray(points, dtype=float)
        verts = self.vertices
        m = verts.shape[0]
        best = np.full(points.shape[0], np.inf)
        for i in range(m):
            a = verts[i]
            b = verts[(i + 1) % m]
            ab = b - a
            denom = float(ab @ ab)
            t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            best = np.minimum(best, np.linalg.norm(points - proj, axis=1))
        return best

    def to_json_list(self) -> list:
        return [[float(x), float(y)] for x, y in self.vertices]

    @staticmethod
    def from_json_list(data: Sequence) -> "Polygon2D":
        return Polygon2D([(float(p[0]), float(p[1])) for p in data])


@dataclass
class ObstacleFit:
    """Result of fitting a polynomial sublevel-set cover of a polygon."""

    unsafe_set: BasicSemialgebraicSet
    polynomial: Polynomial
    worst_margin: float  # min of g over the validation grid's polygon points
    offset: float
    n_covered: int
    n_outside_negative: int  # validation points outside the polygon with g < 0


def fit_unsafe_polynomial(
    polygon: Polygon2D,
    margin: float,
    degree: int,
    grid_density: int = 80,
    box: tuple[Sequence[float], Sequence[float]] | None = None,
) -> ObstacleFit:
    """Cover a (dilated) polygon with a single polynomial inequality g >= 0.

    Fits a clipped signed-distance target over a workspace grid with a few
    one-sided reweighting passes (undershoot inside the polygon and overshoot
    just outside it get their weights boosted), then applies a conservative
    constant offset so that no dilated-polygon grid point violates g >= 0.
    Coverage is re-checked on a twice-finer validation grid; failure there
    raises InfeasibleFitError with the worst violating point. Tightness is
    secondary to coverage: the set may stick out beyond the polygon but never
    omits it. `box` is the workspace the fit should stay meaningful on
    (default: polygon bounding box padded by 3/4 of its larger extent); the
    set is unconstrained outside it.
    """
    if degree < 2 or degree % 2 != 0:
        raise ValueError(f"degree must be an even integer >= 2, got {degree}")
    if grid_density < 4:
        raise ValueError(f"grid_density must be >= 4, got {grid_density}")

    dilated = polygon.dilate(margin)
    p_lo, p_hi = dilated.bounding_box()
    extent = p_hi - p_lo
    if box is None:
        pad = 0.75 * float(max(extent))
        lo, hi = p_lo - pad, p_hi + pad
    else:
        lo = np.asarray(box[0], dtype=float)
        hi = np.asarray(box[1], dtype=float)
        if np.any(lo > p_lo) or np.any(hi < p_hi):
            raise ValueError("box must contain the dilated polygon")

    # Fit in box-normalized coordinates for conditioning.
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)

    def make_grid(density: int) -> np.ndarray:
        xs = np.linspace(lo[0], hi[0], density)
        ys = np.linspace(lo[1], hi[1], density)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    pts = make_grid(grid_density)
    inside = dilated.contains_many(pts)
    if not np.any(inside):
        raise InfeasibleFitError(
            "fit grid does not resolve the polygon; increase grid_density"
        )
    # Signed boundary distance, clipped inside only: the outside branch keeps
    # growing so the fit's far field stays negative instead of swinging back
    # positive at the workspace corners.
    dist = dilated.boundary_distance(pts)
    cap = 0.25 * float(max(extent))
    target = np.where(inside, np.minimum(dist, cap), -dist) / cap

    from .poly import monomial_basis

    monos = monomial_basis(2, degree)
    normed = (pts - center) / half
    vand = np.column_stack(
        [normed[:, 0] ** m[0] * normed[:, 1] ** m[1] for m in monos]
    )
    weights = np.ones(pts.shape[0])
    near_out = (~inside) & (dist < 2.0 * cap)
    coefs = np.zeros(len(monos))
    for _ in range(8):
        sw = np.sqrt(weights)
        coefs, *_ = np.linalg.lstsq(vand * sw[:, None], target * sw, rcond=None)
        pred = vand @ coefs
        weights[inside & (pred < 0.02)] *= 8.0
        weights[near_out & (pred > -0.02)] *= 3.0
    g_norm = Polynomial(2, dict(zip(monos, coefs)))
    # Back to original coordinates: substitute x := (x - center) / half.
    g_fit = g_norm.compose_affine(1.0 / half, -center / half)

    vals_inside = g_fit.evaluate_many(pts[inside])
    fit_min = float(np.min(vals_inside))
    # Safety headroom: largest value jump between grid neighbors touching the
    # polygon (the far field is irrelevant and would dominate the max).
    grid_field = g_fit.evaluate_many(pts).reshape(grid_density, grid_density)
    inside_grid = inside.reshape(grid_density, grid_density)
    jumps = []
    for axis in (0, 1):
        diffs = np.abs(np.diff(grid_field, axis=axis))
        near = np.take(inside_grid, range(diffs.shape[axis]), axis=axis) | np.take(
            inside_grid, range(1, diffs.shape[axis] + 1), axis=axis
        )
        if np.any(near):
            jumps.append(float(np.max(diffs[near])))
    offset = -min(fit_min, 0.0) + (max(jumps) if jumps else 0.0)
    g = g_fit + offset

    val_pts = make_grid(2 * grid_density + 1)
    val_inside = dilated.contains_many(val_pts)
    val_values = g.evaluate_many(val_pts)
    covered = val_values[val_inside]
    worst_idx = int(np.argmin(covered))
    worst_margin = float(covered[worst_idx])
    if worst_margin < 0:
        worst_point = val_pts[val_inside][worst_idx]
        raise InfeasibleFitError(
            f"fitted set misses dilated-polygon point {worst_point} "
            f"(g = {worst_margin:.3e})",
            worst_point=worst_point,
            worst_value=worst_margin,
        )
    return ObstacleFit(
        unsafe_set=BasicSemialgebraicSet(2, [g]),
        polynomial=g,
        worst_margin=worst_margin,
        offset=offset,
        n_covered=int(np.sum(val_inside)),
        n_outside_negative=int(np.sum(val_values[~val_inside] < 0)),
    )
