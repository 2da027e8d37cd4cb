"""Scratch: U-shaped obstacle scenario (criterion 5 rehearsal).

Data passes through the tunnel of an arch-shaped obstacle, so the obstacle's
convex hull is penetrated by the demonstrations.
"""
import time

import numpy as np

from flowcert.learner.dataset import DemoTrajectory, TrajectoryDataset
from flowcert.learner.pipeline import LearnConfig, learn, preprocess
from flowcert.semialg import (
    BasicSemialgebraicSet,
    Polygon2D,
    fit_unsafe_polynomial,
    make_initial_set,
)
from flowcert import dynsim

WAYPOINTS = np.array(
    [
        [0.95, 0.95],
        [0.82, 0.78],
        [0.68, 0.47],
        [0.56, 0.40],
        [0.50, 0.55],
        [0.42, 0.78],
        [0.20, 0.55],
        [0.07, 0.22],
        [0.00, 0.00],
    ]
)
S_VALUES = np.array([1.00, 0.88, 0.74, 0.60, 0.48, 0.36, 0.22, 0.10, 0.00])

U_VERTICES = [
    (0.30, 0.20),
    (0.90, 0.20),
    (0.90, 0.55),
    (0.78, 0.55),
    (0.78, 0.32),
    (0.42, 0.32),
    (0.42, 0.55),
    (0.30, 0.55),
]


def make_tunnel_dataset(n_traj=3, n_samples=120, spread=0.02, lam=1.0):
    degree = 6
    basis = np.column_stack([S_VALUES**k for k in range(1, degree + 1)])
    cx, *_ = np.linalg.lstsq(basis, WAYPOINTS[:, 0], rcond=None)
    cy, *_ = np.linalg.lstsq(basis, WAYPOINTS[:, 1], rcond=None)

    def curve(s):
        powers = np.column_stack([s**k for k in range(1, degree + 1)])
        dpowers = np.column_stack([k * s ** (k - 1) for k in range(1, degree + 1)])
        return (
            np.column_stack([powers @ cx, powers @ cy]),
            np.column_stack([dpowers @ cx, dpowers @ cy]),
        )

    trajs = []
    offsets = np.linspace(-spread, spread, n_traj)
    s = np.linspace(1.0, 1e-3, n_samples - 1)
    s = np.append(s, 0.0)
    ds_step = 1e-6
    for delta in offsets:
        def path(sv):
            p, dp = curve(sv)
            tn = np.linalg.norm(dp, axis=1, keepdims=True)
            tn[tn < 1e-12] = 1.0
            nm = np.column_stack([-dp[:, 1], dp[:, 0]]) / tn
            return p + delta * sv[:, None] * nm

        pos = path(s)
        dpath = (path(np.clip(s + ds_step, 0, 1)) - path(np.clip(s - ds_step, 0, 1))) / (
            2 * ds_step
        )
        vel = -lam * s[:, None] * dpath
        vel[-1] = 0.0
        t = -np.log(np.maximum(s, 1e-12)) / lam
        t[-1] = t[-2] + (t[-2] - t[-3])
        trajs.append(DemoTrajectory(pos, vel, t))
    return TrajectoryDataset(trajs, np.zeros(2))


def main():
    ds = make_tunnel_dataset()
    cfg = LearnConfig(deg_f=5, deg_V=2, deg_B=4, subsample_count=100, seed=0,
                      max_rounds=20)
    ds_norm, scaling = preprocess(ds, cfg)
    print("scaling", scaling.position_scale)

    poly = Polygon2D(U_VERTICES)
    t0 = time.time()
    fit = fit_unsafe_polynomial(poly, margin=0.01, degree=6, grid_density=90,
                                box=((-0.3, -0.3), (1.25, 1.25)))
    print("fit time %.1fs, worst margin %.4f, outside-negative %d / covered %d"
          % (time.time() - t0, fit.worst_margin, fit.n_outside_negative, fit.n_covered))

    g = fit.polynomial.compose_affine(1.0 / scaling.position_scale, scaling.translation)
    unsafe = BasicSemialgebraicSet(2, [g])
    pos = ds_norm.all_positions()
    inside = unsafe.contains_many(pos)
    print("data points inside fitted unsafe set:", int(np.sum(inside)))
    if np.any(inside):
        print("  e.g.", pos[np.argmax(inside)])
        print("FIT TOO LOOSE for the tunnel; geometry needs tuning")
        return
    x0 = make_initial_set(ds_norm, 0.05)

    t0 = time.time()
    try:
        res = learn(ds_norm, x0, [unsafe], cfg)
    except Exception as exc:
        print("LEARN FAILED after %.1fs: %r" % (time.time() - t0, exc))
        if hasattr(exc, "diagnostics"):
            print(exc.diagnostics.get("slack_trace"))
        raise SystemExit(1)
    print("learn time %.1fs, rounds %d, mse %.4f"
          % (time.time() - t0, res.diagnostics["rounds"], res.mse))
    print("slack trace", res.diagnostics["slack_trace"][:6], "...")
    ver = res.verify_certificates()
    print("all certs pass:", all(v.get("passed") for v in ver.values()))
    print("max B at refs", float(np.max(res.B.evaluate_many(pos))))
    rep = dynsim.falsify(res, x0, [unsafe], ((-1.2, -1.2), (1.2, 1.2)), 10000, 11)
    for name, c in rep.conditions.items():
        print("falsify", name, c.passed, c.worst_margin)
    roll = dynsim.safe_rollout_check(res, x0, [unsafe], 100, 1e-3, 30.0, 5,
                                     domain=((-2.0, -2.0), (2.0, 2.0)))
    print("rollouts passed:", roll.passed, "crossings:", len(roll.barrier_crossings),
          "maxB:", roll.max_barrier_value, roll.terminations)


if __name__ == "__main__":
    main()
