"""Scratch: S-shape + ellipse barrier scenario (criterion 4 rehearsal)."""
import time

import numpy as np

from flowcert.learner.dataset import DemoTrajectory, TrajectoryDataset
from flowcert.learner.pipeline import LearnConfig, learn, preprocess
from flowcert.semialg import ellipse_set, make_initial_set
from flowcert import dynsim

WAYPOINTS = np.array(
    [
        [1.00, 0.95],
        [0.55, 1.00],
        [0.18, 0.80],
        [0.10, 0.50],
        [0.22, 0.24],
        [0.42, 0.14],
        [0.25, 0.05],
        [0.00, 0.00],
    ]
)
S_VALUES = np.array([1.00, 0.85, 0.70, 0.55, 0.40, 0.25, 0.12, 0.00])


def s_curve_coeffs(degree=6):
    # basis s^1..s^degree (no constant: p(0) = 0 exactly)
    basis = np.column_stack([S_VALUES**k for k in range(1, degree + 1)])
    cx, *_ = np.linalg.lstsq(basis, WAYPOINTS[:, 0], rcond=None)
    cy, *_ = np.linalg.lstsq(basis, WAYPOINTS[:, 1], rcond=None)
    return cx, cy


def curve(s, coeffs):
    cx, cy = coeffs
    powers = np.column_stack([s**k for k in range(1, len(cx) + 1)])
    dpowers = np.column_stack([k * s ** (k - 1) for k in range(1, len(cx) + 1)])
    pos = np.column_stack([powers @ cx, powers @ cy])
    dpos = np.column_stack([dpowers @ cx, dpowers @ cy])
    return pos, dpos


def make_s_dataset(n_traj=3, n_samples=120, spread=0.04, lam=1.0):
    coeffs = s_curve_coeffs()
    trajs = []
    offsets = np.linspace(-spread, spread, n_traj)
    s = np.linspace(1.0, 1e-3, n_samples - 1)
    s = np.append(s, 0.0)
    for delta in offsets:
        pos, dpos = curve(s, coeffs)
        tang_norm = np.linalg.norm(dpos, axis=1, keepdims=True)
        tang_norm[tang_norm < 1e-12] = 1.0
        normal = np.column_stack([-dpos[:, 1], dpos[:, 0]]) / tang_norm
        taper = s[:, None]
        pos_i = pos + delta * taper * normal
        # velocity: d/dt of p(s(t)) with s(t) = exp(-lam t) -> v = -lam*s*dp/ds
        # offset term differentiated numerically via chain rule on s as well
        ds = 1e-6
        pos_hi, _ = curve(np.clip(s + ds, 0, 1), coeffs)
        pos_lo, _ = curve(np.clip(s - ds, 0, 1), coeffs)
        _, dhi = curve(np.clip(s + ds, 0, 1), coeffs)
        # full path including offset, differentiate numerically in s
        def path(sv):
            p, dp = curve(sv, coeffs)
            tn = np.linalg.norm(dp, axis=1, keepdims=True)
            tn[tn < 1e-12] = 1.0
            nm = np.column_stack([-dp[:, 1], dp[:, 0]]) / tn
            return p + delta * sv[:, None] * nm

        dpath = (path(np.clip(s + ds, 0, 1)) - path(np.clip(s - ds, 0, 1))) / (2 * ds)
        vel = -lam * s[:, None] * dpath
        vel[-1] = 0.0
        t = -np.log(np.maximum(s, 1e-12)) / lam
        t[-1] = t[-2] + (t[-2] - t[-3])
        trajs.append(DemoTrajectory(pos_i, vel, t))
    return TrajectoryDataset(trajs, np.zeros(2))


def main():
    ds = make_s_dataset()
    cfg = LearnConfig(deg_f=5, deg_V=2, deg_B=4, subsample_count=100, seed=0,
                      max_rounds=20)
    ds_norm, scaling = preprocess(ds, cfg)
    print("scaling", scaling.position_scale, scaling.translation)
    obstacle = ellipse_set((0.5, 0.45), (0.16, 0.13), 0.0)
    # transform into normalized coordinates
    g = obstacle.inequalities[0].compose_affine(
        1.0 / scaling.position_scale, scaling.translation
    )
    from flowcert.semialg import BasicSemialgebraicSet
    obstacle_n = BasicSemialgebraicSet(2, [g])
    x0 = make_initial_set(ds_norm, 0.05)
    print("x0", x0.inequalities[0])
    pos = ds_norm.all_positions()
    print("any sample in obstacle:", np.any(obstacle_n.contains_many(pos)))
    print("min clearance:", np.min(-obstacle_n.inequalities[0].evaluate_many(pos)))

    t0 = time.time()
    try:
        res = learn(ds_norm, x0, [obstacle_n], cfg)
    except Exception as exc:
        print("LEARN FAILED after %.1fs: %r" % (time.time() - t0, exc))
        if hasattr(exc, "diagnostics"):
            for k, v in exc.diagnostics.items():
                print(" ", k, v)
        raise SystemExit(1)
    print("learn time %.1fs" % (time.time() - t0))
    print("mse", res.mse)
    print("rounds", res.diagnostics["rounds"])
    print("slack trace", res.diagnostics["slack_trace"])
    ver = res.verify_certificates()
    for k, v in ver.items():
        print("cert", k, v)
    print("max B at refs", float(np.max(res.B.evaluate_many(pos))))

    rep = dynsim.falsify(res, x0, [obstacle_n], ((-1.2, -1.2), (1.2, 1.2)), 10000, 11)
    for name, c in rep.conditions.items():
        print("falsify", name, c.passed, c.worst_margin, c.note)
    roll = dynsim.safe_rollout_check(
        res, x0, [obstacle_n], 100, 1e-3, 30.0, 5,
        domain=((-2.0, -2.0), (2.0, 2.0)),
    )
    print("rollouts passed:", roll.passed, "crossings:", len(roll.barrier_crossings),
          "maxB:", roll.max_barrier_value, roll.terminations)


if __name__ == "__main__":
    main()
