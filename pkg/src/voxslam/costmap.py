"""Collision cost-to-go over a horizontal slice of an inferred map."""

import math

import numpy as np

from .engine import predict_rollout
from .transition import LOC, ORI
from .world_map import trilinear_raw, trilinear_setup

_SQRT2 = float(np.sqrt(2.0))
_erf = np.frompyfunc(math.erf, 1, 1)


def control_library(controls, horizon, count, rng):
    """Random fixed-length windows of recorded IMU readings, (count, horizon, 6)."""
    controls = np.asarray(controls, dtype=np.float64)
    n = controls.shape[0]
    if n < horizon:
        raise ValueError(f"need {horizon} control rows, dataset has {n}")
    starts = rng.integers(0, n - horizon + 1, size=count)
    return np.stack([controls[s:s + horizon] for s in starts])


def occupied_probability(grid, points, tau):
    """P(occupancy > tau) under the voxel posterior, interpolated at points.

    Beyond the mapped volume the belief falls back to the N(0, 1) prior, so
    unexplored space is priced at its genuine uncertainty rather than zero.
    """
    points = np.asarray(points, dtype=np.float64)
    mu = trilinear_raw(np.ascontiguousarray(grid.mu).reshape(-1), grid, points)
    sigma = trilinear_raw(np.ascontiguousarray(grid.sigma()).reshape(-1), grid, points)
    _, _, _, inside = trilinear_setup(grid, points)
    z = np.where(inside, (mu - tau) / np.maximum(sigma, 1e-12), -tau)
    return 0.5 * (1.0 + _erf(z / _SQRT2).astype(np.float64))


def cost_to_go(grid, transition, library, xs, ys, height, tau=0.0,
               n_rollouts=20, rng=None, yaw="random"):
    """Expected accumulated collision probability along sampled rollouts.

    Every cell of the xs-by-ys slice at the given height seeds rollouts with
    zero velocity and a shared random yaw per rollout; controls are drawn
    from the library. The per-step cost is the posterior probability that
    the sampled state sits in occupied space (occupancy above tau), so the
    result is the expected number of colliding steps over the horizon.
    """
    rng = rng or np.random.default_rng(0)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(library) == 0:
        raise ValueError("empty control library")
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cells = np.stack([gx.reshape(-1), gy.reshape(-1),
                      np.full(gx.size, float(height))], axis=1)
    total = np.zeros(len(cells))
    for _ in range(n_rollouts):
        u_seq = library[rng.integers(0, len(library))]
        z1 = np.zeros((len(cells), transition.d_z))
        z1[:, LOC] = cells
        if yaw == "random":
            ang = rng.uniform(0.0, 2.0 * np.pi)
        else:
            ang = float(yaw)
        z1[:, ORI] = [np.cos(ang / 2.0), 0.0, 0.0, np.sin(ang / 2.0)]
        zs, _ = predict_rollout(transition, z1, u_seq, rng=rng)
        for t in range(1, len(zs)):
            total += occupied_probability(grid, zs[t][:, LOC], tau)
    return (total / n_rollouts).reshape(len(xs), len(ys))
