"""Differentiable raycasting over the occupancy grid.

The camera frustum is discretised into per-pixel rays sampled at depths
k * delta, k = 1..r (depths are along the optical axis: ray directions are
K^-1 [i, j, 1], unnormalised). A pixel's rendered depth comes from the first
sample whose occupancy strictly exceeds the threshold tau, refined by linear
interpolation between that sample and its predecessor; the chart value at
k <= 1 is defined as 0, and a ray with no crossing renders at r * delta with
no gradient. Rendered colour is the colour field at the hit sample.

The integer hit index carries no gradient, so searches run in plain numpy;
tape re-evaluation of the bracketing pair (see the engine) recovers exactly
the gradients of the full computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, quat_rotate
from .world_map import ColourField, OccupancyGrid, trilinear_raw


@dataclass
class RayLattice:
    """Depth discretisation shared by all pixels of a frame."""

    delta: float
    r: int

    def __post_init__(self):
        if self.delta <= 0 or self.r < 2:
            raise ValueError(f"need delta > 0 and r >= 2, got delta={self.delta} r={self.r}")

    @property
    def depths(self):
        return np.arange(1, self.r + 1) * self.delta

    @property
    def max_depth(self):
        return self.r * self.delta

    @classmethod
    def for_max_depth(cls, delta, max_depth):
        return cls(delta, int(round(max_depth / delta)))


def subsample_pixels(K: CameraIntrinsics, count: int, rng: np.random.Generator):
    """Uniform pixel subset without replacement plus the unbiased loss scale.

    Scaling a sum of per-pixel terms over the subset by (width*height)/count
    makes it an unbiased estimate of the full-image sum.
    """
    total = K.width * K.height
    if not (0 < count <= total):
        raise ValueError(f"pixel count {count} not in 1..{total}")
    flat = rng.choice(total, size=count, replace=False)
    pixels = np.stack([flat % K.width, flat // K.width], axis=1)
    return pixels, total / count


def cast_frustum(pose_q, pose_t, K: CameraIntrinsics, pixels, lattice: RayLattice):
    """World-frame sample points (N, r, 3) for the given pixels of a pose."""
    dirs_cam = K.pixel_rays(pixels)
    dirs_world = quat_rotate(pose_q, dirs_cam)
    pts = dirs_world[:, None, :] * lattice.depths[None, :, None]
    return pts + np.asarray(pose_t, dtype=np.float64)


def extract_chart(values_flat, grid: OccupancyGrid, points, colour: ColourField | None = None):
    """Chart along frustum points: occupancy (and colour when requested)."""
    occ = trilinear_raw(values_flat, grid, points)
    if colour is None:
        return occ
    return occ, colour.eval_raw(points)


def raycast_depth(row, tau, delta):
    """First-crossing depth for chart rows (..., r) of occupancy samples.

    Returns (k_hit, mu_d, hit): 1-indexed hit sample (r when no crossing),
    interpolated depth, and the hit mask. The k = 1 sample is treated as 0;
    a degenerate crossing (denominator below 1e-12) renders at the hit
    sample itself (alpha = 1).
    """
    row = np.asarray(row, dtype=np.float64)
    r = row.shape[-1]
    eff = row.copy()
    eff[..., 0] = 0.0
    over = eff > tau
    hit = over.any(axis=-1)
    k0 = np.argmax(over, axis=-1)             # 0-based first crossing
    o_k = np.take_along_axis(eff, k0[..., None], axis=-1)[..., 0]
    kprev = np.maximum(k0 - 1, 0)
    o_prev = np.take_along_axis(eff, kprev[..., None], axis=-1)[..., 0]
    o_prev = np.where(k0 == 0, 0.0, o_prev)
    denom = o_k - o_prev
    ok = np.abs(denom) > 1e-12
    alpha = np.where(ok, (tau - o_prev) / np.where(ok, denom, 1.0), 1.0)
    alpha = np.clip(alpha, 0.0, 1.0)
    mu_d = np.where(hit, (k0 + alpha) * delta, r * delta)
    k_hit = np.where(hit, k0 + 1, r)
    return k_hit, mu_d, hit


def march_first_crossing(values_flat, grid: OccupancyGrid, origins, dirs,
                         lattice: RayLattice, tau, block=24):
    """Vectorised first-crossing search with early ray retirement.

    origins/dirs are (M, 3); depths along each ray are k * delta applied to
    the given (unnormalised) directions. Returns (k_hit 1-indexed, hit,
    o_prev, o_hit); rays without a crossing get k_hit = r. Matches
    raycast_depth(extract_chart(...)) exactly.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = len(dirs)
    k_hit = np.full(m, lattice.r, dtype=np.int64)
    hit = np.zeros(m, dtype=bool)
    o_prev = np.zeros(m)
    o_hit = np.zeros(m)
    carried = np.zeros(m)                      # chart value at the previous k
    active = np.arange(m)
    for start in range(1, lattice.r + 1, block):
        ks = np.arange(start, min(start + block, lattice.r + 1))
        pts = origins[active, None, :] + dirs[active, None, :] * (ks[None, :, None] * lattice.delta)
        vals = trilinear_raw(values_flat, grid, pts)
        if start == 1:
            vals[:, 0] = 0.0
        over = vals > tau
        found = over.any(axis=1)
        first = np.argmax(over, axis=1)
        rows = np.where(found)[0]
        if rows.size:
            rays = active[rows]
            kk = first[rows]
            k_hit[rays] = ks[kk]
            hit[rays] = True
            o_hit[rays] = vals[rows, kk]
            prev_in_block = vals[rows, np.maximum(kk - 1, 0)]
            o_prev[rays] = np.where(kk > 0, prev_in_block, carried[rays])
        keep = ~found
        if not keep.all():
            active = active[keep]
            vals = vals[keep]
        if active.size == 0:
            break
        carried[active] = vals[:, -1]
    return k_hit, hit, o_prev, o_hit


def interpolated_depth(k_hit, hit, o_prev, o_hit, lattice: RayLattice, tau):
    """Depth from march outputs; numpy twin of the tape-side formula."""
    denom = o_hit - o_prev
    ok = np.abs(denom) > 1e-12
    alpha = np.where(ok, (tau - o_prev) / np.where(ok, denom, 1.0), 1.0)
    alpha = np.clip(alpha, 0.0, 1.0)
    return np.where(hit, (k_hit - 1 + alpha) * lattice.delta, lattice.max_depth)


def emit_pixel(obs_depth, obs_rgb, mu_d, mu_rgb, sigma_d):
    """Laplace log-density of one pixel observation given rendered means.

    Depth uses scale sigma_d; each colour channel uses sigma_d / 10.
    """
    b_c = sigma_d / 10.0
    lp = -np.log(2.0 * sigma_d) - np.abs(obs_depth - mu_d) / sigma_d
    lp += np.sum(-np.log(2.0 * b_c) - np.abs(np.asarray(obs_rgb) - np.asarray(mu_rgb)) / b_c, axis=-1)
    return lp


def render_frame(grid: OccupancyGrid, colour: ColourField, K: CameraIntrinsics,
                 pose_q, pose_t, lattice: RayLattice, tau, values_flat=None):
    """Full-image expected render from the posterior mean map.

    Returns (depth (h, w), rgb (h, w, 3), hit (h, w)). Colour for a no-hit
    pixel is the field at the final sample, matching the emission model.
    """
    if values_flat is None:
        values_flat = grid.mu.reshape(-1)
    pixels = K.all_pixels()
    dirs = quat_rotate(pose_q, K.pixel_rays(pixels))
    origins = np.broadcast_to(np.asarray(pose_t, dtype=np.float64), dirs.shape)
    k_hit, hit, o_prev, o_hit = march_first_crossing(values_flat, grid, origins, dirs, lattice, tau)
    depth = interpolated_depth(k_hit, hit, o_prev, o_hit, lattice, tau)
    hit_pts = origins + dirs * (k_hit[:, None] * lattice.delta)
    rgb = colour.eval_raw(hit_pts)
    h, w = K.height, K.width
    return depth.reshape(h, w), rgb.reshape(h, w, 3), hit.reshape(h, w)
