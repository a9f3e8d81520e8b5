"""File products: map slices, point clouds, and frustum coverage masks."""

import numpy as np

from .geometry import quat_normalize, quat_rotate
from .renderer import march_first_crossing
from .world_map import trilinear_raw, trilinear_setup

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


def slice_field(grid, axis, coordinate, quantity="mean"):
    """Trilinear slice of occupancy mean or sigma at grid resolution.

    Returns (values (n_a, n_b), a_centres, b_centres) where a, b are the two
    free axes in ascending order.
    """
    ax = _AXES.get(axis)
    if ax is None:
        raise ValueError(f"unknown axis '{axis}'")
    centres = [grid.voxel_centres_axis(i) for i in range(3)]
    lo, hi = centres[ax][0], centres[ax][-1]
    if not (lo <= coordinate <= hi):
        raise ValueError(
            f"slice coordinate {coordinate} outside grid axis {ax} [{lo}, {hi}]")
    if quantity == "mean":
        field = grid.mu
    elif quantity == "sigma":
        field = np.exp(grid.log_sigma)
    else:
        raise ValueError(f"unknown slice quantity '{quantity}'")
    free = [i for i in range(3) if i != ax]
    a, b = centres[free[0]], centres[free[1]]
    ga, gb = np.meshgrid(a, b, indexing="ij")
    pts = np.empty((ga.size, 3))
    pts[:, free[0]] = ga.reshape(-1)
    pts[:, free[1]] = gb.reshape(-1)
    pts[:, ax] = coordinate
    vals = trilinear_raw(np.ascontiguousarray(field).reshape(-1), grid, pts)
    return vals.reshape(len(a), len(b)), a, b


def export_slice(grid, axis, coordinate, quantity, out_prefix):
    """Write {prefix}.pgm (P2, min/max stated in a comment) and {prefix}.csv."""
    vals, a, b = slice_field(grid, axis, coordinate, quantity)
    vmin, vmax = float(vals.min()), float(vals.max())
    span = vmax - vmin
    levels = np.zeros_like(vals, dtype=np.int64) if span == 0.0 else \
        np.round((vals - vmin) / span * 255.0).astype(np.int64)
    with open(f"{out_prefix}.pgm", "w") as f:
        f.write("P2\n")
        f.write(f"# min={vmin!r} max={vmax!r} axis={axis} coordinate={coordinate!r} "
                f"quantity={quantity}\n")
        f.write(f"{vals.shape[1]} {vals.shape[0]}\n255\n")
        for row in levels:
            f.write(" ".join(str(v) for v in row) + "\n")
    with open(f"{out_prefix}.csv", "w") as f:
        f.write("coord," + ",".join(repr(float(x)) for x in b) + "\n")
        for ca, row in zip(a, vals):
            f.write(repr(float(ca)) + ","
                    + ",".join(repr(float(v)) for v in row) + "\n")
    return vals


def backproject(K, depth, rgb, loc, quat, stride=1, max_depth=None):
    """Pixel grid -> world points and colours; max-range pixels dropped."""
    pixels = K.all_pixels()[::stride]
    dirs = K.pixel_rays(pixels)
    d = depth.reshape(-1)[::stride]
    c = rgb.reshape(-1, 3)[::stride]
    if max_depth is not None:
        keep = d < max_depth * (1.0 - 1e-9)
        dirs, d, c = dirs[keep], d[keep], c[keep]
    pts = loc + quat_rotate(quat_normalize(quat), dirs * d[:, None])
    return pts, c


def export_pointcloud(path, K, frames, locs, quats, stride=1, max_depth=None):
    """ASCII PLY of back-projected RGB-D frames at the given poses.

    frames is an iterable of (depth, rgb) arrays aligned with locs/quats.
    """
    pts_all, col_all = [], []
    for (depth, rgb), loc, quat in zip(frames, locs, quats):
        pts, col = backproject(K, depth, rgb, loc, quat, stride, max_depth)
        pts_all.append(pts)
        col_all.append(col)
    pts = np.concatenate(pts_all) if pts_all else np.zeros((0, 3))
    col = np.concatenate(col_all) if col_all else np.zeros((0, 3))
    rgb8 = np.clip(np.round(col * 255.0), 0, 255).astype(np.int64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(pts, rgb8):
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                    f"{c[0]} {c[1]} {c[2]}\n")
    return len(pts)


def observed_voxel_mask(grid, K, locs, quats, lattice, tau, pixel_stride=1):
    """Boolean grid marking voxels touched by ray samples up to the first
    crossing of the posterior-mean field, along the given camera poses."""
    values = np.ascontiguousarray(grid.mu).reshape(-1)
    mask = np.zeros(int(np.prod(grid.dims)), dtype=bool)
    pixels = K.all_pixels()[::pixel_stride]
    rays = K.pixel_rays(pixels)
    depths = np.arange(1, lattice.r + 1) * lattice.delta
    for loc, quat in zip(locs, quats):
        dirs = quat_rotate(quat_normalize(quat), rays)
        origins = np.broadcast_to(loc, dirs.shape)
        k_hit, _, _, _ = march_first_crossing(values, grid, origins, dirs, lattice, tau)
        # every sample k = 1..k_hit attends the 8 surrounding voxels
        for k in range(1, int(k_hit.max()) + 1):
            live = k_hit >= k
            pts = origins[live] + dirs[live] * depths[k - 1]
            idx, _, _, inside = trilinear_setup(grid, pts)
            corners = idx[inside]
            if len(corners):
                mask[corners.reshape(-1)] = True
    return mask.reshape(grid.dims)
