"""Synthetic RGB-D + IMU generator over analytic scenes.

Scenes are unions of axis-aligned boxes and vertical cylinders with
procedurally striped or constant colours, raycast in closed form (no
discretisation). Trajectories are smooth analytic curves sampled at the
sensor rate; IMU channels are synthesised to be discretely consistent with
the forward-Euler kinematics (exponent 1), so a noiseless rollout reproduces
the ground-truth poses to float precision: accelerations are finite
differences of the inter-frame average velocities rotated into the body
frame with gravity applied, and gyro rates are exact relative-quaternion
logs. Depth images get Laplace noise and dropout to max range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .geometry import (CameraIntrinsics, quat_conj, quat_from_matrix, quat_log_map,
                       quat_mul, quat_rotate)
from .transition import GRAVITY

_EPS = 1e-9


# ---------------------------------------------------------------------------
# colours


@dataclass
class ColourSpec:
    """Constant colour, or stripes of two colours along one world axis."""

    colour: np.ndarray
    colour_b: np.ndarray | None = None
    stripe_axis: int = 0
    stripe_period: float = 1.0

    @classmethod
    def constant(cls, rgb):
        return cls(np.asarray(rgb, dtype=np.float64))

    @classmethod
    def stripes(cls, rgb_a, rgb_b, axis=0, period=1.0):
        return cls(np.asarray(rgb_a, dtype=np.float64),
                   np.asarray(rgb_b, dtype=np.float64), axis, period)

    def at(self, points):
        points = np.asarray(points, dtype=np.float64)
        if self.colour_b is None:
            return np.broadcast_to(self.colour, points.shape[:-1] + (3,)).copy()
        band = np.floor(points[..., self.stripe_axis] / self.stripe_period).astype(np.int64) % 2
        return np.where(band[..., None] == 0, self.colour, self.colour_b)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    colour: ColourSpec

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if (self.hi <= self.lo).any():
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")

    def ray_hit(self, origins, dirs):
        """Smallest positive ray parameter hitting the box surface, inf if none."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - origins) / dirs
            t2 = (self.hi - origins) / dirs
        tn = np.minimum(t1, t2)
        tf = np.maximum(t1, t2)
        # axes with zero direction: inside-slab test
        zero = np.abs(dirs) < 1e-300
        inside_slab = (origins >= self.lo) & (origins <= self.hi)
        tn = np.where(zero, np.where(inside_slab, -np.inf, np.inf), tn)
        tf = np.where(zero, np.where(inside_slab, np.inf, -np.inf), tf)
        tmin = tn.max(axis=-1)
        tmax = tf.min(axis=-1)
        t = np.where(tmin > _EPS, tmin, tmax)    # origin inside: exit face
        valid = (tmax >= np.maximum(tmin, _EPS)) & (t > _EPS)
        return np.where(valid, t, np.inf)

    def sdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        centre = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(points - centre) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class Cylinder:
    """Vertical capped cylinder."""

    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    colour: ColourSpec

    def ray_hit(self, origins, dirs):
        ox = origins[..., 0] - self.cx
        oy = origins[..., 1] - self.cy
        oz = origins[..., 2]
        dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - 4 * a * c
        best = np.full(origins.shape[:-1], np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / (2 * a)
                z = oz + t * dz
                ok = (disc > 0) & (a > 1e-300) & (t > _EPS) & (z >= self.z0) & (z <= self.z1)
                best = np.where(ok & (t < best), t, best)
            for zc in (self.z0, self.z1):
                t = (zc - oz) / dz
                px = ox + t * dx
                py = oy + t * dy
                ok = (np.abs(dz) > 1e-300) & (t > _EPS) & (px * px + py * py <= self.radius ** 2)
                best = np.where(ok & (t < best), t, best)
        return best

    def sdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        dr = np.hypot(points[..., 0] - self.cx, points[..., 1] - self.cy) - self.radius
        zc = 0.5 * (self.z0 + self.z1)
        dzed = np.abs(points[..., 2] - zc) - 0.5 * (self.z1 - self.z0)
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dzed, 0.0))
        inside = np.minimum(np.maximum(dr, dzed), 0.0)
        return outside + inside


@dataclass
class Scene:
    primitives: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def bounds(self):
        los, his = [], []
        for p in self.primitives:
            if isinstance(p, Box):
                los.append(p.lo)
                his.append(p.hi)
            else:
                los.append([p.cx - p.radius, p.cy - p.radius, p.z0])
                his.append([p.cx + p.radius, p.cy + p.radius, p.z1])
        return np.min(los, axis=0), np.max(his, axis=0)

    def clearance(self, points):
        """Distance to the nearest primitive surface; <= 0 inside one."""
        return np.min([p.sdf(points) for p in self.primitives], axis=0)


def analytic_raycast(scene: Scene, origins, dirs, max_range):
    """Closed-form nearest intersection for rays (origins, dirs), any dir norm.

    Returns (dist, rgb, hit): euclidean distance to the first surface along
    each normalised direction, clipped to max_range for misses; colour is
    the hit primitive's colour at the hit point, or the scene background.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
    if (norms < 1e-300).any():
        raise ValueError("zero-length ray direction")
    unit = dirs / norms
    best = np.full(origins.shape[:-1], np.inf)
    which = np.full(origins.shape[:-1], -1, dtype=np.int64)
    for pi, prim in enumerate(scene.primitives):
        t = prim.ray_hit(origins, unit)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, pi, which)
    hit = np.isfinite(best) & (best <= max_range)
    dist = np.where(hit, best, max_range)
    pts = origins + unit * dist[..., None]
    rgb = np.broadcast_to(scene.background, origins.shape[:-1] + (3,)).copy()
    for pi, prim in enumerate(scene.primitives):
        mask = hit & (which == pi)
        if mask.any():
            rgb[mask] = prim.colour.at(pts[mask])
    return dist, rgb, hit


def default_camera(width=64, height=48):
    """Desk-scale camera: the 1024x768 reference optics scaled down."""
    return CameraIntrinsics(665.1, 665.1, 511.5, 383.5, 1024, 768).scaled(width, height)


def default_room_scene(width=10.0, depth=10.0, height=3.0, wall=0.2,
                       column_radius=0.4, column_offset=2.5):
    """Striped rectangular room with four interior columns."""
    hw, hd = width / 2, depth / 2
    grey_a = ColourSpec.stripes([0.55, 0.55, 0.6], [0.35, 0.35, 0.4], axis=0, period=1.0)
    wall_x = ColourSpec.stripes([0.85, 0.3, 0.25], [0.9, 0.75, 0.3], axis=1, period=0.8)
    wall_y = ColourSpec.stripes([0.25, 0.45, 0.85], [0.3, 0.8, 0.75], axis=0, period=0.8)
    ceil = ColourSpec.constant([0.7, 0.7, 0.68])
    cols = [ColourSpec.constant(c) for c in
            ([0.9, 0.4, 0.1], [0.15, 0.7, 0.25], [0.75, 0.2, 0.65], [0.95, 0.85, 0.2])]
    prims = [
        Box([-hw - wall, -hd - wall, -wall], [hw + wall, hd + wall, 0.0], grey_a),       # floor
        Box([-hw - wall, -hd - wall, height], [hw + wall, hd + wall, height + wall], ceil),
        Box([-hw - wall, -hd - wall, 0.0], [-hw, hd + wall, height], wall_x),
        Box([hw, -hd - wall, 0.0], [hw + wall, hd + wall, height], wall_x),
        Box([-hw, -hd - wall, 0.0], [hw, -hd, height], wall_y),
        Box([-hw, hd, 0.0], [hw, hd + wall, height], wall_y),
    ]
    for (sx, sy), colour in zip([(1, 1), (-1, 1), (-1, -1), (1, -1)], cols):
        prims.append(Cylinder(sx * column_offset, sy * column_offset,
                              column_radius, 0.0, height, colour))
    return Scene(prims)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectorySpec:
    kind: str = "circle"            # circle | figure8 | star | lissajous
    centre: tuple = (0.0, 0.0)
    height: float = 1.5
    radius: float = 3.0
    speed: float = 1.0
    n_frames: int = 100
    rate: float = 10.0
    yaw_mode: str = "forward"       # forward | constant
    yaw_fixed: float = 0.0
    phase: float = 0.0
    clearance: float = 0.3


@dataclass
class Trajectory:
    times: np.ndarray
    locs: np.ndarray
    quats: np.ndarray
    vels: np.ndarray
    accs: np.ndarray
    omegas: np.ndarray   # body-frame angular rate


def _curve(kind, radius, theta):
    """Planar curve position and its first/second derivatives in theta."""
    c, s = np.cos(theta), np.sin(theta)
    if kind == "circle":
        p = radius * np.stack([c, s], -1)
        d1 = radius * np.stack([-s, c], -1)
        d2 = radius * np.stack([-c, -s], -1)
    elif kind == "figure8":
        p = radius * np.stack([np.sin(theta), 0.6 * np.sin(2 * theta)], -1)
        d1 = radius * np.stack([np.cos(theta), 1.2 * np.cos(2 * theta)], -1)
        d2 = radius * np.stack([-np.sin(theta), -2.4 * np.sin(2 * theta)], -1)
    elif kind == "star":
        rr = radius * (1.0 + 0.25 * np.cos(5 * theta))
        dr = radius * -1.25 * np.sin(5 * theta)
        ddr = radius * -6.25 * np.cos(5 * theta)
        p = np.stack([rr * c, rr * s], -1)
        d1 = np.stack([dr * c - rr * s, dr * s + rr * c], -1)
        d2 = np.stack([ddr * c - 2 * dr * s - rr * c, ddr * s + 2 * dr * c - rr * s], -1)
    elif kind == "lissajous":
        p = radius * np.stack([np.sin(2 * theta), 0.7 * np.sin(3 * theta + 0.5)], -1)
        d1 = radius * np.stack([2 * np.cos(2 * theta), 2.1 * np.cos(3 * theta + 0.5)], -1)
        d2 = radius * np.stack([-4 * np.sin(2 * theta), -6.3 * np.sin(3 * theta + 0.5)], -1)
    else:
        raise ValueError(f"unknown trajectory kind: {kind!r}")
    return p, d1, d2


def _yaw_frame(yaw):
    """Rotation with camera +z along heading (cos yaw, sin yaw, 0), +y down."""
    c, s = np.cos(yaw), np.sin(yaw)
    zeros = np.zeros_like(c)
    ones = np.ones_like(c)
    x_b = np.stack([s, -c, zeros], -1)
    y_b = np.stack([zeros, zeros, -ones], -1)
    z_b = np.stack([c, s, zeros], -1)
    return np.stack([x_b, y_b, z_b], -1)       # columns are body axes


def synthesize_trajectory(spec: TrajectorySpec, scene: Scene | None = None) -> Trajectory:
    """Sampled analytic trajectory with exact velocity/acceleration/rates.

    Raises if any sample comes within spec.clearance of scene geometry, naming
    the first offending time.
    """
    # calibrate angular speed so mean path speed matches spec.speed
    grid = np.linspace(0, 2 * np.pi, 2048, endpoint=False)
    _, d1g, _ = _curve(spec.kind, spec.radius, grid)
    mean_d1 = np.mean(np.linalg.norm(d1g, axis=-1))
    omega = spec.speed / mean_d1

    t = np.arange(spec.n_frames) / spec.rate
    theta = omega * t + spec.phase
    p2, d1, d2 = _curve(spec.kind, spec.radius, theta)
    locs = np.zeros((spec.n_frames, 3))
    locs[:, 0] = p2[:, 0] + spec.centre[0]
    locs[:, 1] = p2[:, 1] + spec.centre[1]
    locs[:, 2] = spec.height
    vels = np.concatenate([omega * d1, np.zeros((spec.n_frames, 1))], axis=1)
    accs = np.concatenate([omega ** 2 * d2, np.zeros((spec.n_frames, 1))], axis=1)

    if spec.yaw_mode == "forward":
        vx, vy = vels[:, 0], vels[:, 1]
        ax, ay = accs[:, 0], accs[:, 1]
        sp2 = vx * vx + vy * vy
        if (sp2 < 1e-12).any():
            raise ValueError("forward yaw undefined: trajectory speed reaches zero")
        yaw = np.arctan2(vy, vx)
        yawrate = (vx * ay - vy * ax) / sp2
    elif spec.yaw_mode == "constant":
        yaw = np.full(spec.n_frames, spec.yaw_fixed)
        yawrate = np.zeros(spec.n_frames)
    else:
        raise ValueError(f"unknown yaw mode: {spec.yaw_mode!r}")

    mats = _yaw_frame(yaw)
    quats = np.stack([quat_from_matrix(m) for m in mats])
    # keep the quaternion track continuous in sign
    for i in range(1, len(quats)):
        if np.dot(quats[i], quats[i - 1]) < 0:
            quats[i] = -quats[i]
    # world yaw rate about +z maps to body frame as rate * (R^T e_z) = (0, -1, 0)
    omegas = np.stack([np.zeros(spec.n_frames), -yawrate, np.zeros(spec.n_frames)], axis=1)

    if scene is not None:
        clear = scene.clearance(locs)
        bad = clear < spec.clearance
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(
                f"trajectory leaves free space at t={t[i]:.2f}s "
                f"(clearance {clear[i]:.3f} m < {spec.clearance} m)")
    return Trajectory(t, locs, quats, vels, accs, omegas)


# ---------------------------------------------------------------------------
# sensors


@dataclass
class SensorNoise:
    depth_sigma: float = 0.05
    depth_dropout: float = 0.01
    accel_sigma: float = 0.05
    gyro_sigma: float = 0.005
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 0.0, 0.0)


def synthesize_imu(traj: Trajectory, rate, noise: SensorNoise, rng: np.random.Generator | None = None):
    """Body-frame IMU controls (T-1, 6) consistent with Euler kinematics.

    a_body[t] = R(q_t)^T (a_world[t] + g) + bias + white noise, where
    a_world[t] is the finite difference of inter-frame average velocities
    (so a noiseless exponent-1 Euler rollout from the first pose and
    start_velocity() reproduces the sampled positions exactly), and
    w_body[t] is the exact relative-rotation log over one interval.
    A stationary level hover therefore reads a_body = R^T g = g.
    """
    locs, quats = traj.locs, traj.quats
    T = len(locs)
    if T < 3:
        raise ValueError("need at least 3 frames to synthesise IMU")
    dt = 1.0 / rate
    vel_avg = (locs[1:] - locs[:-1]) / dt                    # (T-1, 3)
    a_world = np.zeros((T - 1, 3))
    a_world[:-1] = (vel_avg[1:] - vel_avg[:-1]) / dt
    a_world[-1] = a_world[-2]
    a_body = quat_rotate(quat_conj(quats[:-1]), a_world + GRAVITY)
    rel = quat_mul(quat_conj(quats[:-1]), quats[1:])
    w_body = quat_log_map(rel) / dt
    if rng is not None and (noise.accel_sigma > 0 or noise.gyro_sigma > 0
                            or noise.accel_bias.any() or noise.gyro_bias.any()):
        a_body = a_body + noise.accel_bias + rng.normal(0, noise.accel_sigma, a_body.shape)
        w_body = w_body + noise.gyro_bias + rng.normal(0, noise.gyro_sigma, w_body.shape)
    return np.concatenate([a_body, w_body], axis=1)


def start_velocity(traj: Trajectory, rate):
    """Initial velocity consistent with the discrete IMU definition."""
    return (traj.locs[1] - traj.locs[0]) * rate


def constant_velocity_trajectory(start, velocity, n_frames, rate, yaw=None):
    """Straight-line trajectory at constant velocity, level camera.

    Yaw defaults to the heading of the velocity's xy component.
    """
    start = np.asarray(start, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if yaw is None:
        if np.hypot(velocity[0], velocity[1]) < 1e-12:
            raise ValueError("velocity has no xy heading, pass yaw explicitly")
        yaw = float(np.arctan2(velocity[1], velocity[0]))
    times = np.arange(n_frames) / rate
    locs = start[None, :] + times[:, None] * velocity[None, :]
    quat = quat_from_matrix(_yaw_frame(float(yaw)))
    quats = np.tile(quat, (n_frames, 1))
    vels = np.tile(velocity, (n_frames, 1))
    zeros = np.zeros((n_frames, 3))
    return Trajectory(times, locs, quats, vels, zeros, zeros)


def render_views(scene: Scene, K: CameraIntrinsics, locs, quats, max_depth,
                 noise: SensorNoise | None = None, rng: np.random.Generator | None = None):
    """Render RGB-D frames for poses; yields (depth, rgb) with z-axis depth."""
    pixels = K.all_pixels()
    dirs_cam = K.pixel_rays(pixels)
    cam_norms = np.linalg.norm(dirs_cam, axis=-1)
    for loc, q in zip(locs, quats):
        dirs_world = quat_rotate(q, dirs_cam)
        origins = np.broadcast_to(loc, dirs_world.shape)
        dist, rgb, hit = analytic_raycast(scene, origins, dirs_world,
                                          max_range=max_depth * cam_norms.max())
        depth = dist / cam_norms                      # euclidean -> optical axis
        depth = np.where(hit & (depth <= max_depth), depth, max_depth)
        if noise is not None and rng is not None and noise.depth_sigma > 0:
            depth = depth + rng.laplace(0.0, noise.depth_sigma, size=depth.shape)
            depth = np.clip(depth, 1e-3, max_depth)
        if noise is not None and rng is not None and noise.depth_dropout > 0:
            drop = rng.random(depth.shape) < noise.depth_dropout
            depth = np.where(drop, max_depth, depth)
        h, w = K.height, K.width
        yield depth.reshape(h, w), rgb.reshape(h, w, 3)


def render_dataset(out_dir, scene: Scene, spec: TrajectorySpec, K: CameraIntrinsics,
                   max_depth, noise: SensorNoise, seed, write_frames=True,
                   extra_metadata=None):
    """Full dataset generation: trajectory, IMU, frames, metadata. Deterministic in seed."""
    rng = np.random.default_rng(seed)
    traj = synthesize_trajectory(spec, scene)
    controls = synthesize_imu(traj, spec.rate, noise, rng)
    meta = {
        "seed": seed, "scene": "room", "trajectory": spec.kind,
        "depth_sigma": repr(noise.depth_sigma), "depth_dropout": repr(noise.depth_dropout),
        "accel_sigma": repr(noise.accel_sigma), "gyro_sigma": repr(noise.gyro_sigma),
    }
    for ax, va, vg in zip("xyz", noise.accel_bias, noise.gyro_bias):
        meta[f"accel_bias_{ax}"] = repr(float(va))
        meta[f"gyro_bias_{ax}"] = repr(float(vg))
    meta.update(extra_metadata or {})
    frames = None
    if write_frames:
        frames = render_views(scene, K, traj.locs, traj.quats, max_depth, noise, rng)
    ds.save_dataset(out_dir, K, spec.rate, traj.times, traj.locs, traj.quats,
                    controls, metadata=meta, frames=frames, max_depth=max_depth,
                    start_velocity=start_velocity(traj, spec.rate))
    return traj
