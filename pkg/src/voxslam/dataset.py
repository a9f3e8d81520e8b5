"""On-disk dataset format: RGB-D frames, pose/IMU tables, metadata.

A dataset directory holds metadata.cfg (key=value), poses.csv, imu.csv and a
frames/ subdirectory of binary RGBD1 files (one per pose row). Frames store
depth and R, G, B planes as 32-bit little-endian reals; everything else in
the package computes in float64. Controls in imu.csv row t map state t to
state t+1, so there is one fewer row than poses.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics

FRAME_MAGIC = b"RGBD1"


def write_frame(path, depth, rgb):
    """Binary RGB-D frame: magic, width/height uint32 LE, then depth, R, G, B planes."""
    depth = np.asarray(depth)
    rgb = np.asarray(rgb)
    h, w = depth.shape
    if rgb.shape != (h, w, 3):
        raise ValueError(f"rgb shape {rgb.shape} does not match depth {depth.shape}")
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        np.asarray([w, h], dtype="<u4").tofile(f)
        np.ascontiguousarray(depth, dtype="<f4").tofile(f)
        for c in range(3):
            np.ascontiguousarray(rgb[:, :, c], dtype="<f4").tofile(f)


def read_frame(path):
    """Returns (depth (h, w), rgb (h, w, 3)) as float64."""
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != FRAME_MAGIC:
            raise ValueError(f"not an RGB-D frame: bad magic {magic!r}")
        w, h = np.fromfile(f, dtype="<u4", count=2)
        w, h = int(w), int(h)
        n = w * h
        depth = np.fromfile(f, dtype="<f4", count=n).reshape(h, w)
        rgb = np.stack([np.fromfile(f, dtype="<f4", count=n).reshape(h, w)
                        for _ in range(3)], axis=-1)
    return depth.astype(np.float64), rgb.astype(np.float64)


def _fmt(v):
    return repr(float(v))


def write_csv(path, header, rows):
    """Plain CSV, '.' decimal separator, shortest-roundtrip float formatting."""
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    """Returns (header list, float64 array of shape (rows, cols))."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        data = np.loadtxt(f, delimiter=",", ndmin=2, dtype=np.float64)
    return header, data


def write_metadata(path, entries: dict):
    with open(path, "w") as f:
        for k in entries:
            f.write(f"{k}={entries[k]}\n")


def read_metadata(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad metadata line (expected key=value): {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@dataclass
class Dataset:
    """Loaded dataset directory; frame pixels are read lazily per index."""

    path: str
    K: CameraIntrinsics
    rate: float
    times: np.ndarray
    locs: np.ndarray          # (T, 3)
    quats: np.ndarray         # (T, 4) scalar-first
    controls: np.ndarray      # (T-1, 6) accel then gyro, body frame
    metadata: dict = field(default_factory=dict)
    max_depth: float = 20.0
    start_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_frames(self):
        return len(self.times)

    @property
    def dt(self):
        return 1.0 / self.rate

    def frame_path(self, i):
        return os.path.join(self.path, "frames", f"{i:06d}.rgbd")

    @property
    def has_frames(self):
        return os.path.isdir(os.path.join(self.path, "frames"))

    def load_frame(self, i):
        return read_frame(self.frame_path(i))


def save_dataset(path, K: CameraIntrinsics, rate, times, locs, quats, controls,
                 metadata=None, frames=None, max_depth=20.0, start_velocity=None):
    """Write a dataset directory; `frames` is an optional iterable of (depth, rgb)."""
    os.makedirs(path, exist_ok=True)
    meta = dict(metadata or {})
    meta.update({
        "width": K.width, "height": K.height,
        "fx": _fmt(K.fx), "fy": _fmt(K.fy), "cx": _fmt(K.cx), "cy": _fmt(K.cy),
        "rate": _fmt(rate), "max_depth": _fmt(max_depth),
        "frame_count": len(times),
    })
    if start_velocity is not None:
        for ax, v in zip("xyz", start_velocity):
            meta[f"start_v{ax}"] = _fmt(v)
    write_metadata(os.path.join(path, "metadata.cfg"), meta)
    write_csv(os.path.join(path, "poses.csv"),
              ["t", "x", "y", "z", "qw", "qx", "qy", "qz"],
              [[t, *loc, *q] for t, loc, q in zip(times, locs, quats)])
    write_csv(os.path.join(path, "imu.csv"),
              ["t", "ax", "ay", "az", "wx", "wy", "wz"],
              [[t, *u] for t, u in zip(times[:-1], controls)])
    if frames is not None:
        fdir = os.path.join(path, "frames")
        os.makedirs(fdir, exist_ok=True)
        for i, (depth, rgb) in enumerate(frames):
            write_frame(os.path.join(fdir, f"{i:06d}.rgbd"), depth, rgb)


def load_dataset(path) -> Dataset:
    meta = read_metadata(os.path.join(path, "metadata.cfg"))
    K = CameraIntrinsics(float(meta["fx"]), float(meta["fy"]),
                         float(meta["cx"]), float(meta["cy"]),
                         int(meta["width"]), int(meta["height"]))
    _, poses = read_csv(os.path.join(path, "poses.csv"))
    times = poses[:, 0]
    if (np.diff(times) <= 0).any():
        bad = int(np.argmax(np.diff(times) <= 0)) + 1
        raise ValueError(f"timestamps not strictly increasing at row {bad}")
    _, imu = read_csv(os.path.join(path, "imu.csv"))
    if len(imu) != len(times) - 1:
        raise ValueError(f"expected {len(times) - 1} imu rows, found {len(imu)}")
    ds = Dataset(
        path=str(path), K=K, rate=float(meta["rate"]), times=times,
        locs=poses[:, 1:4], quats=poses[:, 4:8], controls=imu[:, 1:7],
        metadata=meta, max_depth=float(meta.get("max_depth", 20.0)),
        start_velocity=np.array([float(meta.get(f"start_v{ax}", 0.0)) for ax in "xyz"]),
    )
    declared = int(meta.get("frame_count", len(times)))
    if declared != len(times):
        raise ValueError(f"metadata frame_count={declared} but poses.csv has {len(times)} rows")
    if ds.has_frames:
        n_files = len([f for f in os.listdir(os.path.join(path, "frames")) if f.endswith(".rgbd")])
        if n_files != len(times):
            raise ValueError(f"{n_files} frame files but {len(times)} pose rows")
    return ds
