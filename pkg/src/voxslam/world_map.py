"""Volumetric world model: variational occupancy grid plus a colour network.

Occupancy is a dense voxel grid of independent Gaussians q(M) = N(mu, sigma^2)
against a standard-normal prior, optimised by the reparameterisation trick.
Colour is a deterministic coordinate MLP (softsign residual trunk, logistic
output) queried at world points. Voxel (i, j, k) is centred at
origin + (index + 0.5) * voxel_size; trilinear lookups outside the lattice of
voxel centres return the prior mean 0 and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, sigmoid

MAP_MAGIC = b"VSLM1"

# corner offsets in C-order stride layout (z fastest)
_CORNERS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)


@dataclass
class MapPrior:
    mu: float = 0.0
    sigma: float = 1.0


@dataclass
class OccupancyGrid:
    """Diagonal-Gaussian occupancy field over a dense voxel lattice."""

    dims: np.ndarray        # (3,) ints: voxels per axis
    origin: np.ndarray      # (3,) world position of the lattice corner
    voxel_size: float
    mu: np.ndarray          # (l, m, n)
    log_sigma: np.ndarray   # (l, m, n)
    prior: MapPrior = field(default_factory=MapPrior)

    @classmethod
    def create(cls, dims, origin, voxel_size, mu_init=-0.5, sigma_init=0.1,
               prior: MapPrior | None = None):
        dims = np.asarray(dims, dtype=np.int64)
        if (dims < 2).any():
            raise ValueError(f"grid needs at least 2 voxels per axis, got {dims.tolist()}")
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        shape = tuple(int(d) for d in dims)
        return cls(dims=dims, origin=np.asarray(origin, dtype=np.float64),
                   voxel_size=float(voxel_size),
                   mu=np.full(shape, mu_init, dtype=np.float64),
                   log_sigma=np.full(shape, np.log(sigma_init), dtype=np.float64),
                   prior=prior or MapPrior())

    @classmethod
    def for_bounds(cls, lo, hi, voxel_size, margin=0.0, **kw):
        """Grid covering the axis-aligned box [lo, hi] plus a margin."""
        lo = np.asarray(lo, dtype=np.float64) - margin
        hi = np.asarray(hi, dtype=np.float64) + margin
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64), 2)
        return cls.create(dims, lo, voxel_size, **kw)

    @property
    def n_voxels(self) -> int:
        return int(self.dims.prod())

    @property
    def centre_lo(self):
        return self.origin + 0.5 * self.voxel_size

    @property
    def centre_hi(self):
        return self.origin + (self.dims - 0.5) * self.voxel_size

    def voxel_centres_axis(self, axis):
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def sigma(self):
        return np.exp(self.log_sigma)


def trilinear_setup(grid: OccupancyGrid, points):
    """Index/weight precomputation shared by raw and tape interpolation.

    Returns (idx8, base, frac, inside): flat corner indices (..., 8), the
    lower corner (..., 3), fractional position (..., 3) and the inside mask.
    Outside points get clipped indices and must be masked by the caller.
    """
    points = np.asarray(points, dtype=np.float64)
    u = (points - grid.origin) / grid.voxel_size - 0.5
    dims = grid.dims
    inside = ((u >= 0.0) & (u <= dims - 1.0)).all(axis=-1)
    base = np.clip(np.floor(u), 0, dims - 2).astype(np.int64)
    frac = u - base
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    flat_base = (base * strides).sum(axis=-1)
    corner_off = (_CORNERS * strides).sum(axis=-1)
    idx8 = flat_base[..., None] + corner_off
    return idx8, base, frac, inside


def trilinear_weights(frac):
    """(..., 8) corner weights for fractional positions (..., 3)."""
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    wx = np.stack([1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    wz = np.stack([1.0 - fz, fz], axis=-1)
    w = (wx[..., :, None, None] * wy[..., None, :, None] * wz[..., None, None, :])
    return w.reshape(frac.shape[:-1] + (8,))


def trilinear_raw(values_flat, grid: OccupancyGrid, points, fill=0.0):
    """Interpolate a flat (n_voxels,) field at world points, numpy only."""
    idx8, _, frac, inside = trilinear_setup(grid, points)
    vals = values_flat[idx8]
    out = (vals * trilinear_weights(frac)).sum(axis=-1)
    if fill == 0.0:
        out *= inside
    else:
        out = np.where(inside, out, fill)
    return out


def trilinear_tape(tape: Tape, values: Tensor, grid: OccupancyGrid, points: Tensor):
    """Tape interpolation differentiable in both the field and the points.

    Corner indices and the inside mask are fixed off-tape from the current
    point values (they carry no gradient); the weights are rebuilt on tape so
    gradients flow to the query coordinates.
    """
    idx8, base, _, inside = trilinear_setup(grid, points.value)
    u = (points - tape.constant(grid.origin)) / grid.voxel_size - 0.5
    f = u - tape.constant(base.astype(np.float64))
    fx, fy, fz = f[..., 0:1], f[..., 1:2], f[..., 2:3]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    weights = tape.concat([
        gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
        fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz,
    ], axis=-1)
    corner_vals = tape.gather(values, idx8)
    out = (corner_vals * weights).sum(axis=-1)
    return out * tape.constant(inside.astype(np.float64))


def sample_occupancy_tape(tape: Tape, mu: Tensor, log_sigma: Tensor, eps):
    """One reparameterised realisation of the whole grid: mu + sigma * eps."""
    return mu + log_sigma.exp() * tape.constant(eps)


def map_kl(grid: OccupancyGrid):
    """Total KL(q(M) || p(M)) in closed form, numpy."""
    p = grid.prior
    sigma2 = np.exp(2.0 * grid.log_sigma)
    return float(np.sum(np.log(p.sigma) - grid.log_sigma
                        + (sigma2 + (grid.mu - p.mu) ** 2) / (2.0 * p.sigma ** 2) - 0.5))


def map_kl_tape(tape: Tape, mu: Tensor, log_sigma: Tensor, sigma_t: Tensor, prior: MapPrior):
    """Total map KL on tape, reusing the already-computed sigma tensor.

    Rearranged to three full-grid reductions plus scalar arithmetic so the
    per-step cost stays linear with a small constant.
    """
    n = mu.size
    inv2var = 1.0 / (2.0 * prior.sigma ** 2)
    s2 = sigma_t.square().sum() * inv2var
    if prior.mu == 0.0:
        m2 = mu.square().sum() * inv2var
    else:
        m2 = (mu - prior.mu).square().sum() * inv2var
    return s2 + m2 - log_sigma.sum() + (np.log(prior.sigma) - 0.5) * n


class ColourField:
    """Coordinate MLP from world position to RGB in [0, 1].

    Softsign activations with residual connections after the input
    projection; logistic output. The final layer is zero-initialised so an
    untrained field is uniform 0.5 grey.
    """

    def __init__(self, params: list[np.ndarray]):
        self.params = params

    @classmethod
    def create(cls, hidden_layers=5, units=256, rng=None):
        if hidden_layers < 1:
            raise ValueError("need at least one hidden layer")
        rng = rng or np.random.default_rng(0)
        params = [rng.normal(0, 1.0 / np.sqrt(3), size=(3, units)), np.zeros(units)]
        for _ in range(hidden_layers - 1):
            params.append(rng.normal(0, 1.0 / np.sqrt(units), size=(units, units)))
            params.append(np.zeros(units))
        params.append(np.zeros((units, 3)))
        params.append(np.zeros(3))
        return cls(params)

    @property
    def hidden_layers(self):
        return (len(self.params) - 2) // 2

    def eval_raw(self, points):
        """Numpy forward pass for rendering; points (..., 3) -> rgb (..., 3)."""
        p = self.params
        h = points @ p[0] + p[1]
        h = h / (1.0 + np.abs(h))
        for li in range(1, self.hidden_layers):
            a = h @ p[2 * li] + p[2 * li + 1]
            h = h + a / (1.0 + np.abs(a))
        logits = h @ p[-2] + p[-1]
        return 1.0 / (1.0 + np.exp(-logits))

    def eval_tape(self, tape: Tape, leaves: list[Tensor], points: Tensor) -> Tensor:
        """Tape forward pass; `leaves` are tape params matching self.params."""
        h = (points @ leaves[0] + leaves[1]).softsign()
        for li in range(1, self.hidden_layers):
            h = h + (h @ leaves[2 * li] + leaves[2 * li + 1]).softsign()
        return sigmoid(h @ leaves[-2] + leaves[-1])


# ---------------------------------------------------------------------------
# checkpoint io


def _write_arrays(f, arrays):
    np.asarray([float(len(arrays))], dtype="<f8").tofile(f)
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        hdr = np.asarray([float(a.ndim)] + [float(s) for s in a.shape], dtype="<f8")
        hdr.tofile(f)
        np.ascontiguousarray(a, dtype="<f8").tofile(f)


def _read_arrays(f):
    n = int(np.fromfile(f, dtype="<f8", count=1)[0])
    out = []
    for _ in range(n):
        ndim = int(np.fromfile(f, dtype="<f8", count=1)[0])
        shape = tuple(int(s) for s in np.fromfile(f, dtype="<f8", count=ndim))
        count = int(np.prod(shape)) if shape else 1
        out.append(np.fromfile(f, dtype="<f8", count=count).reshape(shape))
    return out


def save_map(path, grid: OccupancyGrid, colour: ColourField):
    """Binary map checkpoint: magic, header, occupancy layers, colour layers."""
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        hdr = np.asarray([float(grid.dims[0]), float(grid.dims[1]), float(grid.dims[2]),
                          grid.origin[0], grid.origin[1], grid.origin[2],
                          grid.voxel_size], dtype="<f8")
        hdr.tofile(f)
        np.ascontiguousarray(grid.mu, dtype="<f8").tofile(f)
        np.ascontiguousarray(grid.log_sigma, dtype="<f8").tofile(f)
        _write_arrays(f, colour.params)


def load_map(path):
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MAP_MAGIC:
            raise ValueError(f"not a map checkpoint: bad magic {magic!r}")
        hdr = np.fromfile(f, dtype="<f8", count=7)
        dims = hdr[:3].astype(np.int64)
        origin = hdr[3:6].copy()
        voxel_size = float(hdr[6])
        shape = tuple(int(d) for d in dims)
        count = int(dims.prod())
        mu = np.fromfile(f, dtype="<f8", count=count).reshape(shape)
        log_sigma = np.fromfile(f, dtype="<f8", count=count).reshape(shape)
        colour = ColourField(_read_arrays(f))
    grid = OccupancyGrid(dims=dims, origin=origin, voxel_size=voxel_size,
                         mu=mu, log_sigma=log_sigma)
    return grid, colour
