"""State transition models: engineered IMU kinematics and a learned residual.

The agent state vector is [location(3), orientation quaternion(4),
velocity(3), rest(d_rest)]; controls are [accel(3), gyro(3)] in the body
frame. The engineered model is a forward Euler step of rigid-body kinematics
with gravity removed from the rotated accelerometer reading and fixed
diagonal Gaussian noise. The learned model adds MLP residuals to the Euler
mean and predicts state-dependent sigma; both MLPs are relu residual
networks on (z, u). Quaternion blocks live in ambient R^4 for the Gaussian
densities and are renormalised before any downstream geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, softplus
from .geometry import (quat_exp_map, quat_integrate, quat_normalize, quat_rotate,
                       t_quat_mul, t_quat_normalize, t_quat_rotate)
from .world_map import _read_arrays, _write_arrays

LOC = slice(0, 3)
ORI = slice(3, 7)
VEL = slice(7, 10)
BASE_DIM = 10

GRAVITY = np.array([0.0, 0.0, -9.81])

TRANSITION_MAGIC = b"VTRN1"

SIGMA_MIN = 1e-4


def default_sigma(d_rest=0, rest_sigma=1.0):
    """Fixed transition noise: 0.01 m location, 0.001 orientation/velocity."""
    return np.concatenate([np.full(3, 0.01), np.full(4, 0.001), np.full(3, 0.001),
                           np.full(d_rest, rest_sigma)])


def euler_step(z, u, dt, exponent=2, gravity=GRAVITY):
    """Forward Euler mean of the next base state (..., 10).

    loc += vel * dt; ori composes the body gyro rate; vel adds the world
    acceleration (gravity removed) scaled by dt**exponent. The exponent
    switch selects between the literal squared-dt form and physical scaling.
    """
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    ori = quat_normalize(z[..., ORI])
    loc = z[..., LOC] + z[..., VEL] * dt
    ori_new = quat_integrate(ori, u[..., 3:6], dt)
    a_world = quat_rotate(ori, u[..., 0:3]) - gravity
    vel = z[..., VEL] + a_world * (dt ** exponent)
    return np.concatenate([loc, ori_new, vel], axis=-1)


def euler_step_tape(tape: Tape, z: Tensor, u, dt, exponent=2, gravity=GRAVITY):
    """Tape twin of euler_step; u is constant data (..., 6)."""
    u = np.asarray(u, dtype=np.float64)
    ori = t_quat_normalize(z[..., ORI])
    loc = z[..., LOC] + z[..., VEL] * dt
    dq = quat_exp_map(u[..., 3:6] * dt)            # constant wrt state
    ori_new = t_quat_mul(ori, tape.constant(dq))
    a_world = t_quat_rotate(ori, tape.constant(u[..., 0:3])) - tape.constant(gravity)
    vel = z[..., VEL] + a_world * (dt ** exponent)
    return tape.concat([loc, ori_new, vel], axis=-1)


def gaussian_logpdf(x, mu, sigma):
    """Sum over the last axis of independent Gaussian log densities."""
    x = np.asarray(x, dtype=np.float64)
    return np.sum(-0.5 * np.log(2 * np.pi * sigma ** 2) - (x - mu) ** 2 / (2 * sigma ** 2), axis=-1)


@dataclass
class EngineeredTransition:
    """p(z_{t+1} | z_t, u_t) = N(euler_step(z_t, u_t), diag(sigma)^2)."""

    dt: float = 0.1
    exponent: int = 2
    sigma: np.ndarray = field(default_factory=default_sigma)
    d_rest: int = 0

    @property
    def d_z(self):
        return BASE_DIM + self.d_rest

    def mean(self, z, u):
        base = euler_step(z, u, self.dt, self.exponent)
        if self.d_rest == 0:
            return base
        rest = np.zeros(base.shape[:-1] + (self.d_rest,))
        return np.concatenate([base, rest], axis=-1)

    def mean_tape(self, tape, z, u):
        base = euler_step_tape(tape, z, u, self.dt, self.exponent)
        if self.d_rest == 0:
            return base
        rest = tape.constant(np.zeros(base.shape[:-1] + (self.d_rest,)))
        return tape.concat([base, rest], axis=-1)

    def sigma_tape(self, tape, z, u):
        shape = z.shape[:-1] + (self.d_z,)
        return tape.constant(np.broadcast_to(self.sigma, shape).copy())

    def logpdf(self, z_next, z, u):
        return gaussian_logpdf(np.asarray(z_next)[..., :self.d_z], self.mean(z, u), self.sigma)

    def sample(self, z, u, rng: np.random.Generator):
        m = self.mean(z, u)
        out = m + rng.standard_normal(m.shape) * self.sigma
        out[..., ORI] = quat_normalize(out[..., ORI])
        return out


def _mlp_init(d_in, d_out, hidden_layers, units, rng, final_bias=0.0):
    params = [rng.normal(0, np.sqrt(2.0 / d_in), size=(d_in, units)), np.zeros(units)]
    for _ in range(hidden_layers - 1):
        params.append(rng.normal(0, np.sqrt(2.0 / units), size=(units, units)))
        params.append(np.zeros(units))
    params.append(np.zeros((units, d_out)))
    params.append(np.full(d_out, final_bias, dtype=np.float64))
    return params


def _mlp_raw(params, x):
    h = np.maximum(x @ params[0] + params[1], 0.0)
    n_hidden = (len(params) - 2) // 2
    for li in range(1, n_hidden):
        h = h + np.maximum(h @ params[2 * li] + params[2 * li + 1], 0.0)
    return h @ params[-2] + params[-1]


def _mlp_tape(leaves, x):
    h = (x @ leaves[0] + leaves[1]).relu()
    n_hidden = (len(leaves) - 2) // 2
    for li in range(1, n_hidden):
        h = h + (h @ leaves[2 * li] + leaves[2 * li + 1]).relu()
    return h @ leaves[-2] + leaves[-1]


def _softplus_raw(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class LearnedTransition:
    """Euler mean plus MLP residual mean and MLP sigma on (z, u).

    mu = [euler_step(z, u); 0] + mlp_mu(z, u)
    sigma = softplus(mlp_sigma(z, u)) + SIGMA_MIN
    Zero-initialised output layers make an untrained model coincide with
    the engineered mean at near-constant sigma.
    """

    params_mu: list
    params_sigma: list
    dt: float = 0.1
    exponent: int = 2
    d_rest: int = 8
    hidden_layers: int = 5
    units: int = 64

    @classmethod
    def create(cls, d_rest=8, hidden_layers=5, units=64, dt=0.1, exponent=2,
               sigma_init=0.01, rng=None):
        rng = rng or np.random.default_rng(0)
        d_z = BASE_DIM + d_rest
        d_in = d_z + 6
        bias = float(np.log(np.expm1(max(sigma_init - SIGMA_MIN, 1e-6))))
        return cls(params_mu=_mlp_init(d_in, d_z, hidden_layers, units, rng),
                   params_sigma=_mlp_init(d_in, d_z, hidden_layers, units, rng, final_bias=bias),
                   dt=dt, exponent=exponent, d_rest=d_rest,
                   hidden_layers=hidden_layers, units=units)

    @property
    def d_z(self):
        return BASE_DIM + self.d_rest

    def _euler_full(self, z, u):
        base = euler_step(z, u, self.dt, self.exponent)
        rest = np.zeros(base.shape[:-1] + (self.d_rest,))
        return np.concatenate([base, rest], axis=-1)

    def mean_sigma(self, z, u):
        """Numpy forward pass; z (..., d_z), u (..., 6) or a single row."""
        z = np.asarray(z, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        u = np.broadcast_to(u, z.shape[:-1] + u.shape[-1:])
        x = np.concatenate([z, u], axis=-1)
        mu = self._euler_full(z, u) + _mlp_raw(self.params_mu, x)
        sigma = _softplus_raw(_mlp_raw(self.params_sigma, x)) + SIGMA_MIN
        return mu, sigma

    def mean_sigma_tape(self, tape, leaves_mu, leaves_sigma, z: Tensor, u):
        """Tape forward pass; u is constant data. z must be 2-d (N, d_z)."""
        u = np.asarray(u, dtype=np.float64)
        u = np.broadcast_to(u, z.shape[:-1] + u.shape[-1:]).copy()
        x = tape.concat([z, tape.constant(u)], axis=-1)
        base = self._euler_tape_full(tape, z, u)
        mu = base + _mlp_tape(leaves_mu, x)
        sigma = softplus(_mlp_tape(leaves_sigma, x)) + SIGMA_MIN
        return mu, sigma

    def _euler_tape_full(self, tape, z, u):
        base = euler_step_tape(tape, z, u, self.dt, self.exponent)
        rest = tape.constant(np.zeros(base.shape[:-1] + (self.d_rest,)))
        return tape.concat([base, rest], axis=-1)

    def mean(self, z, u):
        return self.mean_sigma(z, u)[0]

    def sample(self, z, u, rng: np.random.Generator):
        mu, sigma = self.mean_sigma(z, u)
        out = mu + rng.standard_normal(mu.shape) * sigma
        out[..., ORI] = quat_normalize(out[..., ORI])
        return out

    def logpdf(self, z_next, z, u):
        mu, sigma = self.mean_sigma(z, u)
        return gaussian_logpdf(z_next, mu, sigma)


def rollout_mean(transition, z1, controls):
    """Open-loop mean rollout; quaternion block renormalised every step."""
    z = np.asarray(z1, dtype=np.float64).copy()
    out = [z.copy()]
    for u in controls:
        z = transition.mean(z, u)
        z[..., ORI] = quat_normalize(z[..., ORI])
        out.append(z.copy())
    return np.stack(out)


def rollout_sample(transition, z1, controls, rng: np.random.Generator):
    """Ancestral sampling through the transition."""
    z = np.asarray(z1, dtype=np.float64).copy()
    out = [z.copy()]
    for u in controls:
        z = transition.sample(z, u, rng)
        out.append(z.copy())
    return np.stack(out)


def save_transition(path, model: LearnedTransition):
    with open(path, "wb") as f:
        f.write(TRANSITION_MAGIC)
        hdr = np.asarray([float(model.d_rest), float(model.hidden_layers),
                          float(model.units), model.dt, float(model.exponent)], dtype="<f8")
        hdr.tofile(f)
        _write_arrays(f, model.params_mu)
        _write_arrays(f, model.params_sigma)


def load_transition(path) -> LearnedTransition:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != TRANSITION_MAGIC:
            raise ValueError(f"not a transition checkpoint: bad magic {magic!r}")
        hdr = np.fromfile(f, dtype="<f8", count=5)
        params_mu = _read_arrays(f)
        params_sigma = _read_arrays(f)
    return LearnedTransition(params_mu=params_mu, params_sigma=params_sigma,
                             d_rest=int(hdr[0]), hidden_layers=int(hdr[1]),
                             units=int(hdr[2]), dt=float(hdr[3]), exponent=int(hdr[4]))
