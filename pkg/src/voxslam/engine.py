"""Joint variational inference over agent states and the volumetric map.

The engine owns a diagonal-Gaussian posterior per frame state and over the
occupancy grid, unlocks frames incrementally, and optimises the chunked
evidence lower bound with per-group Adam updates. The expensive part of a
gradient step is organised so that exactly one corner gather and one colour
network evaluation cover all frames and particles of the chunk: the
first-crossing search runs off-tape on the current map realisation, and the
tape re-evaluates only the two bracketing samples of each ray, which carry
the entire gradient of the depth surrogate.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, gaussian_kl, laplace_logpdf
from .dataset import Dataset
from .geometry import quat_normalize, t_quat_normalize, t_quat_rotate
from .optim import Adam, AdamSettings
from .renderer import RayLattice, march_first_crossing, render_frame, subsample_pixels
from .transition import (LOC, ORI, VEL, EngineeredTransition, LearnedTransition,
                         rollout_mean, rollout_sample)
from .world_map import ColourField, OccupancyGrid, map_kl_tape, trilinear_tape


@dataclass
class SlamConfig:
    # rendering model
    tau: float = 0.0
    delta: float = 0.1
    max_depth: float = 20.0
    pixels_per_frame: int = 200
    sigma_d_init: float = 0.3
    # map
    grid_lo: tuple = (-5.0, -5.0, 0.0)
    grid_hi: tuple = (5.0, 5.0, 3.0)
    voxel_size: float = 0.1
    margin: float = 0.5
    colour_layers: int = 5
    colour_units: int = 256
    # schedule
    chunk_len: int = 5
    particles: int = 50
    steps_per_frame: int = 500
    state_sigma_init: float = 0.01
    exponent: int = 2
    # optimisers; momentum stays off for states and occupancy
    adam_states: AdamSettings = field(default_factory=lambda: AdamSettings(1e-3, 0.0, 0.999))
    adam_occupancy: AdamSettings = field(default_factory=lambda: AdamSettings(0.05, 0.0, 0.999))
    adam_colour: AdamSettings = field(default_factory=lambda: AdamSettings(1e-3, 0.9, 0.999))
    adam_sigma_d: AdamSettings = field(default_factory=lambda: AdamSettings(1e-3, 0.9, 0.999))
    map_kl_scale: float = 1.0    # test hook; 1.0 is the model
    seed: int = 0


@dataclass
class SlamResult:
    mu: np.ndarray               # (T, d_z) posterior means
    log_sigma: np.ndarray
    grid: OccupancyGrid
    colour: ColourField
    trace: np.ndarray            # per-step loss
    sigma_d: float


class SlamEngine:
    """Incremental SLAM over one dataset.

    The transition model is engineered by default; a LearnedTransition is
    used with frozen weights. Frame 0 anchors the gauge: its state is set
    from the dataset's declared start pose and never optimised.
    """

    def __init__(self, data: Dataset, config: SlamConfig | None = None,
                 transition=None):
        self.data = data
        self.cfg = cfg = config or SlamConfig()
        self.rng = np.random.default_rng(cfg.seed)
        self.transition = transition or EngineeredTransition(
            dt=data.dt, exponent=cfg.exponent)
        self.d_z = self.transition.d_z
        self.lattice = RayLattice.for_max_depth(cfg.delta, cfg.max_depth)
        self.grid = OccupancyGrid.for_bounds(
            np.asarray(cfg.grid_lo, dtype=np.float64),
            np.asarray(cfg.grid_hi, dtype=np.float64),
            cfg.voxel_size, margin=cfg.margin)
        self.colour = ColourField.create(cfg.colour_layers, cfg.colour_units,
                                         rng=self.rng)
        self.log_sigma_d = np.array(np.log(cfg.sigma_d_init))

        T = data.n_frames
        self.q_mu = np.zeros((T, self.d_z))
        self.q_log_sigma = np.full((T, self.d_z), np.log(cfg.state_sigma_init))
        self.n_unlocked = 0
        self.trace: list[float] = []

        # frames live in memory for the whole run
        self._depth = np.empty((T, data.K.height, data.K.width))
        self._rgb = np.empty((T, data.K.height, data.K.width, 3))
        for i in range(T):
            d, c = data.load_frame(i)
            self._depth[i] = d
            self._rgb[i] = c

        self._opt_states = Adam([self.q_mu, self.q_log_sigma], cfg.adam_states)
        self._opt_occ = Adam([self.grid.mu, self.grid.log_sigma], cfg.adam_occupancy)
        self._opt_colour = Adam(self.colour.params, cfg.adam_colour)
        self._opt_sigma_d = Adam([self.log_sigma_d], cfg.adam_sigma_d)

    # -- schedule ----------------------------------------------------------

    def unlock_next_frame(self):
        t = self.n_unlocked
        if t >= self.data.n_frames:
            raise ValueError("all frames already unlocked")
        if t == 0:
            z = np.zeros(self.d_z)
            z[LOC] = self.data.locs[0]
            z[ORI] = quat_normalize(self.data.quats[0])
            z[VEL] = self.data.start_velocity
        else:
            z = self.transition.mean(self.q_mu[t - 1], self.data.controls[t - 1])
            z[ORI] = quat_normalize(z[ORI])
        self.q_mu[t] = z
        self.q_log_sigma[t] = np.log(self.cfg.state_sigma_init)
        self.n_unlocked = t + 1
        return t

    def run(self, progress=None):
        for f in range(self.data.n_frames):
            self.unlock_next_frame()
            for _ in range(self.cfg.steps_per_frame):
                self.step()
            if progress is not None:
                progress(self, f)
        return self.result()

    def result(self) -> SlamResult:
        n = self.n_unlocked
        return SlamResult(self.q_mu[:n].copy(), self.q_log_sigma[:n].copy(),
                          copy.deepcopy(self.grid), ColourField([p.copy() for p in self.colour.params]),
                          np.asarray(self.trace), float(np.exp(self.log_sigma_d)))

    # -- optimisation ------------------------------------------------------

    def step(self):
        cfg = self.cfg
        n = self.n_unlocked
        if n < 1:
            raise ValueError("no unlocked frames")
        length = min(cfg.chunk_len, n)
        start = int(self.rng.integers(0, n - length + 1))

        tape = Tape()
        lv = {
            "q_mu": tape.param(self.q_mu),
            "q_ls": tape.param(self.q_log_sigma),
            "map_mu": tape.param(self.grid.mu),
            "map_ls": tape.param(self.grid.log_sigma),
            "colour": [tape.param(p) for p in self.colour.params],
            "log_sigma_d": tape.param(self.log_sigma_d),
        }
        loss, terms = self._chunk_loss(tape, lv, start, length, self.rng)
        if not np.isfinite(loss.value):
            raise FloatingPointError(
                "non-finite chunk ELBO at frames "
                f"[{start}, {start + length}): reconstruction={terms['recon']:.6g} "
                f"state_kl={terms['state_kl']:.6g} map_kl={terms['map_kl']:.6g}")
        grads = tape.backward(loss)

        g_mu = grads[lv["q_mu"].idx]
        g_ls = grads[lv["q_ls"].idx]
        g_mu[0] = 0.0                                # frame 0 is the anchor
        g_ls[0] = 0.0
        self._opt_states.step([g_mu, g_ls])
        self._opt_occ.step([grads[lv["map_mu"].idx], grads[lv["map_ls"].idx]])
        self._opt_colour.step([grads[t.idx] for t in lv["colour"]])
        self._opt_sigma_d.step([grads[lv["log_sigma_d"].idx]])

        self.q_mu[:n, ORI] = quat_normalize(self.q_mu[:n, ORI])
        value = float(loss.value)
        self.trace.append(value)
        return value

    def elbo_chunk(self, start, length, rng):
        """Loss and term breakdown without touching parameters."""
        if length > self.cfg.chunk_len:
            raise ValueError(f"window length {length} exceeds chunk_len {self.cfg.chunk_len}")
        tape = Tape()
        lv = {
            "q_mu": tape.constant(self.q_mu),
            "q_ls": tape.constant(self.q_log_sigma),
            "map_mu": tape.constant(self.grid.mu),
            "map_ls": tape.constant(self.grid.log_sigma),
            "colour": [tape.constant(p) for p in self.colour.params],
            "log_sigma_d": tape.constant(self.log_sigma_d),
        }
        loss, terms = self._chunk_loss(tape, lv, start, length, rng)
        return float(loss.value), terms

    def _transition_tape(self, tape, z, u):
        tr = self.transition
        if isinstance(tr, LearnedTransition):
            # weights are frozen during SLAM: constants, not leaves
            lm = [tape.constant(p) for p in tr.params_mu]
            ls = [tape.constant(p) for p in tr.params_sigma]
            mu, sigma = tr.mean_sigma_tape(tape, lm, ls, z, u)
            return mu, sigma.log()
        mu = tr.mean_tape(tape, z, u)
        sigma = tr.sigma_tape(tape, z, u)
        return mu, sigma.log()

    def _chunk_loss(self, tape, lv, start, length, rng):
        cfg = self.cfg
        K = self.data.K
        P = cfg.particles
        c = cfg.pixels_per_frame
        delta = cfg.delta
        lattice = self.lattice
        grid = self.grid

        sigma_map = lv["map_ls"].exp()
        eps_map = rng.standard_normal(grid.mu.shape)
        values = lv["map_mu"] + sigma_map * tape.constant(eps_map)
        values_np = values.value.reshape(-1)

        # pass 1: sample states, march rays, stage the bracketing sample
        # points and hit points of every frame on the tape
        zs, dirs_l, locs_l, pix = [], [], [], []
        pts_l, cpts_l, kk_l, hit_l = [], [], [], []
        for i in range(length):
            t = start + i
            mu_row = lv["q_mu"][t]
            ls_row = lv["q_ls"][t]
            eps = rng.standard_normal((P, self.d_z))
            z = mu_row[None, :] + ls_row.exp()[None, :] * tape.constant(eps)
            q4 = t_quat_normalize(z[:, ORI])
            loc = z[:, LOC]
            pixels, scale = subsample_pixels(K, c, rng)
            rays = K.pixel_rays(pixels)
            dirs = t_quat_rotate(q4[:, None, :], tape.constant(rays[None, :, :]))
            k, hit, _, _ = march_first_crossing(
                values_np, grid, np.repeat(loc.value, c, axis=0),
                dirs.value.reshape(-1, 3), lattice, cfg.tau)
            k = k.reshape(P, c)
            d_pair = np.stack([k - 1, k], axis=-1) * delta
            pts = loc[:, None, None, :] + dirs[:, :, None, :] * tape.constant(d_pair[..., None])
            cpts = loc[:, None, :] + dirs * tape.constant((k * delta)[..., None])
            zs.append(z)
            locs_l.append(loc)
            dirs_l.append(dirs)
            pix.append((pixels, scale))
            pts_l.append(pts)
            cpts_l.append(cpts)
            kk_l.append(k)
            hit_l.append(hit.reshape(P, c))

        # pass 2: one gather for every bracketing pair, one colour network
        # evaluation for every hit point
        occ_all = trilinear_tape(tape, values, grid,
                                 tape.concat(pts_l, axis=1))          # (P, L*c, 2)
        rgb_all = self.colour.eval_tape(tape, lv["colour"], tape.concat(cpts_l, axis=1))

        sigma_d = lv["log_sigma_d"].exp()
        recon_total = None
        for i in range(length):
            t = start + i
            k = kk_l[i]
            hitm = hit_l[i].astype(np.float64)
            pixels, scale = pix[i]
            o_pair = occ_all[:, i * c:(i + 1) * c, :]
            rgb = rgb_all[:, i * c:(i + 1) * c, :]

            # the k = 1 sample renders as 0 occupancy; its predecessor too
            o_prev = o_pair[..., 0] * tape.constant((k > 2).astype(np.float64))
            o_hit = o_pair[..., 1] * tape.constant((k > 1).astype(np.float64))
            denom = o_hit - o_prev
            okm = (np.abs(denom.value) > 1e-12).astype(np.float64)
            a = (cfg.tau - o_prev) / (denom * okm + tape.constant(1.0 - okm))
            a = a * okm + tape.constant(1.0 - okm)
            alpha = a.relu() - (a - 1.0).relu()                       # clip to [0, 1]
            mu_d = (alpha * delta + tape.constant((k - 1) * delta)) * hitm \
                + tape.constant((1.0 - hitm) * lattice.max_depth)

            obs_d = self._depth[t][pixels[:, 1], pixels[:, 0]]
            obs_c = self._rgb[t][pixels[:, 1], pixels[:, 0]]
            lp = laplace_logpdf(tape.constant(obs_d[None, :]), mu_d, sigma_d)
            lp = lp + laplace_logpdf(tape.constant(obs_c[None, :, :]), rgb,
                                     sigma_d / 10.0).sum(axis=-1)
            recon = lp.sum(axis=-1).mean() * scale
            recon_total = recon if recon_total is None else recon_total + recon

        kl_states = None
        for i in range(1, length):
            t = start + i
            mu_p, log_sigma_p = self._transition_tape(tape, zs[i - 1],
                                                      self.data.controls[t - 1])
            kl = gaussian_kl(lv["q_mu"][t][None, :], lv["q_ls"][t][None, :],
                             mu_p, log_sigma_p).sum(axis=-1).mean()
            kl_states = kl if kl_states is None else kl_states + kl

        kl_map = map_kl_tape(tape, lv["map_mu"], lv["map_ls"], sigma_map,
                             grid.prior) * (cfg.map_kl_scale * length / self.data.n_frames)

        loss = kl_map - recon_total
        if kl_states is not None:
            loss = loss + kl_states
        terms = {
            "recon": float(recon_total.value),
            "state_kl": 0.0 if kl_states is None else float(kl_states.value),
            "map_kl": float(kl_map.value),
        }
        return loss, terms


def predict_rollout(transition, z1, controls, rng=None, grid=None, colour=None,
                    K=None, lattice=None, tau=0.0):
    """Open-loop generative rollout; renders frames when a map is given.

    rng None gives the deterministic mean rollout, otherwise ancestral
    sampling through the transition.
    """
    if rng is None:
        zs = rollout_mean(transition, z1, controls)
    else:
        zs = rollout_sample(transition, z1, controls, rng)
    frames = None
    if grid is not None:
        frames = [render_frame(grid, colour, K, quat_normalize(z[ORI]), z[LOC],
                               lattice, tau) for z in zs]
    return zs, frames
