"""Learning the transition model from pose and control sequences.

A generative sequence model over windows of observed poses: the latent state
follows the learned transition prior, poses are emitted from the latent
location and orientation, and inference runs through a bidirectional LSTM
inverse emission fused with the transition prior (precision-weighted
Gaussian product). Minimising the negative ELBO w.r.t. the transition MLPs,
the encoder and the emission scales yields transition parameters that can
replace the engineered model downstream. Orientation reconstruction goes
through rotation matrices so that q and -q score identically.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, gaussian_kl, sigmoid, softplus
from .geometry import (quat_mul, quat_normalize, quat_to_matrix,
                       t_quat_normalize, t_quat_to_matrix_flat)
from .optim import Adam, AdamSettings
from .transition import LOC, ORI, SIGMA_MIN, LearnedTransition

_LOG2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# encoder


def _lstm_init(d_in, units, rng):
    """Joint kernel (d_in + units, 4*units) and bias; forget gate bias 1."""
    scale = 1.0 / np.sqrt(d_in + units)
    w = rng.uniform(-scale, scale, size=(d_in + units, 4 * units))
    b = np.zeros(4 * units)
    b[units:2 * units] = 1.0
    return w, b


def _lstm_sweep(tape: Tape, w: Tensor, b: Tensor, steps, units, reverse=False):
    """Run an LSTM over a list of (B, D) constant tensors; returns hiddens."""
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    batch = steps[0].shape[0]
    h = tape.constant(np.zeros((batch, units)))
    c = tape.constant(np.zeros((batch, units)))
    out = [None] * len(steps)
    for t in order:
        zx = tape.concat([steps[t], h], axis=1) @ w + b
        i = sigmoid(zx[:, 0:units])
        f = sigmoid(zx[:, units:2 * units])
        g = zx[:, 2 * units:3 * units].tanh()
        o = sigmoid(zx[:, 3 * units:4 * units])
        c = f * c + i * g
        h = o * c.tanh()
        out[t] = h
    return out


@dataclass
class SequenceEncoder:
    """Bidirectional LSTM inverse emission producing per-step (mu, sigma)."""

    params: list          # [w_fwd, b_fwd, w_bwd, b_bwd, w_head, b_head]
    units: int
    d_z: int

    @classmethod
    def create(cls, d_in, d_z, units=64, sigma_init=1.0, rng=None):
        rng = rng or np.random.default_rng(0)
        w_f, b_f = _lstm_init(d_in, units, rng)
        w_b, b_b = _lstm_init(d_in, units, rng)
        scale = 1.0 / np.sqrt(2 * units)
        w_h = rng.uniform(-scale, scale, size=(2 * units, 2 * d_z))
        b_h = np.zeros(2 * d_z)
        b_h[d_z:] = np.log(np.expm1(max(sigma_init - SIGMA_MIN, 1e-6)))
        return cls([w_f, b_f, w_b, b_b, w_h, b_h], units, d_z)

    def encode_tape(self, tape: Tape, leaves, feats):
        """feats (B, T, D) numeric -> per-step [(mu (B,d_z), sigma (B,d_z))]."""
        w_f, b_f, w_b, b_b, w_h, b_h = leaves
        steps = [tape.constant(np.ascontiguousarray(feats[:, t])) for t in range(feats.shape[1])]
        fwd = _lstm_sweep(tape, w_f, b_f, steps, self.units)
        bwd = _lstm_sweep(tape, w_b, b_b, steps, self.units, reverse=True)
        out = []
        for t in range(len(steps)):
            y = tape.concat([fwd[t], bwd[t]], axis=1) @ w_h + b_h
            mu = y[:, :self.d_z]
            sigma = softplus(y[:, self.d_z:]) + SIGMA_MIN
            out.append((mu, sigma))
        return out

    def encode(self, feats):
        """Numpy convenience wrapper; returns (mus, sigmas) arrays (T, B, d_z)."""
        tape = Tape()
        leaves = [tape.param(p) for p in self.params]
        enc = self.encode_tape(tape, leaves, np.asarray(feats, dtype=np.float64))
        return (np.stack([m.value for m, _ in enc]),
                np.stack([s.value for _, s in enc]))


def encode_observations(locs, quats, controls):
    """Per-step encoder features [loc, R row-major, control]; control padded
    with zeros at the final step."""
    locs = np.asarray(locs, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    rot = quat_to_matrix(quats).reshape(quats.shape[:-1] + (9,))
    pad = np.zeros(controls.shape[:-2] + (1, controls.shape[-1]))
    u = np.concatenate([controls, pad], axis=-2)
    return np.concatenate([locs, rot, u], axis=-1)


# ---------------------------------------------------------------------------
# fusion and emission


def fuse(mu_p, sigma_p, mu_e, sigma_e):
    """Precision-weighted product of two diagonal Gaussians, numpy."""
    p_p = 1.0 / np.square(sigma_p)
    p_e = 1.0 / np.square(sigma_e)
    prec = p_p + p_e
    return (mu_p * p_p + mu_e * p_e) / prec, np.sqrt(1.0 / prec)


def fuse_tape(mu_p: Tensor, log_sigma_p: Tensor, mu_e: Tensor, log_sigma_e: Tensor):
    """Tape fusion in log-sigma form; returns (mu_q, log_sigma_q)."""
    p_p = (-2.0 * log_sigma_p).exp()
    p_e = (-2.0 * log_sigma_e).exp()
    prec = p_p + p_e
    mu_q = (mu_p * p_p + mu_e * p_e) / prec
    return mu_q, -0.5 * prec.log()


def pose_emission_logpdf_tape(z: Tensor, obs_loc, obs_rot9, log_sigma: Tensor):
    """Summed Gaussian log-density of an observed pose given latent z.

    Location scores 3 dims directly; orientation scores the 9 entries of the
    observed rotation matrix against the matrix built from the latent
    quaternion, which makes the density invariant to quaternion sign.
    log_sigma is the learned 12-vector [loc(3), rot(9)].
    """
    tape = z.tape
    rot = t_quat_to_matrix_flat(t_quat_normalize(z[..., ORI]))
    mean = tape.concat([z[..., LOC], rot], axis=-1)
    obs = tape.constant(np.concatenate([obs_loc, obs_rot9], axis=-1))
    delta = (obs - mean) * (-log_sigma).exp()
    lp = -0.5 * _LOG2PI - log_sigma - 0.5 * delta.square()
    return lp.sum(axis=-1)


def emission_logpdf(z, obs_loc, obs_quat, log_sigma):
    """Numpy twin of the tape emission, for tests and quick evaluation."""
    z = np.asarray(z, dtype=np.float64)
    rot = quat_to_matrix(quat_normalize(z[..., ORI])).reshape(z.shape[:-1] + (9,))
    obs_rot = quat_to_matrix(quat_normalize(obs_quat)).reshape(z.shape[:-1] + (9,))
    mean = np.concatenate([z[..., LOC], rot], axis=-1)
    obs = np.concatenate([obs_loc, obs_rot], axis=-1)
    delta = (obs - mean) / np.exp(log_sigma)
    return np.sum(-0.5 * _LOG2PI - log_sigma - 0.5 * delta ** 2, axis=-1)


# ---------------------------------------------------------------------------
# windows and the sequence ELBO


@dataclass
class PoseWindows:
    """A batch of equal-length observation windows."""

    locs: np.ndarray       # (B, T, 3)
    quats: np.ndarray      # (B, T, 4)
    controls: np.ndarray   # (B, T-1, 6)

    def __post_init__(self):
        if self.locs.ndim != 3 or self.quats.shape[:2] != self.locs.shape[:2]:
            raise ValueError("window arrays disagree on batch/time shape")
        if self.controls.shape[1] != self.locs.shape[1] - 1:
            raise ValueError("need T-1 control rows per window")

    @property
    def batch(self):
        return self.locs.shape[0]

    @property
    def steps(self):
        return self.locs.shape[1]

    def subset(self, idx):
        return PoseWindows(self.locs[idx], self.quats[idx], self.controls[idx])

    def augmented(self, rng, translation=3.0):
        """Random z-rotation plus translation of every window; IMU readings
        are exactly invariant under this family, so controls stay put."""
        b = self.batch
        ang = rng.uniform(0.0, 2.0 * np.pi, size=b)
        dz = np.zeros((b, 1, 3))
        dz[:, 0, :2] = rng.uniform(-translation, translation, size=(b, 2))
        dz[:, 0, 2] = rng.uniform(-translation / 4, translation / 4, size=b)
        c, s = np.cos(ang), np.sin(ang)
        locs = np.empty_like(self.locs)
        locs[..., 0] = c[:, None] * self.locs[..., 0] - s[:, None] * self.locs[..., 1]
        locs[..., 1] = s[:, None] * self.locs[..., 0] + c[:, None] * self.locs[..., 1]
        locs[..., 2] = self.locs[..., 2]
        qz = np.stack([np.cos(ang / 2), np.zeros(b), np.zeros(b), np.sin(ang / 2)], axis=1)
        quats = quat_mul(qz[:, None, :], self.quats)
        return PoseWindows(locs + dz, quats, self.controls)


def cut_windows(locs, quats, controls, length, stride=None):
    """Slice one trajectory into fixed-length windows."""
    stride = stride or length
    T = len(locs)
    if T < length:
        raise ValueError(f"trajectory of {T} steps shorter than window {length}")
    starts = list(range(0, T - length + 1, stride))
    return PoseWindows(
        np.stack([locs[s:s + length] for s in starts]),
        np.stack([quats[s:s + length] for s in starts]),
        np.stack([controls[s:s + length - 1] for s in starts]))


def initial_state(locs0, quats0, d_z):
    """Deterministic z_1: observed location/orientation, zero velocity/rest."""
    b = len(locs0)
    z = np.zeros((b, d_z))
    z[:, LOC] = locs0
    z[:, ORI] = quat_normalize(quats0)
    return z


@dataclass
class DynamicsModel:
    """Learned transition plus its training-time encoder and emission scales."""

    transition: LearnedTransition
    encoder: SequenceEncoder
    emission_log_sigma: np.ndarray   # (12,)

    @classmethod
    def create(cls, d_rest=8, hidden_layers=5, units=64, rnn_units=64,
               dt=0.1, exponent=2, emission_sigma=0.1, seed=0):
        rng = np.random.default_rng(seed)
        trans = LearnedTransition.create(d_rest=d_rest, hidden_layers=hidden_layers,
                                         units=units, dt=dt, exponent=exponent, rng=rng)
        enc = SequenceEncoder.create(d_in=18, d_z=trans.d_z, units=rnn_units, rng=rng)
        return cls(trans, enc, np.full(12, np.log(emission_sigma)))

    def parameters(self):
        return (list(self.transition.params_mu) + list(self.transition.params_sigma)
                + list(self.encoder.params) + [self.emission_log_sigma])

    def _leaves(self, tape: Tape):
        n_mu = len(self.transition.params_mu)
        n_sg = len(self.transition.params_sigma)
        leaves = [tape.param(p) for p in self.parameters()]
        return {
            "trans_mu": leaves[:n_mu],
            "trans_sigma": leaves[n_mu:n_mu + n_sg],
            "encoder": leaves[n_mu + n_sg:-1],
            "emission": leaves[-1],
            "all": leaves,
        }

    def elbo_tape(self, tape: Tape, leaves, windows: PoseWindows, rng,
                  freeze_encoder_sigma=None):
        """Negative sequence ELBO, averaged over windows.

        Single-sample reparameterised estimate; z_1 is deterministic.
        freeze_encoder_sigma substitutes a fixed encoder sigma (testing hook
        for the uninformative-encoder limit).
        """
        b, T = windows.batch, windows.steps
        d_z = self.transition.d_z
        feats = encode_observations(windows.locs, windows.quats, windows.controls)
        enc = self.encoder.encode_tape(tape, leaves["encoder"], feats)
        rot_obs = quat_to_matrix(quat_normalize(windows.quats)).reshape(b, T, 9)
        em_ls = leaves["emission"]

        z = tape.constant(initial_state(windows.locs[:, 0], windows.quats[:, 0], d_z))
        recon = pose_emission_logpdf_tape(z, windows.locs[:, 0], rot_obs[:, 0], em_ls)
        kl_total = None
        for t in range(1, T):
            mu_p, sigma_p = self.transition.mean_sigma_tape(
                tape, leaves["trans_mu"], leaves["trans_sigma"], z, windows.controls[:, t - 1])
            log_sigma_p = sigma_p.log()
            mu_e, sigma_e = enc[t]
            if freeze_encoder_sigma is not None:
                sigma_e = tape.constant(np.full((b, d_z), float(freeze_encoder_sigma)))
            mu_q, log_sigma_q = fuse_tape(mu_p, log_sigma_p, mu_e, sigma_e.log())
            kl_t = gaussian_kl(mu_q, log_sigma_q, mu_p, log_sigma_p).sum(axis=-1)
            eps = rng.standard_normal((b, d_z))
            z = mu_q + log_sigma_q.exp() * tape.constant(eps)
            recon_t = pose_emission_logpdf_tape(z, windows.locs[:, t], rot_obs[:, t], em_ls)
            if not (np.isfinite(kl_t.value).all() and np.isfinite(recon_t.value).all()):
                raise FloatingPointError(f"non-finite sequence ELBO term at step {t}")
            kl_total = kl_t if kl_total is None else kl_total + kl_t
            recon = recon + recon_t
        loss = (kl_total - recon).mean()
        return loss

    def elbo(self, windows: PoseWindows, rng, **kw):
        tape = Tape()
        leaves = self._leaves(tape)
        return float(self.elbo_tape(tape, leaves, windows, rng, **kw).value)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 8
    lr: float = 1e-3
    val_fraction: float = 0.2
    augment: bool = True
    translation: float = 3.0
    seed: int = 0
    window: int = 50
    stride: int = 10
    d_rest: int = 8
    hidden_layers: int = 5
    units: int = 64
    rnn_units: int = 64
    dt: float = 0.1
    exponent: int = 2
    emission_sigma: float = 0.1
    clip_norm: float = 0.0   # 0 disables; tames the huge first-epoch gradients


@dataclass
class TrainResult:
    model: DynamicsModel
    train_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    best_val: float = np.inf
    best_epoch: int = -1


def train_dynamics(windows: PoseWindows, config: TrainConfig,
                   model: DynamicsModel | None = None) -> TrainResult:
    """ELBO training with a disjoint validation split and best-checkpoint pick.

    Deterministic given config.seed. Zero epochs returns the freshly
    initialised model untouched. Passing a model resumes from its current
    parameters instead of reinitialising.
    """
    if windows.batch == 0:
        raise ValueError("empty window set")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = DynamicsModel.create(
            d_rest=config.d_rest, hidden_layers=config.hidden_layers, units=config.units,
            rnn_units=config.rnn_units, dt=config.dt, exponent=config.exponent,
            emission_sigma=config.emission_sigma, seed=config.seed)

    n_val = int(round(windows.batch * config.val_fraction))
    n_val = min(max(n_val, 1 if windows.batch > 1 else 0), windows.batch - 1)
    perm = rng.permutation(windows.batch)
    val = windows.subset(perm[:n_val]) if n_val else None
    train = windows.subset(perm[n_val:])

    params = model.parameters()
    adam = Adam(params, AdamSettings(lr=config.lr, beta1=0.9, beta2=0.999))
    result = TrainResult(model)
    best_params = None

    def validation_loss(epoch):
        if val is None:
            return np.inf
        vrng = np.random.default_rng([config.seed, 7, epoch])
        return model.elbo(val, vrng)

    for epoch in range(config.epochs):
        order = rng.permutation(train.batch)
        epoch_losses = []
        for lo in range(0, train.batch, config.batch):
            batch = train.subset(order[lo:lo + config.batch])
            if config.augment:
                batch = batch.augmented(rng, translation=config.translation)
            tape = Tape()
            leaves = model._leaves(tape)
            loss = model.elbo_tape(tape, leaves, batch, rng)
            grads = tape.backward(loss)
            gs = [grads[lv.idx] for lv in leaves["all"]]
            if config.clip_norm > 0.0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in gs))
                if norm > config.clip_norm:
                    gs = [g * (config.clip_norm / norm) for g in gs]
            adam.step(gs)
            epoch_losses.append(float(loss.value))
        result.train_trace.append(float(np.mean(epoch_losses)))
        vl = validation_loss(epoch)
        result.val_trace.append(vl)
        if vl < result.best_val:
            result.best_val = vl
            result.best_epoch = epoch
            best_params = [p.copy() for p in params]

    if best_params is not None:
        for dst, src in zip(params, best_params):
            dst[:] = src
    return result
