import numpy as np
import pytest

import voxslam.engine as engine_mod
from voxslam.autodiff import finite_difference_check
from voxslam.dataset import load_dataset
from voxslam.engine import SlamConfig, SlamEngine, predict_rollout
from voxslam.geometry import CameraIntrinsics, quat_normalize, quat_rotate
from voxslam.renderer import (interpolated_depth, march_first_crossing,
                              subsample_pixels, emit_pixel)
from voxslam.simulator import (SensorNoise, TrajectorySpec, default_room_scene,
                               render_dataset)
from voxslam.transition import EngineeredTransition
from voxslam.world_map import map_kl


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ds"))
    scene = default_room_scene()
    K = CameraIntrinsics(665.1, 665.1, 511.5, 383.5, 1024, 768).scaled(32, 24)
    spec = TrajectorySpec(kind="circle", radius=3.0, speed=1.0, n_frames=10, rate=10.0)
    noise = SensorNoise(depth_sigma=0.05, depth_dropout=0.01,
                        accel_sigma=0.05, gyro_sigma=0.01)
    render_dataset(out, scene, spec, K, max_depth=12.0, noise=noise, seed=3)
    return load_dataset(out)


def tiny_config(**kw):
    kw.setdefault("max_depth", 12.0)
    kw.setdefault("voxel_size", 0.4)
    kw.setdefault("margin", 0.8)
    kw.setdefault("pixels_per_frame", 48)
    kw.setdefault("particles", 3)
    kw.setdefault("chunk_len", 5)
    kw.setdefault("exponent", 1)
    kw.setdefault("colour_layers", 2)
    kw.setdefault("colour_units", 16)
    kw.setdefault("seed", 0)
    return SlamConfig(**kw)


def carve_true_scene(eng, scene):
    """Posterior mean set from the analytic scene so rays actually hit."""
    g = eng.grid
    xs = [g.voxel_centres_axis(a) for a in range(3)]
    pts = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 3)
    occupied = scene.clearance(pts) < 0.0
    eng.grid.mu[:] = np.where(occupied, 1.0, -1.0).reshape(g.dims)


# ---------------------------------------------------------------------------
# chunk ELBO against an independent numpy evaluation


def chunk_oracle(eng, start, length, rng):
    cfg, grid, data = eng.cfg, eng.grid, eng.data
    P, c, delta = cfg.particles, cfg.pixels_per_frame, cfg.delta
    K, lattice = data.K, eng.lattice
    eps_map = rng.standard_normal(grid.mu.shape)
    values = (grid.mu + np.exp(grid.log_sigma) * eps_map).reshape(-1)
    sigma_d = float(np.exp(eng.log_sigma_d))
    recon_total = 0.0
    zs = []
    for i in range(length):
        t = start + i
        eps = rng.standard_normal((P, eng.d_z))
        z = eng.q_mu[t][None, :] + np.exp(eng.q_log_sigma[t])[None, :] * eps
        zs.append(z)
        pixels, scale = subsample_pixels(K, c, rng)
        q4 = quat_normalize(z[:, 3:7])
        dirs = quat_rotate(q4[:, None, :], K.pixel_rays(pixels)[None, :, :])
        origins = np.repeat(z[:, 0:3], c, axis=0)
        k, hit, o_prev, o_hit = march_first_crossing(
            values, grid, origins, dirs.reshape(-1, 3), lattice, cfg.tau)
        mu_d = interpolated_depth(k, hit, o_prev, o_hit, lattice, cfg.tau).reshape(P, c)
        pts_col = z[:, None, 0:3] + dirs * (k.reshape(P, c, 1) * delta)
        rgb = eng.colour.eval_raw(pts_col)
        obs_d = eng._depth[t][pixels[:, 1], pixels[:, 0]]
        obs_c = eng._rgb[t][pixels[:, 1], pixels[:, 0]]
        lp = emit_pixel(obs_d[None, :], obs_c[None, :, :], mu_d, rgb, sigma_d)
        recon_total += lp.sum(axis=-1).mean() * scale
    kl_states = 0.0
    tr = eng.transition
    for i in range(1, length):
        t = start + i
        mu_p = tr.mean(zs[i - 1], data.controls[t - 1])
        sig_p = np.broadcast_to(tr.sigma, mu_p.shape)
        mu_q, sig_q = eng.q_mu[t], np.exp(eng.q_log_sigma[t])
        kl = (np.log(sig_p / sig_q)
              + (sig_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sig_p ** 2) - 0.5)
        kl_states += kl.sum(axis=-1).mean()
    kl_m = map_kl(grid) * length / data.n_frames
    return kl_m + kl_states - recon_total


def test_chunk_elbo_matches_numpy_oracle(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    carve_true_scene(eng, default_room_scene())
    rng = np.random.default_rng(1)
    eng.grid.log_sigma[:] = rng.normal(-2.0, 0.3, eng.grid.dims)
    for _ in range(5):
        eng.unlock_next_frame()
    # move states off their clean initialisation
    eng.q_mu[:5, 0:3] += rng.normal(0, 0.05, (5, 3))
    eng.q_log_sigma[:5] += rng.normal(0, 0.2, (5, eng.d_z))

    got, terms = eng.elbo_chunk(0, 5, np.random.default_rng(42))
    want = chunk_oracle(eng, 0, 5, np.random.default_rng(42))
    assert got == pytest.approx(want, rel=1e-9)
    # breakdown adds up
    assert terms["map_kl"] + terms["state_kl"] - terms["recon"] == pytest.approx(got, rel=1e-9)


def test_chunk_same_seed_identical(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    for _ in range(3):
        eng.unlock_next_frame()
    a, _ = eng.elbo_chunk(0, 3, np.random.default_rng(9))
    b, _ = eng.elbo_chunk(0, 3, np.random.default_rng(9))
    assert a == b


def test_one_step_window_has_no_state_kl(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    eng.unlock_next_frame()
    _, terms = eng.elbo_chunk(0, 1, np.random.default_rng(0))
    assert terms["state_kl"] == 0.0
    assert terms["map_kl"] > 0.0


def test_chunk_rejects_overlong_window(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    for _ in range(6):
        eng.unlock_next_frame()
    with pytest.raises(ValueError, match="exceeds chunk_len"):
        eng.elbo_chunk(0, 6, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# gradients through a frozen hit configuration


def test_chunk_gradcheck_fixed_hits(tiny_dataset, monkeypatch):
    eng = SlamEngine(tiny_dataset, tiny_config(
        voxel_size=0.8, margin=0.8, pixels_per_frame=12, particles=2,
        colour_units=8, tau=-0.2))
    rng = np.random.default_rng(2)
    eng.grid.mu[:] = rng.normal(-0.2, 0.6, eng.grid.dims)   # crossings everywhere
    eng.grid.log_sigma[:] = rng.normal(-2.0, 0.2, eng.grid.dims)
    for _ in range(3):
        eng.unlock_next_frame()
    eng.q_mu[:3, 0:3] += rng.normal(0, 0.03, (3, 3))

    recorded = []
    real = march_first_crossing

    def recording(*a, **kw):
        out = real(*a, **kw)
        recorded.append(out)
        return out

    monkeypatch.setattr(engine_mod, "march_first_crossing", recording)
    eng.elbo_chunk(0, 3, np.random.default_rng(7))
    assert len(recorded) == 3
    calls = {"i": 0}

    def replay(*a, **kw):
        out = recorded[calls["i"] % 3]
        calls["i"] += 1
        return out

    monkeypatch.setattr(engine_mod, "march_first_crossing", replay)

    leaves = [eng.q_mu, eng.q_log_sigma, eng.grid.mu, eng.grid.log_sigma,
              *eng.colour.params, eng.log_sigma_d]
    n_col = len(eng.colour.params)

    def f(tape, qm, ql, mm, ml, *rest):
        lv = {"q_mu": qm, "q_ls": ql, "map_mu": mm, "map_ls": ml,
              "colour": list(rest[:n_col]), "log_sigma_d": rest[n_col]}
        loss, _ = eng._chunk_loss(tape, lv, 0, 3, np.random.default_rng(7))
        return loss

    err = finite_difference_check(f, leaves, samples=60, rng=np.random.default_rng(3))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# stepping


def test_two_engines_identical_seeds_identical_trajectories(tiny_dataset):
    runs = []
    for _ in range(2):
        eng = SlamEngine(tiny_dataset, tiny_config(seed=11))
        for _ in range(3):
            eng.unlock_next_frame()
            for _ in range(8):
                eng.step()
        runs.append(eng)
    a, b = runs
    np.testing.assert_array_equal(a.q_mu, b.q_mu)
    np.testing.assert_array_equal(a.grid.mu, b.grid.mu)
    np.testing.assert_array_equal(a.grid.log_sigma, b.grid.log_sigma)
    assert a.trace == b.trace


def test_untouched_voxels_unchanged_without_map_kl(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config(map_kl_scale=0.0))
    carve_true_scene(eng, default_room_scene())
    for _ in range(2):
        eng.unlock_next_frame()
    before_mu = eng.grid.mu.copy()
    before_ls = eng.grid.log_sigma.copy()
    for _ in range(5):
        eng.step()
    changed = eng.grid.mu != before_mu
    # the chunk attends a thin shell of bracketing voxels only
    assert changed.any()
    assert changed.mean() < 0.5
    # the map-corner voxel sits in the margin outside every frustum
    assert eng.grid.mu[0, 0, 0] == before_mu[0, 0, 0]
    assert eng.grid.log_sigma[0, 0, 0] == before_ls[0, 0, 0]


def test_step_requires_unlocked_frame(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    with pytest.raises(ValueError, match="unlocked"):
        eng.step()


def test_non_finite_loss_names_window(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    eng.unlock_next_frame()
    eng.unlock_next_frame()
    eng._depth[1, 0, 0] = np.nan
    eng._depth[1, :, :] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite chunk ELBO at frames"):
        for _ in range(20):
            eng.step()


# ---------------------------------------------------------------------------
# frame unlocking


def test_first_frame_from_declared_start(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    eng.unlock_next_frame()
    np.testing.assert_allclose(eng.q_mu[0, 0:3], tiny_dataset.locs[0], atol=1e-12)
    np.testing.assert_allclose(eng.q_mu[0, 3:7], tiny_dataset.quats[0], atol=1e-12)
    np.testing.assert_allclose(eng.q_mu[0, 7:10], tiny_dataset.start_velocity, atol=1e-12)
    np.testing.assert_array_equal(eng.q_log_sigma[0], np.log(0.01))


def test_unlock_sigma_is_exactly_point_zero_one(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    eng.unlock_next_frame()
    eng.unlock_next_frame()
    np.testing.assert_array_equal(eng.q_log_sigma[1], np.full(eng.d_z, np.log(0.01)))


def test_unlock_zero_motion_keeps_pose(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    eng.unlock_next_frame()
    # hovering predecessor: zero velocity, accelerometer reading R^T g
    eng.q_mu[0, 7:10] = 0.0
    q = eng.q_mu[0, 3:7]
    g = np.array([0.0, 0.0, -9.81])
    from voxslam.geometry import quat_conj
    eng.data.controls[0, 0:3] = quat_rotate(quat_conj(q), g)
    eng.data.controls[0, 3:6] = 0.0
    eng.unlock_next_frame()
    np.testing.assert_allclose(eng.q_mu[1, 0:3], eng.q_mu[0, 0:3], atol=1e-12)
    np.testing.assert_allclose(eng.q_mu[1, 3:7], eng.q_mu[0, 3:7], atol=1e-12)
    np.testing.assert_allclose(eng.q_mu[1, 7:10], 0.0, atol=1e-12)


def test_frame_zero_is_anchored(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    for _ in range(3):
        eng.unlock_next_frame()
    row0_mu = eng.q_mu[0].copy()
    row0_ls = eng.q_log_sigma[0].copy()
    for _ in range(10):
        eng.step()
    np.testing.assert_array_equal(eng.q_mu[0], row0_mu)
    np.testing.assert_array_equal(eng.q_log_sigma[0], row0_ls)


# ---------------------------------------------------------------------------
# map KL as an active regulariser


def test_deleting_map_kl_reconstructs_at_least_as_well(tiny_dataset):
    recon = {}
    for scale in (1.0, 0.0):
        eng = SlamEngine(tiny_dataset, tiny_config(map_kl_scale=scale, tau=-0.4, seed=4))
        for _ in range(4):
            eng.unlock_next_frame()
            for _ in range(60):
                eng.step()
        _, terms = eng.elbo_chunk(0, 4, np.random.default_rng(123))
        recon[scale] = terms["recon"]
    assert recon[0.0] >= recon[1.0] - 1e-9 * abs(recon[1.0])


# ---------------------------------------------------------------------------
# rollouts


def test_predict_rollout_mean_is_iterated_euler(tiny_dataset):
    tr = EngineeredTransition(dt=0.1, exponent=1)
    rng = np.random.default_rng(5)
    z1 = np.zeros(10)
    z1[3] = 1.0
    z1[7:10] = [0.3, 0.0, 0.0]
    controls = rng.normal(size=(20, 6))
    zs, frames = predict_rollout(tr, z1, controls)
    assert frames is None
    z = z1.copy()
    for i, u in enumerate(controls):
        mu = tr.mean(z, u)
        mu[3:7] = quat_normalize(mu[3:7])
        z = mu
        np.testing.assert_allclose(zs[i + 1], z, atol=1e-12)


def test_predict_rollout_renders_frames(tiny_dataset):
    eng = SlamEngine(tiny_dataset, tiny_config())
    carve_true_scene(eng, default_room_scene())
    tr = EngineeredTransition(dt=0.1, exponent=1)
    z1 = np.zeros(10)
    z1[0:3] = tiny_dataset.locs[0]
    z1[3:7] = tiny_dataset.quats[0]
    z1[7:10] = tiny_dataset.start_velocity
    zs, frames = predict_rollout(tr, z1, tiny_dataset.controls[:3],
                                 grid=eng.grid, colour=eng.colour,
                                 K=tiny_dataset.K, lattice=eng.lattice, tau=0.0)
    assert len(frames) == 4
    depth, rgb, hit = frames[0]
    assert depth.shape == (24, 32)
    assert rgb.shape == (24, 32, 3)
    assert np.isfinite(depth).all() and hit.any()
