"""Occupancy grid, trilinear lookups, colour field, KL, and checkpoint io."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxslam.autodiff import Tape, finite_difference_check
from voxslam import world_map as wm


def small_grid(seed=0, dims=(5, 6, 7)):
    rng = np.random.default_rng(seed)
    g = wm.OccupancyGrid.create(dims, origin=[-1.0, 0.5, 2.0], voxel_size=0.25)
    g.mu = rng.normal(size=g.mu.shape)
    g.log_sigma = rng.normal(scale=0.3, size=g.mu.shape)
    return g


def test_create_and_bounds():
    g = wm.OccupancyGrid.create((4, 4, 4), origin=[0, 0, 0], voxel_size=0.5)
    assert g.n_voxels == 64
    np.testing.assert_allclose(g.mu, -0.5)
    np.testing.assert_allclose(np.exp(g.log_sigma), 0.1)
    gb = wm.OccupancyGrid.for_bounds([0, 0, 0], [2, 1, 1], 0.5, margin=0.25)
    np.testing.assert_allclose(gb.origin, [-0.25, -0.25, -0.25])
    assert gb.dims.tolist() == [5, 3, 3]
    with pytest.raises(ValueError, match="voxel_size"):
        wm.OccupancyGrid.create((4, 4, 4), [0, 0, 0], -1.0)


def test_trilinear_exact_at_voxel_centres():
    g = small_grid()
    flat = g.mu.reshape(-1)
    for idx in [(0, 0, 0), (2, 3, 4), (4, 5, 6)]:  # includes extreme corners
        p = g.origin + (np.array(idx) + 0.5) * g.voxel_size
        got = wm.trilinear_raw(flat, g, p)
        assert got == pytest.approx(g.mu[idx], abs=1e-12)


def test_trilinear_reproduces_linear_fields_exactly():
    # interpolation of samples of an affine function is that function
    g = small_grid()
    a = np.array([0.7, -1.3, 0.4])
    b = 0.2
    ii, jj, kk = np.meshgrid(*[np.arange(d) for d in g.dims], indexing="ij")
    centres = g.origin + (np.stack([ii, jj, kk], axis=-1) + 0.5) * g.voxel_size
    field = centres @ a + b
    rng = np.random.default_rng(1)
    pts = rng.uniform(g.centre_lo, g.centre_hi, size=(50, 3))
    got = wm.trilinear_raw(field.reshape(-1), g, pts)
    np.testing.assert_allclose(got, pts @ a + b, rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3))
def test_trilinear_weights_partition_of_unity(fracs):
    w = wm.trilinear_weights(np.array(fracs))
    assert (w >= 0).all()
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_trilinear_continuous_across_voxel_boundary():
    g = small_grid(2)
    flat = g.mu.reshape(-1)
    # boundary plane between voxel columns 1 and 2 along x
    x_edge = g.origin[0] + (1.5 + 0.5) * g.voxel_size
    p = np.array([x_edge, g.origin[1] + 0.6, g.origin[2] + 0.9])
    lo = wm.trilinear_raw(flat, g, p - [1e-9, 0, 0])
    hi = wm.trilinear_raw(flat, g, p + [1e-9, 0, 0])
    assert abs(lo - hi) < 1e-7


def test_trilinear_outside_returns_prior_mean_zero():
    g = small_grid(3)
    flat = g.mu.reshape(-1)
    outside = np.array([
        g.origin - 1.0,
        g.centre_hi + [0.2, 0.0, 0.0],
        [1e6, 1e6, 1e6],
    ])
    np.testing.assert_allclose(wm.trilinear_raw(flat, g, outside), 0.0)


def test_trilinear_tape_matches_raw_and_gradients():
    g = small_grid(4)
    rng = np.random.default_rng(5)
    pts = rng.uniform(g.centre_lo + 0.05, g.centre_hi - 0.05, size=(9, 3))
    vals = g.mu.reshape(-1).copy()

    tape = Tape()
    tv = tape.param(vals)
    tp = tape.param(pts)
    out = wm.trilinear_tape(tape, tv, g, tp)
    np.testing.assert_allclose(out.value, wm.trilinear_raw(vals, g, pts), atol=1e-12)

    w = rng.normal(size=9)

    def f(tape, values, points):
        return (wm.trilinear_tape(tape, values, g, points) * tape.constant(w)).sum()

    assert finite_difference_check(f, [vals, pts], step=1e-6, samples=120) < 1e-6


def test_trilinear_tape_outside_has_zero_gradient():
    g = small_grid(6)
    vals = g.mu.reshape(-1).copy()
    pts = np.array([[1e5, 1e5, 1e5]])
    tape = Tape()
    tv = tape.param(vals)
    out = wm.trilinear_tape(tape, tv, g, tape.constant(pts))
    assert out.value[0] == 0.0
    grad = tape.backward(out.sum())[tv.idx]
    np.testing.assert_allclose(grad, 0.0)


def test_sample_occupancy_reparameterisation():
    g = small_grid(7)
    tape = Tape()
    mu = tape.param(g.mu.reshape(-1))
    ls = tape.param(g.log_sigma.reshape(-1))
    eps = np.random.default_rng(8).normal(size=g.n_voxels)
    s = wm.sample_occupancy_tape(tape, mu, ls, eps)
    np.testing.assert_allclose(s.value, g.mu.reshape(-1) + np.exp(g.log_sigma.reshape(-1)) * eps)
    grads = tape.backward(s.sum())
    np.testing.assert_allclose(grads[mu.idx], 1.0)
    np.testing.assert_allclose(grads[ls.idx], np.exp(g.log_sigma.reshape(-1)) * eps)


def test_map_kl_per_voxel_initial_value():
    # oracle: KL(N(-0.5, 0.1^2) || N(0, 1)) = log(1/0.1) + (0.01 + 0.25)/2 - 0.5
    oracle = np.log(1.0 / 0.1) + (0.1 ** 2 + 0.5 ** 2) / 2.0 - 0.5
    g = wm.OccupancyGrid.create((6, 6, 6), [0, 0, 0], 0.1)
    per_voxel = wm.map_kl(g) / g.n_voxels
    assert per_voxel == pytest.approx(oracle, abs=1e-3)
    assert per_voxel == pytest.approx(1.9325850929940458, abs=1e-9)


def test_map_kl_zero_when_posterior_equals_prior():
    g = wm.OccupancyGrid.create((4, 4, 4), [0, 0, 0], 0.1, mu_init=0.0, sigma_init=1.0)
    assert wm.map_kl(g) == pytest.approx(0.0, abs=1e-12)


def test_map_kl_tape_matches_numpy_and_gradient():
    g = small_grid(9, dims=(3, 3, 3))
    mu0 = g.mu.reshape(-1).copy()
    ls0 = g.log_sigma.reshape(-1).copy()

    tape = Tape()
    mu = tape.param(mu0)
    ls = tape.param(ls0)
    kl = wm.map_kl_tape(tape, mu, ls, ls.exp(), g.prior)
    assert float(kl.value) == pytest.approx(wm.map_kl(g), rel=1e-12)

    def f(tape, m, l):
        return wm.map_kl_tape(tape, m, l, l.exp(), g.prior)

    assert finite_difference_check(f, [mu0, ls0], step=1e-6) < 1e-6


def test_colour_field_initial_output_is_mid_grey():
    c = wm.ColourField.create(hidden_layers=3, units=16, rng=np.random.default_rng(0))
    pts = np.random.default_rng(1).uniform(-5, 5, size=(20, 3))
    np.testing.assert_allclose(c.eval_raw(pts), 0.5, atol=1e-12)


def test_colour_field_tape_matches_raw_and_range():
    rng = np.random.default_rng(2)
    c = wm.ColourField.create(hidden_layers=2, units=8, rng=rng)
    # perturb all params so the net is nontrivial
    c.params = [p + rng.normal(scale=0.3, size=p.shape) for p in c.params]
    pts = rng.uniform(-3, 3, size=(11, 3))
    raw = c.eval_raw(pts)
    assert ((raw > 0) & (raw < 1)).all()

    tape = Tape()
    leaves = [tape.param(p) for p in c.params]
    out = c.eval_tape(tape, leaves, tape.constant(pts))
    np.testing.assert_allclose(out.value, raw, atol=1e-12)


def test_colour_field_gradients():
    rng = np.random.default_rng(3)
    c = wm.ColourField.create(hidden_layers=2, units=6, rng=rng)
    c.params = [p + rng.normal(scale=0.2, size=p.shape) for p in c.params]
    pts = rng.uniform(-2, 2, size=(4, 3))
    w = rng.normal(size=(4, 3))

    def f(tape, *leaves):
        out = c.eval_tape(tape, list(leaves), tape.constant(pts))
        return (out * tape.constant(w)).sum()

    assert finite_difference_check(f, c.params, step=1e-6, samples=40) < 1e-6


def test_map_checkpoint_roundtrip(tmp_path):
    g = small_grid(10)
    c = wm.ColourField.create(hidden_layers=2, units=8, rng=np.random.default_rng(4))
    c.params = [p + 0.1 for p in c.params]
    path = tmp_path / "map.vslm"
    wm.save_map(path, g, c)
    g2, c2 = wm.load_map(path)
    assert g2.dims.tolist() == g.dims.tolist()
    np.testing.assert_array_equal(g2.origin, g.origin)
    assert g2.voxel_size == g.voxel_size
    np.testing.assert_array_equal(g2.mu, g.mu)
    np.testing.assert_array_equal(g2.log_sigma, g.log_sigma)
    assert len(c2.params) == len(c.params)
    for a, b in zip(c.params, c2.params):
        np.testing.assert_array_equal(a, b)


def test_map_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE!" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        wm.load_map(path)
