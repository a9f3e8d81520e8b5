"""Command line surface.

Every subcommand reads an optional key=value config file plus repeated
--set key=value overrides, writes its artifacts under --out, and prints one
machine-readable `RESULT key=value ...` line. RESULT lines are deterministic
for a fixed config and seed; wall-clock timings are printed separately.
"""

import argparse
import os
import sys
import time

import numpy as np

from .config import ConfigError, apply_overrides, check_keys, get_tuple, load_config
from .costmap import control_library, cost_to_go
from .dataset import load_dataset, write_csv
from .dynamics import PoseWindows, TrainConfig, cut_windows, train_dynamics
from .engine import SlamConfig, SlamEngine, predict_rollout
from .exports import export_pointcloud, export_slice
from .geometry import quat_normalize
from .metrics import ate_rmse, segment_errors
from .renderer import RayLattice, emit_pixel, render_frame
from .simulator import (SensorNoise, TrajectorySpec, default_camera,
                        default_room_scene, render_dataset)
from .transition import EngineeredTransition, load_transition, save_transition
from .world_map import load_map, save_map


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _result(**kw):
    print("RESULT " + " ".join(f"{k}={_fmt(v)}" for k, v in kw.items()))


def _load_cfg(args, allowed, name):
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    apply_overrides(cfg, getattr(args, "set", None))
    return check_keys(cfg, allowed, source=name)


def _transition_from(cfg, args, dt):
    choice = getattr(args, "transition", None) or cfg.get("transition", "engineered")
    if choice == "engineered":
        return EngineeredTransition(dt=dt, exponent=int(cfg.get("exponent", 2)))
    if choice == "learned":
        path = getattr(args, "model", None) or cfg.get("model")
        if not path:
            raise ConfigError("transition=learned needs a --model checkpoint")
        return load_transition(path)
    raise ConfigError(f"unknown transition '{choice}'")


def _write_pgm(path, values, comment=""):
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin
    levels = np.zeros_like(values, dtype=np.int64) if span == 0.0 else \
        np.round((values - vmin) / span * 255.0).astype(np.int64)
    with open(path, "w") as f:
        f.write("P2\n")
        f.write(f"# min={vmin!r} max={vmax!r} {comment}\n".rstrip() + "\n")
        f.write(f"{values.shape[1]} {values.shape[0]}\n255\n")
        for row in levels:
            f.write(" ".join(str(v) for v in row) + "\n")


def _write_ppm(path, rgb):
    levels = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.int64)
    h, w, _ = levels.shape
    with open(path, "w") as f:
        f.write(f"P3\n{w} {h}\n255\n")
        for row in levels:
            f.write(" ".join(" ".join(str(c) for c in px) for px in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands

_SIMULATE_KEYS = {
    "kind", "centre", "height", "radius", "speed", "n_frames", "rate",
    "yaw_mode", "yaw_fixed", "phase", "clearance",
    "room_width", "room_depth", "room_height", "wall", "column_radius", "column_offset",
    "depth_sigma", "depth_dropout", "accel_sigma", "gyro_sigma",
    "accel_bias", "gyro_bias", "width", "image_height", "max_depth", "seed", "frames",
}


def cmd_simulate(args):
    cfg = _load_cfg(args, _SIMULATE_KEYS, "simulate")
    scene = default_room_scene(
        width=float(cfg.get("room_width", 10.0)),
        depth=float(cfg.get("room_depth", 10.0)),
        height=float(cfg.get("room_height", 3.0)),
        wall=float(cfg.get("wall", 0.2)),
        column_radius=float(cfg.get("column_radius", 0.4)),
        column_offset=float(cfg.get("column_offset", 2.5)))
    spec = TrajectorySpec(
        kind=str(cfg.get("kind", "circle")),
        centre=get_tuple(cfg, "centre", (0.0, 0.0), n=2),
        height=float(cfg.get("height", 1.5)),
        radius=float(cfg.get("radius", 3.0)),
        speed=float(cfg.get("speed", 1.0)),
        n_frames=int(cfg.get("n_frames", 100)),
        rate=float(cfg.get("rate", 10.0)),
        yaw_mode=str(cfg.get("yaw_mode", "forward")),
        yaw_fixed=float(cfg.get("yaw_fixed", 0.0)),
        phase=float(cfg.get("phase", 0.0)),
        clearance=float(cfg.get("clearance", 0.3)))
    noise = SensorNoise(
        depth_sigma=float(cfg.get("depth_sigma", 0.05)),
        depth_dropout=float(cfg.get("depth_dropout", 0.01)),
        accel_sigma=float(cfg.get("accel_sigma", 0.05)),
        gyro_sigma=float(cfg.get("gyro_sigma", 0.005)),
        accel_bias=np.asarray(get_tuple(cfg, "accel_bias", (0.0, 0.0, 0.0), n=3)),
        gyro_bias=np.asarray(get_tuple(cfg, "gyro_bias", (0.0, 0.0, 0.0), n=3)))
    K = default_camera(int(cfg.get("width", 64)), int(cfg.get("image_height", 48)))
    render_dataset(args.out, scene, spec, K,
                   max_depth=float(cfg.get("max_depth", 12.0)), noise=noise,
                   seed=int(cfg.get("seed", 0)),
                   write_frames=bool(cfg.get("frames", True)))
    _result(dataset=args.out, frames=int(cfg.get("n_frames", 100)),
            kind=str(cfg.get("kind", "circle")), seed=int(cfg.get("seed", 0)))
    return 0


_TRAIN_KEYS = {
    "epochs", "batch", "lr", "val_fraction", "augment", "translation", "seed",
    "window", "stride", "d_rest", "hidden_layers", "units", "rnn_units",
    "exponent", "emission_sigma",
}


def cmd_train_dynamics(args):
    cfg = _load_cfg(args, _TRAIN_KEYS, "train-dynamics")
    data = load_dataset(args.dataset)
    window = int(cfg.get("window", 50))
    stride = int(cfg.get("stride", cfg.get("window", 50) // 2 or 1))
    windows = cut_windows(data.locs, data.quats, data.controls, window, stride)
    tc = TrainConfig(
        epochs=int(cfg.get("epochs", 30)),
        batch=int(cfg.get("batch", 8)),
        lr=float(cfg.get("lr", 1e-3)),
        val_fraction=float(cfg.get("val_fraction", 0.2)),
        augment=bool(cfg.get("augment", True)),
        translation=float(cfg.get("translation", 3.0)),
        seed=int(cfg.get("seed", 0)),
        window=window, stride=stride,
        d_rest=int(cfg.get("d_rest", 8)),
        hidden_layers=int(cfg.get("hidden_layers", 5)),
        units=int(cfg.get("units", 64)),
        rnn_units=int(cfg.get("rnn_units", 64)),
        dt=data.dt,
        exponent=int(cfg.get("exponent", 2)),
        emission_sigma=float(cfg.get("emission_sigma", 0.1)))
    t0 = time.time()
    res = train_dynamics(windows, tc)
    print(f"trained {tc.epochs} epochs in {time.time() - t0:.1f}s")
    save_transition(args.out, res.model.transition)
    _result(model=args.out, windows=windows.batch, epochs=tc.epochs,
            best_val=float(res.best_val),
            final_train=float(res.train_trace[-1]) if res.train_trace else float("nan"))
    return 0


_SLAM_KEYS = {
    "tau", "delta", "max_depth", "pixels", "sigma_d", "grid_lo", "grid_hi",
    "voxel", "margin", "colour_layers", "colour_units", "chunk", "particles",
    "steps", "state_sigma", "exponent", "lr_states", "lr_map", "lr_colour",
    "seed", "transition", "model", "export_stride", "slice_height",
}


def cmd_slam(args):
    cfg = _load_cfg(args, _SLAM_KEYS, "slam")
    data = load_dataset(args.dataset)
    sc = SlamConfig(
        tau=float(cfg.get("tau", 0.0)),
        delta=float(cfg.get("delta", 0.1)),
        max_depth=float(cfg.get("max_depth", data.max_depth)),
        pixels_per_frame=int(cfg.get("pixels", 200)),
        sigma_d_init=float(cfg.get("sigma_d", 0.3)),
        grid_lo=get_tuple(cfg, "grid_lo", (-5.0, -5.0, 0.0), n=3),
        grid_hi=get_tuple(cfg, "grid_hi", (5.0, 5.0, 3.0), n=3),
        voxel_size=float(cfg.get("voxel", 0.1)),
        margin=float(cfg.get("margin", 0.5)),
        colour_layers=int(cfg.get("colour_layers", 5)),
        colour_units=int(cfg.get("colour_units", 256)),
        chunk_len=int(cfg.get("chunk", 5)),
        particles=int(cfg.get("particles", 50)),
        steps_per_frame=int(cfg.get("steps", 500)),
        state_sigma_init=float(cfg.get("state_sigma", 0.01)),
        exponent=int(cfg.get("exponent", 2)),
        seed=int(cfg.get("seed", 0)))
    for name, field in (("lr_states", "adam_states"), ("lr_map", "adam_occupancy"),
                        ("lr_colour", "adam_colour")):
        if name in cfg:
            getattr(sc, field).lr = float(cfg[name])
    transition = _transition_from(cfg, args, data.dt)
    eng = SlamEngine(data, sc, transition=transition)
    t0 = time.time()

    def progress(engine, frame):
        print(f"frame {frame + 1}/{data.n_frames} elbo {engine.trace[-1]:.1f} "
              f"({time.time() - t0:.0f}s)", flush=True)

    res = eng.run(progress=progress)
    os.makedirs(args.out, exist_ok=True)
    save_map(os.path.join(args.out, "map.vslm"), eng.grid, eng.colour)
    locs = res.mu[:, 0:3]
    quats = quat_normalize(res.mu[:, 3:7])
    rows = [[t, *loc, *q] for t, loc, q in zip(data.times, locs, quats)]
    write_csv(os.path.join(args.out, "poses_est.csv"),
              ["t", "x", "y", "z", "qw", "qx", "qy", "qz"], rows)
    write_csv(os.path.join(args.out, "trace.csv"), ["step", "elbo"],
              [[i, v] for i, v in enumerate(res.trace)])
    sig = np.exp(res.log_sigma)
    write_csv(os.path.join(args.out, "poses_sigma.csv"),
              ["t"] + [f"s{i}" for i in range(sig.shape[1])],
              [[t, *row] for t, row in zip(data.times, sig)])
    with open(os.path.join(args.out, "slam.cfg"), "w") as f:
        f.write(f"sigma_d={res.sigma_d!r}\ntau={sc.tau!r}\ndelta={sc.delta!r}\n"
                f"max_depth={sc.max_depth!r}\n")
    stride = int(cfg.get("export_stride", 4))
    if stride > 0 and data.has_frames:
        frames = (data.load_frame(i) for i in range(data.n_frames))
        export_pointcloud(os.path.join(args.out, "cloud.ply"), data.K, frames,
                          locs, quats, stride=stride, max_depth=sc.max_depth)
        h = float(cfg.get("slice_height", 1.5))
        export_slice(eng.grid, "z", h, "mean", os.path.join(args.out, "slice_mean"))
        export_slice(eng.grid, "z", h, "sigma", os.path.join(args.out, "slice_sigma"))
    tail = res.trace[-min(50, len(res.trace)):]
    _result(out=args.out, frames=data.n_frames, steps=len(res.trace),
            elbo_tail=float(np.mean(tail)), sigma_d=float(res.sigma_d))
    return 0


_PREDICT_KEYS = {"start", "steps", "sample", "seed", "sigma_d", "tau", "delta",
                 "frames", "exponent", "transition", "model"}


def cmd_predict(args):
    cfg = _load_cfg(args, _PREDICT_KEYS, "predict")
    data = load_dataset(args.dataset)
    grid, colour = load_map(args.map)
    transition = _transition_from(cfg, args, data.dt)
    start = int(cfg.get("start", 0))
    steps = int(cfg.get("steps", min(100, data.n_frames - start - 1)))
    if start + steps >= data.n_frames:
        raise ConfigError(f"start+steps {start + steps} beyond dataset "
                          f"of {data.n_frames} frames")
    z1 = np.zeros(transition.d_z)
    z1[0:3] = data.locs[start]
    z1[3:7] = data.quats[start]
    z1[7:10] = data.start_velocity if start == 0 else \
        (data.locs[start] - data.locs[start - 1]) / data.dt
    controls = data.controls[start:start + steps]
    rng = np.random.default_rng(int(cfg.get("seed", 0))) if cfg.get("sample", False) else None
    tau = float(cfg.get("tau", 0.0))
    delta = float(cfg.get("delta", 0.1))
    lattice = RayLattice.for_max_depth(delta, data.max_depth)
    want_frames = bool(cfg.get("frames", True))
    zs, frames = predict_rollout(
        transition, z1, controls, rng=rng,
        grid=grid if want_frames else None, colour=colour, K=data.K,
        lattice=lattice, tau=tau)
    os.makedirs(args.out, exist_ok=True)
    rows = [[data.times[start + i], *z[0:3], *quat_normalize(z[3:7])]
            for i, z in enumerate(zs)]
    write_csv(os.path.join(args.out, "poses_pred.csv"),
              ["t", "x", "y", "z", "qw", "qx", "qy", "qz"], rows)
    summary = {"out": args.out, "steps": steps}
    if frames is not None:
        sigma_d = float(cfg.get("sigma_d", 0.1))
        lls = []
        for i, (depth, rgb, _) in enumerate(frames):
            obs_d, obs_c = data.load_frame(start + i)
            lls.append(np.mean(emit_pixel(obs_d, obs_c, depth, rgb, sigma_d)))
            if i < 4:
                _write_pgm(os.path.join(args.out, f"pred_depth_{start + i:06d}.pgm"),
                           depth, comment=f"frame={start + i}")
                _write_ppm(os.path.join(args.out, f"pred_rgb_{start + i:06d}.ppm"), rgb)
        summary["pixel_loglik"] = float(np.mean(lls))
    err = np.linalg.norm(zs[:, 0:3] - data.locs[start:start + steps + 1], axis=1)
    summary["rollout_rmse"] = float(np.sqrt(np.mean(err ** 2)))
    _result(**summary)
    return 0


_EVALUATE_KEYS = {"align", "lengths"}


def cmd_evaluate(args):
    cfg = _load_cfg(args, _EVALUATE_KEYS, "evaluate")
    data = load_dataset(args.dataset)
    est = np.genfromtxt(os.path.join(args.result, "poses_est.csv"),
                        delimiter=",", skip_header=1)
    est_locs, est_quats = est[:, 1:4], est[:, 4:8]
    align = getattr(args, "align", None) or str(cfg.get("align", "none"))
    trans, rot = ate_rmse(est_locs, est_quats, data.locs, data.quats, align=align)
    lengths = get_tuple(cfg, "lengths", (5.0, 10.0, 20.0, 40.0))
    stats, skipped = segment_errors(est_locs, est_quats, data.locs, data.quats, lengths)
    for L in skipped:
        print(f"note: segment length {L} m exceeds the trajectory arc length, skipped")
    header = ["trans_rmse", "rot_rmse"]
    row = [trans, rot]
    for L, s in stats.items():
        for q in ("median", "q25", "q75"):
            header.append(f"seg_{L:g}_{q}")
            row.append(s[q])
    write_csv(os.path.join(args.result, "metrics.csv"), header, [row])
    summary = {"trans_rmse": trans, "rot_rmse": rot, "align": align}
    for L, s in stats.items():
        summary[f"seg_{L:g}"] = s["median"]
    _result(**summary)
    return 0


_COSTMAP_KEYS = {"height", "horizon", "n_rollouts", "cells", "library",
                 "seed", "exponent", "transition", "model", "margin", "tau"}


def cmd_cost_map(args):
    cfg = _load_cfg(args, _COSTMAP_KEYS, "cost-map")
    data = load_dataset(args.dataset)
    grid, _ = load_map(args.map)
    transition = _transition_from(cfg, args, data.dt)
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    horizon = int(cfg.get("horizon", 40))
    library = control_library(data.controls, horizon,
                              int(cfg.get("library", 64)), rng)
    margin = float(cfg.get("margin", 0.0))
    cells = int(cfg.get("cells", 40))
    lo = grid.origin + margin
    hi = grid.origin + grid.dims * grid.voxel_size - margin
    xs = np.linspace(lo[0], hi[0], cells)
    ys = np.linspace(lo[1], hi[1], cells)
    field = cost_to_go(grid, transition, library, xs, ys,
                       float(cfg.get("height", 1.5)),
                       tau=float(cfg.get("tau", 0.0)),
                       n_rollouts=int(cfg.get("n_rollouts", 20)), rng=rng)
    _write_pgm(args.out + ".pgm", field, comment="cost-to-go")
    with open(args.out + ".csv", "w") as f:
        f.write("x," + ",".join(repr(float(y)) for y in ys) + "\n")
        for x, row in zip(xs, field):
            f.write(repr(float(x)) + ","
                    + ",".join(repr(float(v)) for v in row) + "\n")
    _result(out=args.out, cells=cells, horizon=horizon,
            cost_min=float(field.min()), cost_median=float(np.median(field)),
            cost_max=float(field.max()))
    return 0


_RENDER_KEYS = {"frame", "pose", "tau", "delta", "pixels"}


def cmd_render(args):
    cfg = _load_cfg(args, _RENDER_KEYS, "render")
    data = load_dataset(args.dataset)
    grid, colour = load_map(args.map)
    if "pose" in cfg:
        pose = get_tuple(cfg, "pose", None, n=7)
        loc, quat = np.asarray(pose[0:3]), quat_normalize(np.asarray(pose[3:7]))
    else:
        i = int(cfg.get("frame", 0))
        loc, quat = data.locs[i], data.quats[i]
    delta = float(cfg.get("delta", 0.1))
    lattice = RayLattice.for_max_depth(delta, data.max_depth)
    depth, rgb, hit = render_frame(grid, colour, data.K, quat, loc, lattice,
                                   float(cfg.get("tau", 0.0)))
    _write_pgm(args.out + "_depth.pgm", depth, comment="rendered depth")
    _write_ppm(args.out + "_rgb.ppm", rgb)
    _result(out=args.out, median_depth=float(np.median(depth)),
            hit_fraction=float(hit.mean()))
    return 0


def cmd_gradcheck(args):
    from .autodiff import Tape, finite_difference_check
    from .geometry import t_quat_rotate
    from .transition import LearnedTransition
    from .world_map import ColourField, OccupancyGrid, map_kl_tape, trilinear_tape

    rng = np.random.default_rng(0)
    errs = {}

    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))

    def composite(tape, tx, tw):
        y = (tx @ tw).tanh().exp()
        return (y * y).sum()

    errs["tensor_ops"] = finite_difference_check(composite, [x, w], rng=rng)

    tr = LearnedTransition.create(d_rest=2, hidden_layers=2, units=8,
                                  rng=np.random.default_rng(1))
    z = rng.normal(size=(3, tr.d_z))
    z[:, 3:7] = quat_normalize(z[:, 3:7])
    u = rng.normal(size=6)

    def trans(tape, *leaves):
        nm = len(tr.params_mu)
        mu, sigma = tr.mean_sigma_tape(tape, list(leaves[:nm]), list(leaves[nm:]),
                                       tape.constant(z), u)
        return (mu * mu).sum() + sigma.log().sum()

    errs["transition"] = finite_difference_check(
        trans, list(tr.params_mu) + list(tr.params_sigma), samples=60, rng=rng)

    grid = OccupancyGrid.for_bounds((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.5, 0.5)
    grid.mu[:] = rng.normal(size=grid.dims)
    pts = rng.uniform(0.2, 1.8, size=(1, 20, 3))

    def tri(tape, mu):
        return trilinear_tape(tape, mu, grid, tape.constant(pts)).square().sum()

    errs["trilinear"] = finite_difference_check(tri, [grid.mu], samples=60, rng=rng)

    colour = ColourField.create(2, 8, np.random.default_rng(2))

    def col(tape, *leaves):
        return colour.eval_tape(tape, list(leaves), tape.constant(pts)).sum()

    errs["colour"] = finite_difference_check(col, colour.params, samples=60, rng=rng)

    vecs = rng.normal(size=(5, 3))

    def rot(tape, q):
        rotated = t_quat_rotate(q, tape.constant(vecs))
        return (rotated * rotated).sum()

    errs["quaternion"] = finite_difference_check(rot, [quat_normalize(rng.normal(size=(5, 4)))], rng=rng)

    worst = max(errs.values())
    for name, e in sorted(errs.items()):
        print(f"{name}: {e:.3e}")
    _result(max_err=float(worst), passed=bool(worst <= 1e-4))
    return 0 if worst <= 1e-4 else 1


def main(argv=None):
    p = argparse.ArgumentParser(prog="voxslam", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, out=True, map_=False, result=False, model=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key")
        if dataset:
            sp.add_argument("--dataset", required=True)
        if map_:
            sp.add_argument("--map", required=True)
        if result:
            sp.add_argument("--result", required=True)
        if model:
            sp.add_argument("--transition", choices=["engineered", "learned"])
            sp.add_argument("--model", help="learned transition checkpoint")
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic RGB-D + IMU dataset")
    common(sp)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("train-dynamics", help="fit the learned transition")
    common(sp, dataset=True)
    sp.set_defaults(fn=cmd_train_dynamics)

    sp = sub.add_parser("slam", help="run variational localisation and mapping")
    common(sp, dataset=True, model=True)
    sp.set_defaults(fn=cmd_slam)

    sp = sub.add_parser("predict", help="open-loop rollout and generative rendering")
    common(sp, dataset=True, map_=True, model=True)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("evaluate", help="trajectory metrics against ground truth")
    common(sp, dataset=True, out=False, result=True)
    sp.add_argument("--align", choices=["none", "rigid"])
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("cost-map", help="collision cost-to-go over a map slice")
    common(sp, dataset=True, map_=True, model=True)
    sp.set_defaults(fn=cmd_cost_map)

    sp = sub.add_parser("render", help="render one frame from an inferred map")
    common(sp, dataset=True, map_=True)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("gradcheck", help="finite-difference check suite")
    sp.add_argument("--config", help="unused, accepted for uniformity")
    sp.add_argument("--set", action="append")
    sp.set_defaults(fn=cmd_gradcheck)

    args = p.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
