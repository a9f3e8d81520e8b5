"""Trajectory evaluation: absolute RMSE and per-segment relative errors."""

import numpy as np

from .geometry import quat_from_matrix, quat_mul, quat_normalize, quat_to_matrix


def rigid_align(est_locs, gt_locs):
    """Closed-form rotation + translation (no scale) minimising point RMSE.

    Returns (R, t) with R @ est + t best matching gt.
    """
    est_locs = np.asarray(est_locs, dtype=np.float64)
    gt_locs = np.asarray(gt_locs, dtype=np.float64)
    mu_e = est_locs.mean(axis=0)
    mu_g = gt_locs.mean(axis=0)
    H = (est_locs - mu_e).T @ (gt_locs - mu_g)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_g - R @ mu_e


def rotation_angle(q_a, q_b):
    # |dot| handles the q ~ -q double cover
    q_a = quat_normalize(q_a)
    q_b = quat_normalize(q_b)
    dot = np.abs(np.sum(q_a * q_b, axis=-1))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


def ate_rmse(est_locs, est_quats, gt_locs, gt_quats, align="none"):
    """Absolute trajectory error: (translational RMSE m, rotational RMSE rad).

    align="rigid" first applies the closed-form rigid fit of the estimated
    positions onto the ground truth (orientations rotated along).
    """
    est_locs = np.asarray(est_locs, dtype=np.float64)
    gt_locs = np.asarray(gt_locs, dtype=np.float64)
    est_quats = np.asarray(est_quats, dtype=np.float64)
    gt_quats = np.asarray(gt_quats, dtype=np.float64)
    if est_locs.shape != gt_locs.shape or est_quats.shape != gt_quats.shape:
        raise ValueError(
            f"trajectory length mismatch: estimate {est_locs.shape[0]}, "
            f"truth {gt_locs.shape[0]}")
    if align == "rigid":
        R, t = rigid_align(est_locs, gt_locs)
        est_locs = est_locs @ R.T + t
        q_r = quat_from_matrix(R)
        est_quats = quat_mul(q_r, est_quats)
    elif align != "none":
        raise ValueError(f"unknown alignment '{align}', expected none or rigid")
    trans = np.sqrt(np.mean(np.sum((est_locs - gt_locs) ** 2, axis=-1)))
    rot = np.sqrt(np.mean(rotation_angle(est_quats, gt_quats) ** 2))
    return float(trans), float(rot)


def segment_errors(est_locs, est_quats, gt_locs, gt_quats,
                   lengths=(5.0, 10.0, 20.0, 40.0)):
    """Relative error over segments of given arc lengths, per metre travelled.

    For every start index the first frame at least L metres further along the
    ground-truth path closes a segment; the segment's relative translation is
    expressed in the local start frame for estimate and truth, and the error
    is their distance divided by the distance travelled. Returns
    (stats, skipped): stats maps length -> dict(median, q25, q75, count),
    skipped lists lengths exceeding the trajectory's arc length.
    """
    est_locs = np.asarray(est_locs, dtype=np.float64)
    gt_locs = np.asarray(gt_locs, dtype=np.float64)
    if est_locs.shape != gt_locs.shape:
        raise ValueError("trajectory length mismatch")
    steps = np.linalg.norm(np.diff(gt_locs, axis=0), axis=-1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    rot_est = quat_to_matrix(quat_normalize(np.asarray(est_quats, dtype=np.float64)))
    rot_gt = quat_to_matrix(quat_normalize(np.asarray(gt_quats, dtype=np.float64)))

    stats = {}
    skipped = []
    for L in lengths:
        errs = []
        ends = np.searchsorted(arc, arc + L)
        for i, j in enumerate(ends):
            if j >= len(arc):
                break
            dist = arc[j] - arc[i]
            if dist <= 0.0:
                continue
            rel_gt = rot_gt[i].T @ (gt_locs[j] - gt_locs[i])
            rel_est = rot_est[i].T @ (est_locs[j] - est_locs[i])
            errs.append(np.linalg.norm(rel_est - rel_gt) / dist)
        if not errs:
            skipped.append(L)
            continue
        errs = np.asarray(errs)
        stats[L] = {"median": float(np.median(errs)),
                    "q25": float(np.percentile(errs, 25)),
                    "q75": float(np.percentile(errs, 75)),
                    "count": int(len(errs))}
    return stats, skipped
