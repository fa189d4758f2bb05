"""Trajectory alignment and absolute trajectory error."""
from __future__ import annotations

import numpy as np

from .dataset import Trajectory

MAX_DT = 0.02


def match_timestamps(t_a, t_b, max_dt: float = MAX_DT):
    """Greedy one-to-one pairing of the closest timestamps within ``max_dt``."""
    t_a = np.asarray(t_a, dtype=float)
    t_b = np.asarray(t_b, dtype=float)
    if t_a.size == 0 or t_b.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    j = np.clip(np.searchsorted(t_b, t_a), 1, max(t_b.size - 1, 1))
    cand = np.stack([j - 1, np.minimum(j, t_b.size - 1)], axis=1)
    d = np.abs(t_b[cand] - t_a[:, None])
    pick = cand[np.arange(t_a.size), np.argmin(d, axis=1)]
    dist = np.abs(t_b[pick] - t_a)
    order = np.argsort(dist, kind="stable")
    used = set()
    ia, ib = [], []
    for i in order:
        if dist[i] > max_dt or pick[i] in used:
            continue
        used.add(int(pick[i]))
        ia.append(i)
        ib.append(int(pick[i]))
    ia = np.array(ia, dtype=int)
    ib = np.array(ib, dtype=int)
    srt = np.argsort(ia)
    return ia[srt], ib[srt]


def umeyama(src, dst, with_scale: bool = False):
    """``(R, t, s)`` minimizing ``sum |dst - (s R src + t)|^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = 1.0
    if with_scale:
        var = np.mean(np.sum(xs * xs, axis=1))
        s = float(np.trace(np.diag(S) @ D) / var)
    t = mu_d - s * R @ mu_s
    return R, t, s


def ate(estimate: Trajectory, truth: Trajectory, max_dt: float = MAX_DT) -> dict:
    """Rigidly aligned translational error statistics (meters)."""
    ia, ib = match_timestamps(estimate.timestamps, truth.timestamps, max_dt)
    if ia.size < 3:
        raise ValueError(f"only {ia.size} poses matched within {max_dt} s; need at least 3")
    est = estimate.positions()[ia]
    gt = truth.positions()[ib]
    R, t, _ = umeyama(est, gt)
    err = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "mean": float(np.mean(err)),
        "median": float(np.median(err)),
        "max": float(np.max(err)),
        "matched": int(ia.size),
        "errors": err,
    }
