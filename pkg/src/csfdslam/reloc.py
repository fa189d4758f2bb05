"""Camera relocalization by matching a query TSDF against a reference volume.

The query depth is fused at a candidate pose onto the reference grid and
the squared per-voxel TSDF differences are summed over voxels both volumes
observe.  Poses are updated as ``exp(dxi) * T`` so every twist seed acts
at the current estimate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import csfd as C
from .frames import DepthFrame, Intrinsics
from .se3 import PoseSE3, compose, exp_map, rotation_error_deg, translation_error
from .tsdf import TsdfVolume, fuse_values, select_band, surface_update

log = logging.getLogger(__name__)

OUTLIER_DISTANCE = 0.1


class NoOverlap(RuntimeError):
    pass


@dataclass
class RelocConfig:
    max_iter: int = 50
    tol: float = 1e-6
    eta_ratio: float = 0.5
    eta: float | None = None  # absolute switch level, overrides the ratio
    h: float = C.DEFAULT_H
    n_reference: int = 10
    c1: float = 1e-4
    max_backtrack: int = 40
    taper: float = 0.5


@dataclass
class RelocProblem:
    reference: TsdfVolume
    query: DepthFrame
    intrinsics: Intrinsics
    initial: PoseSE3
    config: RelocConfig = field(default_factory=RelocConfig)

    def __post_init__(self):
        self._obs = np.nonzero(self.reference.W > 0)[0]
        if self._obs.size == 0:
            raise ValueError("reference volume is empty")
        self._centers = self.reference.centers(self._obs)
        self._Fr = self.reference.F_real()[self._obs]
        self._cache = (None, None)

    def selection(self, pose: PoseSE3):
        """Band selection at the real part of ``pose``, cached for repeated passes."""
        key = pose.real().matrix().tobytes()
        if self._cache[0] != key:
            sel = select_band(self._centers, pose, self.query, self.intrinsics, self.reference.mu)
            self._cache = (key, sel)
        return self._cache[1]


@dataclass
class RelocResult:
    pose: PoseSE3
    method: str
    trace: list
    converged: bool
    iterations: int

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])


def build_reference(frames: list, k: Intrinsics, dims=(64, 64, 64), voxel_size: float = 0.04,
                    origin=None, mu: float | None = None) -> TsdfVolume:
    """Fuse ``(DepthFrame, PoseSE3)`` pairs into a fresh volume."""
    if not frames:
        raise ValueError("no reference frames selected")
    vol = TsdfVolume.empty(dims, voxel_size, origin, mu)
    for frame, pose in frames:
        vol = surface_update(vol, pose, frame, k)
    return vol


def nearest_frames(poses: list, initial: PoseSE3, count: int = 10) -> np.ndarray:
    """Indices of the ``count`` poses whose centers are nearest ``initial``."""
    centers = np.array([p.center() for p in poses])
    d = np.linalg.norm(centers - initial.center(), axis=1)
    return np.argsort(d, kind="stable")[:count]


def band_weight(eta, mu: float, taper: float):
    """``C^1`` ramp from 0 at ``eta = -mu`` to 1 at ``eta = -mu + taper * mu``."""
    if taper <= 0:
        return 1.0
    s = C.clip((eta + mu) / (taper * mu), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def reloc_energy(pose: PoseSE3, problem: RelocProblem):
    """Sum of ``(F_r - F_q)^2`` over voxels observed by both volumes.

    Residuals fade out over the last part of the truncation band behind the
    query surface, so voxels entering or leaving the band do not make the
    energy jump.
    """
    vol = problem.reference
    mu = vol.mu
    idx, Fq = fuse_values(problem._centers, pose, problem.query, problem.intrinsics, mu,
                          selection=problem.selection(pose))
    if idx.size == 0:
        raise NoOverlap("query and reference volumes share no observed voxel")
    r = problem._Fr[idx] - Fq
    taper = problem.config.taper
    if taper > 0:
        # Fq = eta / mu inside the band, so the weight follows from Fq directly
        w = band_weight(Fq * mu, mu, taper)
        return C.asum(w * r * r)
    return C.asum(r * r)


def _energy_of(problem, T):
    return lambda xi: reloc_energy(compose(exp_map(xi), T), problem)


def _errors(pose, truth):
    if truth is None:
        return float("nan"), float("nan")
    return translation_error(pose, truth), rotation_error_deg(pose, truth)


def choose_direction(g, H, loss, eta):
    """Gradient direction above ``eta``, Newton direction below it when usable."""
    if H is None or loss > eta:
        return -g, "gd"
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return -g, "gd"
    return -np.linalg.solve(H, g), "newton"


def _line_search(f, loss, g, d, kind, alpha_gd, cfg):
    """Armijo backtracking; Newton steps start at 1, gradient steps adaptively."""
    slope = float(g @ d)
    if kind == "newton":
        alpha = 1.0
    else:
        alpha = 2.0 * alpha_gd if alpha_gd else 0.01 / max(np.linalg.norm(g), 1e-12)
    for _ in range(cfg.max_backtrack):
        try:
            fn = float(f(alpha * d))
        except NoOverlap:
            fn = np.inf
        if fn <= loss + cfg.c1 * alpha * slope:
            return alpha, True
        alpha *= 0.5
    return 0.0, False


def optimize(problem: RelocProblem, method: str = "newton", truth: PoseSE3 | None = None) -> RelocResult:
    """Backtracking descent on the pose, Newton steps gated by the loss level."""
    if method not in ("gd", "newton"):
        raise ValueError(f"unknown relocalization method {method!r}")
    cfg = problem.config
    T = problem.initial
    trace = []
    eta = None
    alpha_gd = None
    converged = False
    it = 0
    for it in range(cfg.max_iter + 1):
        f = _energy_of(problem, T)
        loss, g = C.gradient(f, np.zeros(6), cfg.h)
        if eta is None:
            eta = cfg.eta if cfg.eta is not None else cfg.eta_ratio * loss
        H = None
        if method == "newton" and loss <= eta:
            _, _, H = C.hessian(f, np.zeros(6), cfg.h)
        trace.append((it, loss, float(np.linalg.norm(g)), *_errors(T, truth)))
        if it == cfg.max_iter:
            break
        if not np.any(g):
            converged = True
            break
        d, kind = choose_direction(g, H, loss, eta)
        alpha, ok = _line_search(f, loss, g, d, kind, alpha_gd, cfg)
        if not ok and method == "newton":
            # the other direction may still descend where this one stalls
            if H is None:
                _, _, H = C.hessian(f, np.zeros(6), cfg.h)
            alt = choose_direction(g, H, -np.inf, eta) if kind == "gd" else (-g, "gd")
            if alt[1] != kind:
                d, kind = alt
                alpha, ok = _line_search(f, loss, g, d, kind, alpha_gd, cfg)
        if not ok:
            converged = True  # no descent left
            break
        if kind == "gd":
            alpha_gd = alpha
        step = alpha * d
        T = compose(exp_map(step), T)
        if np.linalg.norm(step) < cfg.tol:
            converged = True
            it += 1
            loss = float(reloc_energy(T, problem))
            trace.append((it, loss, float("nan"), *_errors(T, truth)))
            break
    return RelocResult(T, method, trace, converged, it)


@dataclass
class NnError:
    error: float
    outlier: bool


def eval_nn_error(pose: PoseSE3, query_cloud, reference_cloud,
                  threshold: float = OUTLIER_DISTANCE) -> NnError:
    """Mean nearest-neighbor distance of the posed query cloud to the reference."""
    q = np.asarray(query_cloud, dtype=float).reshape(-1, 3)
    ref = np.asarray(reference_cloud, dtype=float).reshape(-1, 3)
    if q.shape[0] == 0 or ref.shape[0] == 0:
        raise ValueError("empty point cloud")
    p = q @ np.asarray(C.real(pose.R)).T + np.asarray(C.real(pose.t))
    dist, _ = cKDTree(ref).query(p)
    e = float(np.mean(dist))
    return NnError(e, e > threshold)
