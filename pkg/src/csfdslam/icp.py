"""Projective point-to-plane ICP with linearized, first-order and Newton solvers.

Every twist-based solver parameterizes the pose as ``T(xi) = base * exp(xi)``
with ``base`` the previous frame pose and ``xi`` starting at zero.  The
energy is the sum of squared point-to-plane distances; its gradient comes
from six complex passes and its Hessian from 21 bicomplex passes, with the
correspondences frozen while derivatives are taken.
"""
from __future__ import annotations

import csv
import warnings
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search, minimize_scalar

from . import csfd as C
from .frames import GeometryMaps, Intrinsics, Pyramid, continuous_sample
from .se3 import (PoseSE3, compose, exp_map, inverse, log_map, project_rotation,
                  rotation_error_deg, skew, translation_error)
from .tsdf import SurfacePrediction

log = logging.getLogger(__name__)

OPTIMIZERS = ("linearized", "gd", "ncg", "newton")
TRACE_COLUMNS = ("iteration", "loss", "grad_norm", "translation_error", "rotation_error")


class DegenerateAssociation(RuntimeError):
    """Too few correspondences survived rejection."""


class IllConditioned(RuntimeError):
    pass


class TrackingLost(RuntimeError):
    pass


@dataclass
class IcpConfig:
    optimizer: str = "newton"
    iterations: tuple = (10, 5, 4)  # coarse to fine
    max_iter: int = 30
    dist_thresh: float = 0.1
    angle_thresh_deg: float = 30.0
    tol: float = 1e-6
    loss_tol: float = 0.0
    h: float = C.DEFAULT_H
    exact_line_search: bool = False
    restart: int = 6
    diverge_after: int = 5
    min_corr: int = 6

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; pick one of {OPTIMIZERS}")


@dataclass
class Correspondences:
    """Matched source pixels, frozen for one solver iteration.

    ``src_vertex`` is in the source camera frame; target vertices and normals
    are global.  ``base`` is the pose the twist is measured from.
    """

    src_pixel: np.ndarray
    uhat: np.ndarray
    src_vertex: np.ndarray
    tgt_vertex: np.ndarray
    tgt_normal: np.ndarray
    base: PoseSE3

    def __len__(self):
        return self.src_pixel.shape[0]

    def residuals(self, pose: PoseSE3):
        p = self.src_vertex @ pose.R.T + pose.t
        return C.dot(p - self.tgt_vertex, self.tgt_normal)


@dataclass
class IcpResult:
    pose: PoseSE3
    loss: float
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    xi: np.ndarray | None = None

    def iterations_to(self, loss: float) -> int | None:
        """First iteration whose recorded loss is at or below ``loss``."""
        for row in self.trace:
            if row[1] <= loss:
                return int(row[0])
        return None


def associate(pose: PoseSE3, source: GeometryMaps, target: SurfacePrediction,
              target_pose: PoseSE3, k: Intrinsics, dist_thresh: float = 0.1,
              angle_thresh_deg: float = 30.0, min_corr: int = 6,
              base: PoseSE3 | None = None) -> Correspondences:
    """Projective association of every valid source pixel.

    The source vertex is moved by ``pose``, projected into the target camera
    and the target maps are sampled bilinearly at the (real) pixel position.
    The normal test ignores orientation, since predicted and measured
    normals follow opposite conventions.
    """
    pose = pose.real()
    V = np.asarray(C.real(source.V))
    N = np.asarray(C.real(source.N))
    ys, xs = np.nonzero(source.valid)
    v = V[ys, xs]
    p = v @ pose.R.T + pose.t
    q = (p - target_pose.t) @ np.asarray(target_pose.R)
    z = q[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    uv = np.stack([q[:, 0] / zs * k.fx + k.cx, q[:, 1] / zs * k.fy + k.cy], axis=-1)
    Vg, ok = continuous_sample(np.asarray(C.real(target.V)), uv, target.valid)
    Ng, _ = continuous_sample(np.asarray(C.real(target.N)), uv, target.valid)
    ok &= front
    nn = np.linalg.norm(Ng, axis=-1)
    ok &= nn > 1e-9
    Ng = Ng / np.where(ok, nn, 1.0)[:, None]
    ok &= np.linalg.norm(p - Vg, axis=-1) <= dist_thresh
    n_src = N[ys, xs] @ pose.R.T
    cosang = np.abs(np.sum(n_src * Ng, axis=-1))
    ok &= cosang >= np.cos(np.radians(angle_thresh_deg))
    if ok.sum() < min_corr:
        raise DegenerateAssociation(f"only {int(ok.sum())} correspondences")
    return Correspondences(np.stack([xs[ok], ys[ok]], axis=-1), uv[ok], v[ok], Vg[ok], Ng[ok],
                           base)


def _with_base(corr: Correspondences, base: PoseSE3) -> Correspondences:
    corr.base = base
    return corr


def icp_energy(xi, corr: Correspondences):
    """Sum of squared point-to-plane distances at ``base * exp(xi)``."""
    r = corr.residuals(compose(corr.base, exp_map(xi)))
    return C.asum(r * r)


def pose_of(base: PoseSE3, xi) -> PoseSE3:
    return compose(base, exp_map(np.asarray(xi, dtype=float)))


# ---------------------------------------------------------------------------
# linearized baseline
# ---------------------------------------------------------------------------

def linear_system(corr: Correspondences):
    """Normal equations of the small-angle model about ``corr.base``.

    The model maps a base-frame point ``q`` to ``(I + [w]) q + t``; the
    unknown is ``x = (w, t)``.
    """
    q = corr.src_vertex @ corr.base.R.T + corr.base.t
    n = corr.tgt_normal
    A = np.concatenate([np.cross(q, n), n], axis=1)
    b = -np.sum((q - corr.tgt_vertex) * n, axis=1)
    return A.T @ A, A.T @ b


def solve_linearized(corr: Correspondences, max_cond: float = 1e12) -> np.ndarray:
    """Least-squares ``x = (w, t)`` of the small-angle model."""
    AtA, Atb = linear_system(corr)
    cond = np.linalg.cond(AtA)
    if not np.isfinite(cond) or cond > max_cond:
        raise IllConditioned(f"normal equations have condition number {cond:.3g}")
    return np.linalg.solve(AtA, Atb)


def linearized_pose(base: PoseSE3, x) -> PoseSE3:
    """Pose given by the small-angle parameters ``x`` applied on top of ``base``."""
    x = np.asarray(x, dtype=float)
    dR = project_rotation(np.eye(3) + skew(x[:3]))
    return compose(PoseSE3(dR, x[3:].copy()), base)


# ---------------------------------------------------------------------------
# twist solvers
# ---------------------------------------------------------------------------

def _errors(pose, truth):
    if truth is None:
        return float("nan"), float("nan")
    return translation_error(pose, truth), rotation_error_deg(pose, truth)


def _corr_source(corr_or_fn, base):
    if callable(corr_or_fn):
        return lambda xi: _with_base(corr_or_fn(pose_of(base, xi)), base)
    frozen = corr_or_fn
    if frozen.base is None:
        frozen.base = base
    return lambda xi: frozen


def _backtrack(f, x, fx, g, d, alpha, c1=1e-4, shrink=0.5, max_steps=60):
    slope = float(g @ d)
    for _ in range(max_steps):
        xn = x + alpha * d
        fn = f(xn)
        if fn <= fx + c1 * alpha * slope:
            return alpha, fn
        alpha *= shrink
    return 0.0, fx


def _exact_step(f, x, d, alpha0):
    res = minimize_scalar(lambda a: f(x + a * d), bracket=(0.0, alpha0))
    return float(res.x), float(res.fun)


def _newton_step(f, x, fx, g, H, state, cfg):
    lam = state.get("lambda", 1e-6)
    I6 = np.eye(6)
    for _ in range(25):
        try:
            L = np.linalg.cholesky(H + lam * I6)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        fn = f(x + step)
        if fn <= fx:
            state["lambda"] = max(lam / 10.0, 1e-12)
            return step, fn
        lam *= 10.0
    state["lambda"] = lam
    d = -g
    a, fn = _backtrack(f, x, fx, g, d, 1.0 / max(np.linalg.norm(g), 1e-12))
    return a * d, fn


def solve(corr, xi0, cfg: IcpConfig, method: str | None = None, base: PoseSE3 | None = None,
          truth: PoseSE3 | None = None, max_iter: int | None = None) -> IcpResult:
    """Minimize the ICP energy over the twist with a gradient-based method.

    ``corr`` is a frozen :class:`Correspondences` or a callable mapping a
    pose to fresh correspondences (re-association every iteration).
    """
    method = method or cfg.optimizer
    if method not in ("gd", "ncg", "newton"):
        raise ValueError(f"twist solver cannot run {method!r}")
    if base is None:
        base = corr.base if isinstance(corr, Correspondences) and corr.base is not None \
            else PoseSE3.identity()
    get = _corr_source(corr, base)
    max_iter = cfg.max_iter if max_iter is None else max_iter
    h = cfg.h
    xi = np.asarray(xi0, dtype=float).copy()
    trace = []
    state: dict = {}
    g_prev = d_prev = None
    alpha_prev = None
    rises = 0
    last_loss = np.inf
    converged = False
    it = 0
    loss = np.nan
    for it in range(max_iter + 1):
        cur = get(xi)

        def f(x, cur=cur):
            return float(icp_energy(np.asarray(x, dtype=float), cur))

        if method == "newton":
            loss, g, H = C.hessian(lambda z, cur=cur: icp_energy(z, cur), xi, h)
        else:
            loss, g = C.gradient(lambda z, cur=cur: icp_energy(z, cur), xi, h)
        pose = pose_of(base, xi)
        trace.append((it, loss, float(np.linalg.norm(g)), *_errors(pose, truth)))
        if loss <= cfg.loss_tol or not np.any(g):
            converged = True
            break
        rises = rises + 1 if loss > last_loss else 0
        last_loss = loss
        if rises >= cfg.diverge_after:
            log.warning("ICP diverging after %d iterations", it)
            break
        if it == max_iter:
            break
        if method == "newton":
            step, _ = _newton_step(f, xi, loss, g, H, state, cfg)
        else:
            if method == "ncg" and g_prev is not None and it % cfg.restart != 0:
                beta = max(0.0, float(g @ (g - g_prev)) / float(g_prev @ g_prev))
                d = -g + beta * d_prev
                if g @ d >= 0:
                    d = -g
            else:
                d = -g
            a0 = 1.0 / max(np.linalg.norm(d), 1e-12) if alpha_prev is None else 2.0 * alpha_prev
            if cfg.exact_line_search:
                a, _ = _exact_step(f, xi, d, a0)
            elif method == "ncg":
                def grad(x, cur=cur):
                    return C.gradient(lambda z: icp_energy(z, cur), x, h)[1]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    a = line_search(f, grad, xi, d, gfk=g, old_fval=loss, c2=0.1)[0]
                if a is None or f(xi + a * d) > loss:
                    a, _ = _backtrack(f, xi, loss, g, d, a0)
            else:
                a, _ = _backtrack(f, xi, loss, g, d, a0)
            if a > 0:
                alpha_prev = a
            step = a * d
            g_prev, d_prev = g, d
        xi = xi + step
        if np.linalg.norm(step) < cfg.tol:
            converged = True
            cur = get(xi)
            loss = float(icp_energy(xi, cur))
            trace.append((it + 1, loss, float("nan"), *_errors(pose_of(base, xi), truth)))
            it += 1
            break
    return IcpResult(pose_of(base, xi), float(loss), trace, converged, it, xi)


def solve_newton(corr, xi0, cfg: IcpConfig, **kw) -> IcpResult:
    return solve(corr, xi0, cfg, "newton", **kw)


def solve_first_order(corr, xi0, cfg: IcpConfig, method: str = "gd", **kw) -> IcpResult:
    if method not in ("gd", "ncg"):
        raise ValueError(f"first-order method must be gd or ncg, not {method!r}")
    return solve(corr, xi0, cfg, method, **kw)


def solve_linearized_iterative(assoc: Callable, base: PoseSE3, cfg: IcpConfig,
                               start: PoseSE3 | None = None, truth=None,
                               max_iter: int | None = None) -> IcpResult:
    """Repeat association and the small-angle solve, always about ``base``."""
    pose = base if start is None else start
    max_iter = cfg.max_iter if max_iter is None else max_iter
    trace = []
    x_prev = None
    converged = False
    loss = np.nan
    it = 0
    for it in range(max_iter):
        corr = _with_base(assoc(pose), base)
        r = corr.residuals(pose)
        loss = float(r @ r)
        trace.append((it, loss, float("nan"), *_errors(pose, truth)))
        x = solve_linearized(corr)
        pose = linearized_pose(base, x)
        if x_prev is not None and np.linalg.norm(x - x_prev) < cfg.tol:
            converged = True
            it += 1
            break
        x_prev = x
    return IcpResult(pose, loss, trace, converged, it)


# ---------------------------------------------------------------------------
# multi-level tracking
# ---------------------------------------------------------------------------

def track_frame(prediction: SurfacePrediction, pyramid: Pyramid, prev_pose: PoseSE3,
                cfg: IcpConfig, truth: PoseSE3 | None = None) -> IcpResult:
    """Coarse-to-fine registration of ``pyramid`` against a model prediction.

    ``prediction`` is rendered at full resolution from ``prev_pose``;
    coarser targets are strided subsamples of it.
    """
    k0 = pyramid[0].intrinsics
    pose = prev_pose
    trace = []
    ran = False
    result = None
    n_levels = len(pyramid)
    iters = tuple(cfg.iterations)[-n_levels:] if len(cfg.iterations) >= n_levels \
        else tuple(cfg.iterations) + (cfg.iterations[-1],) * (n_levels - len(cfg.iterations))
    for level in reversed(range(n_levels)):
        lvl = pyramid[level]
        target = prediction.subsample(level)
        k = k0.scaled(level)

        def assoc(T, lvl=lvl, target=target, k=k):
            return associate(T, lvl.maps, target, prev_pose, k, cfg.dist_thresh,
                             cfg.angle_thresh_deg, cfg.min_corr)

        n_iter = iters[n_levels - 1 - level]
        try:
            if cfg.optimizer == "linearized":
                result = solve_linearized_iterative(assoc, prev_pose, cfg, start=pose,
                                                    truth=truth, max_iter=n_iter)
            else:
                xi0 = log_map(compose(inverse(prev_pose), pose))
                result = solve(assoc, xi0, cfg, base=prev_pose, truth=truth, max_iter=n_iter)
        except (DegenerateAssociation, IllConditioned) as exc:
            log.debug("level %d skipped: %s", level, exc)
            continue
        ran = True
        pose = result.pose
        offset = len(trace)
        trace.extend((offset + r[0], *r[1:]) for r in result.trace)
    if not ran:
        raise TrackingLost("no pyramid level produced a usable association")
    return IcpResult(pose, result.loss, trace, result.converged, len(trace), None)


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
