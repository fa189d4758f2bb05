"""Chaining a downstream score through the surfel map to the camera pose.

A score maps a point set ``P`` (n x 3) to a scalar and reports ``dS/dp``
per point.  A frame fused at a pose whose twist component ``i`` carries an
imaginary seed leaves ``dp/dxi_i`` in the surfel positions, so

    dS/dxi_i = sum_p  dS/dp . dp/dxi_i

needs one seeded fusion pass per component and one score evaluation.
"""
from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import csfd as C
from .frames import GeometryMaps, Intrinsics
from .se3 import PoseSE3, compose, exp_map, seeded_twist
from .surfel import SurfelMap, fuse

PROTOCOL_HEADER = "csfdslam-score 1"
VALIDATION_RTOL = 1e-5


class MissingSeedError(ValueError):
    pass


class ScoreValidationError(ValueError):
    pass


class ScoreProtocolError(RuntimeError):
    pass


def _fd_point_gradient(fn, P, step):
    g = np.empty_like(P)
    for idx in np.ndindex(*P.shape):
        hi = P.copy()
        lo = P.copy()
        hi[idx] += step
        lo[idx] -= step
        g[idx] = (fn(hi)[0] - fn(lo)[0]) / (2.0 * step)
    return g


def _probe_points(seed: int = 0, n: int = 8):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, size=(n, 3)) + np.array([0.0, 0.0, 1.5])


class ScoreFunction:
    """A point-set score with its per-point gradient.

    ``fn(P) -> (score, dS/dP)``.  Unless ``validate`` is off, the reported
    gradient is compared against central differences on a probe set when
    the score is constructed.
    """

    def __init__(self, fn: Callable, descriptor: str, validate: bool = True,
                 probe=None, step: float = 1e-6, rtol: float = VALIDATION_RTOL):
        self.fn = fn
        self.descriptor = descriptor
        if validate:
            self.validate(_probe_points() if probe is None else probe, step, rtol)

    def __call__(self, P):
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        s, g = self.fn(P)
        g = np.asarray(g, dtype=float).reshape(P.shape)
        return float(s), g

    def __repr__(self):
        return f"ScoreFunction({self.descriptor!r})"

    def validate(self, P, step: float = 1e-6, rtol: float = VALIDATION_RTOL) -> float:
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        _, g = self(P)
        fd = _fd_point_gradient(self, P, step)
        scale = max(np.abs(fd).max(), 1e-12)
        err = float(np.abs(g - fd).max() / scale)
        if err > rtol:
            raise ScoreValidationError(
                f"score {self.descriptor!r}: reported gradient is off by {err:.2e} relative")
        return err


def linear_score(weights) -> ScoreFunction:
    """``S = sum_p w . p``."""
    w = np.asarray(weights, dtype=float).reshape(3)
    return ScoreFunction(lambda P: (float(np.sum(P @ w)), np.broadcast_to(w, P.shape).copy()),
                         f"linear {w.tolist()}")


def constant_score(value: float = 1.0) -> ScoreFunction:
    return ScoreFunction(lambda P: (value, np.zeros_like(P)), f"constant {value}")


def spread_score(center) -> ScoreFunction:
    """``S = -sum_p |p - c|^2`` for a fixed ``c``."""
    c = np.asarray(center, dtype=float).reshape(3)

    def fn(P):
        d = P - c
        return -float(np.sum(d * d)), -2.0 * d

    return ScoreFunction(fn, f"spread about {c.tolist()}")


def centroid_score(target) -> ScoreFunction:
    """Negative distance from the cloud centroid to ``target``."""
    tgt = np.asarray(target, dtype=float).reshape(3)

    def fn(P):
        n = P.shape[0]
        d = P.mean(axis=0) - tgt
        dist = float(np.linalg.norm(d))
        if dist == 0.0:
            return 0.0, np.zeros_like(P)
        return -dist, np.broadcast_to(-d / (dist * n), P.shape).copy()

    return ScoreFunction(fn, f"centroid distance to {tgt.tolist()}")


def visibility_score(eye, axis, half_angle_deg: float = 30.0, sharpness: float = 20.0) -> ScoreFunction:
    """Soft count of points inside a view cone.

    Each point adds ``sigmoid(k (cos(angle to axis) - cos(half angle)))``.
    """
    e = np.asarray(eye, dtype=float).reshape(3)
    a = np.asarray(axis, dtype=float).reshape(3)
    a = a / np.linalg.norm(a)
    cos0 = np.cos(np.radians(half_angle_deg))

    def fn(P):
        d = P - e
        r = np.linalg.norm(d, axis=1, keepdims=True)
        u = d / r
        cos = u @ a
        s = 1.0 / (1.0 + np.exp(-sharpness * (cos - cos0)))
        ds_dcos = sharpness * s * (1.0 - s)
        # d cos / d p = (a - cos u) / r
        g = ds_dcos[:, None] * (a[None, :] - cos[:, None] * u) / r
        return float(s.sum()), g

    return ScoreFunction(fn, f"view cone eye={e.tolist()} axis={a.tolist()} "
                             f"half={half_angle_deg} k={sharpness}")


def combine(a: float, s1: ScoreFunction, b: float, s2: ScoreFunction) -> ScoreFunction:
    def fn(P):
        v1, g1 = s1(P)
        v2, g2 = s2(P)
        return a * v1 + b * v2, a * g1 + b * g2

    return ScoreFunction(fn, f"{a}*({s1.descriptor}) + {b}*({s2.descriptor})", validate=False)


# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------

@dataclass
class ChainedGradient:
    dS_dxi: np.ndarray
    score: float
    contributions: np.ndarray | None = None  # (6, n) per-point terms


def seeded_fusions(smap: SurfelMap, frame: GeometryMaps, pose: PoseSE3, k: Intrinsics,
                   frame_index: int, h: float = C.DEFAULT_H, components=range(6),
                   **fuse_kw) -> dict:
    """One fusion of ``frame`` per twist component, seeded at ``exp(xi) * pose``."""
    out = {}
    for i in components:
        T = compose(exp_map(seeded_twist(np.zeros(6), i, h=h)), pose)
        out[i] = fuse(smap, frame, T, k, frame_index, **fuse_kw)
    return out


def chain_pose_gradient(maps: dict, object_indices, score: ScoreFunction,
                        h: float = C.DEFAULT_H, breakdown: bool = False) -> ChainedGradient:
    """Contract ``dS/dp`` with the seeded ``dp/dxi_i`` of the object surfels.

    ``maps[i]`` is the map after a fusion pass seeded on twist component
    ``i``; components absent from ``maps`` are left at zero.
    """
    idx = np.asarray(object_indices, dtype=int)
    if idx.size == 0:
        raise ValueError("no object surfels selected")
    if not maps:
        raise MissingSeedError("no seeded maps supplied")
    for i, smap in maps.items():
        if idx.min() < 0 or idx.max() >= smap.capacity or not np.all(smap.live[idx]):
            raise MissingSeedError(f"object surfels are not live in the map for component {i}")
    first = next(iter(maps.values()))
    P = np.asarray(C.real(first.v))[idx]
    value, dS_dp = score(P)
    grad = np.zeros(6)
    contrib = np.zeros((6, idx.size)) if breakdown else None
    for i, smap in maps.items():
        if not C.is_perturbed(smap.v):
            raise MissingSeedError(f"map for component {i} carries no seeded channels")
        dp = np.asarray(C.extract_derivative(C.take(smap.v, idx, axis=0), h))
        terms = np.sum(dS_dp * dp, axis=1)
        grad[i] = terms.sum()
        if breakdown:
            contrib[i] = terms
    return ChainedGradient(grad, value, contrib)


def fd_hessian_from_gradients(grad_fn: Callable, xi, step: float = 1e-5) -> np.ndarray:
    """Central differences of a 6-vector gradient, symmetrized."""
    xi = np.asarray(xi, dtype=float)
    n = xi.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        H[:, j] = (np.asarray(grad_fn(xi + e)) - np.asarray(grad_fn(xi - e))) / (2.0 * step)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# external scores
# ---------------------------------------------------------------------------

def format_request(P) -> str:
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    lines = [PROTOCOL_HEADER] + [" ".join(repr(float(v)) for v in row) for row in P]
    return "\n".join(lines) + "\n"


def parse_request(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != PROTOCOL_HEADER:
        raise ScoreProtocolError(f"request must start with {PROTOCOL_HEADER!r}")
    try:
        P = np.array([[float(v) for v in ln.split()] for ln in lines[1:]], dtype=float)
    except ValueError as exc:
        raise ScoreProtocolError(f"bad number in request: {exc}") from None
    if P.size and P.shape[1:] != (3,):
        raise ScoreProtocolError("each point line must hold three numbers")
    return P.reshape(-1, 3)


def format_response(value: float, g) -> str:
    g = np.asarray(g, dtype=float).reshape(-1, 3)
    lines = [repr(float(value))] + [" ".join(repr(float(v)) for v in row) for row in g]
    return "\n".join(lines) + "\n"


def parse_response(text: str, n: int):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines and lines[0].strip() == PROTOCOL_HEADER:
        lines = lines[1:]
    if len(lines) != n + 1:
        raise ScoreProtocolError(f"expected a score and {n} gradient lines, got {len(lines)} lines")
    try:
        value = float(lines[0])
        g = np.array([[float(v) for v in ln.split()] for ln in lines[1:]], dtype=float)
    except ValueError as exc:
        raise ScoreProtocolError(f"bad number in response: {exc}") from None
    if g.reshape(n, -1).shape != (n, 3):
        raise ScoreProtocolError("each gradient line must hold three numbers")
    return value, g.reshape(n, 3)


def subprocess_score(command, timeout: float = 60.0, validate: bool = True) -> ScoreFunction:
    """Score computed by an external program.

    The request on stdin is the versioned header line followed by one
    ``x y z`` line per point.  The program answers with the score on the
    first line, then one gradient triple per point in request order.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)

    def fn(P):
        res = subprocess.run(argv, input=format_request(P), capture_output=True, text=True,
                             timeout=timeout)
        if res.returncode != 0:
            raise ScoreProtocolError(f"score process exited with {res.returncode}: {res.stderr.strip()}")
        return parse_response(res.stdout, P.shape[0])

    return ScoreFunction(fn, f"subprocess {' '.join(argv)}", validate=validate)
