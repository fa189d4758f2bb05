"""Analytic SDF scenes rendered to depth by sphere tracing.

Scene files hold one primitive per line (``#`` starts a comment)::

    sphere  cx cy cz  r
    box     cx cy cz  hx hy hz  [rx ry rz]     # half extents, rotation vector in degrees
    plane   nx ny nz  d                        # free side is n.p + d > 0

The scene SDF is the union (minimum) of its primitives.  Cameras look down
their local ``+z`` with ``+y`` pointing down the image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp

from .frames import Intrinsics
from .se3 import PoseSE3


class SceneError(ValueError):
    pass


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))

    def sdf(self, p):
        q = np.abs((p - self.center) @ self.R) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass
class Plane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.linalg.norm(self.normal)
        self.normal = self.normal / n
        self.offset = self.offset / n

    def sdf(self, p):
        return p @ self.normal + self.offset


@dataclass
class Scene:
    primitives: list

    def sdf(self, p):
        p = np.asarray(p, dtype=float)
        if not self.primitives:
            return np.full(p.shape[:-1], np.inf)
        return np.min(np.stack([s.sdf(p) for s in self.primitives]), axis=0)


_ARITY = {"sphere": (4, 4), "box": (6, 9), "plane": (4, 4)}


def parse_scene(text: str) -> Scene:
    prims = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        kind = kind.lower()
        if kind not in _ARITY:
            raise SceneError(f"line {lineno}: unknown primitive {kind!r}")
        lo, hi = _ARITY[kind]
        if not lo <= len(rest) <= hi or (kind == "box" and len(rest) not in (6, 9)):
            raise SceneError(f"line {lineno}: {kind} takes {lo}" + (f" or {hi}" if hi != lo else "")
                             + f" numbers, got {len(rest)}")
        try:
            v = np.array([float(x) for x in rest])
        except ValueError:
            raise SceneError(f"line {lineno}: not a number in {line!r}") from None
        if not np.all(np.isfinite(v)):
            raise SceneError(f"line {lineno}: non-finite value")
        if kind == "sphere":
            if v[3] <= 0:
                raise SceneError(f"line {lineno}: radius must be positive")
            prims.append(Sphere(v[:3], float(v[3])))
        elif kind == "box":
            if np.any(v[3:6] <= 0):
                raise SceneError(f"line {lineno}: half extents must be positive")
            R = Rotation.from_rotvec(np.radians(v[6:9])).as_matrix() if len(v) == 9 else np.eye(3)
            prims.append(Box(v[:3], v[3:6], R))
        else:
            if np.linalg.norm(v[:3]) == 0:
                raise SceneError(f"line {lineno}: zero plane normal")
            prims.append(Plane(v[:3], float(v[3])))
    return Scene(prims)


def load_scene(path) -> Scene:
    return parse_scene(Path(path).read_text())


DESK_SCENE = """\
# floor, back wall and a few objects around the origin
plane  0 -1 0  0.6
plane  0 0 -1  1.1
plane  1 0 0   1.1
sphere  0.0 0.25 0.0  0.35
sphere  0.55 0.35 -0.35  0.2
box    -0.55 0.35 0.3  0.2 0.25 0.2  0 25 0
box     0.5 0.45 0.5  0.25 0.15 0.15  0 -15 0
"""


def desk_scene() -> Scene:
    return parse_scene(DESK_SCENE)


# Shallow bumps on the same three planes.  Nothing stands far enough off a
# surface to cast an occlusion shadow across the views of an orbit, which
# keeps single-view and multi-view TSDFs of the scene in agreement.
RELIEF_SCENE = """\
plane  0 -1 0  0.6
plane  0 0 -1  1.1
plane  1 0 0   1.1
sphere  0.0 0.92 0.1  0.4
sphere -0.45 0.9 0.55  0.35
sphere  0.3 0.2 1.4  0.4
sphere -1.45 0.1 0.4  0.45
box     0.5 0.6 0.3  0.2 0.05 0.15  0 30 0
"""


def relief_scene() -> Scene:
    return parse_scene(RELIEF_SCENE)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_depth(scene: Scene, pose: PoseSE3, k: Intrinsics, max_depth: float = 10.0,
                 max_steps: int = 256, eps: float = 1e-7) -> np.ndarray:
    """Depth image (meters along the optical axis, 0 for misses).

    Sphere tracing brings each ray within ``eps`` of the surface, then a few
    secant steps on the ray's SDF polish the hit to near machine precision.
    """
    rays = k.rays().reshape(-1, 3)
    dirs_cam = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = dirs_cam @ np.asarray(pose.R).T
    o = np.asarray(pose.t, dtype=float)
    n = dirs.shape[0]
    s = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        ids = np.nonzero(alive)[0]
        if ids.size == 0:
            break
        d = scene.sdf(o + s[ids, None] * dirs[ids])
        close = d < eps
        hit[ids[close]] = True
        alive[ids[close]] = False
        s[ids[~close]] += d[~close]
        alive &= s < max_depth * 2.0
    ids = np.nonzero(hit)[0]
    if ids.size:
        a = s[ids]
        fa = scene.sdf(o + a[:, None] * dirs[ids])
        b = a + 1e-4
        fb = scene.sdf(o + b[:, None] * dirs[ids])
        for _ in range(6):
            den = fb - fa
            ok = np.abs(den) > 1e-300
            c = np.where(ok, b - fb * (b - a) / np.where(ok, den, 1.0), b)
            a, fa = b, fb
            b = c
            fb = scene.sdf(o + b[:, None] * dirs[ids])
        s[ids] = b
    depth = s * dirs_cam[:, 2]
    depth = np.where(hit & (depth > 0) & (depth <= max_depth), depth, 0.0)
    return depth.reshape(k.height, k.width)


def noise_sigma(depth, a: float, b: float):
    """Axial noise model ``sigma(d) = a + b d^2``."""
    return a + b * np.asarray(depth) ** 2


def add_depth_noise(depth, a: float, b: float, rng: np.random.Generator) -> np.ndarray:
    valid = depth > 0
    noisy = depth + rng.normal(size=depth.shape) * noise_sigma(depth, a, b)
    return np.where(valid & (noisy > 0), noisy, 0.0)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> PoseSE3:
    """Camera at ``eye`` whose optical axis points at ``target``.

    ``up`` is the world direction that should appear toward the top of the
    image; the default matches a world whose gravity is ``+y``.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return PoseSE3(np.column_stack([x, y, z]), eye)


def orbit(n: int, radius: float = 1.2, height: float = -0.5, arc_deg: float = 60.0,
          start_deg: float = -30.0, target=(0.0, 0.2, 0.0), bob: float = 0.05) -> list:
    """``n`` poses on a horizontal arc around ``target``, looking at it."""
    poses = []
    for i in range(n):
        s = i / max(n - 1, 1)
        ang = np.radians(start_deg + arc_deg * s)
        eye = np.array([radius * np.sin(ang), height + bob * np.sin(2 * np.pi * s),
                        -radius * np.cos(ang)])
        poses.append(look_at(eye, target))
    return poses


def spline_trajectory(waypoints: list, n: int) -> list:
    """Cubic-spline positions and slerped rotations through waypoint poses."""
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    knots = np.arange(len(waypoints), dtype=float)
    pos = np.array([np.asarray(w.t, dtype=float) for w in waypoints])
    rots = Rotation.from_matrix(np.array([np.asarray(w.R) for w in waypoints]))
    s = np.linspace(0.0, knots[-1], n)
    P = CubicSpline(knots, pos, bc_type="natural")(s)
    Rs = Slerp(knots, rots)(s).as_matrix()
    return [PoseSE3(Rs[i], P[i]) for i in range(n)]


def parse_waypoints(text: str) -> list:
    """Lines ``ex ey ez  tx ty tz`` (eye and look-at target)."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise SceneError(f"line {lineno}: waypoint needs 6 numbers, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
        except ValueError:
            raise SceneError(f"line {lineno}: not a number in {line!r}") from None
        out.append(look_at(v[:3], v[3:]))
    return out


@dataclass
class SynthSequence:
    depths: list
    poses: list
    timestamps: np.ndarray
    intrinsics: Intrinsics


def render_sequence(scene: Scene, poses: list, k: Intrinsics, noise=(0.0, 0.0),
                    seed: int = 0, fps: float = 30.0) -> SynthSequence:
    rng = np.random.default_rng(seed)
    a, b = noise
    depths = []
    for pose in poses:
        d = render_depth(scene, pose, k)
        if a > 0 or b > 0:
            d = add_depth_noise(d, a, b, rng)
        depths.append(d)
    ts = 1.0 + np.arange(len(poses)) / fps
    return SynthSequence(depths, list(poses), ts, k)
