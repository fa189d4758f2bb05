"""Depth frames and per-pixel geometry.

Pixel ``u = (x, y)`` has its center at integer coordinates; ``x`` runs along
columns.  Invalid depth is exactly ``0.0``.  Every map may be real or carry
perturbation channels (see :mod:`csfdslam.csfd`).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import csfd as C

DELTA_EDGE = 0.1
BILATERAL_SIGMA_S = 4.5
BILATERAL_SIGMA_R = 0.03
BILATERAL_RADIUS = 3
PYRAMID_LEVELS = 3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, level: int) -> "Intrinsics":
        s = 0.5 ** level
        return Intrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                          self.width >> level, self.height >> level)

    def rays(self) -> np.ndarray:
        """``K^-1 [x, y, 1]`` for every pixel, shaped ``(H, W, 3)``."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)

    def project(self, p):
        """Pixel coordinates ``(..., 2)`` and depth of camera-frame points."""
        z = p[..., 2]
        zs = C.where(C.real(z) > 0, z, 1.0)
        u = p[..., 0] / zs * self.fx + self.cx
        v = p[..., 1] / zs * self.fy + self.cy
        return C.stack([u, v], axis=-1), z


@dataclass
class DepthFrame:
    """Raw and filtered depth in meters plus an optional perturbation channel."""

    raw: np.ndarray
    filtered: np.ndarray | None = None
    im: np.ndarray | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.filtered is None:
            self.filtered = self.raw.copy()

    @property
    def shape(self):
        return self.raw.shape

    @property
    def valid(self) -> np.ndarray:
        return self.filtered > 0

    def depth(self):
        """Filtered depth, perturbed when a channel is present."""
        if self.im is None:
            return self.filtered
        return C.ComplexScalar(self.filtered, self.im)


@dataclass
class GeometryMaps:
    V: object
    N: object
    valid: np.ndarray


@dataclass
class PyramidLevel:
    frame: DepthFrame
    maps: GeometryMaps
    intrinsics: Intrinsics


@dataclass
class Pyramid:
    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> PyramidLevel:
        return self.levels[i]


def bilateral_filter(frame: DepthFrame, sigma_s: float = BILATERAL_SIGMA_S,
                     sigma_r: float = BILATERAL_SIGMA_R, radius: int = BILATERAL_RADIUS) -> DepthFrame:
    """Edge-preserving smoothing over a ``(2r+1)^2`` window.

    Weights come from real depths only; invalid neighbors are excluded and
    invalid pixels stay invalid.  The perturbation channel, if any, is
    filtered with the same weights.
    """
    D = frame.raw
    H, W = D.shape
    r = radius
    pad = np.pad(D, r)
    im_pad = None if frame.im is None else np.pad(frame.im, r)
    acc = np.zeros_like(D)
    acc_im = np.zeros_like(D)
    wsum = np.zeros_like(D)
    inv_s = 1.0 / (2.0 * sigma_s * sigma_s)
    inv_r = 1.0 / (2.0 * sigma_r * sigma_r)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = pad[r + dy:r + dy + H, r + dx:r + dx + W]
            diff = nb - D
            w = np.exp(-(dx * dx + dy * dy) * inv_s - diff * diff * inv_r) * (nb > 0)
            acc += w * nb
            wsum += w
            if im_pad is not None:
                acc_im += w * im_pad[r + dy:r + dy + H, r + dx:r + dx + W]
    valid = D > 0
    safe = np.where(valid, wsum, 1.0)
    out = np.where(valid, acc / safe, 0.0)
    im = None if im_pad is None else np.where(valid, acc_im / safe, 0.0)
    return DepthFrame(raw=D, filtered=out, im=im, timestamp=frame.timestamp)


def _shift(a, axis: int):
    """``a`` shifted by one toward lower indices, last slice repeated."""
    if axis == 1:
        return C.concatenate([a[:, 1:], a[:, -1:]], axis=1)
    return C.concatenate([a[1:], a[-1:]], axis=0)


def surface_measure(frame: DepthFrame, k: Intrinsics) -> GeometryMaps:
    """Vertex map ``D(u) K^-1 u`` and forward-difference normal map."""
    D = frame.depth()
    rays = k.rays()
    V = D[..., None] * rays
    Dre = C.real(D)
    dx = _shift(V, 1) - V
    dy = _shift(V, 0) - V
    n = C.cross(dx, dy)
    nn = C.norm(n)
    valid = (Dre > 0) & (_shift(Dre, 1) > 0) & (_shift(Dre, 0) > 0)
    valid[:, -1] = False
    valid[-1, :] = False
    valid &= C.real(nn) >= 1e-12
    safe = C.where(valid, nn, 1.0)
    N = C.where(valid[..., None], n / safe[..., None], 0.0)
    V = C.where((Dre > 0)[..., None], V, 0.0)
    return GeometryMaps(V=V, N=N, valid=valid)


def edge_score(depth: np.ndarray, u) -> float:
    """Sum of absolute depth differences to the in-image 4-neighbors of ``u``."""
    x, y = int(u[0]), int(u[1])
    H, W = depth.shape
    d = depth[y, x]
    s = 0.0
    for ox, oy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        xx, yy = x + ox, y + oy
        if 0 <= xx < W and 0 <= yy < H:
            s += abs(d - depth[yy, xx])
    return s


def perturb_depth(frame: DepthFrame, u, h: float = C.DEFAULT_H,
                  delta_edge: float = DELTA_EDGE) -> tuple[DepthFrame, bool]:
    """Seed ``h`` into the perturbation channel at pixel ``u = (x, y)``.

    Pixels on a depth discontinuity are refused: the frame comes back
    unchanged with ``False``.
    """
    h = C.check_step(h)
    x, y = int(u[0]), int(u[1])
    D = frame.filtered
    if not (0 <= x < D.shape[1] and 0 <= y < D.shape[0]) or D[y, x] <= 0:
        raise ValueError(f"cannot perturb invalid pixel {(x, y)}")
    if edge_score(D, (x, y)) >= delta_edge:
        return frame, False
    im = np.zeros_like(D) if frame.im is None else frame.im.copy()
    im[y, x] = h
    return replace(frame, im=im), True


def _gauss5(sigma: float = 1.0) -> np.ndarray:
    k = np.arange(-2, 3, dtype=float)
    return np.exp(-k * k / (2.0 * sigma * sigma))


def downsample(frame: DepthFrame, sigma_r: float = BILATERAL_SIGMA_R) -> DepthFrame:
    """Half-resolution depth by depth-aware 5x5 Gaussian blur at even pixels."""
    D = frame.filtered
    H, W = D.shape
    Hc, Wc = H // 2, W // 2
    g = _gauss5()
    pad = np.pad(D, 2)
    im_pad = None if frame.im is None else np.pad(frame.im, 2)
    centers = D[0:2 * Hc:2, 0:2 * Wc:2]
    acc = np.zeros((Hc, Wc))
    acc_im = np.zeros((Hc, Wc))
    wsum = np.zeros((Hc, Wc))
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            sl = (slice(2 + dy, 2 + dy + 2 * Hc, 2), slice(2 + dx, 2 + dx + 2 * Wc, 2))
            nb = pad[sl]
            ok = (nb > 0) & (np.abs(nb - centers) <= 3.0 * sigma_r)
            w = g[dy + 2] * g[dx + 2] * ok
            acc += w * nb
            wsum += w
            if im_pad is not None:
                acc_im += w * im_pad[sl]
    valid = centers > 0
    safe = np.where(valid, wsum, 1.0)
    out = np.where(valid, acc / safe, 0.0)
    im = None if im_pad is None else np.where(valid, acc_im / safe, 0.0)
    return DepthFrame(raw=out, filtered=out.copy(), im=im, timestamp=frame.timestamp)


def build_pyramid(frame: DepthFrame, k: Intrinsics, levels: int = PYRAMID_LEVELS,
                  sigma_r: float = BILATERAL_SIGMA_R) -> Pyramid:
    """Coarse-to-fine geometry; level 0 is ``frame`` itself.

    Odd sizes are floored when halving.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [PyramidLevel(frame, surface_measure(frame, k), k)]
    cur, kk = frame, k
    for lvl in range(1, levels):
        cur = downsample(cur, sigma_r)
        kk = k.scaled(lvl)
        out.append(PyramidLevel(cur, surface_measure(cur, kk), kk))
    return Pyramid(out)


def continuous_sample(values, uv, valid=None):
    """Bilinear lookup at real-valued pixel coordinates.

    ``values`` is ``(H, W)`` or ``(H, W, C)`` (or a :class:`DepthFrame`, whose
    positive depths count as valid); ``uv`` is ``(..., 2)``.  Invalid
    neighbors are dropped and the remaining weights renormalized.  Returns
    ``(sample, ok)``; entries with ``ok == False`` hold zeros.
    """
    if isinstance(values, DepthFrame):
        valid = values.valid if valid is None else valid
        values = values.depth()
    H, W = C.real(values).shape[:2]
    if valid is None:
        valid = np.ones((H, W), dtype=bool)
    x = uv[..., 0]
    y = uv[..., 1]
    xr, yr = C.real(x), C.real(y)
    # a pixel center reprojected onto itself may land a few ulps outside
    tol = 1e-9
    inb = (xr >= -tol) & (xr <= W - 1 + tol) & (yr >= -tol) & (yr <= H - 1 + tol)
    x0 = np.floor(np.clip(np.where(inb, xr, 0.0), 0, W - 1)).astype(np.intp)
    y0 = np.floor(np.clip(np.where(inb, yr, 0.0), 0, H - 1)).astype(np.intp)
    fx = x - x0
    fy = y - y0
    total = 0.0
    wsum = 0.0
    extra = C.real(values).ndim - 2
    for ox, oy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + ox
        yi = y0 + oy
        ok = inb & (xi < W) & (yi < H)
        xi = np.minimum(xi, W - 1)
        yi = np.minimum(yi, H - 1)
        ok &= valid[yi, xi]
        wx = fx if ox else 1.0 - fx
        wy = fy if oy else 1.0 - fy
        w = wx * wy * ok
        v = values[yi, xi]
        wb = w[(...,) + (None,) * extra] if extra else w
        total = total + v * wb
        wsum = wsum + w
    ok = inb & (C.real(wsum) > 1e-12)
    safe = C.where(ok, wsum, 1.0)
    if extra:
        safe = safe[(...,) + (None,) * extra]
        okb = ok[(...,) + (None,) * extra]
    else:
        okb = ok
    return C.where(okb, total / safe, 0.0), ok
