"""Surfel map front end: index map, one-to-many association, fusion.

Positions, normals and confidences are kept in the generic scalar type, so
a frame fused at a seeded pose leaves ``d v / d xi`` readable from every
surfel it touched.  Radii and timestamps stay real.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import csfd as C
from .frames import GeometryMaps, Intrinsics
from .se3 import PoseSE3
from .tsdf import SurfacePrediction

SUPERSAMPLE = 4
DELTA_DEPTH = 0.05
DELTA_NORM_DEG = 30.0
DELTA_DISTANCE = 0.05


@dataclass
class SurfelMap:
    v: object = field(default_factory=lambda: np.zeros((0, 3)))
    n: object = field(default_factory=lambda: np.zeros((0, 3)))
    r: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c: object = field(default_factory=lambda: np.zeros(0))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    live: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    free: list = field(default_factory=list)

    def __len__(self):
        return int(self.live.sum())

    @property
    def capacity(self) -> int:
        return self.live.shape[0]

    @property
    def perturbed(self) -> bool:
        return C.is_perturbed(self.v) or C.is_perturbed(self.n) or C.is_perturbed(self.c)

    def positions(self) -> np.ndarray:
        return np.asarray(C.real(self.v))

    def copy(self) -> "SurfelMap":
        return SurfelMap(self.v.copy(), self.n.copy(), self.r.copy(), self.c.copy(),
                         self.t.copy(), self.live.copy(), list(self.free))

    def append(self, v, n, r, c, t) -> np.ndarray:
        """Add surfels, reusing freed slots first; returns their indices."""
        m = len(r)
        if m == 0:
            return np.zeros(0, dtype=np.int64)
        start = self.capacity
        self.v = C.concatenate([self.v, v], axis=0)
        self.n = C.concatenate([self.n, n], axis=0)
        self.c = C.concatenate([self.c, c], axis=0)
        self.r = np.concatenate([self.r, r])
        self.t = np.concatenate([self.t, np.full(m, t, dtype=np.int64)])
        self.live = np.concatenate([self.live, np.ones(m, dtype=bool)])
        return np.arange(start, start + m)

    def remove(self, idx) -> None:
        idx = np.atleast_1d(idx)
        self.live[idx] = False
        self.free.extend(int(i) for i in idx)


@dataclass
class IndexMap:
    """Supersampled grid of surfel lists in CSR layout.

    Cell ``(cy, cx)`` holds ``items[start[cell]:start[cell + 1]]``, sorted
    nearest first by camera depth.
    """

    height: int
    width: int
    start: np.ndarray
    items: np.ndarray
    depth: np.ndarray
    pixel: np.ndarray  # flat source-resolution pixel of each item

    def cell(self, cy: int, cx: int) -> np.ndarray:
        i = cy * self.width + cx
        return self.items[self.start[i]:self.start[i + 1]]

    def nonempty(self) -> int:
        return int(np.count_nonzero(np.diff(self.start)))

    def block(self, x: int, y: int) -> list:
        """The 4x4 cell lists behind source pixel ``(x, y)``."""
        s = SUPERSAMPLE
        return [self.cell(cy, cx) for cy in range(s * y, s * y + s) for cx in range(s * x, s * x + s)]


def _camera(points, pose: PoseSE3):
    return (points - pose.t) @ np.asarray(pose.R)


def render_index_map(smap: SurfelMap, pose: PoseSE3, k: Intrinsics) -> IndexMap:
    s = SUPERSAMPLE
    Hs, Ws = k.height * s, k.width * s
    pose = pose.real()
    ids = np.nonzero(smap.live)[0]
    q = _camera(smap.positions()[ids], pose)
    z = q[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = q[:, 0] / zs * k.fx + k.cx
    v = q[:, 1] / zs * k.fy + k.cy
    cx = np.floor(s * (u + 0.5)).astype(np.int64)
    cy = np.floor(s * (v + 0.5)).astype(np.int64)
    inside = front & (cx >= 0) & (cx < Ws) & (cy >= 0) & (cy < Hs)
    ids, cx, cy, z = ids[inside], cx[inside], cy[inside], z[inside]
    cell = cy * Ws + cx
    order = np.lexsort((ids, z, cell))
    cell = cell[order]
    start = np.searchsorted(cell, np.arange(Hs * Ws + 1))
    pixel = (cy[order] // s) * k.width + cx[order] // s
    return IndexMap(Hs, Ws, start, ids[order], z[order], pixel)


def confidence(k: Intrinsics) -> np.ndarray:
    """Per-pixel ``exp(-gamma^2 / 0.72)`` with ``gamma`` the normalized radius."""
    ys, xs = np.mgrid[0:k.height, 0:k.width].astype(float)
    half_diag = 0.5 * np.hypot(k.width, k.height)
    gamma = np.clip(np.hypot(xs - k.cx, ys - k.cy) / half_diag, 0.0, 1.0)
    return np.exp(-gamma * gamma / 0.72)


@dataclass
class Association:
    """Flat (pixel, surfel, weight) triples plus the unmatched valid pixels."""

    pixel: np.ndarray
    surfel: np.ndarray
    weight: object
    distance: object
    unmatched: np.ndarray

    def __len__(self):
        return self.pixel.shape[0]

    def for_pixel(self, p: int):
        m = self.pixel == p
        return list(zip(self.surfel[m].tolist(), np.asarray(C.real(self.weight))[m].tolist()))


def measured_global(frame: GeometryMaps, pose: PoseSE3):
    """Global vertices and normals of a frame's maps (flattened)."""
    V = frame.V.reshape(-1, 3)
    N = frame.N.reshape(-1, 3)
    return V @ pose.R.T + pose.t, N @ pose.R.T


def associate(smap: SurfelMap, frame: GeometryMaps, idx: IndexMap, pose: PoseSE3,
              delta_depth: float = DELTA_DEPTH, delta_norm_deg: float = DELTA_NORM_DEG,
              delta_distance: float = DELTA_DISTANCE, sigma: float | None = None,
              one_to_many: bool = True) -> Association:
    """Match each valid pixel to the surfels in its 4x4 index-map block.

    A candidate survives when its camera depth is within ``delta_depth`` of
    the measurement, its normal within ``delta_norm_deg`` of the measured one
    and its position within ``delta_distance`` of the measured vertex.  Weights
    are ``exp(-d^2 / (2 sigma^2))`` in the scalar type of ``pose``.  With
    ``one_to_many=False`` only the nearest survivor per pixel is kept.
    """
    sigma = delta_distance / 2.0 if sigma is None else sigma
    valid = frame.valid.reshape(-1)
    pix = idx.pixel
    sid = idx.items
    keep = valid[pix]
    pix, sid, zs = pix[keep], sid[keep], idx.depth[keep]
    Vg, Ng = measured_global(frame, pose)
    Vre = np.asarray(C.real(frame.V)).reshape(-1, 3)
    keep = np.abs(zs - Vre[pix, 2]) <= delta_depth
    pix, sid = pix[keep], sid[keep]
    Ng_re = np.asarray(C.real(Ng))[pix]
    n_s = np.asarray(C.real(smap.n))[sid]
    keep = np.sum(Ng_re * n_s, axis=1) >= np.cos(np.radians(delta_norm_deg))
    pix, sid = pix[keep], sid[keep]
    diff = C.take(smap.v, sid, axis=0) - C.take(Vg, pix, axis=0)
    d2 = C.dot(diff, diff)
    keep = C.real(d2) <= delta_distance ** 2
    pix, sid = pix[keep], sid[keep]
    d2 = d2[keep]
    if not one_to_many and pix.size:
        order = np.lexsort((sid, np.asarray(C.real(d2)), pix))
        first = np.ones(order.size, dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        sel = order[first]
        pix, sid, d2 = pix[sel], sid[sel], d2[sel]
    w = C.exp(d2 * (-0.5 / (sigma * sigma)))
    matched = np.zeros(valid.size, dtype=bool)
    matched[pix] = True
    unmatched = np.nonzero(valid & ~matched)[0]
    return Association(pix, sid, w, C.sqrt(d2) if pix.size else d2, unmatched)


def update_surfels(smap: SurfelMap, assoc: Association, frame: GeometryMaps, pose: PoseSE3,
                   k: Intrinsics, frame_index: int) -> SurfelMap:
    """Confidence-weighted merge of associated pixels, new surfels elsewhere.

    Contributions to one surfel are summed before committing, so the result
    does not depend on pixel order.
    """
    out = smap.copy()
    Vg, Ng = measured_global(frame, pose)
    conf = confidence(k).reshape(-1)
    depth = np.asarray(C.real(frame.V)).reshape(-1, 3)[:, 2]
    r_meas = np.sqrt(2.0) * depth / k.fx
    if len(assoc):
        pix, sid = assoc.pixel, assoc.surfel
        wc = assoc.weight * conf[pix]
        n_all = out.capacity
        acc_w = C.add_at(C.like(wc, np.zeros(n_all)), sid, wc)
        acc_v = C.add_at(C.like(wc, np.zeros((n_all, 3))), sid, C.take(Vg, pix, axis=0) * wc[:, None])
        acc_n = C.add_at(C.like(wc, np.zeros((n_all, 3))), sid, C.take(Ng, pix, axis=0) * wc[:, None])
        touched = np.unique(sid)
        c_old = C.take(out.c, touched)
        wsum = C.take(acc_w, touched)
        c_new = c_old + wsum
        v_new = (C.take(out.v, touched, axis=0) * c_old[:, None]
                 + C.take(acc_v, touched, axis=0)) / c_new[:, None]
        n_old = C.take(out.n, touched, axis=0)
        n_sum = (n_old * c_old[:, None] + C.take(acc_n, touched, axis=0)) / c_new[:, None]
        nn = C.norm(n_sum)
        ok = C.real(nn) > 1e-12
        n_new = C.where(ok[:, None], n_sum / C.where(ok, nn, 1.0)[:, None], n_old)
        for name, val in (("v", v_new), ("n", n_new), ("c", c_new)):
            arr = getattr(out, name)
            if C.is_perturbed(val) and not C.is_perturbed(arr):
                arr = type(val).constant(np.array(arr, dtype=float))
            arr[touched] = val
            setattr(out, name, arr)
        r_min = np.full(n_all, np.inf)
        np.minimum.at(r_min, sid, r_meas[pix])
        out.r[touched] = np.minimum(out.r[touched], r_min[touched])
        out.t[touched] = frame_index
    new = assoc.unmatched
    if new.size:
        v_new = C.take(Vg, new, axis=0)
        n_new = C.take(Ng, new, axis=0)
        c_new = conf[new]
        if C.is_perturbed(v_new):
            c_new = type(v_new).constant(c_new)
        if C.is_perturbed(v_new) and not C.is_perturbed(out.v):
            cls = type(v_new)
            out.v, out.n, out.c = cls.constant(np.asarray(out.v, float)), \
                cls.constant(np.asarray(out.n, float)), cls.constant(np.asarray(out.c, float))
        elif C.is_perturbed(out.v) and not C.is_perturbed(v_new):
            cls = type(out.v)
            v_new, n_new, c_new = cls.constant(v_new), cls.constant(n_new), cls.constant(c_new)
        out.append(v_new, n_new, r_meas[new], c_new, frame_index)
    return out


def fuse(smap: SurfelMap, frame: GeometryMaps, pose: PoseSE3, k: Intrinsics, frame_index: int,
         one_to_many: bool = True, **thresholds) -> SurfelMap:
    """Index-map render, association and update in one call."""
    idx = render_index_map(smap, pose, k)
    assoc = associate(smap, frame, idx, pose, one_to_many=one_to_many, **thresholds)
    return update_surfels(smap, assoc, frame, pose, k, frame_index)


def predict_maps(smap: SurfelMap, pose: PoseSE3, k: Intrinsics, splat: int = 1) -> SurfacePrediction:
    """Z-buffered disk splats of the live surfels (real parts).

    Each surfel is tested against the pixels within ``splat`` of its
    projection; a pixel ray that meets the surfel's disk yields a candidate
    and the nearest candidate wins.
    """
    H, W = k.height, k.width
    V = np.zeros((H * W, 3))
    N = np.zeros((H * W, 3))
    valid = np.zeros(H * W, dtype=bool)
    pose = pose.real()
    ids = np.nonzero(smap.live)[0]
    if ids.size == 0:
        return SurfacePrediction(V.reshape(H, W, 3), N.reshape(H, W, 3), valid.reshape(H, W))
    R = np.asarray(pose.R)
    vg = smap.positions()[ids]
    ng = np.asarray(C.real(smap.n))[ids]
    q = _camera(vg, pose)
    nc = ng @ R
    rad = smap.r[ids]
    z = q[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = np.rint(q[:, 0] / zs * k.fx + k.cx).astype(np.int64)
    v = np.rint(q[:, 1] / zs * k.fy + k.cy).astype(np.int64)
    best = np.full(H * W, np.inf)
    owner = np.full(H * W, -1, dtype=np.int64)
    cand_pix, cand_z, cand_s = [], [], []
    for dy in range(-splat, splat + 1):
        for dx in range(-splat, splat + 1):
            x = u + dx
            y = v + dy
            ok = front & (x >= 0) & (x < W) & (y >= 0) & (y < H)
            d = np.stack([(x - k.cx) / k.fx, (y - k.cy) / k.fy, np.ones_like(z)], axis=-1)
            den = np.sum(nc * d, axis=1)
            ok &= np.abs(den) > 1e-9
            alpha = np.sum(nc * q, axis=1) / np.where(ok, den, 1.0)
            hit = alpha[:, None] * d
            ok &= (alpha > 0) & (np.linalg.norm(hit - q, axis=1) <= rad)
            cand_pix.append((y * W + x)[ok])
            cand_z.append(alpha[ok])
            cand_s.append(np.nonzero(ok)[0])
    pix = np.concatenate(cand_pix)
    zc = np.concatenate(cand_z)
    sc = np.concatenate(cand_s)
    if pix.size:
        order = np.lexsort((sc, zc, pix))
        first = np.ones(order.size, dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        sel = order[first]
        best[pix[sel]] = zc[sel]
        owner[pix[sel]] = sc[sel]
        hitp = np.nonzero(owner >= 0)[0]
        rays = k.rays().reshape(-1, 3)[hitp]
        Pc = best[hitp, None] * rays
        V[hitp] = Pc @ R.T + pose.t
        N[hitp] = ng[owner[hitp]]
        valid[hitp] = True
    return SurfacePrediction(V.reshape(H, W, 3), N.reshape(H, W, 3), valid.reshape(H, W))


def gradient_density(smap: SurfelMap, h: float = C.DEFAULT_H) -> int:
    """Number of live surfels whose position carries a nonzero perturbation."""
    if not C.is_perturbed(smap.v):
        return 0
    chans = smap.v.channels[1:]
    nz = np.zeros(smap.capacity, dtype=bool)
    for ch in chans:
        nz |= np.any(np.asarray(ch) != 0, axis=1)
    return int(np.count_nonzero(nz & smap.live))


def write_ply(smap: SurfelMap, path) -> None:
    """ASCII PLY with position, normal, radius, confidence and timestamp."""
    ids = np.nonzero(smap.live)[0]
    v = smap.positions()[ids]
    n = np.asarray(C.real(smap.n))[ids]
    c = np.asarray(C.real(smap.c))[ids]
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {ids.size}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz", "radius", "confidence"):
            fh.write(f"property float {name}\n")
        fh.write("property int timestamp\nend_header\n")
        for i in range(ids.size):
            fh.write(" ".join(f"{x:.6f}" for x in (*v[i], *n[i], smap.r[ids[i]], c[i]))
                     + f" {int(smap.t[ids[i]])}\n")
