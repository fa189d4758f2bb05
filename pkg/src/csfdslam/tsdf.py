"""Dense TSDF volume: weighted-average fusion, ray casting, mesh export.

Voxel ``(i, j, k)`` is centered at ``origin + (idx + 0.5) * voxel_size``.
``F`` and ``W`` are stored flat in C order over ``dims``.  ``F`` may carry
perturbation channels after fusing with a seeded pose or depth; ``W`` is
always real since each observation adds a constant weight.

Signed distances are positive in front of the observed surface, so an
unobserved voxel reads ``F = 1`` and a ray crosses from ``+`` to ``-`` when
it enters an object.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import csfd as C
from .frames import DepthFrame, Intrinsics, continuous_sample
from .se3 import PoseSE3

MAX_WEIGHT = 128.0
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass
class TsdfVolume:
    dims: tuple
    voxel_size: float
    origin: np.ndarray
    mu: float
    F: object
    W: np.ndarray
    max_weight: float = MAX_WEIGHT

    @classmethod
    def empty(cls, dims=(128, 128, 128), voxel_size: float = 0.02, origin=None,
              mu: float | None = None) -> "TsdfVolume":
        dims = tuple(int(d) for d in dims)
        n = int(np.prod(dims))
        if origin is None:
            origin = -0.5 * voxel_size * np.asarray(dims, dtype=float)
        mu = 5.0 * voxel_size if mu is None else float(mu)
        return cls(dims, float(voxel_size), np.asarray(origin, dtype=float), mu,
                   np.ones(n), np.zeros(n))

    @classmethod
    def from_sdf(cls, sdf, dims, voxel_size, origin=None, mu=None) -> "TsdfVolume":
        """Volume with ``F = clip(sdf / mu)`` and unit weight inside the band."""
        vol = cls.empty(dims, voxel_size, origin, mu)
        d = sdf(vol.centers())
        keep = d >= -vol.mu
        vol.F = np.where(keep, np.clip(d / vol.mu, -1.0, 1.0), 1.0)
        vol.W = keep.astype(float)
        return vol

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def perturbed(self) -> bool:
        return C.is_perturbed(self.F)

    def centers(self, idx=None) -> np.ndarray:
        """World coordinates of voxel centers (all, or flat indices ``idx``)."""
        if idx is None:
            idx = np.arange(self.size)
        ijk = np.stack(np.unravel_index(idx, self.dims), axis=-1).astype(float)
        return self.origin + (ijk + 0.5) * self.voxel_size

    def grid(self, values) -> np.ndarray:
        return np.asarray(values).reshape(self.dims)

    def F_real(self) -> np.ndarray:
        return np.asarray(C.real(self.F))

    def copy(self) -> "TsdfVolume":
        return replace(self, F=self.F.copy(), W=self.W.copy(), origin=self.origin.copy())


def psi(eta, mu: float):
    """Truncation: ``(value, keep)``; ``keep`` is False where the result is null."""
    keep = C.real(eta) >= -mu
    return C.clip(eta / mu, -1.0, 1.0), keep


def _camera_coords(points, pose: PoseSE3):
    # R^T (p - t) in row form
    return (points - pose.t) @ pose.R


def signed_distance(points, pose: PoseSE3, frame: DepthFrame, k: Intrinsics):
    """Projective signed distance ``L(x) - ||t - p|| / lambda`` and validity.

    ``x`` is the projection of ``p``, ``lambda = ||K^-1 x||`` and ``L`` the
    bilinear depth lookup, all in the scalar type of ``pose``/``frame``.
    """
    q = _camera_coords(points, pose)
    uv, z = k.project(q)
    ok = C.real(z) > 1e-6
    L, okL = continuous_sample(frame, uv)
    ok &= okL
    rx = (uv[..., 0] - k.cx) / k.fx
    ry = (uv[..., 1] - k.cy) / k.fy
    lam = C.sqrt(rx * rx + ry * ry + 1.0)
    dist = C.norm(pose.t - points)
    return L - dist / lam, ok


def select_band(points, pose: PoseSE3, frame: DepthFrame, k: Intrinsics, mu: float):
    """Real-valued pass: indices with a non-null update and their ``eta``."""
    real_frame = frame if frame.im is None else _real_frame(frame)
    pose = pose.real()
    # frustum cull before the bilinear lookups
    q = _camera_coords(points, pose)
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = q[:, 0] / z * k.fx + k.cx
        v = q[:, 1] / z * k.fy + k.cy
    near = (z > 1e-6) & (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    cand = np.nonzero(near)[0]
    eta, ok = signed_distance(points[cand], pose, real_frame, k)
    ok &= eta >= -mu
    return cand[ok], eta[ok]


def fuse_values(points, pose: PoseSE3, frame: DepthFrame, k: Intrinsics, mu: float,
                selection=None):
    """Per-point truncated distance of one observation.

    Returns ``(idx, F_D)``: indices into ``points`` that receive a non-null
    value and those values.  Selection runs on real parts first, so a
    perturbed pose or depth only pays for the voxels inside the band;
    ``selection`` may pass in a cached :func:`select_band` result.
    """
    points = np.asarray(points, dtype=float)
    idx, eta = select_band(points, pose, frame, k, mu) if selection is None else selection
    if not (pose.perturbed or frame.im is not None):
        return idx, np.clip(eta / mu, -1.0, 1.0)
    eta, _ = signed_distance(points[idx], pose, frame, k)
    return idx, psi(eta, mu)[0]


def _real_frame(frame: DepthFrame) -> DepthFrame:
    return DepthFrame(frame.raw, frame.filtered, None, frame.timestamp)


def surface_update(vol: TsdfVolume, pose: PoseSE3, frame: DepthFrame, k: Intrinsics,
                   points_idx=None) -> TsdfVolume:
    """Fuse one depth frame with unit observation weight.

    Each observed voxel becomes ``(W F + F_D) / (W + 1)`` and ``W + 1``
    (capped).  Perturbations seeded in ``pose`` or ``frame`` flow into ``F``.
    ``points_idx`` limits the update to a subset of flat voxel indices.
    """
    cand = np.arange(vol.size) if points_idx is None else np.asarray(points_idx)
    idx, FD = fuse_values(vol.centers(cand), pose, frame, k, vol.mu)
    idx = cand[idx]
    out = vol.copy()
    if idx.size == 0:
        return out
    W0 = out.W[idx]
    F0 = C.take(out.F, idx)
    Fn = (F0 * W0 + FD) / (W0 + 1.0)
    F = out.F
    if C.is_perturbed(Fn) and not C.is_perturbed(F):
        F = type(Fn).constant(np.asarray(F, dtype=float).copy())
    F[idx] = Fn
    out.F = F
    out.W[idx] = np.minimum(W0 + 1.0, vol.max_weight)
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _grid_coords(vol: TsdfVolume, p):
    g = (p - vol.origin) / vol.voxel_size - 0.5
    hi = np.asarray(vol.dims, dtype=float) - 1.0
    gc = C.clip(g, 0.0, hi)
    base = np.minimum(np.floor(C.real(gc)), hi - 1.0).astype(np.intp)
    base = np.maximum(base, 0)
    frac = gc - base
    return base, frac


def _flat(vol: TsdfVolume, ijk):
    ny, nz = vol.dims[1], vol.dims[2]
    return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]


def trilinear(vol: TsdfVolume, p, values=None, need_observed: bool = False):
    """Trilinear interpolation of ``values`` (default ``F``) at points ``(..., 3)``.

    With ``need_observed`` also returns whether all eight corners have
    ``W > 0``.
    """
    values = vol.F if values is None else values
    base, frac = _grid_coords(vol, p)
    out = 0.0
    observed = np.ones(base.shape[:-1], dtype=bool)
    for c in _CORNERS:
        flat = _flat(vol, base + c)
        w = 1.0
        for ax in range(3):
            f = frac[..., ax]
            w = w * (f if c[ax] else 1.0 - f)
        out = out + C.take(values, flat) * w
        if need_observed:
            observed &= vol.W[flat] > 0
    if need_observed:
        return out, observed
    return out


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

@dataclass
class SurfacePrediction:
    """Predicted global vertices and normals per pixel."""

    V: object
    N: object
    valid: np.ndarray

    def subsample(self, level: int) -> "SurfacePrediction":
        s = 2 ** level
        if s == 1:
            return self
        H, W = self.valid.shape
        sl = (slice(0, (H // s) * s, s), slice(0, (W // s) * s, s))
        return SurfacePrediction(self.V[sl], self.N[sl], self.valid[sl])


def interpolate_crossing(alpha_m, delta_alpha, f_m, f_next):
    """Zero of the line through ``(alpha_m, f_m)`` and ``(alpha_m + da, f_next)``."""
    return alpha_m - delta_alpha * f_m / (f_next - f_m)


def _volume_span(vol: TsdfVolume, origin, dirs):
    lo = vol.origin
    hi = vol.origin + np.asarray(vol.dims) * vol.voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    return tmin, tmax


def raycast(vol: TsdfVolume, pose: PoseSE3, k: Intrinsics, delta_alpha: float | None = None,
            near: float = 0.1, far: float | None = None, refine: bool = True) -> SurfacePrediction:
    """Predict the surface seen from ``pose`` by marching every pixel ray.

    Marching runs on real parts; the crossing location, vertex and normal are
    then recomputed in the scalar type of ``pose`` (and of ``vol.F``) so
    seeded perturbations reach the prediction.
    """
    da = vol.mu / 2.0 if delta_alpha is None else float(delta_alpha)
    pr = pose.real()
    H, W = k.height, k.width
    d_cam = k.rays().reshape(-1, 3)
    d_world = d_cam @ pr.R.T
    o = pr.t
    tmin, tmax = _volume_span(vol, o, d_world)
    start = np.maximum(tmin, near)
    stop = tmax if far is None else np.minimum(tmax, far)
    n = d_world.shape[0]
    hit_alpha = np.full(n, np.nan)
    active = start < stop
    alpha = start.copy()
    Fre = vol.F_real()
    f_prev = np.ones(n)
    obs_prev = np.zeros(n, dtype=bool)
    first = np.ones(n, dtype=bool)
    while np.any(active):
        ids = np.nonzero(active)[0]
        p = o + alpha[ids, None] * d_world[ids]
        f, obs = trilinear(vol, p, Fre, need_observed=True)
        crossing = (~first[ids]) & (f_prev[ids] > 0) & (f < 0)
        good = crossing & obs & obs_prev[ids]
        hit_alpha[ids[good]] = alpha[ids][good] - da
        stopped = f < 0
        f_prev[ids] = f
        obs_prev[ids] = obs
        first[ids] = False
        alpha[ids] += da
        active[ids[stopped]] = False
        active &= alpha <= stop
    hit = np.isfinite(hit_alpha)
    V = np.zeros((n, 3))
    N = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    ids = np.nonzero(hit)[0]
    if ids.size:
        d = d_cam[ids] @ pose.R.T if pose.perturbed else d_world[ids]
        t = pose.t
        am = hit_alpha[ids]

        def ray(a):
            return d * a[..., None] + t

        f0 = trilinear(vol, ray(am))
        f1 = trilinear(vol, ray(am + da))
        a0 = interpolate_crossing(am, da, f0, f1)
        if refine:
            fa = trilinear(vol, ray(a0))
            left = C.real(fa) < 0
            # regula falsi on the sub-bracket that still holds the sign change
            lo_a = C.where(left, am, a0)
            lo_f = C.where(left, f0, fa)
            hi_a = C.where(left, a0, am + da)
            hi_f = C.where(left, fa, f1)
            den = hi_f - lo_f
            ok = np.abs(C.real(den)) > 1e-12
            a0 = C.where(ok, lo_a - (hi_a - lo_a) * lo_f / C.where(ok, den, 1.0), a0)
        v = ray(a0)
        grad = []
        e = vol.voxel_size
        for ax in range(3):
            off = np.zeros(3)
            off[ax] = e
            grad.append((trilinear(vol, v + off) - trilinear(vol, v - off)) / (2.0 * e))
        g = C.stack(grad, axis=-1)
        gn = C.norm(g)
        gok = C.real(gn) > 1e-12
        nrm = g / C.where(gok, gn, 1.0)[..., None]
        if C.is_perturbed(v) or C.is_perturbed(nrm):
            cls = type(v) if C.is_perturbed(v) else type(nrm)
            V = cls.constant(V)
            N = cls.constant(N)
        V[ids] = v
        N[ids] = nrm
        valid[ids] = gok
    V = V.reshape(H, W, 3)
    N = N.reshape(H, W, 3)
    return SurfacePrediction(V, N, valid.reshape(H, W))


def predicted_depth(pred: SurfacePrediction, pose: PoseSE3) -> np.ndarray:
    """Camera-frame depth of a prediction's real vertices (0 where invalid)."""
    pr = pose.real()
    V = np.asarray(C.real(pred.V))
    z = ((V - pr.t) @ pr.R)[..., 2]
    return np.where(pred.valid, z, 0.0)


# ---------------------------------------------------------------------------
# mesh and file output
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def n_triangles(self) -> int:
        return int(self.faces.shape[0])

    def components(self) -> int:
        """Number of connected components of the face graph."""
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        if self.n_triangles == 0:
            return 0
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        nv = self.vertices.shape[0]
        g = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(nv, nv))
        used = np.unique(f)
        _, labels = connected_components(g, directed=False)
        return int(np.unique(labels[used]).size)


def extract_mesh(vol: TsdfVolume) -> Mesh:
    """Marching-cubes triangles of the observed ``F = 0`` level set."""
    from skimage.measure import marching_cubes

    F = vol.grid(vol.F_real())
    seen = vol.grid(vol.W > 0)
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not seen.any() or F[seen].min() >= 0 or F[seen].max() <= 0:
        return empty
    try:
        verts, faces, _, _ = marching_cubes(F, level=0.0)
    except (ValueError, RuntimeError):
        return empty
    # each vertex sits on a grid edge; both ends must have been observed, so
    # the jump from the band to unobserved F = 1 never becomes a surface
    lo = np.floor(verts).astype(np.intp)
    hi = np.minimum(np.ceil(verts).astype(np.intp), np.asarray(F.shape) - 1)
    good_v = seen[tuple(lo.T)] & seen[tuple(hi.T)]
    faces = faces[good_v[faces].all(axis=1)]
    if faces.size == 0:
        return empty
    used, faces = np.unique(faces, return_inverse=True)
    verts = verts[used]
    faces = faces.reshape(-1, 3)
    verts = vol.origin + (verts + 0.5) * vol.voxel_size
    return Mesh(verts, faces.astype(np.int64))


def write_stl(mesh: Mesh, path) -> None:
    tri = mesh.vertices[mesh.faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(ln > 0, nrm / np.where(ln > 0, ln, 1.0), 0.0)
    rec = np.zeros(len(tri), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    rec["n"] = nrm
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(b"csfdslam mesh".ljust(80, b"\0"))
        fh.write(struct.pack("<I", len(tri)))
        fh.write(rec.tobytes())


def write_ply(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\nproperty float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {mesh.n_triangles}\nproperty list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


CHECKPOINT_MAGIC = b"CSFDTSDF 1\n"


def save_volume(vol: TsdfVolume, path, with_imag: bool = False) -> None:
    """Header line (JSON) then little-endian float32 ``F.re``, ``W`` [, channels]."""
    chans = C.real(vol.F), vol.W
    extra = vol.F.channels[1:] if (with_imag and vol.perturbed) else ()
    header = {
        "dims": list(vol.dims), "voxel_size": vol.voxel_size, "origin": vol.origin.tolist(),
        "mu": vol.mu, "max_weight": vol.max_weight, "imag_channels": len(extra),
        "kind": type(vol.F).__name__ if extra else "real",
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(header) + "\n").encode())
        for a in (*chans, *extra):
            fh.write(np.asarray(a, dtype="<f4").tobytes())


def load_volume(path) -> TsdfVolume:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a TSDF checkpoint")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = np.frombuffer(rest[nl + 1:], dtype="<f4").astype(float)
    n = int(np.prod(header["dims"]))
    parts = [body[i * n:(i + 1) * n] for i in range(2 + header["imag_channels"])]
    F = parts[0].copy()
    if header["imag_channels"]:
        cls = {"ComplexScalar": C.ComplexScalar, "BicomplexScalar": C.BicomplexScalar}[header["kind"]]
        F = cls(parts[0].copy(), *[p.copy() for p in parts[2:]])
    return TsdfVolume(tuple(header["dims"]), header["voxel_size"], np.asarray(header["origin"]),
                      header["mu"], F, parts[1].copy(), header["max_weight"])
