"""TUM RGB-D style sequences on disk.

A sequence directory holds ``depth/*.png`` (16-bit, value / depth_scale =
meters, 0 invalid), an ``associations.txt`` and optionally
``groundtruth.txt``.  Association lines are either the usual four columns
``t_rgb rgb/... t_depth depth/...`` or two columns ``t_depth depth/...``.
Camera parameters come from a flat ``key = value`` file with
``fx fy cx cy width height depth_scale``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .frames import Intrinsics
from .se3 import PoseSE3

CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "depth_scale")
TUM_DEPTH_SCALE = 5000.0


class FormatError(ValueError):
    pass


def parse_key_values(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` (or ``key value``) lines; ``#`` comments."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise FormatError(f"{source}:{lineno}: expected 'key = value'")
            key, val = parts
        key, val = key.strip(), val.strip()
        if not key or not val:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        out[key] = val
    return out


def read_camera(path) -> tuple[Intrinsics, float]:
    kv = parse_key_values(Path(path).read_text(), str(path))
    missing = [k for k in CAMERA_KEYS if k not in kv]
    if missing:
        raise FormatError(f"{path}: missing camera keys {', '.join(missing)}")
    try:
        k = Intrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                       int(kv["width"]), int(kv["height"]))
        scale = float(kv["depth_scale"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if scale <= 0:
        raise FormatError(f"{path}: depth_scale must be positive")
    return k, scale


def write_camera(path, k: Intrinsics, depth_scale: float = TUM_DEPTH_SCALE) -> None:
    vals = dict(fx=repr(float(k.fx)), fy=repr(float(k.fy)), cx=repr(float(k.cx)), cy=repr(float(k.cy)),
                width=str(int(k.width)), height=str(int(k.height)),
                depth_scale=repr(float(depth_scale)))
    Path(path).write_text("".join(f"{key} = {vals[key]}\n" for key in CAMERA_KEYS))


def read_depth_png(path, depth_scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    if raw.ndim != 2:
        raise FormatError(f"{path}: depth image must be single channel")
    return raw / depth_scale


def write_depth_png(path, depth, depth_scale: float = TUM_DEPTH_SCALE) -> None:
    d = np.rint(np.asarray(depth) * depth_scale)
    if d.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this scale")
    Image.fromarray(d.astype(np.uint16)).save(path)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.center() for p in self.poses]).reshape(-1, 3)


def read_trajectory(path) -> Trajectory:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    ts, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            v = np.array([float(x) for x in parts])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: not a number") from None
        q = v[4:]
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-3:
            raise FormatError(f"{path}:{lineno}: quaternion norm {n:.6f} is not 1")
        if ts and v[0] <= ts[-1]:
            raise FormatError(f"{path}:{lineno}: timestamps must increase")
        ts.append(v[0])
        poses.append(PoseSE3.from_quaternion(v[1:4], q / n))
    return Trajectory(np.array(ts), poses)


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p in zip(traj.timestamps, traj.poses):
            c = p.center()
            q = p.quaternion()
            fh.write(f"{t:.6f} " + " ".join(f"{x:.9f}" for x in (*c, *q)) + "\n")


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

def read_associations(path) -> list:
    """``(timestamp, depth_relpath)`` pairs in file order."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) == 4:
            t, rel = parts[2], parts[3]
        elif len(parts) == 2:
            t, rel = parts
        else:
            raise FormatError(f"{path}:{lineno}: expected 2 or 4 columns")
        try:
            out.append((float(t), rel))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad timestamp {t!r}") from None
    return out


@dataclass
class Sequence:
    root: Path
    intrinsics: Intrinsics
    depth_scale: float
    frames: list  # (timestamp, path)
    groundtruth: Trajectory | None = None

    def __len__(self):
        return len(self.frames)

    def depth(self, i: int) -> np.ndarray:
        return read_depth_png(self.root / self.frames[i][1], self.depth_scale)

    def timestamp(self, i: int) -> float:
        return self.frames[i][0]


def open_sequence(root, camera=None, depth_scale: float | None = None) -> Sequence:
    """Load a sequence directory; ``camera`` defaults to ``root/camera.txt``."""
    root = Path(root)
    cam = Path(camera) if camera else root / "camera.txt"
    if not cam.exists():
        raise FileNotFoundError(f"camera config {cam} not found (intrinsics must be explicit)")
    k, scale = read_camera(cam)
    if depth_scale is not None:
        scale = depth_scale
    assoc = root / "associations.txt"
    if assoc.exists():
        frames = read_associations(assoc)
    elif (root / "depth.txt").exists():
        frames = read_associations(root / "depth.txt")
    else:
        raise FileNotFoundError(f"{root}: no associations.txt or depth.txt")
    gt_path = root / "groundtruth.txt"
    gt = read_trajectory(gt_path) if gt_path.exists() else None
    return Sequence(root, k, scale, frames, gt)


def write_sequence(root, depths, timestamps, k: Intrinsics, poses=None,
                   depth_scale: float = TUM_DEPTH_SCALE) -> Path:
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    lines = []
    for t, d in zip(timestamps, depths):
        rel = f"depth/{t:.6f}.png"
        write_depth_png(root / rel, d, depth_scale)
        lines.append(f"{t:.6f} {rel}\n")
    (root / "associations.txt").write_text("".join(lines))
    write_camera(root / "camera.txt", k, depth_scale)
    if poses is not None:
        write_trajectory(root / "groundtruth.txt", Trajectory(np.asarray(timestamps), list(poses)))
    return root
