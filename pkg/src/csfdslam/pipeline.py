"""Frame-to-model tracking loop over a TSDF volume or a surfel map."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import surfel as S
from . import tsdf as T
from .frames import DepthFrame, Intrinsics, bilateral_filter, build_pyramid, surface_measure
from .icp import IcpConfig, TrackingLost, track_frame
from .se3 import PoseSE3

log = logging.getLogger(__name__)

BACKENDS = ("tsdf", "surfel")
STAGES = ("measure", "track", "fuse")


@dataclass
class VolumeConfig:
    dims: tuple = (128, 128, 128)
    voxel_size: float = 0.02
    mu: float | None = None
    origin: tuple | None = None  # None: centered on the first frame's median depth


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    pose: PoseSE3
    timing: dict
    iterations: int
    loss: float


def place_volume(cfg: VolumeConfig, frame: DepthFrame, pose: PoseSE3, k: Intrinsics) -> np.ndarray:
    """Grid origin putting the volume center on the first view's median depth."""
    if cfg.origin is not None:
        return np.asarray(cfg.origin, dtype=float)
    d = frame.raw[frame.raw > 0]
    depth = float(np.median(d)) if d.size else 1.0
    center = pose.transform(np.array([0.0, 0.0, depth]))
    return np.asarray(center) - 0.5 * np.asarray(cfg.dims) * cfg.voxel_size


@dataclass
class Tracker:
    intrinsics: Intrinsics
    backend: str = "tsdf"
    icp: IcpConfig = field(default_factory=IcpConfig)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    initial_pose: PoseSE3 = field(default_factory=PoseSE3.identity)
    filter_depth: bool = True

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        self.model = None
        self.pose = None
        self.records: list[FrameRecord] = []
        self._count = 0

    @property
    def poses(self) -> list:
        return [r.pose for r in self.records]

    def _fuse(self, frame: DepthFrame, maps, pose: PoseSE3, index: int):
        if self.backend == "tsdf":
            self.model = T.surface_update(self.model, pose, frame, self.intrinsics)
        else:
            self.model = S.fuse(self.model, maps, pose, self.intrinsics, index)

    def _predict(self, pose: PoseSE3):
        if self.backend == "tsdf":
            return T.raycast(self.model, pose, self.intrinsics)
        return S.predict_maps(self.model, pose, self.intrinsics)

    def process(self, depth: np.ndarray, timestamp: float = 0.0, truth: PoseSE3 | None = None) -> FrameRecord:
        """Track one depth image against the model, then fuse it.

        Raises :class:`TrackingLost` without touching the model when no
        pyramid level can be registered.
        """
        timing = {}
        t0 = time.perf_counter()
        frame = DepthFrame(depth, timestamp=timestamp)
        measured = bilateral_filter(frame) if self.filter_depth else frame
        pyr = build_pyramid(measured, self.intrinsics, levels=len(self.icp.iterations))
        timing["measure"] = time.perf_counter() - t0

        iterations, loss = 0, float("nan")
        t0 = time.perf_counter()
        if self.model is None:
            pose = self.initial_pose
            if self.backend == "tsdf":
                origin = place_volume(self.volume, frame, pose, self.intrinsics)
                self.model = T.TsdfVolume.empty(self.volume.dims, self.volume.voxel_size,
                                                origin, self.volume.mu)
            else:
                self.model = S.SurfelMap()
        else:
            prediction = self._predict(self.pose)
            result = track_frame(prediction, pyr, self.pose, self.icp, truth)
            pose, iterations, loss = result.pose, result.iterations, result.loss
        timing["track"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        self._fuse(measured, pyr[0].maps, pose, self._count)
        timing["fuse"] = time.perf_counter() - t0

        self.pose = pose
        rec = FrameRecord(self._count, timestamp, pose, timing, iterations, loss)
        self.records.append(rec)
        self._count += 1
        return rec


def run(tracker: Tracker, depths, timestamps, step: int = 1, truths=None) -> list:
    """Feed every ``step``-th frame; stops at the first lost frame.

    Returns the records so far; ``tracker.lost`` tells whether tracking
    ended early.
    """
    if step < 1:
        raise ValueError("frame step must be >= 1")
    tracker.lost = None
    for i in range(0, len(depths), step):
        truth = None if truths is None else truths[i]
        try:
            tracker.process(depths[i], float(timestamps[i]), truth)
        except TrackingLost as exc:
            log.warning("tracking lost at frame %d: %s", i, exc)
            tracker.lost = i
            break
    return tracker.records


def timing_summary(records: list) -> dict:
    """Mean seconds per stage over tracked frames (the first frame excluded)."""
    rows = records[1:] or records
    return {s: float(np.mean([r.timing[s] for r in rows])) if rows else 0.0 for s in STAGES}
