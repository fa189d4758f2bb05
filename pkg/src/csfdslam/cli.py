"""``csfdslam`` command line.

Every subcommand takes ``--config FILE`` with flat ``key = value`` lines;
keys are the long flag names (dashes or underscores) and flags given on
the command line override them.  The effective configuration is written
next to the outputs so a run can be repeated exactly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import csfd as C
from . import dataset as D
from . import metrics, plotting, synth
from .frames import DepthFrame, Intrinsics, surface_measure
from .icp import OPTIMIZERS, IcpConfig, write_trace
from .se3 import PoseSE3

log = logging.getLogger("csfdslam")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TRACKING_LOST = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _floats(text: str) -> tuple:
    parts = str(text).replace(",", " ").split()
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _dims(text: str) -> tuple:
    d = _ints(text)
    if len(d) == 1:
        d = d * 3
    if len(d) != 3 or min(d) < 2:
        raise argparse.ArgumentTypeError("dims takes one or three integers >= 2")
    return d


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_intrinsics(p):
    g = p.add_argument_group("camera (all required unless --camera is given)")
    g.add_argument("--camera", help="camera file with fx fy cx cy width height depth_scale")
    g.add_argument("--fx", type=float, help="focal length x (pixels)")
    g.add_argument("--fy", type=float, help="focal length y (pixels)")
    g.add_argument("--cx", type=float, help="principal point x (pixels)")
    g.add_argument("--cy", type=float, help="principal point y (pixels)")
    g.add_argument("--width", type=int, help="image width (pixels)")
    g.add_argument("--height", type=int, help="image height (pixels)")
    g.add_argument("--depth-scale", type=float, help="PNG units per meter (TUM uses 5000)")


def _intrinsics(args) -> tuple[Intrinsics, float]:
    if args.camera:
        k, scale = D.read_camera(args.camera)
        if args.depth_scale is not None:
            scale = args.depth_scale
        return k, scale
    keys = ("fx", "fy", "cx", "cy", "width", "height", "depth_scale")
    missing = [key for key in keys if getattr(args, key) is None]
    if missing:
        raise ConfigError("camera parameters must be explicit; missing "
                          + ", ".join("--" + m.replace("_", "-") for m in missing))
    k = Intrinsics(args.fx, args.fy, args.cx, args.cy, args.width, args.height)
    return k, args.depth_scale


def _add_icp(p, default_optimizer="newton"):
    g = p.add_argument_group("ICP")
    g.add_argument("--optimizer", choices=OPTIMIZERS, default=default_optimizer,
                   help="pose solver (default %(default)s)")
    g.add_argument("--iterations", type=_ints, default="10,5,4",
                   help="iterations per pyramid level, coarse to fine (default %(default)s)")
    g.add_argument("--dist-thresh", type=float, default=0.1,
                   help="association distance gate in meters (default %(default)s)")
    g.add_argument("--angle-thresh", type=float, default=30.0,
                   help="association normal gate in degrees (default %(default)s)")
    g.add_argument("--h", type=float, default=C.DEFAULT_H,
                   help="complex step size (default %(default)s)")


def _icp_config(args) -> IcpConfig:
    return IcpConfig(optimizer=args.optimizer, iterations=tuple(args.iterations),
                     dist_thresh=args.dist_thresh, angle_thresh_deg=args.angle_thresh, h=args.h)


def _add_volume(p, dims="128", voxel="0.02"):
    g = p.add_argument_group("volume")
    g.add_argument("--dims", type=_dims, default=dims, help="voxels per axis (default %(default)s)")
    g.add_argument("--voxel-size", type=float, default=float(voxel),
                   help="voxel edge in meters (default %(default)s)")
    g.add_argument("--mu", type=float, help="truncation band in meters (default 5 voxels)")
    g.add_argument("--origin", type=_floats, help="grid corner x,y,z in meters "
                   "(default: centered on the first frame's median depth)")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _load_config(parser, sub, path) -> None:
    """Turn config entries into parser defaults, checked against known flags."""
    kv = D.parse_key_values(Path(path).read_text(), str(path))
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in kv.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise ConfigError(f"{path}: unknown key {key!r} for '{sub.prog}'")
        action = known[dest]
        if isinstance(action, argparse.BooleanOptionalAction):
            defaults[dest] = _bool(val)
        elif action.type is not None:
            try:
                defaults[dest] = action.type(val)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{path}: {key}: {exc}") from None
        else:
            defaults[dest] = val
        if action.choices is not None and defaults[dest] not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {', '.join(map(str, action.choices))}")
    sub.set_defaults(**defaults)


def _dump_config(args, path) -> None:
    skip = {"func", "config", "command", "verbose"}
    lines = []
    for key, val in sorted(vars(args).items()):
        if key in skip or val is None:
            continue
        if isinstance(val, (list, tuple)):
            val = ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in val)
        lines.append(f"{key} = {val}\n")
    Path(path).write_text("".join(lines))


# ---------------------------------------------------------------------------
# diffcheck
# ---------------------------------------------------------------------------

def _time(fn, repeat: int = 3):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def diffcheck(n: int = 1_000_000, h: float = 1e-8, seed: int = 0, dtype=np.float64) -> dict:
    """Forward difference against the complex step on the rational test function."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n).astype(dtype)
    exact = C.table1_derivative(x.astype(np.float64))
    hh = dtype(h)

    def fd():
        return C.forward_difference(C.table1_function, x, hh)

    def cs():
        z = C.table1_function(C.ComplexScalar(x, np.full_like(x, hh)))
        return z.im / hh

    d_fd, t_fd = _time(fd)
    d_cs, t_cs = _time(cs)
    rel = lambda d: float(np.max(np.abs(d.astype(np.float64) - exact) / np.abs(exact)))
    return {"n": n, "h": h, "dtype": np.dtype(dtype).name,
            "fd_max_rel_error": rel(d_fd), "csfd_max_rel_error": rel(d_cs),
            "fd_seconds": t_fd, "csfd_seconds": t_cs}


def cmd_diffcheck(args) -> int:
    rows = [diffcheck(args.n, args.h, args.seed, np.dtype(dt).type) for dt in args.dtypes]
    for r in rows:
        print(f"{r['dtype']:8s} FD  max rel err {r['fd_max_rel_error']:.3e}  {r['fd_seconds'] * 1e3:8.1f} ms")
        print(f"{r['dtype']:8s} CSFD max rel err {r['csfd_max_rel_error']:.3e}  {r['csfd_seconds'] * 1e3:8.1f} ms")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SCENES = {"desk": synth.desk_scene, "relief": synth.relief_scene}


def cmd_synth(args) -> int:
    k, scale = _intrinsics(args)
    scene = synth.load_scene(args.scene) if args.scene else SCENES[args.scene_name]()
    if args.waypoints:
        wps = synth.parse_waypoints(Path(args.waypoints).read_text())
        poses = synth.spline_trajectory(wps, args.frames)
    else:
        poses = synth.orbit(args.frames, radius=args.radius, height=args.orbit_height,
                            arc_deg=args.arc, start_deg=-0.5 * args.arc)
    seq = synth.render_sequence(scene, poses, k, noise=(args.noise_a, args.noise_b),
                                seed=args.seed, fps=args.fps)
    out = Path(args.out)
    D.write_sequence(out, seq.depths, seq.timestamps, k, seq.poses, scale)
    _dump_config(args, out / "run_config.txt")
    print(f"wrote {len(poses)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def _open(args):
    cam = args.camera if getattr(args, "camera", None) else None
    return D.open_sequence(args.dataset, cam, getattr(args, "depth_scale", None))


def cmd_track(args) -> int:
    from .pipeline import Tracker, VolumeConfig, run, timing_summary
    from .surfel import write_ply
    from .tsdf import save_volume

    seq = _open(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_config(args, out / "run_config.txt")
    n = len(seq) if args.max_frames is None else min(args.max_frames, len(seq))
    ts = np.array([seq.timestamp(i) for i in range(n)])
    init = PoseSE3.identity()
    truths = None
    if seq.groundtruth is not None:
        gt = seq.groundtruth
        ia, ib = metrics.match_timestamps(ts, gt.timestamps)
        if ia.size and ia[0] == 0 and args.start_at_truth:
            init = gt.poses[ib[0]]
        lookup = dict(zip(ia.tolist(), ib.tolist()))
        truths = [gt.poses[lookup[i]] if i in lookup else None for i in range(n)]
    vol = VolumeConfig(tuple(args.dims), args.voxel_size, args.mu,
                       None if args.origin is None else tuple(args.origin))
    tracker = Tracker(seq.intrinsics, args.backend, _icp_config(args), vol, init)

    class _Lazy:
        def __len__(self):
            return n

        def __getitem__(self, i):
            return seq.depth(i)

    records = run(tracker, _Lazy(), ts, args.step, truths)
    traj = D.Trajectory(np.array([r.timestamp for r in records]), [r.pose for r in records])
    D.write_trajectory(out / "trajectory.txt", traj)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("frame", "timestamp", "measure", "track", "fuse", "iterations", "loss"))
        for r in records:
            w.writerow((r.index, f"{r.timestamp:.6f}", *(f"{r.timing[s]:.6f}" for s in ("measure", "track", "fuse")),
                        r.iterations, repr(float(r.loss))))
    if tracker.model is not None:
        if args.backend == "tsdf":
            save_volume(tracker.model, out / "volume.tsdf")
        else:
            write_ply(tracker.model, out / "surfels.ply")
    summary = {"frames": len(records), "lost_at": tracker.lost, "timing": timing_summary(records)}
    if seq.groundtruth is not None and len(records) >= 3:
        m = metrics.ate(traj, seq.groundtruth)
        summary["ate"] = {key: m[key] for key in ("rmse", "mean", "median", "max", "matched")}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    if tracker.lost is not None:
        print(f"tracking lost at frame {tracker.lost}; partial trajectory written", file=sys.stderr)
        return EXIT_TRACKING_LOST
    return EXIT_OK


# ---------------------------------------------------------------------------
# reloc
# ---------------------------------------------------------------------------

def _world_cloud(depth, pose, k, stride=2):
    gm = surface_measure(DepthFrame(depth), k)
    V = np.asarray(gm.V)[::stride, ::stride][gm.valid[::stride, ::stride]]
    return pose.transform(V)


def cmd_reloc(args) -> int:
    from . import reloc as RL

    ref = _open(argparse.Namespace(dataset=args.reference, camera=args.camera,
                                   depth_scale=args.depth_scale))
    if ref.groundtruth is None:
        raise ConfigError(f"{args.reference}: reference dataset needs groundtruth.txt")
    qseq = ref if args.query is None else _open(argparse.Namespace(
        dataset=args.query, camera=args.camera, depth_scale=args.depth_scale))
    k = ref.intrinsics
    init_traj = D.read_trajectory(args.initial)
    truth = D.read_trajectory(args.truth) if args.truth else qseq.groundtruth

    ref_ts = np.array([ref.timestamp(i) for i in range(len(ref))])
    ia, ib = metrics.match_timestamps(ref_ts, ref.groundtruth.timestamps)
    ref_frames = ia.tolist()
    ref_poses = [ref.groundtruth.poses[j] for j in ib]
    q_ts = np.array([qseq.timestamp(i) for i in range(len(qseq))])
    qa, qb = metrics.match_timestamps(init_traj.timestamps, q_ts)
    if qa.size == 0:
        raise ConfigError("no initial pose matches a query frame within 20 ms")

    cfg = RL.RelocConfig(max_iter=args.max_iter, eta_ratio=args.eta_ratio, eta=args.eta, h=args.h)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    _dump_config(args, out / "run_config.txt")
    results = {m: [] for m in ("init", "gd", "newton")}
    rows = []
    for a, b in zip(qa, qb):
        t_q = float(q_ts[b])
        T0 = init_traj.poses[a]
        depth = qseq.depth(b)
        qframe = DepthFrame(depth, timestamp=t_q)
        same = qseq is ref
        cand = [i for i in range(len(ref_frames)) if not (same and abs(ref_ts[ref_frames[i]] - t_q) < 1e-6)]
        near = RL.nearest_frames([ref_poses[i] for i in cand], T0, args.n_reference)
        chosen = [cand[i] for i in near]
        frames_poses = [(DepthFrame(ref.depth(ref_frames[i])), ref_poses[i]) for i in chosen]
        volume = RL.build_reference(frames_poses, k, tuple(args.dims), args.voxel_size,
                                    None if args.origin is None else np.asarray(args.origin), args.mu)
        ref_cloud = np.concatenate([_world_cloud(f.raw, p, k) for f, p in frames_poses])
        qcloud = _world_cloud(depth, PoseSE3.identity(), k)
        gt = None
        if truth is not None:
            ta, tb = metrics.match_timestamps([t_q], truth.timestamps)
            gt = truth.poses[tb[0]] if ta.size else None
        poses = {"init": T0}
        try:
            prob = RL.RelocProblem(volume, qframe, k, T0, cfg)
            for m in ("gd", "newton"):
                res = RL.optimize(prob, m, gt)
                poses[m] = res.pose
                write_trace(out / "traces" / f"{t_q:.6f}_{m}.csv", res.trace)
        except (RL.NoOverlap, ValueError) as exc:
            log.warning("query %.6f: %s", t_q, exc)
            poses.setdefault("gd", T0)
            poses.setdefault("newton", T0)
        row = {"timestamp": t_q}
        for m, P in poses.items():
            e = RL.eval_nn_error(P, qcloud, ref_cloud)
            row[f"eq_{m}"] = e.error
            row[f"outlier_{m}"] = e.outlier
            if gt is not None:
                from .se3 import rotation_error_deg, translation_error
                row[f"t_err_{m}"] = translation_error(P, gt)
                row[f"r_err_{m}"] = rotation_error_deg(P, gt)
            results[m].append((t_q, P))
        rows.append(row)
        print(" ".join(f"{key}={val:.4g}" if isinstance(val, float) else f"{key}={val}"
                       for key, val in row.items()))
    for m, recs in results.items():
        D.write_trajectory(out / f"poses_{m}.txt",
                           D.Trajectory(np.array([r[0] for r in recs]), [r[1] for r in recs]))
    keys = list(dict.fromkeys(key for r in rows for key in r))
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    summary = {}
    for m in ("init", "gd", "newton"):
        inl = [r for r in rows if not r[f"outlier_{m}"]]
        s = {"outliers": len(rows) - len(inl)}
        if inl:
            s["median_eq"] = float(np.median([r[f"eq_{m}"] for r in inl]))
            if f"t_err_{m}" in inl[0]:
                s["median_t_err"] = float(np.median([r[f"t_err_{m}"] for r in inl]))
                s["median_r_err_deg"] = float(np.median([r[f"r_err_{m}"] for r in inl]))
        summary[m] = s
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / plot
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    est = D.read_trajectory(args.estimate)
    gt = D.read_trajectory(args.truth)
    m = metrics.ate(est, gt, args.max_dt)
    summary = {key: m[key] for key in ("rmse", "mean", "median", "max", "matched")}
    print(json.dumps(summary, indent=2))
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=2))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("index", "error"))
            for i, e in enumerate(m["errors"]):
                w.writerow((i, repr(float(e))))
    return EXIT_OK


def cmd_plot(args) -> int:
    traces = plotting.read_traces(args.traces)
    labels = plotting.plot_traces(traces, args.out, args.title, not args.linear)
    print(f"wrote {args.out} ({', '.join(labels)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

def _score(args):
    from . import taskgrad as TG

    if args.score == "centroid":
        if args.target is None:
            raise ConfigError("--target is required for the centroid score")
        return TG.centroid_score(args.target)
    if args.score == "visibility":
        if args.eye is None or args.axis is None:
            raise ConfigError("--eye and --axis are required for the visibility score")
        return TG.visibility_score(args.eye, args.axis, args.half_angle, args.sharpness)
    if not args.command_line:
        raise ConfigError("--command-line is required for the subprocess score")
    return TG.subprocess_score(args.command_line)


def _chain_fd(smap, gm, pose, k, index, obj, score, step, reference, tries: int = 4):
    """End-to-end central differences of the score over the six twist components.

    A step that flips any association changes which surfels exist, so the
    step is shrunk until both perturbed maps match the seeded map's layout.
    """
    from . import surfel as S
    from .se3 import compose, exp_map

    fd = np.zeros(6)
    used = []
    for i in range(6):
        h = step
        for _ in range(tries):
            e = np.zeros(6)
            e[i] = h
            maps = [S.fuse(smap, gm, compose(exp_map(sgn * e), pose), k, index) for sgn in (1.0, -1.0)]
            if all(m.capacity == reference.capacity and np.array_equal(m.live, reference.live)
                   for m in maps):
                break
            h /= 10.0
        else:
            raise RuntimeError(f"component {i}: map layout changes even at step {h * 10:g}")
        vals = [score(np.asarray(C.real(m.v))[obj])[0] for m in maps]
        fd[i] = (vals[0] - vals[1]) / (2 * h)
        used.append(h)
    return fd, used


def cmd_chain(args) -> int:
    from . import surfel as S
    from . import taskgrad as TG

    seq = _open(args)
    k = seq.intrinsics
    if args.trajectory:
        traj = D.read_trajectory(args.trajectory)
    elif seq.groundtruth is not None:
        traj = seq.groundtruth
    else:
        raise ConfigError("poses needed: pass --trajectory or provide groundtruth.txt")
    ts = np.array([seq.timestamp(i) for i in range(len(seq))])
    ia, ib = metrics.match_timestamps(ts, traj.timestamps)
    if ia.size < 2:
        raise ConfigError("need at least two posed frames")
    last = ia.size - 1 if args.frame is None else int(np.searchsorted(ia, args.frame))
    if last >= ia.size or ia[last] != (args.frame if args.frame is not None else ia[last]):
        raise ConfigError(f"frame {args.frame} has no pose")
    smap = S.SurfelMap()
    for j in range(last):
        gm = surface_measure(DepthFrame(seq.depth(ia[j])), k)
        smap = S.fuse(smap, gm, traj.poses[ib[j]], k, j)
    gm = surface_measure(DepthFrame(seq.depth(ia[last])), k)
    pose = traj.poses[ib[last]]
    maps = TG.seeded_fusions(smap, gm, pose, k, last, args.h)
    P = np.asarray(C.real(maps[0].v))
    live = maps[0].live
    sel = live & (np.linalg.norm(P - np.asarray(args.center), axis=1) <= args.radius)
    obj = np.nonzero(sel)[0]
    if obj.size == 0:
        raise ConfigError("no surfels inside the object region")
    score = _score(args)
    res = TG.chain_pose_gradient(maps, obj, score, args.h)
    out = {"score": res.score, "dS_dxi": res.dS_dxi.tolist(), "object_surfels": int(obj.size),
           "score_function": score.descriptor}
    if args.fd_check:
        fd, used = _chain_fd(smap, gm, pose, k, last, obj, score, args.fd_step, maps[0])
        out["fd_dS_dxi"] = fd.tolist()
        out["fd_step"] = used
        scale = max(np.abs(fd).max(), 1e-300)
        out["max_rel_diff"] = float(np.abs(fd - res.dS_dxi).max() / scale)
    text = json.dumps(out, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csfdslam", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="flat key = value file; command-line flags win")
        sp.set_defaults(func=func)
        return sp

    s = add("diffcheck", cmd_diffcheck, "forward difference vs complex step on (e^x + x^3 + x) / (x + 1)")
    s.add_argument("--n", type=int, default=1_000_000, help="sample count (default %(default)s)")
    s.add_argument("--h", type=float, default=1e-8, help="step size (default %(default)s)")
    s.add_argument("--seed", type=int, default=0, help="RNG seed (default %(default)s)")
    s.add_argument("--dtypes", type=lambda t: tuple(str(t).replace(",", " ").split()),
                   default="float64,float32", help="precisions to run (default %(default)s)")
    s.add_argument("--out", help="CSV report path")

    s = add("synth", cmd_synth, "render a synthetic depth sequence with ground truth")
    _add_intrinsics(s)
    s.add_argument("--out", help="output dataset directory")
    s.add_argument("--scene", help="scene file (sphere/box/plane lines)")
    s.add_argument("--scene-name", choices=sorted(SCENES), default="desk",
                   help="built-in scene when --scene is absent (default %(default)s)")
    s.add_argument("--waypoints", help="waypoint file 'ex ey ez tx ty tz' per line; default is an orbit")
    s.add_argument("--frames", type=int, default=100, help="frame count (default %(default)s)")
    s.add_argument("--radius", type=float, default=1.2, help="orbit radius in meters (default %(default)s)")
    s.add_argument("--orbit-height", type=float, default=-0.5, help="orbit y in meters (default %(default)s)")
    s.add_argument("--arc", type=float, default=60.0, help="orbit arc in degrees (default %(default)s)")
    s.add_argument("--noise-a", type=float, default=0.0, help="depth noise sigma = a + b d^2: a in meters")
    s.add_argument("--noise-b", type=float, default=0.0, help="depth noise b in 1/meters")
    s.add_argument("--seed", type=int, default=0, help="noise RNG seed (default %(default)s)")
    s.add_argument("--fps", type=float, default=30.0, help="timestamp rate (default %(default)s)")

    s = add("track", cmd_track, "track a depth sequence and fuse it into a model")
    s.add_argument("--dataset", help="sequence directory (camera.txt, associations.txt)")
    s.add_argument("--camera", help="camera file overriding DATASET/camera.txt")
    s.add_argument("--depth-scale", type=float, help="override the camera file's depth scale")
    s.add_argument("--out", help="output directory")
    s.add_argument("--backend", choices=("tsdf", "surfel"), default="tsdf", help="map type (default %(default)s)")
    s.add_argument("--step", type=int, default=1, help="use every STEP-th frame (default %(default)s)")
    s.add_argument("--max-frames", type=int, help="stop after this many input frames")
    s.add_argument("--start-at-truth", type=_bool, default="true",
                   help="start from the ground-truth pose of frame 0 when available (default %(default)s)")
    _add_icp(s)
    _add_volume(s)

    s = add("reloc", cmd_reloc, "refine initial query poses against a reference TSDF")
    s.add_argument("--reference", help="reference sequence with groundtruth.txt")
    s.add_argument("--query", help="query sequence (default: the reference sequence)")
    s.add_argument("--initial", help="initial query poses (TUM trajectory file)")
    s.add_argument("--truth", help="query ground truth (default: the query groundtruth.txt)")
    s.add_argument("--camera", help="camera file overriding the dataset's camera.txt")
    s.add_argument("--depth-scale", type=float, help="override the camera file's depth scale")
    s.add_argument("--out", help="output directory")
    s.add_argument("--n-reference", type=int, default=10, help="reference frames per query (default %(default)s)")
    s.add_argument("--max-iter", type=int, default=50, help="iteration cap (default %(default)s)")
    s.add_argument("--eta-ratio", type=float, default=0.5,
                   help="Newton switch at this fraction of the initial loss (default %(default)s)")
    s.add_argument("--eta", type=float, help="absolute Newton switch level, overrides --eta-ratio")
    s.add_argument("--h", type=float, default=C.DEFAULT_H, help="complex step size (default %(default)s)")
    _add_volume(s, dims="48", voxel="0.05")

    s = add("evaluate", cmd_evaluate, "absolute trajectory error after rigid alignment")
    s.add_argument("--estimate", help="estimated trajectory (TUM format)")
    s.add_argument("--truth", help="ground-truth trajectory (TUM format)")
    s.add_argument("--max-dt", type=float, default=metrics.MAX_DT,
                   help="timestamp matching window in seconds (default %(default)s)")
    s.add_argument("--json", help="write metrics JSON here")
    s.add_argument("--csv", help="write per-pose errors here")

    s = add("plot", cmd_plot, "plot optimization traces to SVG")
    s.add_argument("traces", nargs="+", help="trace CSVs (method from a 'method' column or the file stem)")
    s.add_argument("--out", help="SVG path")
    s.add_argument("--title", help="figure title")
    s.add_argument("--linear", action="store_true", help="linear loss axis")

    s = add("chain", cmd_chain, "chain a point-set score gradient to the last frame's pose")
    s.add_argument("--dataset", help="sequence directory")
    s.add_argument("--camera", help="camera file overriding DATASET/camera.txt")
    s.add_argument("--depth-scale", type=float, help="override the camera file's depth scale")
    s.add_argument("--trajectory", help="poses for the frames (default: groundtruth.txt)")
    s.add_argument("--frame", type=int, help="seeded frame index (default: last posed frame)")
    s.add_argument("--center", type=_floats, default="0,0.25,0", help="object region center (default %(default)s)")
    s.add_argument("--radius", type=float, default=0.4, help="object region radius (default %(default)s)")
    s.add_argument("--score", choices=("centroid", "visibility", "subprocess"), default="centroid",
                   help="score function (default %(default)s)")
    s.add_argument("--target", type=_floats, help="centroid score target point")
    s.add_argument("--eye", type=_floats, help="visibility cone apex")
    s.add_argument("--axis", type=_floats, help="visibility cone axis")
    s.add_argument("--half-angle", type=float, default=30.0, help="visibility cone half angle (default %(default)s)")
    s.add_argument("--sharpness", type=float, default=20.0, help="visibility sigmoid slope (default %(default)s)")
    s.add_argument("--command-line", help="external score program for --score subprocess")
    s.add_argument("--h", type=float, default=C.DEFAULT_H, help="complex step size (default %(default)s)")
    s.add_argument("--fd-check", type=_bool, default="false",
                   help="also rerun the fusion at +-step for a finite-difference check")
    s.add_argument("--fd-step", type=float, default=1e-6, help="finite-difference step (default %(default)s)")
    s.add_argument("--out", help="write the result JSON here")
    return p


REQUIRED = {
    "synth": ("out",), "track": ("dataset", "out"), "reloc": ("reference", "initial", "out"),
    "evaluate": ("estimate", "truth"), "plot": ("out",), "chain": ("dataset",),
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            _load_config(parser, sub, args.config)
            args = parser.parse_args(argv)
        missing = [m for m in REQUIRED.get(args.command, ()) if getattr(args, m) in (None, "")]
        if missing:
            raise ConfigError("missing required setting(s): "
                              + ", ".join("--" + m.replace("_", "-") for m in missing))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_ERROR
        return code
    except (ConfigError, D.FormatError, synth.SceneError, plotting.TraceError,
            FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
