"""Register a synthetic depth cloud with GD, NCG and Newton and plot the traces.

    python3 demos/icp_optimizers.py out_dir
"""
import sys
from pathlib import Path

import numpy as np

from csfdslam import frames, icp, plotting, se3, synth
from csfdslam.frames import DepthFrame, Intrinsics
from csfdslam.tsdf import SurfacePrediction


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    k = Intrinsics(65.625, 65.625, 39.5, 29.5, 80, 60)
    d = synth.render_depth(synth.desk_scene(), synth.orbit(3)[1], k)
    src = frames.surface_measure(DepthFrame(d), k)
    T = se3.random_pose(np.random.default_rng(0), 10, 0.1)
    tgt = SurfacePrediction(np.where(src.valid[..., None], src.V @ T.R.T + T.t, 0.0),
                            src.N @ T.R.T, src.valid.copy())
    cfg = icp.IcpConfig(dist_thresh=0.5, angle_thresh_deg=60, loss_tol=1e-10, max_iter=100)

    def assoc(P):
        return icp.associate(P, src, tgt, T, k, cfg.dist_thresh, cfg.angle_thresh_deg)

    traces = {}
    for m in ("gd", "ncg", "newton"):
        r = icp.solve(assoc, np.zeros(6), cfg, m, base=se3.PoseSE3.identity(), truth=T)
        traces[m] = np.array(r.trace)
        print(f"{m:7s} iterations to 1e-6: {r.iterations_to(1e-6)}  final loss {r.loss:.2e}")
    plotting.write_trace_table(out / "traces.csv", traces)
    cols = plotting.read_traces([out / "traces.csv"])
    plotting.plot_traces(cols, out / "traces.svg", "ICP on a synthetic desk frame")
    print(f"wrote {out / 'traces.svg'}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "demo_icp")
