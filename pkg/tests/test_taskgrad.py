import sys
import textwrap

import numpy as np
import pytest

from csfdslam import csfd as C
from csfdslam import frames, icp, se3, surfel, synth
from csfdslam import taskgrad as tg
from csfdslam.frames import DepthFrame
from csfdslam.surfel import SurfelMap


@pytest.fixture(scope="module")
def chain_setup(k80, desk):
    poses = synth.orbit(3)
    fr = [frames.surface_measure(DepthFrame(synth.render_depth(desk, p, k80)), k80) for p in poses]
    m0 = surfel.fuse(SurfelMap(), fr[0], poses[0], k80, 0)
    maps = tg.seeded_fusions(m0, fr[1], poses[1], k80, 1)
    P = np.asarray(C.real(maps[0].v))
    obj = np.nonzero(np.linalg.norm(P - [0, 0.25, 0], axis=1) < 0.4)[0]

    def rerun(xi):
        return surfel.fuse(m0, fr[1], se3.compose(se3.exp_map(xi), poses[1]), k80, 1)

    return maps, obj, rerun


def end_to_end_fd(score, obj, rerun, capacity, eps=1e-6):
    fd = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = eps
        mp, mm = rerun(e), rerun(-e)
        assert mp.capacity == mm.capacity == capacity
        fd[i] = (score(mp.positions()[obj])[0] - score(mm.positions()[obj])[0]) / (2 * eps)
    return fd


def test_linear_score_on_fresh_surfels(k80, desk):
    pose = synth.orbit(3)[0]
    g = frames.surface_measure(DepthFrame(synth.render_depth(desk, pose, k80)), k80)
    maps = tg.seeded_fusions(SurfelMap(), g, pose, k80, 0, components=[5])
    obj = np.arange(0, len(maps[5]), 7)
    res = tg.chain_pose_gradient(maps, obj, tg.linear_score([0, 0, 1.0]))
    assert res.dS_dxi[5] == pytest.approx(obj.size, rel=1e-12)
    assert np.all(res.dS_dxi[:5] == 0)


def test_constant_score_has_zero_gradient(chain_setup):
    maps, obj, _ = chain_setup
    res = tg.chain_pose_gradient(maps, obj, tg.constant_score(3.0))
    assert res.score == 3.0 and np.all(res.dS_dxi == 0)


@pytest.mark.parametrize("make", [
    lambda P: tg.spread_score(P.mean(axis=0)),
    lambda P: tg.centroid_score([0.3, 0.1, 0.2]),
    lambda P: tg.visibility_score([0, -0.5, -1.5], [0, 0.3, 1], 20, 10),
], ids=["spread", "centroid", "visibility"])
def test_chained_gradient_matches_end_to_end(chain_setup, make):
    maps, obj, rerun = chain_setup
    score = make(maps[0].positions()[obj])
    g = tg.chain_pose_gradient(maps, obj, score).dS_dxi
    fd = end_to_end_fd(score, obj, rerun, maps[0].capacity)
    assert np.abs(g - fd).max() <= 1e-3 * np.abs(fd).max()


def test_linearity_in_the_score(chain_setup):
    maps, obj, _ = chain_setup
    s1 = tg.centroid_score([0.3, 0.1, 0.2])
    s2 = tg.visibility_score([0, -0.5, -1.5], [0, 0.3, 1], 20, 10)
    a, b = 2.5, -0.75
    both = tg.chain_pose_gradient(maps, obj, tg.combine(a, s1, b, s2)).dS_dxi
    sep = a * tg.chain_pose_gradient(maps, obj, s1).dS_dxi + b * tg.chain_pose_gradient(maps, obj, s2).dS_dxi
    assert np.allclose(both, sep, rtol=1e-12, atol=1e-12 * np.abs(sep).max())


def test_breakdown_sums_to_total(chain_setup):
    maps, obj, _ = chain_setup
    res = tg.chain_pose_gradient(maps, obj, tg.centroid_score([0, 0, 0]), breakdown=True)
    assert res.contributions.shape == (6, obj.size)
    assert np.allclose(res.contributions.sum(axis=1), res.dS_dxi, rtol=1e-12)


def test_missing_seed_errors(chain_setup):
    maps, obj, _ = chain_setup
    score = tg.linear_score([0, 0, 1.0])
    plain = SurfelMap()
    plain.append(np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)), np.ones(3), np.ones(3), 0)
    with pytest.raises(tg.MissingSeedError):
        tg.chain_pose_gradient({0: plain}, [0, 1], score)
    with pytest.raises(tg.MissingSeedError):
        tg.chain_pose_gradient({}, [0], score)
    with pytest.raises(tg.MissingSeedError):
        tg.chain_pose_gradient(maps, [maps[0].capacity + 5], score)
    with pytest.raises(ValueError):
        tg.chain_pose_gradient(maps, [], score)


# -- score contract -------------------------------------------------------------------------

def test_wrong_gradient_fails_validation():
    with pytest.raises(tg.ScoreValidationError):
        tg.ScoreFunction(lambda P: (float(np.sum(P[:, 2] ** 2)), np.zeros_like(P)), "bad")


def test_builtin_scores_validate():
    for s in (tg.spread_score([0, 0, 1]), tg.centroid_score([0.1, 0, 1]),
              tg.visibility_score([0, 0, 0], [0, 0, 1])):
        assert s.validate(np.random.default_rng(3).uniform(-0.3, 0.3, (6, 3)) + [0, 0, 1.4]) <= 1e-5


# -- FD Hessian -----------------------------------------------------------------------------

def test_fd_hessian_of_quadratic():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 6))
    A = A + A.T
    b = rng.normal(size=6)
    Hm = tg.fd_hessian_from_gradients(lambda x: A @ x + b, rng.normal(size=6))
    assert np.abs(Hm - A).max() <= 1e-6
    assert np.array_equal(Hm, Hm.T)


def test_fd_hessian_symmetrizes():
    M = np.arange(36.0).reshape(6, 6)
    Hm = tg.fd_hessian_from_gradients(lambda x: M @ x, np.zeros(6))
    assert np.array_equal(Hm, Hm.T)
    assert np.allclose(Hm, 0.5 * (M + M.T))


def test_fd_hessian_matches_bicomplex_hessian(k80, desk):
    d = synth.render_depth(desk, synth.orbit(3)[1], k80)
    src = frames.surface_measure(DepthFrame(d), k80)
    ys, xs = np.nonzero(src.valid)
    v = src.V[ys, xs]
    T = se3.exp_map([0.05, -0.03, 0.02, 0.04, 0.01, -0.02])
    corr = icp.Correspondences(np.stack([xs, ys], -1), None, v, v @ T.R.T + T.t,
                               src.N[ys, xs] @ T.R.T, se3.PoseSE3.identity())

    def f(z):
        return icp.icp_energy(z, corr)

    xi = np.array([0.01, 0.02, -0.01, 0.0, 0.01, 0.02])
    _, _, Hc = C.hessian(f, xi)
    Hf = tg.fd_hessian_from_gradients(lambda x: C.gradient(f, x)[1], xi)
    assert np.abs(Hf - Hc).max() <= 1e-4 * np.abs(Hc).max()


# -- external score protocol ----------------------------------------------------------------

SCRIPT = textwrap.dedent("""
    import sys
    lines = [l for l in sys.stdin.read().splitlines() if l.strip()]
    assert lines[0] == "csfdslam-score 1"
    pts = [[float(v) for v in l.split()] for l in lines[1:]]
    print(repr(sum(p[2] for p in pts)))
    for p in pts:
        print("0.0 0.0 1.0")
""")


def test_subprocess_score(tmp_path):
    script = tmp_path / "score.py"
    script.write_text(SCRIPT)
    s = tg.subprocess_score([sys.executable, str(script)])
    P = np.array([[0, 0, 1.0], [1, 2, 3.5]])
    value, g = s(P)
    assert value == 4.5
    assert np.array_equal(g, [[0, 0, 1.0], [0, 0, 1.0]])


def test_subprocess_failures(tmp_path):
    bad = tmp_path / "bad.py"
    bad.write_text("import sys; sys.exit(3)\n")
    with pytest.raises(tg.ScoreProtocolError):
        tg.subprocess_score([sys.executable, str(bad)])
    short = tmp_path / "short.py"
    short.write_text("import sys; sys.stdin.read(); print(1.0)\n")
    with pytest.raises(tg.ScoreProtocolError):
        tg.subprocess_score([sys.executable, str(short)], validate=False)(np.zeros((2, 3)))


def test_protocol_round_trip():
    P = np.array([[0.1, -0.2, 1.3], [1e-17, 2.0, 3.0]])
    assert np.array_equal(tg.parse_request(tg.format_request(P)), P)
    v, g = tg.parse_response(tg.format_response(2.5, P), 2)
    assert v == 2.5 and np.array_equal(g, P)
    with pytest.raises(tg.ScoreProtocolError):
        tg.parse_request("0 0 1\n")
    with pytest.raises(tg.ScoreProtocolError):
        tg.parse_response("1.0\n0 0\n", 1)
    with pytest.raises(tg.ScoreProtocolError):
        tg.parse_response("x\n0 0 0\n", 1)
