import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csfdslam import se3, synth
from csfdslam.frames import Intrinsics
from csfdslam.se3 import PoseSE3

K = Intrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
CAM = PoseSE3(np.eye(3), np.array([0.0, 0.0, -2.0]))


def ray_sphere_depth(k, pose, c, r):
    """Closed-form first hit of every pixel ray, as depth along +z."""
    rays = k.rays().reshape(-1, 3)
    d = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    dw = d @ pose.R.T
    oc = pose.t - c
    b = dw @ oc
    disc = b * b - (oc @ oc - r * r)
    s = -b - np.sqrt(np.maximum(disc, 0))
    return np.where(disc > 0, s * d[:, 2], 0.0).reshape(k.height, k.width)


def test_sphere_on_axis():
    sc = synth.parse_scene("sphere 0 0 0 0.5")
    k = Intrinsics(40.0, 40.0, 16.0, 12.0, 33, 25)
    d = synth.render_depth(sc, CAM, k)
    assert d[12, 16] == pytest.approx(1.5, abs=1e-9)


def test_sphere_matches_closed_form():
    sc = synth.parse_scene("sphere 0.1 -0.05 0.2 0.6")
    pose = se3.exp_map([0.05, -0.1, 0.02, 0.1, 0.0, -1.9])
    d = synth.render_depth(sc, pose, K)
    want = ray_sphere_depth(K, pose, np.array([0.1, -0.05, 0.2]), 0.6)
    # grazing rays are where the two may disagree on hit or miss
    inner = want > 0
    inner &= np.abs(want - np.median(want[inner])) < 0.3
    assert inner.sum() > 100
    assert np.abs(d[inner] - want[inner]).max() <= 1e-9


def test_fronto_plane():
    sc = synth.parse_scene("plane 0 0 -1 3")
    d = synth.render_depth(sc, CAM, K)
    assert np.allclose(d, 5.0, atol=1e-9)


def test_misses_are_zero():
    d = synth.render_depth(synth.parse_scene("sphere 0 0 0 0.1"), CAM, K)
    assert d[0, 0] == 0.0 and (d > 0).sum() < d.size


def test_rendering_is_deterministic(k80, desk):
    p = synth.orbit(3)[1]
    assert np.array_equal(synth.render_depth(desk, p, k80), synth.render_depth(desk, p, k80))


def test_noise_model():
    d = np.full((200, 200), 2.0)
    d[0, 0] = 0.0
    noisy = synth.add_depth_noise(d, 0.001, 0.002, np.random.default_rng(0))
    sigma = 0.001 + 0.002 * 4.0
    assert noisy[0, 0] == 0.0
    assert abs(np.std(noisy[1:] - 2.0) / sigma - 1) <= 0.1


def test_noise_over_repeated_renders():
    k = Intrinsics(8.0, 8.0, 1.5, 1.5, 4, 4)
    seq = synth.render_sequence(synth.parse_scene("plane 0 0 -1 1.5"), [CAM] * 1000, k,
                                noise=(0.001, 0.0019), seed=11)
    px = np.array([d[1, 2] for d in seq.depths])
    clean = synth.render_depth(synth.parse_scene("plane 0 0 -1 1.5"), CAM, k)[1, 2]
    assert abs(np.std(px) / float(synth.noise_sigma(clean, 0.001, 0.0019)) - 1) <= 0.1


def test_render_sequence_seeded(k80, desk):
    poses = synth.orbit(2)
    a = synth.render_sequence(desk, poses, k80, noise=(0.001, 0.001), seed=4)
    b = synth.render_sequence(desk, poses, k80, noise=(0.001, 0.001), seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.depths, b.depths))
    assert np.allclose(np.diff(a.timestamps), 1 / 30)


@pytest.mark.parametrize("text, where", [
    ("sphere 0 0 0 1\ncone 1 2 3\n", "line 2"),
    ("\n# c\nsphere 0 0 0\n", "line 3"),
    ("box 0 0 0 1 1 1 5\n", "line 1"),
    ("sphere 0 0 0 -1\n", "line 1"),
    ("plane 0 0 0 1\n", "line 1"),
    ("sphere 0 0 x 1\n", "line 1"),
])
def test_scene_errors_name_the_line(text, where):
    with pytest.raises(synth.SceneError, match=where):
        synth.parse_scene(text)


def test_box_and_union():
    sc = synth.parse_scene("box 0 0 0 0.5 0.5 0.5\nsphere 3 0 0 0.5  # far away\n")
    assert sc.sdf(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.5)
    assert sc.sdf(np.array([0.0, 0.0, 0.0])) == pytest.approx(-0.5)
    assert sc.sdf(np.array([3.0, 0.0, 0.0])) == pytest.approx(-0.5)
    assert np.isinf(synth.Scene([]).sdf(np.zeros(3)))


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_look_at_points_the_optical_axis(eye, target):
    eye, target = np.array(eye), np.array(target)
    v = target - eye
    n = np.linalg.norm(v)
    if n < 1e-3 or np.linalg.norm(np.cross(v / n, [0, 1, 0])) < 1e-3:
        return
    p = synth.look_at(eye, target)
    assert np.allclose(p.R.T @ p.R, np.eye(3), atol=1e-12)
    assert np.linalg.det(p.R) == pytest.approx(1.0)
    assert np.allclose(p.R[:, 2], v / n)
    assert p.R[1, 1] >= -1e-12  # image down is world +y side


def test_orbit_looks_at_target():
    target = np.array([0.0, 0.2, 0.0])
    for p in synth.orbit(7):
        v = target - p.t
        assert np.allclose(p.R[:, 2], v / np.linalg.norm(v))


def test_waypoints_and_spline():
    wp = synth.parse_waypoints("# eye target\n0 -0.5 -1.2  0 0.2 0\n1 -0.5 -1  0 0.2 0\n0.5 -0.4 -1.5 0 0 0\n")
    traj = synth.spline_trajectory(wp, 11)
    assert len(traj) == 11
    for a, b in ((traj[0], wp[0]), (traj[5], wp[1]), (traj[10], wp[2])):
        assert se3.translation_error(a, b) <= 1e-12 and se3.rotation_error_deg(a, b) <= 1e-6
    with pytest.raises(synth.SceneError, match="line 2"):
        synth.parse_waypoints("0 0 0 1 1 1\n0 0 0\n")
    with pytest.raises(ValueError):
        synth.spline_trajectory(wp[:1], 5)
