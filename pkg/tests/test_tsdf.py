import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csfdslam import csfd as C
from csfdslam import frames, se3, synth, tsdf
from csfdslam.frames import DepthFrame, Intrinsics
from csfdslam.se3 import PoseSE3
from csfdslam.tsdf import TsdfVolume

H = 1e-8
EPS = 1e-5


def sphere_sdf(center, radius):
    c = np.asarray(center, dtype=float)
    return lambda p: np.linalg.norm(p - c, axis=-1) - radius


@pytest.fixture(scope="module")
def desk_setup():
    k = Intrinsics(525 / 4, 525 / 4, 159.5 / 2, 119.5 / 2, 160, 120)
    poses = synth.orbit(5)
    d = synth.render_depth(synth.desk_scene(), poses[0], k)
    fr = frames.bilateral_filter(DepthFrame(d))
    vol = tsdf.surface_update(TsdfVolume.empty((64,) * 3, 0.04), poses[0], fr, k)
    return k, poses, fr, vol


# -- truncation -----------------------------------------------------------------

def test_psi_examples():
    mu = 0.1
    for eta, want in [(0.0, 0.0), (mu / 2, 0.5), (2 * mu, 1.0), (-mu / 2, -0.5), (-mu, -1.0)]:
        val, keep = tsdf.psi(np.array(eta), mu)
        assert keep and float(val) == pytest.approx(want)
    assert not tsdf.psi(np.array(-2 * mu), mu)[1]


def test_psi_passes_derivative_inside_band_only():
    v, _ = tsdf.psi(C.ComplexScalar(np.array([0.05, 0.3]), np.array([H, H])), 0.1)
    assert np.allclose(v.im, [H / 0.1, 0.0])


# -- surface update ----------------------------------------------------------------

def _flat_wall(depth=1.0):
    k = Intrinsics(20.0, 20.0, 4.5, 4.5, 10, 10)
    return k, DepthFrame(np.full((10, 10), depth))


def test_voxel_on_surface():
    k, fr = _flat_wall(1.0)
    vol = TsdfVolume.empty((3, 3, 3), 0.1, origin=(-0.15, -0.15, 0.85))
    center = np.ravel_multi_index((1, 1, 1), vol.dims)
    assert np.allclose(vol.centers([center])[0], [0, 0, 1.0])
    out = tsdf.surface_update(vol, PoseSE3.identity(), fr, k)
    assert abs(out.F_real()[center]) <= 1e-12
    assert out.W[center] == 1.0


def test_untouched_voxels_stay_empty():
    k, fr = _flat_wall(1.0)
    vol = TsdfVolume.empty((4, 4, 4), 0.1, origin=(5.0, 5.0, 5.0))
    out = tsdf.surface_update(vol, PoseSE3.identity(), fr, k)
    assert np.all(out.W == 0) and np.all(out.F_real() == 1.0)


def test_fusing_twice_is_fixed_point(desk_setup):
    k, poses, fr, vol = desk_setup
    again = tsdf.surface_update(vol, poses[0], fr, k)
    seen = vol.W > 0
    assert seen.sum() > 1000
    assert np.allclose(again.F_real(), vol.F_real(), atol=1e-12, rtol=0)
    assert np.array_equal(again.W[seen], 2 * vol.W[seen])


def test_weight_cap():
    k, fr = _flat_wall(1.0)
    vol = TsdfVolume.empty((3, 3, 3), 0.1, origin=(-0.15, -0.15, 0.85))
    vol.max_weight = 3.0
    for _ in range(5):
        vol = tsdf.surface_update(vol, PoseSE3.identity(), fr, k)
    assert vol.W.max() == 3.0


def test_fusion_order_commutes(k80, desk):
    poses = synth.orbit(4)
    fa = frames.bilateral_filter(DepthFrame(synth.render_depth(desk, poses[0], k80)))
    fb = frames.bilateral_filter(DepthFrame(synth.render_depth(desk, poses[2], k80)))
    vol = TsdfVolume.empty((48,) * 3, 0.05)
    ab = tsdf.surface_update(tsdf.surface_update(vol, poses[0], fa, k80), poses[2], fb, k80)
    ba = tsdf.surface_update(tsdf.surface_update(vol, poses[2], fb, k80), poses[0], fa, k80)
    assert (ab.W == 2).sum() > 500
    assert np.array_equal(ab.W, ba.W)
    assert np.abs(ab.F_real() - ba.F_real()).max() <= 1e-6


@settings(max_examples=10)
@given(seed=st.integers(0, 10_000))
def test_truncation_holds_after_updates(seed):
    rng = np.random.default_rng(seed)
    k = Intrinsics(30.0, 30.0, 9.5, 7.5, 20, 16)
    vol = TsdfVolume.empty((16,) * 3, 0.05, origin=(-0.4, -0.4, 0.3))
    for _ in range(3):
        d = rng.uniform(0.4, 1.2, size=(16, 20))
        d[rng.random(d.shape) < 0.1] = 0.0
        pose = se3.random_pose(rng, 5.0, 0.05)
        vol = tsdf.surface_update(vol, pose, DepthFrame(d), k)
    assert np.abs(vol.F_real()).max() <= 1.0
    assert vol.W.min() >= 0.0


def _pose_of(base, xi):
    return se3.compose(base, se3.exp_map(xi))


def test_fused_value_pose_derivative_matches_central_differences(desk_setup):
    k, poses, fr, vol0 = desk_setup
    base = poses[1]
    rng = np.random.default_rng(0)
    for i in range(6):
        seeded = tsdf.surface_update(vol0, _pose_of(base, se3.seeded_twist(np.zeros(6), i)), fr, k)
        dF = C.extract_derivative(seeded.F, H)
        e = np.zeros(6)
        e[i] = EPS
        vp = tsdf.surface_update(vol0, _pose_of(base, e), fr, k)
        vm = tsdf.surface_update(vol0, _pose_of(base, -e), fr, k)
        v0 = tsdf.surface_update(vol0, base, fr, k).F_real()
        fwd = (vp.F_real() - v0) / EPS
        bwd = (v0 - vm.F_real()) / EPS
        # probes where the observation set is the same on both sides, Psi is not
        # saturated and the bilinear lookup does not cross a pixel seam
        same = (vp.W == seeded.W) & (vm.W == seeded.W) & (seeded.W > 0)
        smooth = np.abs(fwd - bwd) <= 1e-5
        pool = np.nonzero(same & smooth & (np.abs(seeded.F_real()) < 0.99))[0]
        idx = rng.choice(pool, 50, replace=False)
        fd = (fwd + bwd)[idx] / 2
        assert np.abs(dF[idx] - fd).max() <= 1e-4


def test_fused_value_depth_derivative_matches_finite_difference():
    k, _ = _flat_wall()
    rng = np.random.default_rng(3)
    d = 1.0 + rng.normal(scale=0.01, size=(10, 10))
    vol = TsdfVolume.empty((8,) * 3, 0.04, origin=(-0.16, -0.16, 0.84))
    fr, ok = frames.perturb_depth(DepthFrame(d), (5, 4), H)
    assert ok
    seeded = tsdf.surface_update(vol, PoseSE3.identity(), fr, k)
    d2 = d.copy()
    d2[4, 5] += EPS
    d1 = d.copy()
    d1[4, 5] -= EPS
    fd = (tsdf.surface_update(vol, PoseSE3.identity(), DepthFrame(d2), k).F_real()
          - tsdf.surface_update(vol, PoseSE3.identity(), DepthFrame(d1), k).F_real()) / (2 * EPS)
    dF = C.extract_derivative(seeded.F, H)
    assert np.abs(fd).max() > 1.0
    assert np.abs(dF - fd).max() <= 1e-4


# -- ray casting --------------------------------------------------------------------

def test_crossing_interpolation_example():
    assert tsdf.interpolate_crossing(1.0, 0.1, 0.5, -0.5) == pytest.approx(1.05)


def test_sphere_on_axis_depth():
    vs = 0.02
    vol = TsdfVolume.from_sdf(sphere_sdf((0, 0, 1.3), 0.3), (64,) * 3, vs, origin=(-0.64, -0.64, 0.5))
    k = Intrinsics(60.0, 60.0, 15.0, 15.0, 31, 31)
    pred = tsdf.raycast(vol, PoseSE3.identity(), k)
    assert pred.valid[15, 15]
    z = tsdf.predicted_depth(pred, PoseSE3.identity())
    assert abs(z[15, 15] - 1.0) <= vs / 2
    assert np.allclose(np.abs(pred.N[15, 15]), [0, 0, 1], atol=0.05)


def test_back_to_front_crossing_ignored():
    # F is negative near the camera and positive beyond z = 1
    vol = TsdfVolume.empty((32,) * 3, 0.04, origin=(-0.64, -0.64, 0.2))
    vol.F = np.clip((vol.centers()[:, 2] - 1.0) / vol.mu, -1.0, 1.0)
    vol.W[:] = 1.0
    pred = tsdf.raycast(vol, PoseSE3.identity(), Intrinsics(20.0, 20.0, 7.5, 7.5, 16, 16))
    assert not pred.valid.any()


def test_unobserved_corners_block_crossing():
    vol = TsdfVolume.from_sdf(sphere_sdf((0, 0, 1.3), 0.3), (64,) * 3, 0.02, origin=(-0.64, -0.64, 0.5))
    k = Intrinsics(60.0, 60.0, 15.0, 15.0, 31, 31)
    vol.W[:] = 0.0
    assert not tsdf.raycast(vol, PoseSE3.identity(), k).valid.any()


def test_raycast_reproduces_input_depth(desk_setup):
    k, poses, fr, vol = desk_setup
    pred = tsdf.raycast(vol, poses[0], k)
    z = tsdf.predicted_depth(pred, poses[0])
    both = pred.valid & (fr.depth() > 0)
    assert both.mean() > 0.5
    assert np.median(np.abs(z[both] - fr.depth()[both])) <= vol.voxel_size


def test_raycast_pose_derivative_matches_central_differences(desk_setup):
    k, poses, fr, vol = desk_setup
    base = poses[1]
    rng = np.random.default_rng(1)
    for i in range(6):
        e = np.zeros(6)
        e[i] = EPS
        p = tsdf.raycast(vol, _pose_of(base, se3.seeded_twist(np.zeros(6), i)), k)
        pp = tsdf.raycast(vol, _pose_of(base, e), k)
        pm = tsdf.raycast(vol, _pose_of(base, -e), k)
        p0 = tsdf.raycast(vol, base, k)
        ok = p.valid & pp.valid & pm.valid
        dV = np.asarray(C.extract_derivative(p.V, H))[ok]
        fwd = (pp.V[ok] - p0.V[ok]) / EPS
        bwd = (p0.V[ok] - pm.V[ok]) / EPS
        # a pixel whose march lands on a different sample step is a kink of the
        # real pipeline, not a derivative; keep pixels that are smooth on both sides
        smooth = np.abs(fwd - bwd).max(axis=1) <= 1e-5
        assert smooth.sum() >= 50
        pick = rng.choice(np.nonzero(smooth)[0], 50, replace=False)
        fd = (fwd + bwd)[pick] / 2
        assert np.abs(dV[pick] - fd).max() <= 1e-4


def test_raycast_real_part_unaffected_by_seed(desk_setup):
    k, poses, _, vol = desk_setup
    a = tsdf.raycast(vol, poses[1], k)
    b = tsdf.raycast(vol, se3.compose(poses[1], se3.exp_map(se3.seeded_twist(np.zeros(6), 2))), k)
    assert np.array_equal(a.valid, b.valid)
    assert np.allclose(a.V, C.real(b.V), atol=1e-12, rtol=0)


def test_subsample():
    pred = tsdf.SurfacePrediction(np.zeros((6, 8, 3)), np.zeros((6, 8, 3)), np.ones((6, 8), bool))
    assert pred.subsample(1).valid.shape == (3, 4)
    assert pred.subsample(0) is pred


# -- mesh and files ---------------------------------------------------------------------

def test_empty_volume_has_no_triangles():
    assert tsdf.extract_mesh(TsdfVolume.empty((8, 8, 8), 0.1)).n_triangles == 0


def test_sphere_mesh_radius():
    vs = 0.02
    vol = TsdfVolume.from_sdf(sphere_sdf((0, 0, 0), 0.3), (48,) * 3, vs)
    mesh = tsdf.extract_mesh(vol)
    assert mesh.n_triangles > 100
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.sqrt(np.mean((r - 0.3) ** 2)) <= vs
    assert mesh.components() == 1


def test_two_spheres_two_components():
    a, b = sphere_sdf((-0.3, 0, 0), 0.15), sphere_sdf((0.3, 0, 0), 0.15)
    vol = TsdfVolume.from_sdf(lambda p: np.minimum(a(p), b(p)), (48,) * 3, 0.025)
    assert tsdf.extract_mesh(vol).components() == 2


def test_mesh_is_deterministic():
    vol = TsdfVolume.from_sdf(sphere_sdf((0, 0, 0), 0.2), (24,) * 3, 0.03)
    a, b = tsdf.extract_mesh(vol), tsdf.extract_mesh(vol)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)


def test_mesh_files(tmp_path):
    mesh = tsdf.extract_mesh(TsdfVolume.from_sdf(sphere_sdf((0, 0, 0), 0.2), (24,) * 3, 0.03))
    tsdf.write_stl(mesh, tmp_path / "m.stl")
    data = (tmp_path / "m.stl").read_bytes()
    assert int.from_bytes(data[80:84], "little") == mesh.n_triangles
    assert len(data) == 84 + 50 * mesh.n_triangles
    tsdf.write_ply(mesh, tmp_path / "m.ply")
    head = (tmp_path / "m.ply").read_text().splitlines()
    assert head[0] == "ply" and f"element face {mesh.n_triangles}" in head


def test_checkpoint_round_trip(tmp_path, desk_setup):
    k, poses, fr, vol = desk_setup
    tsdf.save_volume(vol, tmp_path / "v.bin")
    back = tsdf.load_volume(tmp_path / "v.bin")
    assert back.dims == vol.dims and back.mu == vol.mu
    assert np.allclose(back.F, vol.F_real(), atol=1e-6) and np.array_equal(back.W, vol.W)


def test_checkpoint_keeps_channels(tmp_path):
    k, fr = _flat_wall()
    vol = TsdfVolume.empty((4, 4, 4), 0.05, origin=(-0.1, -0.1, 0.9))
    pose = se3.exp_map(se3.seeded_twist(np.zeros(6), 5))
    vol = tsdf.surface_update(vol, pose, fr, k)
    tsdf.save_volume(vol, tmp_path / "c.bin", with_imag=True)
    back = tsdf.load_volume(tmp_path / "c.bin")
    assert isinstance(back.F, C.ComplexScalar)
    assert np.allclose(back.F.im, vol.F.im.astype(np.float32))


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        tsdf.load_volume(tmp_path / "x.bin")
