import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incsplat.errors import BehindCamera, NonPositiveDepth
from incsplat.geometry import (Covariance3, Intrinsics, Pose,
                               axis_angle_to_quat, load_trajectory, project,
                               project_covariance, project_points,
                               projection_jacobian, quat_canonical,
                               quat_multiply, quat_rotmat_backward,
                               quat_to_rotmat, quats_rotmats_backward,
                               quats_to_rotmats, rotmat_to_quat,
                               save_trajectory, unproject_pixel,
                               unproject_pixels)

K = Intrinsics(60.0, 55.0, 31.5, 23.5, 64, 48)

finite_q = st.lists(st.floats(-2, 2), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3)


@given(finite_q)
def test_quat_rotmat_orthonormal(q):
    R = quat_to_rotmat(np.array(q))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-12)


@given(finite_q)
def test_rotmat_quat_round_trip(q):
    R = quat_to_rotmat(np.array(q))
    q2 = rotmat_to_quat(R)
    assert np.allclose(quat_to_rotmat(q2), R, atol=1e-9)


@given(finite_q, finite_q)
def test_quat_multiply_matches_matrix_product(qa, qb):
    qa, qb = np.array(qa), np.array(qb)
    Rab = quat_to_rotmat(quat_multiply(qa / np.linalg.norm(qa),
                                       qb / np.linalg.norm(qb)))
    assert np.allclose(Rab, quat_to_rotmat(qa) @ quat_to_rotmat(qb), atol=1e-12)


def test_quat_canonical_sign():
    q = quat_canonical(np.array([-1.0, 0.2, 0.1, -0.3]))
    assert q[0] >= 0 and np.isclose(np.linalg.norm(q), 1.0)


def test_quats_to_rotmats_matches_scalar():
    rng = np.random.default_rng(0)
    qs = rng.normal(size=(20, 4))
    Rs = quats_to_rotmats(qs)
    for q, R in zip(qs, Rs):
        assert np.allclose(R, quat_to_rotmat(q), atol=1e-14)


def test_quat_rotmat_backward_matches_fd():
    rng = np.random.default_rng(1)
    for _ in range(10):
        q = rng.normal(size=4)
        G = rng.normal(size=(3, 3))  # dL/dR for L = sum(G * R)
        g = quat_rotmat_backward(q, G)
        h = 1e-6
        fd = np.zeros(4)
        for i in range(4):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            fd[i] = (np.sum(G * quat_to_rotmat(qp))
                     - np.sum(G * quat_to_rotmat(qm))) / (2 * h)
        assert np.allclose(g, fd, atol=1e-7)


def test_quats_rotmats_backward_matches_scalar():
    rng = np.random.default_rng(2)
    qs = rng.normal(size=(15, 4))
    Gs = rng.normal(size=(15, 3, 3))
    batched = quats_rotmats_backward(qs, Gs)
    for i in range(15):
        assert np.allclose(batched[i], quat_rotmat_backward(qs[i], Gs[i]),
                           atol=1e-13)


def test_axis_angle_round_trip():
    w = np.array([0.3, -0.2, 0.1])
    q = axis_angle_to_quat(w)
    assert np.isclose(Pose(q, np.zeros(3)).rotation_angle_to(Pose()),
                      np.linalg.norm(w), atol=1e-12)


def test_pose_inverse_compose_identity():
    p = Pose(np.array([0.9, 0.1, -0.2, 0.3]), np.array([1.0, -2.0, 0.5]))
    ident = p.compose(p.inverse())
    assert np.allclose(ident.t, 0, atol=1e-12)
    assert ident.rotation_angle_to(Pose()) < 1e-12


def test_pose_world_to_camera_inverts_apply():
    p = Pose(np.array([0.5, 0.5, 0.5, 0.5]), np.array([3.0, 1.0, -1.0]))
    x = np.array([[0.2, 0.4, 1.5], [-1.0, 0.3, 2.0]])
    assert np.allclose(p.world_to_camera(p.apply(x)), x, atol=1e-12)


def test_project_principal_point():
    # point on the optical axis lands at the principal point
    pix, z = project(np.array([0.0, 0.0, 2.0]), Pose(), K)
    assert np.allclose(pix, [K.cx, K.cy]) and z == 2.0


def test_project_behind_camera_raises():
    with pytest.raises(BehindCamera):
        project(np.array([0.0, 0.0, -1.0]), Pose(), K)


def test_unproject_nonpositive_depth_raises():
    with pytest.raises(NonPositiveDepth):
        unproject_pixel(np.array([10.0, 10.0]), 0.0, K, Pose())


@settings(max_examples=60)
@given(st.floats(0, 63), st.floats(0, 47), st.floats(0.1, 50))
def test_project_unproject_round_trip(u, v, d):
    pose = Pose(np.array([0.8, 0.1, 0.2, -0.1]), np.array([0.5, -0.3, 1.0]))
    X = unproject_pixel(np.array([u, v]), d, K, pose)
    pix, z = project(X, pose, K)
    assert np.allclose(pix, [u, v], atol=1e-9)
    assert np.isclose(z, d, atol=1e-9)


def test_vectorized_projection_matches_scalar():
    rng = np.random.default_rng(3)
    pose = Pose(rng.normal(size=4), rng.normal(size=3))
    pts = rng.normal(size=(50, 3)) * 2.0
    pix, z, valid = project_points(pts, pose, K)
    for i in range(50):
        if valid[i]:
            p, d = project(pts[i], pose, K)
            assert np.allclose(pix[i], p, atol=1e-12)
            assert np.isclose(z[i], d)
        else:
            with pytest.raises(BehindCamera):
                project(pts[i], pose, K)


def test_unproject_pixels_matches_scalar():
    rng = np.random.default_rng(4)
    pose = Pose(rng.normal(size=4), rng.normal(size=3))
    pix = rng.uniform(0, 40, (20, 2))
    d = rng.uniform(0.5, 5, 20)
    X = unproject_pixels(pix, d, K, pose)
    for i in range(20):
        assert np.allclose(X[i], unproject_pixel(pix[i], d[i], K, pose),
                           atol=1e-12)


def test_projection_jacobian_matches_fd():
    pc = np.array([0.3, -0.2, 2.5])
    J = projection_jacobian(pc, K)
    h = 1e-7
    for j in range(3):
        dp = np.zeros(3)
        dp[j] = h
        hi = np.array([K.fx * (pc + dp)[0] / (pc + dp)[2] + K.cx,
                       K.fy * (pc + dp)[1] / (pc + dp)[2] + K.cy])
        lo = np.array([K.fx * (pc - dp)[0] / (pc - dp)[2] + K.cx,
                       K.fy * (pc - dp)[1] / (pc - dp)[2] + K.cy])
        assert np.allclose(J[:, j], (hi - lo) / (2 * h), atol=1e-5)


def test_covariance3_matrix_psd_and_eigs():
    cov = Covariance3(np.array([0.7, 0.1, -0.4, 0.2]),
                      np.log(np.array([0.3, 0.1, 0.05])))
    M = cov.matrix()
    assert np.allclose(M, M.T)
    eigs = np.sort(np.linalg.eigvalsh(M))
    assert np.allclose(np.sqrt(eigs), [0.05, 0.1, 0.3], atol=1e-12)


def test_project_covariance_isotropic_on_axis():
    # isotropic Gaussian on the optical axis projects to s^2 (f/z)^2 I + reg
    s, z = 0.2, 4.0
    cov = Covariance3(np.array([1.0, 0, 0, 0]), np.log(np.array([s, s, s])))
    S = project_covariance(cov, Pose(), K, np.array([0.0, 0.0, z]))
    assert np.isclose(S[0, 0], (s * K.fx / z) ** 2 + 0.3, atol=1e-12)
    assert np.isclose(S[1, 1], (s * K.fy / z) ** 2 + 0.3, atol=1e-12)
    assert np.isclose(S[0, 1], 0.0, atol=1e-12)


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    poses = {i: Pose(rng.normal(size=4), rng.normal(size=3)) for i in range(7)}
    path = tmp_path / "traj.txt"
    save_trajectory(path, poses)
    loaded = load_trajectory(path)
    assert sorted(loaded) == sorted(poses)
    for i in poses:
        # repr round-trips floats exactly
        assert np.array_equal(loaded[i].to_array(), poses[i].to_array())
