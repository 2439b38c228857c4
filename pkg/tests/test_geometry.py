import numpy as np
import pytest
from hypothesis import given, strategies as st

from omnivo.geometry import (
    SE3,
    AlignmentError,
    Sim3,
    Trajectory,
    associate,
    load_tum,
    relative_pose,
    save_tum,
    se3_exp,
    se3_log,
    sim3_align,
    so3_exp,
    so3_log,
    umeyama,
)

twists = st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6).map(np.array)


def random_se3(rng, scale=1.0):
    return se3_exp(rng.uniform(-scale, scale, 6))


def test_exp_of_zero_is_identity():
    T = se3_exp(np.zeros(6))
    assert np.allclose(T.matrix(), np.eye(4), atol=1e-15)


def test_exp_pure_translation_has_identity_rotation():
    T = se3_exp(np.array([0, 0, 0, 0.3, -0.2, 1.5]))
    assert np.allclose(T.R, np.eye(3), atol=1e-15)
    assert np.allclose(T.t, [0.3, -0.2, 1.5])


@given(twists)
def test_exp_log_round_trip(xi):
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-10)


@given(twists)
def test_exp_produces_valid_rotation(xi):
    R = se3_exp(xi).R
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_so3_log_near_pi(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        w = axis * (np.pi - 1e-4)
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-6)


def test_inverse_composition_is_identity(rng):
    for _ in range(10):
        T = random_se3(rng)
        assert np.allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_composition_associative(rng):
    A, B, C = (random_se3(rng) for _ in range(3))
    M1 = ((A @ B) @ C).matrix()
    M2 = (A @ (B @ C)).matrix()
    assert np.allclose(M1, M2, atol=1e-12)


def test_relative_pose_same_frame_is_identity(rng):
    T = random_se3(rng)
    assert np.allclose(relative_pose(T, T).matrix(), np.eye(4), atol=1e-12)


def test_relative_pose_from_identity():
    T = se3_exp(np.array([0.1, -0.2, 0.3, 1.0, 2.0, 3.0]))
    assert np.allclose(relative_pose(SE3.identity(), T).matrix(), T.matrix(), atol=1e-12)


def test_relative_pose_composition_chain(rng):
    Ti, Tj, Tk = (random_se3(rng) for _ in range(3))
    lhs = relative_pose(Ti, Tk).matrix()
    rhs = (relative_pose(Tj, Tk) @ relative_pose(Ti, Tj)).matrix()
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_act_matches_matrix(rng):
    T = random_se3(rng)
    pts = rng.normal(size=(7, 3))
    hom = np.c_[pts, np.ones(7)] @ T.matrix().T
    assert np.allclose(T.act(pts), hom[:, :3], atol=1e-12)


def make_traj(ts, positions, rng=None):
    poses = []
    rng = rng or np.random.default_rng(0)
    for p in positions:
        poses.append(SE3.from_Rt(so3_exp(rng.uniform(-0.5, 0.5, 3)), p))
    return Trajectory(np.asarray(ts, float), poses)


def test_trajectory_rejects_non_monotone_timestamps():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), [SE3.identity(), SE3.identity()])


def test_associate_nearest_within_window():
    ia, ib = associate(np.array([0.0, 1.0, 2.0]), np.array([0.005, 0.9, 5.0]), max_dt=0.02)
    assert list(ia) == [0]
    assert list(ib) == [0]


def test_sim3_align_identity(rng):
    pos = rng.uniform(-1, 1, size=(20, 3))
    traj = make_traj(np.arange(20) * 0.1, pos)
    sim, rmse = sim3_align(traj, traj)
    assert rmse < 1e-12
    assert np.allclose(sim.matrix(), np.eye(4), atol=1e-9)


def test_sim3_align_recovers_known_transform(rng):
    pos = rng.uniform(-2, 2, size=(50, 3))
    gt = make_traj(np.arange(50) * 0.1, pos)
    sim_true = Sim3(so3_exp(np.array([0.3, -0.5, 0.2])), np.array([1.0, -2.0, 0.5]), 1.7)
    est = gt.transformed(sim_true)
    sim, rmse = sim3_align(est, gt)
    assert rmse < 1e-9
    recovered = sim @ sim_true
    assert np.allclose(recovered.matrix(), np.eye(4), atol=1e-8)


def test_sim3_align_gaussian_noise_rmse(rng):
    # Monte-Carlo oracle: for per-axis sigma and n >> 7, the post-alignment
    # translational RMSE concentrates at sigma * sqrt(3) (7 gauge DoF absorb
    # a 7/(3n) fraction of the variance, negligible at n = 1000).
    sigma = 0.01
    n = 1000
    pos = rng.uniform(-2, 2, size=(n, 3))
    gt = make_traj(np.arange(n) * 0.05, pos)
    est = make_traj(np.arange(n) * 0.05, pos + rng.normal(0, sigma, size=(n, 3)))
    _, rmse = sim3_align(est, gt)
    expected = sigma * np.sqrt(3.0)
    assert abs(rmse - expected) / expected < 0.10


def test_sim3_align_invariant_to_joint_rigid_motion(rng):
    pos = rng.uniform(-1, 1, size=(30, 3))
    gt = make_traj(np.arange(30) * 0.1, pos)
    est = make_traj(np.arange(30) * 0.1, pos + rng.normal(0, 0.05, size=(30, 3)))
    _, rmse0 = sim3_align(est, gt)
    joint = Sim3(so3_exp(np.array([0.2, 0.1, -0.4])), np.array([3.0, 1.0, -2.0]), 1.0)
    _, rmse1 = sim3_align(est.transformed(joint), gt.transformed(joint))
    assert np.isclose(rmse0, rmse1, rtol=1e-9)


def test_sim3_align_is_minimizer(rng):
    # applying any extra Sim3 to the estimate never lowers the reported rmse
    pos = rng.uniform(-1, 1, size=(40, 3))
    gt = make_traj(np.arange(40) * 0.1, pos)
    est = make_traj(np.arange(40) * 0.1, pos + rng.normal(0, 0.03, size=(40, 3)))
    _, rmse = sim3_align(est, gt)
    for _ in range(5):
        extra = Sim3(so3_exp(rng.uniform(-0.3, 0.3, 3)), rng.uniform(-1, 1, 3), rng.uniform(0.5, 2))
        _, rmse2 = sim3_align(est.transformed(extra), gt)
        assert rmse2 >= rmse - 1e-9


def test_sim3_align_too_few_associations():
    a = make_traj([0.0, 1.0, 2.0], np.eye(3))
    b = make_traj([10.0, 11.0, 12.0], np.eye(3))
    with pytest.raises(AlignmentError, match="association"):
        sim3_align(a, b)


def test_sim3_align_collinear_degenerate():
    ts = np.arange(10) * 0.1
    pos = np.outer(np.arange(10), np.array([1.0, 0.0, 0.0]))
    a = make_traj(ts, pos)
    b = make_traj(ts, pos)
    with pytest.raises(AlignmentError, match="collinear"):
        sim3_align(a, b)


def test_umeyama_scale_and_reflection_guard(rng):
    src = rng.normal(size=(30, 3))
    sim_true = Sim3(so3_exp(np.array([0.1, 2.0, -0.4])), np.array([0.3, 0, -5]), 0.25)
    dst = sim_true.act(src)
    sim = umeyama(src, dst)
    assert np.isclose(sim.s, 0.25, rtol=1e-12)
    assert np.allclose(sim.R, sim_true.R, atol=1e-12)
    assert np.isclose(np.linalg.det(sim.R), 1.0, atol=1e-12)


def test_tum_round_trip(tmp_path, rng):
    traj = make_traj(np.arange(5) * 0.5 + 0.1, rng.uniform(-1, 1, size=(5, 3)), rng)
    path = tmp_path / "traj.txt"
    save_tum(path, traj)
    back = load_tum(path)
    assert np.allclose(back.timestamps, traj.timestamps)
    for p, q in zip(back.poses, traj.poses):
        assert np.allclose(p.matrix(), q.matrix(), atol=1e-8)


def test_tum_rejects_malformed_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# comment\n1.0 2.0 3.0\n")
    with pytest.raises(ValueError, match="bad.txt:2"):
        load_tum(path)


def test_trajectory_length():
    pos = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], float)
    traj = make_traj([0.0, 1.0, 2.0], pos)
    assert np.isclose(traj.length(), 2.0)
