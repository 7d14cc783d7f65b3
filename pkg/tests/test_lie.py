import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import frobenius_error, random_rotation, random_spd, se3_exp, se3_log
from wiclosure.lie import (ContractError, FrameError, Pose, SingularityError, adjoint,
                           compose, exp_map, is_covariance, log_map, max_eigenvalue,
                           propagate_covariance, yaw_rotation)

finite = st.floats(-5, 5, allow_nan=False)
twists = st.lists(finite, min_size=6, max_size=6).map(np.array).filter(
    lambda x: np.linalg.norm(x[:3]) <= 3.0)


def random_pose(rng, frame_from="", frame_to=""):
    return Pose(random_rotation(rng), rng.normal(0, 5, 3), frame_from, frame_to)


def close(a: Pose, b: Pose, tol=1e-9):
    return (np.linalg.norm(a.rotation - b.rotation) < tol
            and np.linalg.norm(a.translation - b.translation) < tol)


def test_compose_identity_and_inverse():
    I = Pose.identity()
    assert close(compose(I, I), I)
    T = random_pose(np.random.default_rng(0))
    assert close(compose(T, T.inverse()), I)
    assert close(T.inverse() @ T, I)


def test_compose_matches_homogeneous_product():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        assert np.allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_compose_is_associative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert close((a @ b) @ c, a @ (b @ c))


def test_compose_tracks_frames():
    a = Pose.identity("w", "a")
    b = Pose.identity("a", "b")
    ab = a @ b
    assert (ab.frame_from, ab.frame_to) == ("w", "b")
    with pytest.raises(FrameError):
        compose(a, Pose.identity("x", "y"))


def test_rotation_is_proper():
    T = random_pose(np.random.default_rng(3))
    assert T.is_valid()
    assert abs(np.linalg.det(T.rotation) - 1) < 1e-9


def test_log_of_identity_is_zero():
    assert np.array_equal(log_map(Pose.identity()), np.zeros(6))


def test_exp_of_pure_translation():
    T = exp_map([0, 0, 0, 1, 2, 3])
    assert np.allclose(T.rotation, np.eye(3))
    assert np.allclose(T.translation, [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(twists)
def test_log_exp_round_trip(xi):
    assert np.allclose(log_map(exp_map(xi)), xi, atol=1e-9)


def test_log_exp_round_trip_bulk():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        xi = np.r_[w, rng.normal(0, 5, 3)]
        worst = max(worst, np.abs(log_map(exp_map(xi)) - xi).max())
    assert worst < 1e-9


def test_exp_matches_independent_series():
    rng = np.random.default_rng(5)
    for xi in rng.normal(size=(100, 6)):
        assert np.allclose(exp_map(xi).matrix(), se3_exp(xi[None])[0], atol=1e-12)


def test_small_angle_branch_is_continuous():
    for th in (1e-9, 1e-8, 1e-7, 2e-7, 1e-6):
        xi = np.array([th, -th, th / 2, 0.3, 0.1, -0.2])
        assert np.allclose(log_map(exp_map(xi)), xi, atol=1e-12)
        assert np.allclose(exp_map(xi).matrix(), se3_exp(xi[None])[0], atol=1e-12)


def test_log_near_pi_raises():
    with pytest.raises(SingularityError):
        log_map(Pose(yaw_rotation(np.pi), np.zeros(3)))


def test_adjoint_transports_twists():
    rng = np.random.default_rng(6)
    T = random_pose(rng)
    xi = rng.normal(0, 0.1, 6)
    # T exp(xi) T^-1 == exp(Ad(T) xi)
    lhs = T @ exp_map(xi) @ T.inverse()
    assert close(lhs, exp_map(adjoint(T) @ xi), 1e-9)


def test_propagate_identity_is_noop():
    S = random_spd(np.random.default_rng(7), 6, [1, 2, 3, 4, 5, 6])
    assert np.allclose(propagate_covariance(Pose.identity(), S), S)
    assert np.allclose(propagate_covariance(Pose.identity(), S, "left"), S)


def test_propagate_yaw_swaps_axes():
    S = np.diag([0.0, 0.0, 0.0, 1.0, 4.0, 9.0])
    T = Pose(yaw_rotation(np.pi / 2), np.zeros(3))
    out = propagate_covariance(T, S, "left")
    assert np.allclose(np.diag(out)[3:], [4.0, 1.0, 9.0])


def test_propagate_matches_monte_carlo():
    rng = np.random.default_rng(8)
    X = random_pose(rng)
    T = random_pose(rng)
    S = random_spd(rng, 6, [0.02, 0.03, 0.01, 0.1, 0.2, 0.05])
    n = 100_000
    xi = rng.multivariate_normal(np.zeros(6), S, n)
    # perturbed X, carried through an exact T: body covariance of X T
    samples = X.matrix() @ se3_exp(xi) @ T.matrix()
    mean = (X @ T).matrix()
    mc = np.cov(se3_log(np.linalg.inv(mean) @ samples).T)
    assert frobenius_error(propagate_covariance(T, S), mc) < 0.05


def test_propagate_preserves_psd():
    rng = np.random.default_rng(9)
    for _ in range(50):
        S = random_spd(rng, 6, rng.uniform(1e-3, 3, 6))
        assert is_covariance(propagate_covariance(random_pose(rng), S))


def test_max_eigenvalue_examples():
    assert max_eigenvalue(np.diag([1.0, 2.0, 3.0])) == pytest.approx(3.0)
    assert max_eigenvalue(np.eye(4)) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        max_eigenvalue(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_max_eigenvalue_vs_characteristic_polynomial():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(200):
        A = rng.normal(size=(3, 3))
        A = A + A.T
        roots = np.roots(np.poly(A)).real
        ref = roots.max()
        worst = max(worst, abs(max_eigenvalue(A) - ref) / max(abs(ref), 1e-12))
        probe = rng.normal(size=3)
        assert max_eigenvalue(A) >= probe @ A @ probe / (probe @ probe) - 1e-12
    assert worst < 1e-8


def test_weyl_inequality():
    rng = np.random.default_rng(11)
    for _ in range(100):
        A = random_spd(rng, 6, rng.uniform(0, 3, 6))
        B = random_spd(rng, 6, rng.uniform(0, 3, 6))
        assert max_eigenvalue(A + B) <= max_eigenvalue(A) + max_eigenvalue(B) + 1e-9
