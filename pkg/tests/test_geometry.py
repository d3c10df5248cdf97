"""Lie-group suite: exp/log roundtrips, group axioms, Umeyama alignment."""

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from surfelslam.geometry import (
    BranchAmbiguityError,
    DegenerateGeometryError,
    SE3Pose,
    Sim3Transform,
    UnitQuaternion,
    _vmatrix_coeffs,
    pk_exp,
    pk_log,
    quat_canonicalize,
    sim3_act,
    sim3_compose,
    sim3_exp,
    sim3_log,
    transform_from_text,
    transform_to_text,
    umeyama_sim3,
)


def random_sim3(rng, max_angle=3.0, max_logscale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    return Sim3Transform(
        float(np.exp(rng.uniform(-max_logscale, max_logscale))),
        UnitQuaternion.from_axis_angle(axis, angle),
        rng.normal(scale=2.0, size=3),
    )


def random_tangent(rng, max_angle=3.0):
    v = rng.normal(scale=1.5, size=7)
    phi = v[3:6]
    n = np.linalg.norm(phi)
    if n > max_angle:
        v[3:6] = phi / n * rng.uniform(0, max_angle)
    v[6] = rng.uniform(-1.5, 1.5)
    return v


class TestQuaternion:
    def test_canonicalize_bitwise(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            a = quat_canonicalize(q)
            b = quat_canonicalize(-q)
            assert a.tobytes() == b.tobytes()

    def test_canonicalize_zero_w_tiebreak(self):
        q = np.array([0.0, -1.0, 0.0, 0.0])
        a = quat_canonicalize(q)
        b = quat_canonicalize(-q)
        assert a.tobytes() == b.tobytes()
        assert a[1] > 0

    def test_norm_after_compose(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = random_sim3(rng).rotation
            b = random_sim3(rng).rotation
            c = a * b
            assert abs(np.linalg.norm(c.array()) - 1.0) < 1e-9

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            q = random_sim3(rng).rotation.canonicalized()
            q2 = UnitQuaternion.from_matrix(q.matrix())
            assert np.allclose(q.array(), q2.array(), atol=1e-12)


class TestSim3Ops:
    def test_compose_identity(self):
        rng = np.random.default_rng(3)
        t = random_sim3(rng)
        out = sim3_compose(Sim3Transform.identity(), t)
        assert np.allclose(out.packed(), t.packed(), atol=1e-12)

    def test_compose_scale_arithmetic(self):
        a = Sim3Transform(2.0, UnitQuaternion.identity(), np.zeros(3))
        b = Sim3Transform(3.0, UnitQuaternion.identity(), np.array([1.0, 0, 0]))
        c = sim3_compose(a, b)
        assert c.scale == pytest.approx(6.0)
        assert np.allclose(c.translation, [2.0, 0, 0])

    def test_compose_matches_sequential_action(self):
        # oracle: direct point transformation, applied twice
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = random_sim3(rng), random_sim3(rng)
            pts = rng.normal(size=(100, 3))
            composed = sim3_compose(a, b).act(pts)
            sequential = a.act(b.act(pts))
            assert np.allclose(composed, sequential, atol=1e-9)

    def test_act_identity(self):
        assert np.allclose(sim3_act(Sim3Transform.identity(), [1.0, 2, 3]), [1, 2, 3])

    def test_act_arithmetic(self):
        t = Sim3Transform(2.0, UnitQuaternion.identity(), np.array([0.0, 0, 1]))
        assert np.allclose(sim3_act(t, [1.0, 0, 0]), [2.0, 0, 1])

    def test_act_matches_matrix_form(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            t = random_sim3(rng)
            p = rng.normal(size=3)
            hom = t.matrix() @ np.append(p, 1.0)
            assert np.allclose(t.act(p), hom[:3], atol=1e-12)

    def test_inverse_law(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            t = random_sim3(rng)
            r = t.compose(t.inverse()).packed()
            assert np.allclose(r, Sim3Transform.identity().packed(), atol=1e-9)

    def test_se3_inverse_compose(self):
        rng = np.random.default_rng(7)
        t = random_sim3(rng)
        pose = SE3Pose(t.rotation, t.translation)
        r = pose.inverse().compose(pose)
        assert np.allclose(r.matrix(), np.eye(4), atol=1e-9)


class TestExpLog:
    def test_log_identity(self):
        assert np.allclose(sim3_log(Sim3Transform.identity()), np.zeros(7))

    def test_log_pure_scale(self):
        t = Sim3Transform(2.0, UnitQuaternion.identity(), np.zeros(3))
        v = sim3_log(t)
        assert v[6] == pytest.approx(math.log(2.0), abs=1e-12)
        assert np.allclose(v[:6], 0.0)

    def test_exp_zero_is_identity(self):
        t = sim3_exp(np.zeros(7))
        assert np.allclose(t.packed(), Sim3Transform.identity().packed())

    def test_exp_small_first_order(self):
        # finite-difference check against the matrix exponential series
        v = np.array([1e-7, -2e-7, 3e-7, 2e-7, 1e-7, -1e-7, 2e-7])
        m = sim3_exp(v).matrix()
        xi = np.zeros((4, 4))
        xi[:3, :3] = v[6] * np.eye(3) + np.array(
            [[0, -v[5], v[4]], [v[5], 0, -v[3]], [-v[4], v[3], 0]]
        )
        xi[:3, 3] = v[:3]
        assert np.allclose(m, np.eye(4) + xi, atol=1e-13)

    def test_roundtrip_property(self):
        rng = np.random.default_rng(8)
        vs = np.stack([random_tangent(rng) for _ in range(1000)])
        packed = pk_exp(vs)
        back = pk_log(packed)
        assert np.max(np.abs(back - vs)) < 1e-9

    def test_log_matches_matrix_logarithm(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            t = random_sim3(rng, max_angle=2.5)
            v = sim3_log(t)
            xi = np.zeros((4, 4))
            xi[:3, :3] = v[6] * np.eye(3) + np.array(
                [[0, -v[5], v[4]], [v[5], 0, -v[3]], [-v[4], v[3], 0]]
            )
            xi[:3, 3] = v[:3]
            ref = scipy.linalg.logm(t.matrix())
            assert np.allclose(xi, np.real(ref), atol=1e-8)

    def test_exp_matches_matrix_exponential(self):
        rng = np.random.default_rng(10)
        for _ in range(25):
            v = random_tangent(rng)
            xi = np.zeros((4, 4))
            xi[:3, :3] = v[6] * np.eye(3) + np.array(
                [[0, -v[5], v[4]], [v[5], 0, -v[3]], [-v[4], v[3], 0]]
            )
            xi[:3, 3] = v[:3]
            assert np.allclose(sim3_exp(v).matrix(), scipy.linalg.expm(xi), atol=1e-9)

    def test_branch_ambiguity_raises(self):
        t = Sim3Transform(
            1.0, UnitQuaternion.from_axis_angle([0, 0, 1.0], math.pi), np.zeros(3)
        )
        with pytest.raises(BranchAmbiguityError):
            sim3_log(t)

    def test_vmatrix_coeffs_against_quadrature(self):
        # oracle: numeric quadrature of int_0^1 e^(sigma u) exp(u hat(phi)) du
        from scipy.integrate import quad

        axis = np.array([0.36, -0.48, 0.8])
        for theta in [0.0, 1e-7, 5e-6, 2e-5, 1e-3, 0.5, 2.9]:
            for sigma in [0.0, 1e-7, 5e-6, 2e-5, 1e-3, 0.7, -1.2]:
                hat = theta * np.array(
                    [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
                )
                ref = np.zeros((3, 3))
                for i in range(3):
                    for j in range(3):
                        ref[i, j] = quad(
                            lambda u, i=i, j=j: math.exp(sigma * u)
                            * scipy.linalg.expm(u * hat)[i, j],
                            0.0,
                            1.0,
                            epsabs=1e-13,
                            epsrel=1e-13,
                        )[0]
                C, A, B = _vmatrix_coeffs(theta, sigma)
                W = C * np.eye(3) + A * hat + B * (hat @ hat)
                assert np.allclose(W, ref, atol=5e-9), (theta, sigma)


class TestGroupAxioms:
    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a, b, c = (random_sim3(rng) for _ in range(3))
            left = a.compose(b).compose(c).packed()
            right = a.compose(b.compose(c)).packed()
            assert np.allclose(left, right, atol=1e-9)


class TestUmeyama:
    def test_self_alignment_is_identity(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(40, 3))
        t = umeyama_sim3(pts, pts)
        assert np.allclose(t.packed(), Sim3Transform.identity().packed(), atol=1e-12)

    def test_exact_recovery(self):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(50, 3))
        truth = Sim3Transform(
            0.5,
            UnitQuaternion.from_axis_angle([0, 0, 1.0], math.radians(30)),
            np.array([1.0, -2.0, 0.0]),
        )
        est = umeyama_sim3(pts, truth.act(pts))
        assert np.allclose(est.packed(), truth.packed(), atol=1e-9)

    def test_exact_recovery_random(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            pts = rng.normal(size=(rng.integers(3, 30), 3))
            try:
                truth = random_sim3(rng)
                est = umeyama_sim3(pts, truth.act(pts))
            except DegenerateGeometryError:
                continue
            resid = truth.act(pts) - est.act(pts)
            assert float(np.sqrt(np.mean(resid**2))) < 1e-9

    def test_noisy_beats_grid_search(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(size=(60, 3))
        truth = Sim3Transform(
            1.3, UnitQuaternion.from_axis_angle([1.0, 2, 0.5], 0.4), np.array([0.3, 0.1, -0.2])
        )
        noisy = truth.act(pts) + rng.normal(scale=0.01, size=(60, 3))
        est = umeyama_sim3(pts, noisy)

        def objective(t):
            d = noisy - t.act(pts)
            return float(np.sum(d * d))

        best = math.inf
        for ds in np.linspace(-0.02, 0.02, 5):
            for axis in np.eye(3):
                for da in np.linspace(-0.01, 0.01, 5):
                    for dt in [np.zeros(3), np.array([0.005, 0, 0]), np.array([0, -0.005, 0])]:
                        cand = Sim3Transform(
                            truth.scale * (1 + ds),
                            UnitQuaternion.from_axis_angle(axis, da) * truth.rotation,
                            truth.translation + dt,
                        )
                        best = min(best, objective(cand))
        assert objective(est) <= best + 1e-12

    def test_degenerate_configs_raise(self):
        line = np.outer(np.linspace(0, 1, 10), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(DegenerateGeometryError):
            umeyama_sim3(line, line * 2.0)
        same = np.ones((5, 3))
        with pytest.raises(DegenerateGeometryError):
            umeyama_sim3(same, same)
        with pytest.raises(DegenerateGeometryError):
            umeyama_sim3(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSerialization:
    def test_text_roundtrip(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            t = random_sim3(rng)
            back = transform_from_text(transform_to_text(t))
            assert back.packed().tobytes() == t.packed().tobytes()

    def test_text_field_order(self):
        t = Sim3Transform(2.0, UnitQuaternion.identity(), np.array([1.0, 2.0, 3.0]))
        fields = transform_to_text(t).split()
        assert [float(f) for f in fields] == [2.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 1.0]


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-2.5, 2.5),
    st.floats(-1.0, 1.0),
    st.floats(-5.0, 5.0),
    st.floats(-5.0, 5.0),
    st.floats(-5.0, 5.0),
)
def test_roundtrip_hypothesis(angle, logscale, tx, ty, tz):
    t = Sim3Transform(
        math.exp(logscale),
        UnitQuaternion.from_axis_angle([0.3, -0.5, 0.81], angle if angle != 0 else 1e-3),
        np.array([tx, ty, tz]),
    )
    back = Sim3Transform.exp(t.log())
    assert np.allclose(back.packed(), t.packed(), atol=1e-9)
