import numpy as np
import pytest
from scipy.linalg import expm

from icpnav.dynamics import (
    I_ATT,
    I_BA,
    I_BG,
    I_R,
    I_RHO1,
    I_V,
    ImuNoise,
    NavState,
    OrbitParams,
    gamma,
)
from icpnav.lindisc import (
    DiscreteModel,
    build_F,
    build_G,
    discretize,
    phi_first_order,
    q_closed_form,
    sigma_imu,
    van_loan,
)

from helpers import (
    error_state_derivative,
    numerical_jacobian,
    random_nav_state,
    random_unit_quat,
)

R_STATION = 6.778e6

FD_STEPS = np.empty(21)
FD_STEPS[I_R] = 1e-2
FD_STEPS[I_V] = 1e-4
FD_STEPS[I_ATT] = 1e-6
FD_STEPS[I_BG] = 1e-7
FD_STEPS[I_BA] = 1e-5
FD_STEPS[15:21] = 1e-4


@pytest.fixture
def orbit():
    return OrbitParams.circular(R_STATION)


class TestBuildF:
    def test_matches_fd_jacobian_of_error_dynamics(self, orbit):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(50):
            nav = random_nav_state(rng)
            u_a = rng.uniform(-0.5, 0.5, 3)
            u_g = rng.uniform(-0.02, 0.02, 3)
            F = build_F(nav, u_a, u_g, orbit)
            J = numerical_jacobian(
                lambda d: error_state_derivative(nav, d, u_a, u_g, orbit),
                np.zeros(21), FD_STEPS)
            big = np.abs(F) > 1e-9
            worst = max(worst, np.max(np.abs(J[big] - F[big]) / np.abs(F[big])))
            assert np.abs(J[~big]).max() < 1e-9
        assert worst <= 1e-5

    def test_zero_input_structure(self, orbit):
        zero_orbit = OrbitParams(n=0.0, n_dot=0.0, r_e=orbit.r_e)
        nav = NavState(q_ref=random_unit_quat(np.random.default_rng(1)))
        F = build_F(nav, np.zeros(3), np.zeros(3), zero_orbit)
        A_bar = __import__("icpnav.attitude", fromlist=["quat_to_rot"]).quat_to_rot(nav.q_ref)
        np.testing.assert_allclose(F[I_V, I_R], gamma(zero_orbit), atol=1e-18)
        np.testing.assert_array_equal(F[I_V, I_V], np.zeros((3, 3)))
        np.testing.assert_array_equal(F[I_V, I_ATT], np.zeros((3, 3)))
        np.testing.assert_allclose(F[I_V, I_BA], A_bar, atol=1e-15)

    def test_gyro_bias_block_is_half_identity(self, orbit):
        rng = np.random.default_rng(2)
        F = build_F(random_nav_state(rng), rng.normal(size=3),
                    rng.normal(size=3), orbit)
        np.testing.assert_array_equal(F[I_ATT, I_BG], 0.5 * np.eye(3))

    def test_parameter_rows_zero(self, orbit):
        rng = np.random.default_rng(3)
        F = build_F(random_nav_state(rng), rng.normal(size=3),
                    rng.normal(size=3), orbit)
        np.testing.assert_array_equal(F[9:21, :], np.zeros((12, 21)))


class TestBuildG:
    def test_identity_reference(self):
        G = build_G(np.array([0.0, 0.0, 0.0, 1.0]))
        np.testing.assert_array_equal(G[I_V, 0:3], np.eye(3))
        np.testing.assert_array_equal(G[I_ATT, 3:6], 0.5 * np.eye(3))
        np.testing.assert_array_equal(G[I_BG, 6:9], np.eye(3))

    def test_process_noise_rank(self):
        rng = np.random.default_rng(4)
        G = build_G(random_unit_quat(rng))
        W = G @ sigma_imu(ImuNoise()) @ G.T
        assert np.linalg.matrix_rank(W) <= 9

    def test_matches_hand_assembled_blocks(self):
        from icpnav.attitude import quat_to_rot

        rng = np.random.default_rng(5)
        q = random_unit_quat(rng)
        noise = ImuNoise(sigma_a=2e-3, sigma_g=3e-4, sigma_b=5e-6)
        A = quat_to_rot(q)
        W = build_G(q) @ sigma_imu(noise) @ build_G(q).T
        expected = np.zeros((21, 21))
        expected[I_V, I_V] = noise.sigma_a**2 * A @ A.T
        expected[I_ATT, I_ATT] = 0.25 * noise.sigma_g**2 * np.eye(3)
        expected[I_BG, I_BG] = noise.sigma_b**2 * np.eye(3)
        np.testing.assert_allclose(W, expected, atol=1e-20)


class TestPhiFirstOrder:
    def test_dt_zero(self):
        F = np.random.default_rng(6).normal(size=(21, 21))
        np.testing.assert_array_equal(phi_first_order(F, 0.0), np.eye(21))

    def test_halving_ratio(self, orbit):
        rng = np.random.default_rng(7)
        nav = random_nav_state(rng)
        F = build_F(nav, rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.02, 0.02, 3),
                    orbit)
        g1 = np.linalg.norm(phi_first_order(F, 0.1) - expm(F * 0.1))
        g2 = np.linalg.norm(phi_first_order(F, 0.05) - expm(F * 0.05))
        assert g1 / g2 >= 3.5

    def test_nilpotent_block_exact(self):
        # With only the r<-v coupling, F^2 = 0 and I + dt F is exact.
        F = np.zeros((21, 21))
        F[I_R, I_V] = np.eye(3)
        np.testing.assert_allclose(phi_first_order(F, 0.3), expm(F * 0.3),
                                   atol=1e-15)


class TestQClosedForm:
    def test_zero_noise_gives_zero(self, orbit):
        rng = np.random.default_rng(8)
        nav = random_nav_state(rng)
        Q = q_closed_form(nav, rng.normal(size=3), rng.normal(size=3),
                          ImuNoise(0.0, 0.0, 0.0), orbit, 0.1)
        np.testing.assert_array_equal(Q, np.zeros((21, 21)))

    def test_position_block(self, orbit):
        rng = np.random.default_rng(9)
        nav = random_nav_state(rng)
        noise = ImuNoise(sigma_a=1e-3)
        dt = 0.1
        Q = q_closed_form(nav, rng.normal(size=3), rng.normal(size=3),
                          noise, orbit, dt)
        np.testing.assert_allclose(Q[I_R, I_R],
                                   (noise.sigma_a**2 * dt**3 / 3.0) * np.eye(3),
                                   atol=1e-20)

    def test_van_loan_discrepancy_decreases(self, orbit):
        # The published Q_23 carries a first-order-in-dt term the van Loan
        # result does not; the relative gap must still shrink monotonically
        # toward that documented floor as dt is halved.
        rng = np.random.default_rng(10)
        nav = random_nav_state(rng)
        u_a = np.array([0.2, -0.1, 0.15])
        u_g = np.array([0.01, -0.02, 0.015])
        noise = ImuNoise()
        F = build_F(nav, u_a, u_g, orbit)
        G = build_G(nav.q_ref)
        rels = []
        for dt in (0.1, 0.05, 0.025):
            Qc = q_closed_form(nav, u_a, u_g, noise, orbit, dt)
            Qv = van_loan(F, G, sigma_imu(noise), dt).Q
            rels.append(np.linalg.norm(Qc - Qv) / np.linalg.norm(Qv))
        assert rels[0] > rels[1] > rels[2]

    def test_symmetric_and_psd(self, orbit):
        rng = np.random.default_rng(11)
        for dt in (0.05, 0.1, 0.2):
            nav = random_nav_state(rng)
            Q = q_closed_form(nav, rng.uniform(-1, 1, 3),
                              rng.uniform(-0.05, 0.05, 3), ImuNoise(),
                              orbit, dt)
            np.testing.assert_array_equal(Q, Q.T)
            assert np.linalg.eigvalsh(Q).min() >= -1e-12 * np.trace(Q)

    def test_sigma_ba_knob(self, orbit):
        rng = np.random.default_rng(12)
        nav = random_nav_state(rng)
        noise = ImuNoise(sigma_ba=1e-4)
        dt = 0.1
        Q = q_closed_form(nav, np.zeros(3), np.zeros(3), noise, orbit, dt)
        np.testing.assert_allclose(Q[I_BA, I_BA],
                                   noise.sigma_ba**2 * dt * np.eye(3),
                                   atol=1e-25)


class TestVanLoan:
    def test_zero_dynamics(self):
        S = np.diag([1.0, 2.0, 3.0])
        disc = van_loan(np.zeros((3, 3)), np.eye(3), S, 0.5)
        np.testing.assert_allclose(disc.Phi, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(disc.Q, 0.5 * S, atol=1e-14)

    def test_scalar_lyapunov(self):
        # x' = -x + w with unit intensity over dt=1:
        # Phi = exp(-1), Q = (1 - exp(-2)) / 2.
        disc = van_loan(np.array([[-1.0]]), np.array([[1.0]]),
                        np.array([[1.0]]), 1.0)
        assert disc.Phi[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-12)
        assert disc.Q[0, 0] == pytest.approx((1.0 - np.exp(-2.0)) / 2.0,
                                             rel=1e-12)

    def test_q_symmetric_psd(self, orbit):
        rng = np.random.default_rng(13)
        nav = random_nav_state(rng)
        F = build_F(nav, rng.uniform(-1, 1, 3), rng.uniform(-0.05, 0.05, 3),
                    orbit)
        disc = van_loan(F, build_G(nav.q_ref), sigma_imu(ImuNoise()), 0.1)
        assert np.abs(disc.Q - disc.Q.T).max() <= 1e-12 * max(1.0, np.abs(disc.Q).max())
        assert np.linalg.eigvalsh(disc.Q).min() >= -1e-12 * np.trace(disc.Q)

    def test_phi_semigroup(self, orbit):
        rng = np.random.default_rng(14)
        nav = random_nav_state(rng)
        F = build_F(nav, rng.uniform(-1, 1, 3), rng.uniform(-0.05, 0.05, 3),
                    orbit)
        G = build_G(nav.q_ref)
        S = sigma_imu(ImuNoise())
        p1 = van_loan(F, G, S, 0.04).Phi
        p2 = van_loan(F, G, S, 0.06).Phi
        p12 = van_loan(F, G, S, 0.10).Phi
        assert np.abs(p1 @ p2 - p12).max() <= 1e-10

    def test_rejects_non_finite(self):
        F = np.array([[np.nan]])
        with pytest.raises(Exception):
            van_loan(F, np.array([[1.0]]), np.array([[1.0]]), 0.1)


class TestDiscretize:
    def test_methods_agree_at_small_dt(self, orbit):
        rng = np.random.default_rng(15)
        nav = random_nav_state(rng)
        u_a, u_g = np.zeros(3), np.zeros(3)
        a = discretize(nav, u_a, u_g, ImuNoise(), orbit, 0.01, "closed_form")
        b = discretize(nav, u_a, u_g, ImuNoise(), orbit, 0.01, "van_loan")
        assert np.linalg.norm(a.Q - b.Q) / np.linalg.norm(b.Q) < 1e-3
        # first-order Phi differs from the exponential by O(dt^2)
        assert np.abs(a.Phi - b.Phi).max() < 1e-4

    def test_unknown_method(self, orbit):
        with pytest.raises(ValueError):
            discretize(NavState(), np.zeros(3), np.zeros(3), ImuNoise(),
                       orbit, 0.1, "euler")

    def test_returns_discrete_model(self, orbit):
        disc = discretize(NavState(), np.zeros(3), np.zeros(3), ImuNoise(),
                          orbit, 0.1)
        assert isinstance(disc, DiscreteModel)
        assert disc.dt == 0.1
