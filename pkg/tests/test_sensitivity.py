import numpy as np
import pytest

from platefit import (
    InfeasibleParametersError,
    IsotropicParametrization,
    MonoclinicParametrization,
    ReferenceData,
    ScaledGlobalParametrization,
    central_difference_gradient,
    central_difference_jacobian,
    loss,
    loss_grad,
    loss_hess,
    synthesize_data,
)
from platefit.sensitivity import LossEngine

from conftest import THETA_REF


def rand_theta(param, rng):
    if param.name == "isotropic":
        return np.array([rng.uniform(5, 40), rng.uniform(0.05, 0.45),
                         rng.uniform(1e-4, 0.05)])
    if param.name == "scaled-global":
        return np.array([rng.uniform(2, 80), rng.uniform(1, 45)])
    # monoclinic: build a comfortably positive-definite storage matrix
    d11 = rng.uniform(5, 40)
    d22 = rng.uniform(5, 40)
    d66 = rng.uniform(2, 25)
    d12 = 0.4 * rng.uniform(-1, 1) * np.sqrt(d11 * d22)
    d16 = 0.2 * rng.uniform(-1, 1) * np.sqrt(d11 * d66)
    d26 = 0.2 * rng.uniform(-1, 1) * np.sqrt(d22 * d66)
    beta = rng.uniform(1e-4, 0.05, size=6)
    return np.concatenate([[d11, d12, d16, d22, d26, d66], beta])


@pytest.mark.parametrize("param", [IsotropicParametrization(),
                                   ScaledGlobalParametrization(),
                                   MonoclinicParametrization()])
def test_parametrization_jacobian_consistency(param):
    rng = np.random.default_rng(99)
    for _ in range(5):
        theta = rand_theta(param, rng)
        assert param.is_feasible(theta)
        dd, dbeta = param.jacobian(theta)

        dd_fd = central_difference_jacobian(lambda t: param.moduli(t)[0], theta)
        db_fd = central_difference_jacobian(lambda t: param.moduli(t)[1], theta)
        assert np.allclose(dd, dd_fd, rtol=1e-8, atol=1e-8)
        assert np.allclose(dbeta, db_fd, rtol=1e-8, atol=1e-8)

        d2d, d2b = param.second_derivs(theta)
        d2d_fd = np.stack([
            central_difference_jacobian(lambda t: param.jacobian(t)[0][:, j], theta)
            for j in range(param.k)
        ], axis=1)
        assert np.allclose(d2d, d2d_fd, rtol=1e-7, atol=1e-7)
        assert np.allclose(
            d2b,
            np.stack([
                central_difference_jacobian(lambda t: param.jacobian(t)[1][:, j], theta)
                for j in range(param.k)
            ], axis=1),
            atol=1e-9,
        )


def test_infeasible_theta_rejected(coarse_setup):
    cfg, mesh, ops = coarse_setup
    param = IsotropicParametrization()
    data = ReferenceData(freqs_hz=np.array([100.0]), values=np.array([0.0 + 0j]))
    with pytest.raises(InfeasibleParametersError):
        loss(np.array([17.97, 1.5, 0.003]), param, ops, data)
    with pytest.raises(InfeasibleParametersError):
        loss(np.array([-1.0, 0.3, 0.003]), param, ops, data)


class TestLoss:
    def test_self_consistency_zero(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 600, 61)
        data = synthesize_data(THETA_REF, param, ops, freqs)
        assert loss(THETA_REF, param, ops, data) <= 1e-20

    def test_unit_offset_gives_unit_loss(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        data = synthesize_data(THETA_REF, param, ops, [250.0])
        shifted = ReferenceData(freqs_hz=data.freqs_hz, values=data.values + 1.0)
        assert loss(THETA_REF, param, ops, shifted) == pytest.approx(1.0, rel=1e-12)

    def test_rigidity_perturbation_raises_loss(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 600, 101)
        data = synthesize_data(THETA_REF, param, ops, freqs)
        bumped = THETA_REF * np.array([1.2, 1.0, 1.0])
        assert loss(bumped, param, ops, data) > loss(THETA_REF, param, ops, data)

    def test_frequency_permutation_invariance(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(10, 600, 40)
        data = synthesize_data(THETA_REF, param, ops, freqs, noise_level=2.0, seed=5)
        rng = np.random.default_rng(0)
        perm = rng.permutation(freqs.size)
        shuffled = ReferenceData(freqs_hz=data.freqs_hz[perm], values=data.values[perm])
        theta = THETA_REF * np.array([1.1, 0.95, 2.0])
        a = loss(theta, param, ops, data)
        b = loss(theta, param, ops, shuffled)
        assert a == pytest.approx(b, rel=1e-12)


class TestGradient:
    def test_stationary_at_noiseless_optimum(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 600, 61)
        data = synthesize_data(THETA_REF, param, ops, freqs)
        g = loss_grad(THETA_REF, param, ops, data)
        H = loss_hess(THETA_REF, param, ops, data)
        assert np.abs(g).max() <= 1e-12 * max(1.0, np.abs(H).max())

    def test_fd_agreement_at_reference(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 600, 61)
        data = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=7)
        g = loss_grad(THETA_REF, param, ops, data)
        f = lambda th: loss(th, param, ops, data)
        # Richardson pair: large enough steps to clear the solver noise
        # floor of the loss, extrapolation kills the h^2 truncation
        g1 = central_difference_gradient(f, THETA_REF, rel=2e-5)
        g2 = central_difference_gradient(f, THETA_REF, rel=1e-5)
        g_fd = (4 * g2 - g1) / 3
        assert np.abs(g - g_fd).max() / np.abs(g_fd).max() < 1e-5

    def test_fd_agreement_random_points(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 400, 41)
        data = synthesize_data(THETA_REF, param, ops, freqs)
        rng = np.random.default_rng(21)
        f = lambda th: loss(th, param, ops, data)
        for _ in range(3):
            theta = rand_theta(param, rng)
            g = loss_grad(theta, param, ops, data)
            g1 = central_difference_gradient(f, theta, rel=2e-5)
            g2 = central_difference_gradient(f, theta, rel=1e-5)
            g_fd = (4 * g2 - g1) / 3
            # discrepancy relative to the gradient scale (tiny components
            # of g_fd carry mostly truncation noise)
            assert np.abs(g - g_fd).max() / np.abs(g_fd).max() < 1e-5

    def test_damping_gradient_sign(self, coarse_setup):
        # under-damped model over-shoots the data peak, so increasing the
        # loss factor must decrease the misfit; a 1-d scan is the oracle
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(40, 110, 36)  # brackets the first peak only
        data = synthesize_data(THETA_REF, param, ops, freqs)
        under = THETA_REF * np.array([1.0, 1.0, 0.2])
        engine = LossEngine(param, ops, data)
        betas = np.linspace(under[2], THETA_REF[2], 6)
        scan = [engine.evaluate(np.array([under[0], under[1], b]), 0) for b in betas]
        assert scan[0] > scan[-1]  # oracle: moving beta up reduces loss
        g = loss_grad(under, param, ops, data)
        assert g[2] < 0

    def test_factorization_reuse_matches_independent_solves(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(10, 500, 25)
        data = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=3)
        theta = THETA_REF * np.array([1.05, 0.97, 1.5])
        g = loss_grad(theta, param, ops, data)

        # oracle: same adjoint formula, but every solve uses its own
        # independent sparse-LU factorization
        from platefit.forward import _SystemFamily, _solve_checked
        from platefit.plate_fem import ALPHAS

        mat = param.material(theta, rho0=ops.rho0, e=ops.e)
        fam = _SystemFamily(ops, mat)
        eng = LossEngine(param, ops, data)
        c1 = eng._coeff_first(theta, mat)
        total = np.zeros(param.k)
        for idx, fhz in enumerate(freqs):
            w = 2 * np.pi * fhz
            u = _solve_checked(ops, fam.data(w), fam.rhs(w), "splu")
            lam = _solve_checked(ops, fam.data(w), ops.c.astype(complex), "splu")
            r = ops.c @ u + ops.c0 - data.values[idx]
            t = ops.stacked_curvature_lifts().astype(complex) - np.vstack(
                [ops.K[a] @ u for a in ALPHAS])
            total += 2 * np.real(np.conj(r) * (c1 @ (t @ lam)))
        total /= freqs.size
        assert np.abs(g - total).max() <= 1e-12 * max(1.0, np.abs(g).max())


class TestHessian:
    def test_symmetry(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 500, 26)
        data = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=2)
        rng = np.random.default_rng(4)
        for _ in range(3):
            H = loss_hess(rand_theta(param, rng), param, ops, data)
            assert np.abs(H - H.T).max() <= 1e-10 * np.abs(H).max()

    def test_fd_agreement(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 600, 61)
        data = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=7)
        H = loss_hess(THETA_REF, param, ops, data)
        H_fd = central_difference_jacobian(
            lambda th: loss_grad(th, param, ops, data), THETA_REF)
        H_fd = 0.5 * (H_fd + H_fd.T)
        assert np.abs(H - H_fd).max() / np.abs(H_fd).max() < 1e-4

    def test_psd_at_noiseless_optimum(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 600, 61)
        data = synthesize_data(THETA_REF, param, ops, freqs)
        H = loss_hess(THETA_REF, param, ops, data)
        assert np.linalg.eigvalsh(H).min() >= -1e-10 * np.abs(H).max()


class TestSynthesize:
    def test_zero_noise_is_forward(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        from platefit import sweep

        param = IsotropicParametrization()
        freqs = np.linspace(0, 400, 21)
        data = synthesize_data(THETA_REF, param, ops, freqs)
        mat = param.material(THETA_REF, rho0=ops.rho0, e=ops.e)
        afc = sweep(ops, mat, freqs)
        assert np.array_equal(data.values, afc.values)

    def test_seeded_reproducibility(self, coarse_setup, tmp_path):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 400, 21)
        a = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=42)
        b = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=42)
        a.save(tmp_path / "a.csv")
        b.save(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        c = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=43)
        assert not np.array_equal(a.values, c.values)

    def test_noise_magnitude(self, coarse_setup):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        freqs = np.linspace(0, 1000, 201)
        clean = synthesize_data(THETA_REF, param, ops, freqs)
        noisy = synthesize_data(THETA_REF, param, ops, freqs, noise_level=1.0, seed=11)
        sigma = 0.01 * np.abs(clean.values).max()
        eta = noisy.values - clean.values
        assert abs(np.std(eta.real) - sigma) < 0.2 * sigma
        assert abs(np.std(eta.imag) - sigma) < 0.2 * sigma

    def test_roundtrip_with_metadata(self, coarse_setup, tmp_path):
        cfg, mesh, ops = coarse_setup
        param = IsotropicParametrization()
        data = synthesize_data(THETA_REF, param, ops, [100.0, 200.0],
                               noise_level=2.0, seed=9)
        path = tmp_path / "data.csv"
        data.save(path)
        again = ReferenceData.load(path)
        assert np.array_equal(again.values, data.values)
        assert again.noise_level == 2.0
        assert again.seed == 9
        assert np.allclose(again.theta_ref, THETA_REF)
        assert again.parametrization == "isotropic"
