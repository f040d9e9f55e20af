import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from oracles import finite_difference_slope, quad_posterior
from ssmamp import rmt
from ssmamp.prior import (BernoulliGaussian, FixedPointError, GaussianPrior, Prior,
                          channel_mse, channel_posterior_variance, denoise, gaussian_expectation,
                          replica_chi)


PRIORS = [GaussianPrior(1.0), GaussianPrior(2.5), BernoulliGaussian(0.1), BernoulliGaussian(0.3),
          BernoulliGaussian(1.0)]


def test_gaussian_denoiser_example():
    mean, var = denoise(GaussianPrior(1.0), 2.0, 1.0)
    assert (float(mean), float(var)) == pytest.approx((1.0, 0.5), abs=1e-15)


def test_zero_field_gives_zero_mean():
    mean, var = denoise(BernoulliGaussian(0.1), 0.0, 3.0)
    assert mean == 0.0 and var > 0


def test_nonpositive_precision_rejected():
    for v in (0.0, -1.0):
        with pytest.raises(ValueError):
            denoise(BernoulliGaussian(0.1), 1.0, v)
    with pytest.raises(ValueError):
        BernoulliGaussian(0.0)
    with pytest.raises(ValueError):
        GaussianPrior(0.0)


@pytest.mark.parametrize("prior", PRIORS, ids=repr)
def test_denoiser_matches_quadrature(prior):
    # 20 x 20 grid of (psi, v)
    for psi in np.linspace(-6.0, 6.0, 20):
        for v in np.geomspace(0.05, 500.0, 20):
            mean, var = denoise(prior, psi, v)
            qm, qv = quad_posterior(prior, psi, v)
            assert float(mean) == pytest.approx(qm, abs=1e-8)
            assert float(var) == pytest.approx(qv, abs=1e-8)


def test_bernoulli_gaussian_reference_point():
    qm, qv = quad_posterior(BernoulliGaussian(0.1), 0.5, 10.0)
    mean, var = denoise(BernoulliGaussian(0.1), 0.5, 10.0)
    assert float(mean) == pytest.approx(qm, abs=1e-10)
    assert float(var) == pytest.approx(qv, abs=1e-10)


@pytest.mark.parametrize("prior", PRIORS, ids=repr)
def test_derivative_matches_finite_differences(prior):
    psi = np.linspace(-5.0, 5.0, 41)
    for v in (0.1, 1.0, 10.0, 100.0):
        fd = finite_difference_slope(prior, psi, v)
        an = prior.denoise_derivative(psi, v)
        np.testing.assert_allclose(an, fd, rtol=1e-6, atol=1e-9)
        # Gaussian-family identity: d eta / d psi = v * posterior variance
        np.testing.assert_allclose(an, v * denoise(prior, psi, v)[1], rtol=1e-12, atol=1e-300)


@given(st.floats(-50, 50), st.floats(1e-3, 1e4), st.sampled_from(PRIORS))
@settings(max_examples=200, deadline=None)
def test_denoiser_is_odd_and_variance_positive(psi, v, prior):
    m1, v1 = denoise(prior, psi, v)
    m2, v2 = denoise(prior, -psi, v)
    assert float(m1) == pytest.approx(-float(m2), abs=1e-12 * (1 + abs(psi)))
    assert float(v1) == pytest.approx(float(v2), rel=1e-12, abs=1e-300)
    assert v1 > 0


@given(st.floats(-20, 20), st.floats(1e-2, 1e3))
@settings(max_examples=100, deadline=None)
def test_slope_deficit_is_exact_remainder(psi, v):
    prior = BernoulliGaussian(0.1)
    lhs = float(denoise(prior, psi, v)[0]) - prior.asymptotic_slope(v) * psi
    assert float(prior.slope_deficit(psi, v)) == pytest.approx(lhs, abs=1e-10 * (1 + abs(psi)))


@pytest.mark.parametrize("prior", [GaussianPrior(1.0), BernoulliGaussian(0.1)], ids=repr)
def test_sampling_reproduces_second_moment(prior):
    x = prior.sample(np.random.default_rng(7), 1_000_000)
    sem = np.std(x**2) / np.sqrt(x.size)
    assert abs(np.mean(x**2) - prior.second_moment) < 3 * sem


def test_prior_roundtrip():
    for prior in (GaussianPrior(2.0), BernoulliGaussian(0.3)):
        assert Prior.from_dict(prior.to_dict()) == prior
    with pytest.raises(ValueError):
        Prior.from_dict({"kind": "laplace"})


def test_gaussian_expectation_polynomials():
    for var in (0.01, 1.0, 30.0):
        assert gaussian_expectation(lambda p: p**2, var, 0.1) == pytest.approx(var, rel=1e-13)
        assert gaussian_expectation(lambda p: p**4, var, 0.1) == pytest.approx(3 * var**2,
                                                                               rel=1e-12)


@pytest.mark.parametrize("rho", [0.1, 0.3])
@pytest.mark.parametrize("noise_var,v,scale", [(1.0, 1.0, 1.0), (0.01, 100.0, 1.0),
                                               (0.002, 300.0, 0.8), (0.3, 3.0, 1.7)])
def test_channel_mse_against_adaptive_quadrature(rho, noise_var, v, scale):
    prior = BernoulliGaussian(rho)
    total = 0.0
    for weight, tau2 in prior.components():
        s2 = scale**2 * tau2 + noise_var
        sd = np.sqrt(s2)
        k = scale * tau2 / s2
        cond = tau2 * noise_var / s2

        def f(psi):
            return ((float(denoise(prior, psi, v)[0]) - k * psi) ** 2
                    * np.exp(-0.5 * psi**2 / s2) / (sd * np.sqrt(2 * np.pi)))

        knots = sorted({0.0, *np.linspace(-12 * sd, 12 * sd, 49)})
        val = sum(integrate.quad(f, a, b, epsabs=1e-15, epsrel=1e-12, limit=200)[0]
                  for a, b in zip(knots[:-1], knots[1:]))
        total += weight * (cond + val)
    assert channel_mse(prior, noise_var, v, scale) == pytest.approx(total, rel=1e-9, abs=1e-14)


def test_channel_mse_gaussian_closed_form():
    # Gaussian prior, matched channel: mse = 1/(1/s + 1/n) with mismatch handled analytically
    prior = GaussianPrior(1.0)
    for n, v in ((0.5, 2.0), (0.5, 1.0), (0.1, 3.0)):
        g = v / (1 + v)
        expected = (g - 1) ** 2 + g**2 * n
        assert channel_mse(prior, n, v) == pytest.approx(expected, rel=1e-12)
        assert channel_posterior_variance(prior, n, v) == pytest.approx(1 / (1 + v), rel=1e-12)


def test_channel_mse_monte_carlo():
    prior = BernoulliGaussian(0.1)
    rng = np.random.default_rng(1)
    n = 2_000_000
    x = prior.sample(rng, n)
    psi = 0.9 * x + np.sqrt(0.02) * rng.standard_normal(n)
    err = (denoise(prior, psi, 40.0)[0] - x) ** 2
    assert abs(channel_mse(prior, 0.02, 40.0, 0.9) - err.mean()) < 3 * err.std() / np.sqrt(n)


def test_replica_chi_gaussian_closed_form():
    ens = rmt.EnsembleSpec.iid_gaussian(0.5, 1.0)
    chi, v = replica_chi(GaussianPrior(1.0), ens)
    # bisection on chi = 1/(1+v(chi)), v = xi alpha/(alpha + xi chi)
    oracle = optimize.bisect(lambda c: c - 1 / (1 + 0.5 / (0.5 + c)), 1e-6, 1.0, xtol=1e-15)
    assert chi == pytest.approx(oracle, abs=1e-9)
    assert v == pytest.approx(0.5 / (0.5 + oracle), abs=1e-9)


def test_replica_chi_weak_observation_limit():
    for kind in ("iid_gaussian", "row_orthogonal"):
        chi, v = replica_chi(BernoulliGaussian(0.1), rmt.EnsembleSpec(kind, 0.5, 1e-6))
        assert v < 1e-5
        assert chi == pytest.approx(1.0, abs=1e-5)


def test_replica_chi_reference_value_and_quadrature_order():
    prior = BernoulliGaussian(0.1)
    ens = rmt.EnsembleSpec.row_orthogonal(0.5, 100.0)
    chi61, v61 = replica_chi(prior, ens, order=61)
    chi101, _ = replica_chi(prior, ens, order=101)
    assert chi61 == pytest.approx(0.0016010441294551936, rel=1e-9)
    assert v61 == pytest.approx(84.38017951791902, rel=1e-9)
    assert abs(chi61 - chi101) < 1e-8


def test_replica_chi_monte_carlo():
    prior = BernoulliGaussian(0.1)
    ens = rmt.EnsembleSpec.row_orthogonal(0.5, 100.0)
    chi, v = replica_chi(prior, ens)
    rng = np.random.default_rng(11)
    errs = []
    for _ in range(5):
        x = prior.sample(rng, 2_000_000)
        psi = x + rng.standard_normal(x.size) / np.sqrt(v)
        errs.append((denoise(prior, psi, v)[0] - x) ** 2)
    err = np.concatenate(errs)
    assert abs(err.mean() - chi) < 3 * err.std() / np.sqrt(err.size)


def test_replica_chi_reports_last_iterate():
    with pytest.raises(FixedPointError) as info:
        replica_chi(BernoulliGaussian(0.1), rmt.EnsembleSpec.iid_gaussian(0.5, 10.0),
                    max_iters=2)
    assert info.value.last is not None


def test_replica_chi_is_a_root_and_matches_damped_iteration():
    prior = BernoulliGaussian(0.3)
    ens = rmt.EnsembleSpec.iid_gaussian(0.5, 100.0)  # slow cell: contraction near 1
    chi, v = replica_chi(prior, ens)
    assert abs(channel_mse(prior, 1 / v, v) - chi) < 1e-12
    damped, _ = replica_chi(prior, ens, damping=0.5)
    assert chi == pytest.approx(damped, rel=1e-6)
