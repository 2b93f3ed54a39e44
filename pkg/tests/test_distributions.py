"""Distribution catalog checks: pinned values, normalization, solver accuracy,
sampling consistency."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from credkit.distributions import (
    Family,
    Link,
    ModelSpec,
    PriorSpec,
    SQUARE_WEIGHT,
    IDENTITY_WEIGHT,
    WeightFn,
    conditional_expectation,
    exp_weight,
    link_mean,
    log_density,
    log_mgf,
    log_survival,
    mgf_threshold,
    sample,
    second_moment,
    yexp_weight,
)
from credkit.errors import DivergenceError, ParameterError, SupportError

DISCRETE_CASES = [
    (Family.POISSON, (0.7,)),
    (Family.NEG_BINOM, (0.5, 0.86)),
    (Family.LOGARITHMIC, (1.6,)),
    (Family.GAMMA_COUNT, (0.9, 1.5)),
    (Family.GEN_POISSON, (0.8, 0.3)),
]

CONTINUOUS_CASES = [
    (Family.GAMMA, (2.0, 2.0)),
    (Family.LOG_NORMAL, (2.0, 0.8)),
    (Family.LOG_LOGISTIC, (1.5, 3.0)),
    (Family.INV_GAUSSIAN, (1.5, 2.0)),
    (Family.PARETO_LOMAX, (2.0, 2.5)),
    (Family.BURR, (1.5, 2.0, 2.0)),
    (Family.WEIBULL, (2.0, 1.5)),
]

ALL_CASES = DISCRETE_CASES + CONTINUOUS_CASES


def _pmf_grid(family, params, ymax):
    lo = 1 if family is Family.LOGARITHMIC else 0
    ys = np.arange(lo, ymax + 1, dtype=float)
    return ys, np.exp(log_density(family, params, ys))


def _pdf(family, params):
    return lambda y: math.exp(log_density(family, params, float(y)))


class TestPinnedValues:
    def test_poisson_at_zero(self):
        assert log_density(Family.POISSON, (1.0,), 0.0) == pytest.approx(-1.0, abs=1e-15)

    def test_exponential_logpdf(self):
        # Gamma with shape 1 and mean 1 is Exponential(1)
        assert log_density(Family.GAMMA, (1.0, 1.0), 0.5) == pytest.approx(-0.5, abs=1e-14)

    def test_negbinom_against_direct_pmf(self):
        val = log_density(Family.NEG_BINOM, (0.3, 0.86), 2.0)
        r, m = 0.86, 0.3
        ref = stats.nbinom.logpmf(2, r, r / (r + m))
        assert val == pytest.approx(ref, rel=1e-12)
        ys, pmf = _pmf_grid(Family.NEG_BINOM, (0.3, 0.86), 1000)
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)

    def test_gamma_survival_at_zero(self):
        assert log_survival(Family.GAMMA, (1.0, 1.0), 0.0) == 0.0

    def test_poisson_survival_floor(self):
        assert log_survival(Family.POISSON, (1.0,), 400.0) == -700.0

    def test_weibull_survival_at_median(self):
        k = 2.0
        scale = 1.0 / math.gamma(1.0 + 1.0 / k)
        median = scale * math.log(2.0) ** (1.0 / k)
        assert log_survival(Family.WEIBULL, (1.0, k), median) == pytest.approx(
            math.log(0.5), rel=1e-12)

    def test_poisson_identity_and_mgf(self):
        mu = 0.7
        assert conditional_expectation(Family.POISSON, (mu,), IDENTITY_WEIGHT) == mu
        a = 0.3
        got = conditional_expectation(Family.POISSON, (mu,), exp_weight(a))
        assert got == pytest.approx(math.exp(mu * (math.e ** a - 1.0)), rel=1e-12)


class TestSupportAndParams:
    def test_noninteger_discrete_rejected(self):
        with pytest.raises(SupportError):
            log_density(Family.POISSON, (1.0,), 1.5)

    def test_negative_rejected(self):
        with pytest.raises(SupportError):
            log_density(Family.GAMMA, (1.0, 2.0), -0.1)

    def test_logarithmic_support_starts_at_one(self):
        with pytest.raises(SupportError):
            log_density(Family.LOGARITHMIC, (1.5,), 0.0)

    def test_logarithmic_mean_must_exceed_one(self):
        with pytest.raises(ParameterError):
            log_density(Family.LOGARITHMIC, (0.9,), 1.0)

    @pytest.mark.parametrize("family,params", [
        (Family.NEG_BINOM, (0.3, -1.0)),
        (Family.GEN_POISSON, (0.5, 1.0)),
        (Family.GAMMA, (1.0, 0.0)),
        (Family.LOG_LOGISTIC, (1.0, 1.0)),
        (Family.PARETO_LOMAX, (1.0, 1.0)),
        (Family.BURR, (1.0, 0.5, 1.0)),
        (Family.GAMMA, (-1.0, 2.0)),
    ])
    def test_bad_params(self, family, params):
        with pytest.raises(ParameterError):
            log_density(family, params, 1.0)

    def test_singular_density_at_zero_rejected(self):
        with pytest.raises(SupportError):
            log_density(Family.GAMMA, (1.0, 0.5), 0.0)
        # fine when the density is bounded at the origin
        log_density(Family.GAMMA, (1.0, 1.5), 0.0)

    def test_wrong_arity(self):
        with pytest.raises(ParameterError):
            log_density(Family.POISSON, (1.0, 2.0), 0.0)


class TestNormalization:
    @pytest.mark.parametrize("family,params", DISCRETE_CASES)
    def test_discrete_mass_sums_to_one(self, family, params):
        _, pmf = _pmf_grid(family, params, 400)
        assert pmf.sum() == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("family,params", CONTINUOUS_CASES)
    def test_continuous_density_integrates_to_one(self, family, params):
        pdf = _pdf(family, params)
        m = params[0]
        total = integrate.quad(pdf, 0, m, limit=200)[0] + \
            integrate.quad(pdf, m, np.inf, limit=200)[0]
        assert total == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("family,params", DISCRETE_CASES)
    def test_discrete_mean_matches_parameter(self, family, params):
        # exercises the internal p / beta solvers
        ys, pmf = _pmf_grid(family, params, 400)
        assert (ys * pmf).sum() == pytest.approx(params[0], rel=1e-7)

    @pytest.mark.parametrize("family,params", CONTINUOUS_CASES)
    def test_continuous_mean_matches_parameter(self, family, params):
        pdf = _pdf(family, params)
        m = params[0]
        got = integrate.quad(lambda y: y * pdf(y), 0, m, limit=200)[0] + \
            integrate.quad(lambda y: y * pdf(y), m, np.inf, limit=200)[0]
        assert got == pytest.approx(m, rel=1e-6)


class TestSurvivalConsistency:
    @pytest.mark.parametrize("family,params", DISCRETE_CASES)
    def test_discrete_sf_matches_cumsum(self, family, params):
        ys, pmf = _pmf_grid(family, params, 60)
        cdf = np.cumsum(pmf)
        sf = np.exp(log_survival(family, params, ys))
        np.testing.assert_allclose(sf, 1.0 - cdf, atol=1e-6)

    @pytest.mark.parametrize("family,params", CONTINUOUS_CASES)
    def test_continuous_sf_matches_quadrature(self, family, params):
        pdf = _pdf(family, params)
        for q in (0.3, 1.0, 2.7):
            cdf = integrate.quad(pdf, 0, q, limit=200)[0]
            sf = math.exp(log_survival(family, params, q))
            assert sf == pytest.approx(1.0 - cdf, abs=1e-6)

    @pytest.mark.parametrize("family,params", ALL_CASES)
    def test_sf_monotone_nonincreasing(self, family, params):
        lo = 1.0 if family is Family.LOGARITHMIC else 0.0
        ys = np.arange(lo, lo + 20.0) if family.discrete else np.linspace(lo, 8.0, 40)
        sf = log_survival(family, params, ys)
        assert np.all(np.diff(sf) <= 1e-12)


class TestSampling:
    def test_poisson_mean_zero_degenerate(self):
        rng = np.random.default_rng(0)
        draws = sample(Family.POISSON, (0.0,), rng, size=1000)
        assert np.all(draws == 0.0)

    def test_gamma_law_of_large_numbers(self):
        rng = np.random.default_rng(7)
        draws = sample(Family.GAMMA, (3.0, 2.0), rng, size=1_000_000)
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - 3.0) < 4.0 * se

    def test_invgaussian_variance(self):
        rng = np.random.default_rng(11)
        draws = sample(Family.INV_GAUSSIAN, (1.0, 1.0 / 0.58), rng, size=1_000_000)
        assert draws.var() == pytest.approx(0.58, abs=0.02)

    @pytest.mark.parametrize("family,params", ALL_CASES)
    def test_empirical_mean(self, family, params):
        rng = np.random.default_rng(hash(family.value) % 2**31)
        draws = sample(family, params, rng, size=200_000)
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - params[0]) < 4.0 * max(se, 1e-12)

    @pytest.mark.parametrize("family,params", CONTINUOUS_CASES)
    def test_kolmogorov_smirnov(self, family, params):
        rng = np.random.default_rng(101)
        draws = sample(family, params, rng, size=100_000)

        def cdf(y):
            return 1.0 - np.exp(log_survival(family, params, np.maximum(y, 1e-300)))

        stat = stats.kstest(draws, cdf).statistic
        assert stat < 1.628 / math.sqrt(draws.size)  # 1% critical value

    def test_mean_array_broadcast(self):
        rng = np.random.default_rng(3)
        means = np.array([0.5, 1.0, 4.0])
        draws = sample(Family.POISSON, (means,), rng, size=(2000, 3))
        assert draws.shape == (2000, 3)
        assert np.all(abs(draws.mean(axis=0) - means) < 4.0 * np.sqrt(means / 2000.0 + 1e-9))


class TestExpectations:
    @pytest.mark.parametrize("family,params", ALL_CASES)
    def test_identity_is_mean(self, family, params):
        assert conditional_expectation(family, params, IDENTITY_WEIGHT) == params[0]

    def test_gammacount_identity_matches_bruteforce(self):
        family, params = Family.GAMMA_COUNT, (0.9, 1.5)
        ys, pmf = _pmf_grid(family, params, 300)
        brute = float((ys * pmf).sum())
        assert conditional_expectation(family, params, IDENTITY_WEIGHT) == pytest.approx(
            brute, rel=1e-8)

    @pytest.mark.parametrize("family,params", ALL_CASES)
    def test_second_moment_against_bruteforce(self, family, params):
        try:
            closed = conditional_expectation(family, params, SQUARE_WEIGHT)
        except DivergenceError:
            pytest.skip("second moment does not exist for these params")
        if family.discrete:
            ys, pmf = _pmf_grid(family, params, 500)
            brute = float((ys * ys * pmf).sum())
        else:
            pdf = _pdf(family, params)
            m = params[0]
            brute = integrate.quad(lambda y: y * y * pdf(y), 0, m, limit=200)[0] + \
                integrate.quad(lambda y: y * y * pdf(y), m, np.inf, limit=200)[0]
        assert closed == pytest.approx(brute, rel=1e-6)

    def test_loglogistic_second_moment_divergence(self):
        with pytest.raises(DivergenceError):
            conditional_expectation(Family.LOG_LOGISTIC, (1.0, 1.8), SQUARE_WEIGHT)

    @pytest.mark.parametrize("family,params,alpha", [
        (Family.POISSON, (0.7,), 0.4),
        (Family.NEG_BINOM, (0.5, 0.86), 0.3),
        (Family.LOGARITHMIC, (1.6,), 0.2),
        (Family.GEN_POISSON, (0.8, 0.3), 0.1),
        (Family.GAMMA, (2.0, 2.0), 0.2),
        (Family.INV_GAUSSIAN, (1.5, 2.0), 0.2),
        (Family.WEIBULL, (2.0, 1.5), 0.2),
    ])
    def test_mgf_against_bruteforce(self, family, params, alpha):
        got = conditional_expectation(family, params, exp_weight(alpha))
        if family.discrete:
            ys, pmf = _pmf_grid(family, params, 700)
            brute = float((np.exp(alpha * ys) * pmf).sum())
        else:
            pdf = _pdf(family, params)
            m = params[0]
            # finite upper cut: beyond 100*mean the weighted tail is < 1e-40
            # for every boundable case here, and exp(alpha*y) stays finite
            hi = 100.0 * m
            brute = integrate.quad(lambda y: math.exp(alpha * y) * pdf(y), 0, m, limit=200)[0] + \
                integrate.quad(lambda y: math.exp(alpha * y) * pdf(y), m, hi, limit=200)[0]
        assert got == pytest.approx(brute, rel=1e-6)

    @pytest.mark.parametrize("family,params,alpha", [
        (Family.POISSON, (0.7,), 0.4),
        (Family.NEG_BINOM, (0.5, 0.86), 0.3),
        (Family.GAMMA, (2.0, 2.0), 0.2),
        (Family.INV_GAUSSIAN, (1.5, 2.0), 0.2),
    ])
    def test_yexp_against_bruteforce(self, family, params, alpha):
        got = conditional_expectation(family, params, yexp_weight(alpha))
        if family.discrete:
            ys, pmf = _pmf_grid(family, params, 700)
            brute = float((ys * np.exp(alpha * ys) * pmf).sum())
        else:
            pdf = _pdf(family, params)
            m = params[0]
            hi = 100.0 * m
            brute = integrate.quad(lambda y: y * math.exp(alpha * y) * pdf(y), 0, m, limit=200)[0] + \
                integrate.quad(lambda y: y * math.exp(alpha * y) * pdf(y), m, hi, limit=200)[0]
        assert got == pytest.approx(brute, rel=1e-6)

    @pytest.mark.parametrize("family,params", [
        (Family.LOG_NORMAL, (2.0, 0.8)),
        (Family.LOG_LOGISTIC, (1.5, 3.0)),
        (Family.PARETO_LOMAX, (2.0, 2.5)),
        (Family.BURR, (1.5, 2.0, 2.0)),
    ])
    def test_heavy_tail_mgf_divergence(self, family, params):
        with pytest.raises(DivergenceError):
            conditional_expectation(family, params, exp_weight(0.05))

    def test_gamma_mgf_domain_edge(self):
        # t must stay below k/mean
        m, k = 2.0, 2.0
        conditional_expectation(Family.GAMMA, (m, k), exp_weight(0.99 * k / m))
        with pytest.raises(DivergenceError):
            conditional_expectation(Family.GAMMA, (m, k), exp_weight(k / m))

    def test_invgaussian_boundary_inclusive(self):
        m, lam = 1.5, 2.0
        tmax, inclusive = mgf_threshold(Family.INV_GAUSSIAN, (m, lam))
        assert inclusive
        val = conditional_expectation(Family.INV_GAUSSIAN, (m, lam), exp_weight(float(tmax)))
        assert val == pytest.approx(math.exp(lam / m), rel=1e-10)

    def test_mean_array_vectorization(self):
        means = np.array([0.5, 1.0, 2.0])
        got = log_mgf(Family.POISSON, (means,), 0.3)
        np.testing.assert_allclose(got, means * (math.exp(0.3) - 1.0), rtol=1e-14)

    def test_custom_weight(self):
        got = conditional_expectation(Family.POISSON, (0.7,), WeightFn("custom", func=np.sqrt))
        ys, pmf = _pmf_grid(Family.POISSON, (0.7,), 200)
        assert got == pytest.approx(float((np.sqrt(ys) * pmf).sum()), rel=1e-8)


class TestPriors:
    @pytest.mark.parametrize("family", [
        Family.GAMMA, Family.LOG_NORMAL, Family.INV_GAUSSIAN, Family.WEIBULL])
    def test_from_mean_variance_round_trip(self, family):
        prior = PriorSpec.from_mean_variance(family, 1.0, 0.58)
        assert prior.mean() == pytest.approx(1.0, abs=1e-12)
        assert prior.variance() == pytest.approx(0.58, rel=1e-10)
        assert prior.mean_constraint == 1.0

    def test_mean_constraint_enforced(self):
        with pytest.raises(ParameterError):
            PriorSpec(Family.GAMMA, (2.0, 2.0), mean_constraint=0.9)
        PriorSpec(Family.GAMMA, (2.0, 2.0), mean_constraint=1.0)

    def test_prior_family_restriction(self):
        with pytest.raises(ParameterError):
            PriorSpec(Family.POISSON, (1.0, 1.0))

    @pytest.mark.parametrize("family", [
        Family.GAMMA, Family.LOG_NORMAL, Family.INV_GAUSSIAN, Family.WEIBULL])
    def test_sampling_matches_moments(self, family):
        prior = PriorSpec.from_mean_variance(family, 1.3, 0.4)
        rng = np.random.default_rng(5)
        draws = prior.sample(rng, size=400_000)
        assert draws.mean() == pytest.approx(1.3, abs=0.01)
        assert draws.var() == pytest.approx(0.4, abs=0.02)

    @pytest.mark.parametrize("family", [
        Family.GAMMA, Family.LOG_NORMAL, Family.INV_GAUSSIAN, Family.WEIBULL])
    def test_ppf_matches_empirical_quantiles(self, family):
        prior = PriorSpec.from_mean_variance(family, 1.0, 0.58)
        rng = np.random.default_rng(9)
        draws = prior.sample(rng, size=200_000)
        for q in (0.1, 0.5, 0.9):
            assert prior.ppf(q) == pytest.approx(np.quantile(draws, q), rel=0.02)

    def test_serialization_round_trip(self):
        prior = PriorSpec.from_mean_variance(Family.WEIBULL, 1.0, 0.58)
        again = PriorSpec.from_dict(prior.to_dict())
        assert again == prior


class TestModelSpec:
    def _spec(self):
        return ModelSpec(
            families=(Family.POISSON, Family.NEG_BINOM),
            shape_params=((), (0.86,)),
            link=Link.MULTIPLICATIVE_FRAILTY,
            prior=PriorSpec(Family.GAMMA, (2.0, 2.0)),
        )

    def test_dims_and_params(self):
        spec = self._spec()
        assert spec.dims == 2
        assert spec.params_for(1, 0.5) == (0.5, 0.86)

    def test_shape_param_arity_enforced(self):
        with pytest.raises(ParameterError):
            ModelSpec((Family.POISSON,), ((1.0,),), Link.LOG_ADDITIVE,
                      PriorSpec(Family.GAMMA, (2.0, 2.0)))

    def test_link_mean(self):
        assert link_mean(Link.MULTIPLICATIVE_FRAILTY, 0.3, 2.0) == pytest.approx(0.6)
        assert link_mean(Link.LOG_ADDITIVE, 0.3, 0.0) == pytest.approx(0.3)

    def test_frailty_theta_positivity(self):
        spec = self._spec()
        with pytest.raises(ParameterError):
            spec.check_theta(-1.0)

    def test_serialization_round_trip(self):
        spec = self._spec()
        assert ModelSpec.from_dict(spec.to_dict()) == spec
