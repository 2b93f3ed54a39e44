import numpy as np
import pytest

from credkit.balance import (
    BalanceProblem,
    BalanceWarning,
    SampleResult,
    balance_column,
    cube_sample,
    default_balance_vars,
    flight_phase,
    ht_balance_gaps,
    landing_phase,
    select_subportfolio,
    select_subportfolio_report,
)
from credkit.distributions import Family, Link, ModelSpec, PriorSpec
from credkit.errors import ConfigError, ParameterError
from credkit.portfolio import Censor, Observation, Policyholder, Portfolio

PRIOR = PriorSpec(family=Family.GAMMA, params=(2.0, 2.0))
MODEL = ModelSpec(families=(Family.POISSON,), shape_params=((),),
                  link=Link.MULTIPLICATIVE_FRAILTY, prior=PRIOR)


def mk_portfolio(n, seed=0):
    rng = np.random.default_rng(seed)
    members = []
    for i in range(n):
        mu = float(rng.uniform(0.1, 1.5))
        history = tuple(
            Observation(period=j + 1, dim=1, value=float(rng.poisson(mu)),
                        exposure=1.0, censor=Censor.EXACT)
            for j in range(int(rng.integers(1, 6)))
        )
        members.append(Policyholder(
            id=f"m{i}", mu_per_dim=(mu,), history=history,
            attributes=(("attr_age", float(rng.uniform(20, 70))),),
        ))
    return Portfolio(model=MODEL, members=tuple(members))


def random_problem(seed, n=50, p=3):
    rng = np.random.default_rng(seed)
    pi = rng.uniform(0.2, 0.8, size=n)
    X = np.column_stack([pi] + [rng.normal(size=n) for _ in range(p - 1)])
    return BalanceProblem(X=X, pi=pi, seed=seed)


class TestProblemValidation:
    def test_pi_range(self):
        with pytest.raises(ParameterError):
            BalanceProblem(X=np.ones((4, 1)), pi=np.array([0.5, 0.0, 0.5, 0.5]), seed=0)
        with pytest.raises(ParameterError):
            BalanceProblem(X=np.ones((4, 1)), pi=np.array([0.5, 1.2, 0.5, 0.5]), seed=0)

    def test_finite_x(self):
        with pytest.raises(ParameterError):
            BalanceProblem(X=np.array([[1.0], [np.nan]]), pi=np.array([0.5, 0.5]), seed=0)

    def test_shapes(self):
        with pytest.raises(ParameterError):
            BalanceProblem(X=np.ones((3, 1)), pi=np.ones(4) * 0.5, seed=0)
        with pytest.raises(ParameterError):
            BalanceProblem(X=np.ones((2, 2)), pi=np.ones(2) * 0.5, seed=0)


class TestFlightPhase:
    def test_all_certain_untouched(self):
        problem = BalanceProblem(X=np.ones((5, 1)), pi=np.ones(5), seed=3)
        assert np.array_equal(flight_phase(problem), np.ones(5))

    @pytest.mark.parametrize("seed", range(8))
    def test_preserves_totals(self, seed):
        problem = random_problem(seed)
        pi_star = flight_phase(problem)
        before = problem.X.T @ problem.pi
        after = problem.X.T @ pi_star
        assert np.max(np.abs(after - before)) < 1e-9

    @pytest.mark.parametrize("seed", range(8))
    def test_at_most_p_fractional(self, seed):
        problem = random_problem(seed)
        pi_star = flight_phase(problem)
        frac = (pi_star > 1e-9) & (pi_star < 1 - 1e-9)
        assert int(frac.sum()) <= problem.X.shape[1]
        assert np.all((pi_star >= 0) & (pi_star <= 1))

    def test_rank_deficiency_warns_and_still_balances(self):
        rng = np.random.default_rng(4)
        pi = rng.uniform(0.3, 0.7, size=30)
        col = rng.normal(size=30)
        X = np.column_stack([pi, col, 2.0 * col])
        problem = BalanceProblem(X=X, pi=pi, seed=1)
        with pytest.warns(BalanceWarning):
            pi_star = flight_phase(problem)
        assert np.max(np.abs(X.T @ pi_star - X.T @ pi)) < 1e-9


class TestLandingPhase:
    def test_integral_input_is_identity(self):
        problem = random_problem(0, n=12, p=2)
        integral = (np.arange(12) % 2).astype(float)
        result = landing_phase(problem, integral)
        assert np.array_equal(result.indicator, integral.astype(np.int64))
        assert result.achieved_size == 6

    def test_fixed_size_from_size_constraint(self):
        # balancing on pi alone forces the realized size to sum(pi)
        pi = np.full(10, 0.5)
        for seed in range(1000):
            problem = BalanceProblem(X=pi[:, None].copy(), pi=pi, seed=seed)
            result = cube_sample(problem)
            assert result.achieved_size == 5

    def test_inclusion_unbiasedness(self):
        rng = np.random.default_rng(7)
        n, runs = 20, 3000
        pi = rng.uniform(0.2, 0.8, size=n)
        X = np.column_stack([pi, rng.normal(size=n), rng.uniform(1, 3, size=n)])
        counts = np.zeros(n)
        for seed in range(runs):
            counts += cube_sample(BalanceProblem(X=X, pi=pi, seed=seed)).indicator
        freq = counts / runs
        se = np.sqrt(pi * (1 - pi) / runs)
        outside = int(np.sum(np.abs(freq - pi) > 3 * se))
        assert outside <= 1

    def test_beats_simple_random_sampling(self):
        rng = np.random.default_rng(11)
        n = 60
        pi = np.full(n, 0.25)
        money = rng.lognormal(2.0, 1.0, size=n)
        X = np.column_stack([pi, (money - money.mean()) / money.std()])
        raw = money[:, None]
        cube_gaps, srs_gaps = [], []
        for seed in range(200):
            result = cube_sample(BalanceProblem(X=X, pi=pi, seed=seed))
            cube_gaps.append(ht_balance_gaps(raw, pi, result.indicator)[0])
            pick = np.random.default_rng(10_000 + seed).choice(n, size=15, replace=False)
            srs = np.zeros(n, dtype=np.int64)
            srs[pick] = 1
            srs_gaps.append(ht_balance_gaps(raw, pi, srs)[0])
        assert np.median(cube_gaps) <= np.median(srs_gaps)


class TestSelectSubportfolio:
    def test_fraction_one_returns_everyone(self):
        pf = mk_portfolio(30)
        assert select_subportfolio(pf, 1.0, seed=5) == [ph.id for ph in pf]

    def test_fraction_bounds(self):
        pf = mk_portfolio(10)
        with pytest.raises(ConfigError):
            select_subportfolio(pf, 0.0)
        with pytest.raises(ConfigError):
            select_subportfolio(pf, 1.5)

    def test_unknown_column(self):
        pf = mk_portfolio(10)
        with pytest.raises(ConfigError):
            select_subportfolio(pf, 0.5, balance_vars=["claims_total"])
        with pytest.raises(ConfigError):
            select_subportfolio(pf, 0.5, balance_vars=["mu_9"])

    def test_size_within_slack(self):
        pf = mk_portfolio(400, seed=1)
        report = select_subportfolio_report(pf, 0.1, seed=9)
        p = len(report.var_names) + 1  # plus the pi column
        assert abs(report.achieved_size - 40) <= p
        assert len(report.ids) == report.achieved_size
        assert len(set(report.ids)) == report.achieved_size

    def test_deterministic_for_seed(self):
        pf = mk_portfolio(120, seed=2)
        a = select_subportfolio(pf, 0.2, seed=42)
        b = select_subportfolio(pf, 0.2, seed=42)
        assert a == b
        c = select_subportfolio(pf, 0.2, seed=43)
        assert a != c  # different randomness almost surely differs

    def test_ht_gaps_small_on_balanced_draw(self):
        pf = mk_portfolio(500, seed=3)
        report = select_subportfolio_report(pf, 0.2, seed=1)
        assert set(report.ht_gaps) == set(report.var_names)
        for gap in report.ht_gaps.values():
            assert gap < 0.1

    def test_attr_balance_var(self):
        pf = mk_portfolio(80, seed=4)
        report = select_subportfolio_report(pf, 0.25,
                                            balance_vars=["attr_age", "mu_1"], seed=2)
        assert report.var_names == ("attr_age", "mu_1")

    def test_default_vars(self):
        pf = mk_portfolio(5)
        assert default_balance_vars(pf) == ["mu_1", "avg_claim_1"]

    def test_balance_column_values(self):
        members = (
            Policyholder(id="a", mu_per_dim=(0.5,), history=(
                Observation(period=1, dim=1, value=2.0, exposure=1.0, censor=Censor.EXACT),
                Observation(period=2, dim=1, value=None, exposure=1.0, censor=Censor.MISSING),
                Observation(period=3, dim=1, value=4.0, exposure=1.0,
                            censor=Censor.RIGHT_CENSORED),
            )),
            Policyholder(id="b", mu_per_dim=(0.7,), history=(
                Observation(period=1, dim=1, value=None, exposure=1.0, censor=Censor.MISSING),
            )),
        )
        pf = Portfolio(model=MODEL, members=members)
        assert balance_column(pf, "avg_claim_1").tolist() == [3.0, 0.0]
        assert balance_column(pf, "n_1").tolist() == [2.0, 0.0]
        assert balance_column(pf, "mu_1").tolist() == [0.5, 0.7]
