"""Monte Carlo credibility premiums via importance sampling from the prior.

Predictive expectations are self-normalized ratios over iid prior draws:

    E[pi(Y_next) | history] ~= sum_k m_k exp(l_k) / sum_k exp(l_k)

with l_k the conditional log-likelihood of the history at draw theta_k and
m_k the conditional expectation of pi under theta_k. One set of draws is
shared across the whole portfolio. All weight arithmetic happens in log
space with a max shift; standard errors come from the delta method for
ratio estimators, jointly across the components a principle combines.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import os
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateWeightsError,
    NumericError,
    ParameterError,
    SchemaError,
)
from .distributions import (
    LOG_FLOOR,
    ModelSpec,
    PriorSpec,
    WeightFn,
    conditional_expectation,
    esscher_tilted_mean,
    link_mean,
    log_density,
    log_mgf,
    log_survival,
    mean_domain_mask,
    second_moment,
)
from .ioutil import atomic_write_text, fmt17
from .portfolio import Censor, Policyholder, Portfolio


LOW_ESS_FRACTION = 0.01


class LowEffectiveSampleWarning(UserWarning):
    """Importance weights are concentrated; estimates may be noisy."""


@dataclass(frozen=True)
class PriorDraws:
    """Latent draws shared across the portfolio; rebuilt exactly by seed."""

    theta: np.ndarray
    seed: int
    prior: PriorSpec

    @property
    def K(self) -> int:
        return int(self.theta.shape[0])


def draw_prior(prior: PriorSpec, size: int, seed: int) -> PriorDraws:
    if size < 1:
        raise ParameterError("need at least one draw")
    rng = np.random.default_rng(seed)
    theta = np.asarray(prior.sample(rng, size), dtype=float)
    return PriorDraws(theta=theta, seed=int(seed), prior=prior)


class PrincipleKind(enum.Enum):
    NET = "net"
    EXPECTED_VALUE = "expected_value"
    UTILITY = "utility"
    STD_DEV = "std_dev"
    VARIANCE = "variance"
    EXPONENTIAL = "exponential"
    ESSCHER = "esscher"


_NEEDS_POSITIVE_ALPHA = {PrincipleKind.EXPONENTIAL, PrincipleKind.ESSCHER}
_NEEDS_ALPHA = {PrincipleKind.EXPECTED_VALUE, PrincipleKind.STD_DEV,
                PrincipleKind.VARIANCE} | _NEEDS_POSITIVE_ALPHA


@dataclass(frozen=True)
class PremiumPrinciple:
    kind: PrincipleKind
    alpha: float = 0.0
    utility: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind in _NEEDS_POSITIVE_ALPHA and not self.alpha > 0:
            raise ParameterError(f"{self.kind.value} requires alpha > 0")
        if self.kind in _NEEDS_ALPHA and self.alpha < 0:
            raise ParameterError(f"{self.kind.value} requires alpha >= 0")
        if self.kind is PrincipleKind.UTILITY and self.utility is None:
            raise ParameterError("utility principle requires a callable")
        if self.kind is not PrincipleKind.UTILITY and self.utility is not None:
            raise ParameterError("utility callable only applies to the utility principle")

    def to_dict(self) -> dict:
        if self.kind is PrincipleKind.UTILITY:
            raise ConfigError("utility principle carries a callable and cannot be serialized")
        out = {"kind": self.kind.value}
        if self.kind in _NEEDS_ALPHA:
            out["alpha"] = float(self.alpha)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PremiumPrinciple":
        try:
            kind = PrincipleKind(data["kind"])
        except (KeyError, ValueError):
            raise ConfigError(f"unknown premium principle {data!r}") from None
        return cls(kind=kind, alpha=float(data.get("alpha", 0.0)))


@dataclass(frozen=True)
class PremiumEstimate:
    value: float
    std_error: float
    ess: float


# ---------------------------------------------------------------------------
# Conditional log-likelihood against a vector of latent draws
# ---------------------------------------------------------------------------


def _loglik_vector(ph: Policyholder, model: ModelSpec, theta: np.ndarray) -> np.ndarray:
    """l_k = log-likelihood of the history at each theta_k.

    Draws whose induced mean leaves the family's domain (possible for the
    Logarithmic family) contribute the log floor: they cannot explain the
    data and self-normalization removes them.
    """
    ll = np.zeros(theta.shape[0])
    mean_cache: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = {}
    for obs in ph.history:
        if obs.censor is Censor.MISSING:
            continue
        d = obs.dim - 1
        family = model.families[d]
        shape = model.shape_params[d]
        key = (d, obs.exposure)
        if key not in mean_cache:
            mean = obs.exposure * link_mean(model.link, ph.mu_per_dim[d], theta)
            mean_cache[key] = mean, mean_domain_mask(family, mean)
        mean, ok = mean_cache[key]
        evaluate = log_density if obs.censor is Censor.EXACT else log_survival
        if bool(np.all(ok)):
            ll += evaluate(family, (mean, *shape), obs.value)
        else:
            term = np.full(theta.shape[0], LOG_FLOOR)
            if np.any(ok):
                term[ok] = evaluate(family, (mean[ok], *shape), obs.value)
            ll += term
    return ll


def log_likelihood(ph: Policyholder, model: ModelSpec, theta: float) -> float:
    """Conditional log-likelihood of the history at a single latent value."""
    model.check_theta(theta)
    return float(_loglik_vector(ph, model, np.array([float(theta)]))[0])


def _effective_obs(ph: Policyholder) -> int:
    return sum(1 for o in ph.history if o.censor is not Censor.MISSING)


def _weights(ll: np.ndarray, n_obs: int) -> np.ndarray:
    """Max-shifted weights; error when every term clamped for every draw."""
    top = float(np.max(ll))
    if n_obs > 0 and top <= LOG_FLOOR * n_obs:
        raise DegenerateWeightsError(
            "all importance weights underflowed the log floor; "
            "the history is impossible under every prior draw"
        )
    return np.exp(ll - top)


# ---------------------------------------------------------------------------
# Per-draw conditional expectations for the principle components
# ---------------------------------------------------------------------------


def _per_theta_weight(model: ModelSpec, mu_per_dim: Sequence[float],
                      theta: np.ndarray, weight: WeightFn) -> np.ndarray:
    """m_k = E[pi(Y) | theta_k] where Y sums the next period's dimensions."""
    means = [link_mean(model.link, mu, theta) for mu in mu_per_dim]
    if weight.kind == "identity":
        return np.sum(means, axis=0)
    if weight.kind == "square":
        # independent dims: E[(sum Y_d)^2] = sum Var(Y_d) + (sum E Y_d)^2
        total = np.sum(means, axis=0)
        second = np.zeros_like(total)
        for d, mean in enumerate(means):
            second += second_moment(model.families[d],
                                    (mean, *model.shape_params[d])) - mean ** 2
        return second + total ** 2
    if weight.kind == "exp":
        log_total = np.zeros(theta.shape[0])
        for d, mean in enumerate(means):
            log_total += log_mgf(model.families[d],
                                 (mean, *model.shape_params[d]), weight.alpha)
        return np.exp(log_total)
    if weight.kind == "yexp":
        # d/dt of the product MGF: (sum of tilted means) * product MGF
        log_total = np.zeros(theta.shape[0])
        tilt = np.zeros(theta.shape[0])
        for d, mean in enumerate(means):
            params = (mean, *model.shape_params[d])
            log_total += log_mgf(model.families[d], params, weight.alpha)
            tilt += esscher_tilted_mean(model.families[d], params, weight.alpha)
        return tilt * np.exp(log_total)
    if len(mu_per_dim) != 1:
        raise ParameterError("custom weights support univariate models only")
    family = model.families[0]
    shape = model.shape_params[0]
    return np.array([
        conditional_expectation(family, (m, *shape), weight) for m in means[0]
    ])


def _components(model: ModelSpec, mu_per_dim: Sequence[float], theta: np.ndarray,
                weights: Sequence[WeightFn]) -> list[np.ndarray]:
    valid = np.ones(theta.shape[0], dtype=bool)
    for d, family in enumerate(model.families):
        valid &= mean_domain_mask(family, link_mean(model.link, mu_per_dim[d], theta))
    comps = []
    for weight in weights:
        m = np.zeros(theta.shape[0])
        m[valid] = _per_theta_weight(model, mu_per_dim, theta[valid], weight)
        comps.append(m)
    return comps


def _principle_plan(principle: PremiumPrinciple):
    """Component weights plus the transform (value, gradient) of their ratios."""
    a = principle.alpha
    kind = principle.kind
    if kind is PrincipleKind.NET:
        return [WeightFn("identity")], lambda R: (R[0], np.array([1.0]))
    if kind is PrincipleKind.EXPECTED_VALUE:
        return [WeightFn("identity")], lambda R: ((1.0 + a) * R[0], np.array([1.0 + a]))
    if kind is PrincipleKind.UTILITY:
        return ([WeightFn("custom", func=principle.utility)],
                lambda R: (R[0], np.array([1.0])))
    if kind is PrincipleKind.STD_DEV:
        def stddev(R):
            var = R[1] - R[0] ** 2
            if not var > 0:
                raise NumericError(
                    "predictive variance is not positive; cannot load on std dev"
                )
            s = math.sqrt(var)
            return R[0] + a * s, np.array([1.0 - a * R[0] / s, a / (2.0 * s)])
        return [WeightFn("identity"), WeightFn("square")], stddev
    if kind is PrincipleKind.VARIANCE:
        def variance(R):
            return (R[0] + a * (R[1] - R[0] ** 2),
                    np.array([1.0 - 2.0 * a * R[0], a]))
        return [WeightFn("identity"), WeightFn("square")], variance
    if kind is PrincipleKind.EXPONENTIAL:
        def exponential(R):
            return math.log(R[0]) / a, np.array([1.0 / (a * R[0])])
        return [WeightFn("exp", a)], exponential
    if kind is PrincipleKind.ESSCHER:
        def esscher(R):
            return R[0] / R[1], np.array([1.0 / R[1], -R[0] / R[1] ** 2])
        return [WeightFn("yexp", a), WeightFn("exp", a)], esscher
    raise ParameterError(f"unhandled principle {kind}")


def _estimate(ll: np.ndarray, comps: Sequence[np.ndarray], transform,
              n_obs: int) -> PremiumEstimate:
    w = _weights(ll, n_obs)
    total = float(np.sum(w))
    wt = w / total
    ess = 1.0 / float(np.dot(wt, wt))
    if ess < LOW_ESS_FRACTION * ll.shape[0]:
        warnings.warn(
            f"effective sample size {ess:.1f} below {LOW_ESS_FRACTION:.0%} of "
            f"K={ll.shape[0]}; consider more draws",
            LowEffectiveSampleWarning, stacklevel=3,
        )
    R = np.array([float(np.dot(wt, m)) for m in comps])
    # constant components have exactly zero sampling variance; avoid the
    # rounding residue of m - R masquerading as noise
    devs = [np.zeros_like(m) if np.ptp(m) == 0.0 else m - r
            for m, r in zip(comps, R)]
    wt2 = wt ** 2
    cov = np.array([[float(np.dot(wt2 * di, dj)) for dj in devs] for di in devs])
    value, grad = transform(R)
    var = float(grad @ cov @ grad)
    return PremiumEstimate(value=float(value), std_error=math.sqrt(max(var, 0.0)),
                           ess=ess)


# ---------------------------------------------------------------------------
# Public estimators
# ---------------------------------------------------------------------------


def predictive_expectation(ph: Policyholder, model: ModelSpec, draws: PriorDraws,
                           weight: WeightFn) -> PremiumEstimate:
    """Self-normalized estimate of E[pi(Y_next) | history]."""
    _check_model(ph, model)
    ll = _loglik_vector(ph, model, draws.theta)
    comps = _components(model, ph.mu_per_dim, draws.theta, [weight])
    return _estimate(ll, comps, lambda R: (R[0], np.array([1.0])),
                     _effective_obs(ph))


def premium(ph: Policyholder, model: ModelSpec, draws: PriorDraws,
            principle: PremiumPrinciple) -> PremiumEstimate:
    """Credibility premium for the next period under the given principle."""
    _check_model(ph, model)
    weights, transform = _principle_plan(principle)
    ll = _loglik_vector(ph, model, draws.theta)
    comps = _components(model, ph.mu_per_dim, draws.theta, weights)
    return _estimate(ll, comps, transform, _effective_obs(ph))


def manual_premium(ph: Policyholder, model: ModelSpec, draws: PriorDraws,
                   principle: PremiumPrinciple) -> PremiumEstimate:
    """Premium ignoring the claim history (uniform weights over draws)."""
    _check_model(ph, model)
    weights, transform = _principle_plan(principle)
    ll = np.zeros(draws.K)
    comps = _components(model, ph.mu_per_dim, draws.theta, weights)
    return _estimate(ll, comps, transform, 0)


def premium_batch(portfolio: Portfolio, draws: PriorDraws,
                  principle: PremiumPrinciple) -> list[PremiumEstimate]:
    """premium() for every member against one shared set of draws."""
    return [premium(ph, portfolio.model, draws, principle)
            for ph in portfolio.members]


def manual_premium_batch(portfolio: Portfolio, draws: PriorDraws,
                         principle: PremiumPrinciple) -> list[PremiumEstimate]:
    return [manual_premium(ph, portfolio.model, draws, principle)
            for ph in portfolio.members]


def _check_model(ph: Policyholder, model: ModelSpec) -> None:
    if ph.dims != model.dims:
        raise ParameterError(f"policyholder has D={ph.dims}, model has D={model.dims}")


def conjugate_net_premium(a: float, b: float, mu: float, n: int, sum_y: float) -> float:
    """Closed-form net premium for the Poisson frequency, Gamma(a, b) frailty
    pair: mu * (a + sum_y) / (b + mu * n). The credibility-factor form
    Z * ybar + (1 - Z) * prior mean with Z = mu*n / (b + mu*n) is identical.
    """
    if not (a > 0 and b > 0 and mu > 0):
        raise ParameterError("a, b, mu must be positive")
    if n < 0 or int(n) != n:
        raise ParameterError("n must be a non-negative integer")
    if sum_y < 0:
        raise ParameterError("sum_y must be non-negative")
    return mu * (a + sum_y) / (b + mu * float(n))


# ---------------------------------------------------------------------------
# CSV export: id,principle,alpha,value,std_error,ess,K,seed
# ---------------------------------------------------------------------------


class PremiumRow(NamedTuple):
    id: str
    principle: str
    alpha: float | None
    value: float
    std_error: float
    ess: float
    K: int
    seed: int


def save_premiums_csv(path: str | os.PathLike, ids: Sequence[str],
                      estimates: Sequence[PremiumEstimate],
                      principle: PremiumPrinciple, draws: PriorDraws) -> None:
    if len(ids) != len(estimates):
        raise SchemaError("ids and estimates must align")
    with_alpha = principle.kind in _NEEDS_ALPHA
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", "principle", "alpha", "value", "std_error", "ess", "K", "seed"])
    for pid, est in zip(ids, estimates):
        writer.writerow([
            pid, principle.kind.value,
            fmt17(principle.alpha) if with_alpha else "",
            fmt17(est.value), fmt17(est.std_error), fmt17(est.ess),
            str(draws.K), str(draws.seed),
        ])
    atomic_write_text(path, buf.getvalue())


def load_premiums_csv(path: str | os.PathLike) -> list[PremiumRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id", "principle", "alpha", "value", "std_error", "ess", "K", "seed"]
        if header != expected:
            raise SchemaError(f"{path}: not a premium export")
        out = []
        for row in reader:
            if not row:
                continue
            rec = dict(zip(header, row))
            out.append(PremiumRow(
                id=rec["id"], principle=rec["principle"],
                alpha=None if rec["alpha"] == "" else float(rec["alpha"]),
                value=float(rec["value"]), std_error=float(rec["std_error"]),
                ess=float(rec["ess"]), K=int(rec["K"]), seed=int(rec["seed"]),
            ))
    return out
