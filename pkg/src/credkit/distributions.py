"""Catalog of mean-parameterized claim distributions and latent-risk priors.

Every model family is parameterized so that ``params[0]`` is the mean and the
remaining entries are fixed dispersion/shape values. The mean is what the link
ties to the latent risk variable, so it has to be the free coordinate.

Model families (params after the mean):

    ============  ==========================  =====================================
    family        extra params                convention
    ============  ==========================  =====================================
    Poisson       ()                          mean m >= 0
    NegBinom      (r,)                        var = m + m^2/r
    Logarithmic   ()                          support {1,2,...}; requires m > 1;
                                              p solved from m
    GammaCount    (k,)                        counts of a Gamma(k, beta) renewal
                                              process in [0,1]; beta solved from m
    GenPoisson    (lam,)                      0 <= lam < 1; var = m/(1-lam)^2
    Gamma         (k,)                        shape k, scale m/k
    LogNormal     (s,)                        sigma of log; mu_log = log m - s^2/2
    LogLogistic   (c,)                        shape c > 1; scale a = m sin(b)/b,
                                              b = pi/c
    InvGaussian   (lam,)                      var = m^3/lam
    ParetoLomax   (a,)                        shape a > 1; scale s = m(a-1)
    Burr          (c, k)                      Burr XII, ck > 1;
                                              scale s = m G(k)/(G(1+1/c) G(k-1/c))
    Weibull       (k,)                        shape k; scale m / G(1+1/k)
    ============  ==========================  =====================================

Priors are restricted to {Gamma, LogNormal, InvGaussian, Weibull} and use the
natural parameterizations (shape/rate, mu/sigma of log, mean/lam, shape/scale);
`PriorSpec.from_mean_variance` builds them from a (mean, variance) pair.

Log-densities and log-survivals below exp(-700) clamp to -700 so long products
of likelihood terms stay finite. All operations are pure given an explicit
`numpy.random.Generator`; nothing here holds hidden state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import DivergenceError, NumericError, ParameterError, SupportError

LOG_FLOOR = -700.0

_MASS_TOL = 1e-12  # discrete truncation: stop once cumulative mass > 1 - this
_REL_TOL = 1e-8   # numeric expectation target


class Family(enum.Enum):
    """Tags for the model-distribution catalog."""

    POISSON = "Poisson"
    NEG_BINOM = "NegBinom"
    LOGARITHMIC = "Logarithmic"
    GAMMA_COUNT = "GammaCount"
    GEN_POISSON = "GenPoisson"
    GAMMA = "Gamma"
    LOG_NORMAL = "LogNormal"
    LOG_LOGISTIC = "LogLogistic"
    INV_GAUSSIAN = "InvGaussian"
    PARETO_LOMAX = "ParetoLomax"
    BURR = "Burr"
    WEIBULL = "Weibull"

    @property
    def discrete(self) -> bool:
        return self in _DISCRETE

    @property
    def n_params(self) -> int:
        """Total parameter count including the leading mean."""
        return 1 + _OPS[self].n_shape


_DISCRETE = frozenset(
    {
        Family.POISSON,
        Family.NEG_BINOM,
        Family.LOGARITHMIC,
        Family.GAMMA_COUNT,
        Family.GEN_POISSON,
    }
)


class Link(enum.Enum):
    """How the policyholder mean and the latent variable combine."""

    MULTIPLICATIVE_FRAILTY = "MultiplicativeFrailty"  # mean = mu * theta
    LOG_ADDITIVE = "LogAdditive"                      # mean = mu * exp(theta)


def link_mean(link: Link, mu, theta):
    """Conditional mean induced by the link. Arrays broadcast."""
    if link is Link.MULTIPLICATIVE_FRAILTY:
        return np.asarray(mu, float) * np.asarray(theta, float)
    return np.asarray(mu, float) * np.exp(np.asarray(theta, float))


@dataclass(frozen=True)
class WeightFn:
    """The inner expectation target pi(y) of a premium principle.

    kind is one of "identity", "square", "exp" (exp(alpha*y)),
    "yexp" (y*exp(alpha*y)) or "custom" with an arbitrary callable.
    """

    kind: str
    alpha: float = 0.0
    func: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "square", "exp", "yexp", "custom"):
            raise ParameterError(f"unknown weight kind {self.kind!r}")
        if self.kind in ("exp", "yexp") and not self.alpha > 0:
            raise ParameterError("exp-type weights require alpha > 0")
        if self.kind == "custom" and self.func is None:
            raise ParameterError("custom weight requires a callable")


IDENTITY_WEIGHT = WeightFn("identity")
SQUARE_WEIGHT = WeightFn("square")


def exp_weight(alpha: float) -> WeightFn:
    return WeightFn("exp", alpha)


def yexp_weight(alpha: float) -> WeightFn:
    return WeightFn("yexp", alpha)


def _floor(logp):
    if isinstance(logp, np.ndarray) and logp.dtype == float:
        # ops hand over fresh arrays, so clamping in place is safe
        return np.maximum(logp, LOG_FLOOR, out=logp)
    return np.maximum(logp, LOG_FLOOR)


def _softplus(z):
    # log(1 + e^z), stable for large |z|
    return np.logaddexp(0.0, z)


def _check(cond: bool, exc_type, msg: str):
    if not cond:
        raise exc_type(msg)


# ---------------------------------------------------------------------------
# Per-family operations. mean may be an ndarray (it varies with the latent
# draw); the trailing shape parameters are always scalars.
# ---------------------------------------------------------------------------


class _Ops:
    n_shape = 0
    shape_names: tuple[str, ...] = ()

    def check_shape(self, shape):
        pass

    def check_mean(self, mean):
        _check(bool(np.all(mean > 0)), ParameterError,
               f"{type(self).__name__}: mean must be > 0")

    def mean_ok(self, mean):
        """Elementwise validity of a candidate mean array."""
        return np.isfinite(mean) & (mean > 0)

    def check_support(self, shape, y):
        raise NotImplementedError

    def logpdf(self, mean, shape, y):
        raise NotImplementedError

    def logsf(self, mean, shape, y):
        raise NotImplementedError

    def sample(self, mean, shape, rng, size):
        raise NotImplementedError

    def second_moment(self, mean, shape):
        raise NotImplementedError

    # MGF pieces; return None when only the numeric fallback exists.
    def mgf_tmax(self, mean, shape):
        """(sup of valid t, whether the sup itself is allowed)."""
        return np.inf, False

    def log_mgf(self, mean, shape, t):
        return None

    def esscher_mean(self, mean, shape, t):
        """E[Y e^{tY}] / E[e^{tY}], the mean under the tilted law."""
        return None


class _DiscreteOps(_Ops):
    support_min = 0

    def check_support(self, shape, y):
        ok = np.all(y >= self.support_min) and np.all(y == np.floor(y))
        _check(bool(ok), SupportError,
               f"{type(self).__name__}: observations must be integers >= {self.support_min}")

    def pmf_grid(self, mean, shape, ymax: int) -> np.ndarray:
        """pmf at 0..ymax; mean must be scalar here. Used by numeric sums."""
        ys = np.arange(self.support_min, ymax + 1, dtype=float)
        return np.exp(self.logpdf(np.asarray(mean, float), shape, ys))


class _PoissonOps(_DiscreteOps):
    def check_mean(self, mean):
        _check(bool(np.all(mean >= 0)), ParameterError, "Poisson: mean must be >= 0")

    def logpdf(self, mean, shape, y):
        return (special.xlogy(y, mean) - mean - special.gammaln(y + 1.0))

    def logsf(self, mean, shape, y):
        # P(Y > y) = P(y+1, m), regularized lower incomplete gamma
        with np.errstate(divide="ignore"):
            return (np.log(special.gammainc(y + 1.0, mean)))

    def sample(self, mean, shape, rng, size):
        return np.asarray(rng.poisson(mean, size=size), dtype=float)

    def second_moment(self, mean, shape):
        return mean * (1.0 + mean)

    def log_mgf(self, mean, shape, t):
        return mean * np.expm1(t)

    def esscher_mean(self, mean, shape, t):
        return mean * math.exp(t)


class _NegBinomOps(_DiscreteOps):
    n_shape = 1
    shape_names = ("r",)

    def check_shape(self, shape):
        _check(shape[0] > 0, ParameterError, "NegBinom: r must be > 0")

    def check_mean(self, mean):
        _check(bool(np.all(mean >= 0)), ParameterError, "NegBinom: mean must be >= 0")

    def logpdf(self, mean, shape, y):
        r = shape[0]
        denom = r + mean
        out = (special.gammaln(y + r) - special.gammaln(r) - special.gammaln(y + 1.0)
               + r * (np.log(r) - np.log(denom)) + special.xlogy(y, mean) - special.xlogy(y, denom))
        return (out)

    def logsf(self, mean, shape, y):
        r = shape[0]
        with np.errstate(divide="ignore"):
            return (np.log(special.betainc(y + 1.0, r, mean / (r + mean))))

    def sample(self, mean, shape, rng, size):
        r = shape[0]
        return np.asarray(rng.negative_binomial(r, r / (r + mean), size=size), dtype=float)

    def second_moment(self, mean, shape):
        r = shape[0]
        return mean + mean * mean * (1.0 + 1.0 / r)

    def mgf_tmax(self, mean, shape):
        with np.errstate(divide="ignore"):
            return np.log1p(shape[0] / np.asarray(mean, float)), False

    def log_mgf(self, mean, shape, t):
        r = shape[0]
        q = mean / (r + mean) * math.exp(t)
        return r * (np.log(r) - np.log(r + mean) - np.log1p(-q))

    def esscher_mean(self, mean, shape, t):
        r = shape[0]
        q = mean / (r + mean) * math.exp(t)
        return r * q / (1.0 - q)


def _logarithmic_p(mean):
    """Solve -p / ((1-p) log(1-p)) = mean for p, elementwise bisection."""
    m = np.asarray(mean, float)
    lo = np.full(m.shape, 1e-15)
    hi = np.full(m.shape, 1.0 - 1e-15)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        val = -mid / ((1.0 - mid) * np.log1p(-mid))
        takes_hi = val < m
        lo = np.where(takes_hi, mid, lo)
        hi = np.where(takes_hi, hi, mid)
    return 0.5 * (lo + hi)


class _LogarithmicOps(_DiscreteOps):
    support_min = 1

    def check_mean(self, mean):
        _check(bool(np.all(mean > 1)), ParameterError,
               "Logarithmic: mean must be > 1 (support starts at 1)")

    def mean_ok(self, mean):
        return np.isfinite(mean) & (mean > 1)

    def logpdf(self, mean, shape, y):
        p = _logarithmic_p(mean)
        a = -np.log1p(-p)  # -log(1-p)
        return (special.xlogy(y, p) - np.log(y) - np.log(a))

    def logsf(self, mean, shape, y):
        # no closed form; sum the pmf up to y
        p_b, y_b = np.broadcast_arrays(_logarithmic_p(mean), np.asarray(y, float))
        a = -np.log1p(-p_b)
        ymax = int(np.max(y_b))
        ys = np.arange(1, ymax + 1, dtype=float)
        terms = np.exp(special.xlogy(ys, p_b[..., None]) - np.log(ys)) / a[..., None]
        cdf = np.cumsum(terms, axis=-1)
        taken = np.take_along_axis(cdf, y_b.astype(int)[..., None] - 1, axis=-1)[..., 0]
        with np.errstate(divide="ignore"):
            out = np.log1p(-np.minimum(taken, 1.0))
        return (out)

    def sample(self, mean, shape, rng, size):
        p = _logarithmic_p(mean)
        return np.asarray(rng.logseries(p, size=size), dtype=float)

    def second_moment(self, mean, shape):
        p = _logarithmic_p(mean)
        a = -1.0 / np.log1p(-p)
        return a * p / (1.0 - p) ** 2

    def mgf_tmax(self, mean, shape):
        return -np.log(_logarithmic_p(mean)), False

    def log_mgf(self, mean, shape, t):
        p = _logarithmic_p(mean)
        q = p * math.exp(t)
        return np.log(np.log1p(-q) / np.log1p(-p))

    def esscher_mean(self, mean, shape, t):
        # tilting a log-series by e^{ty} gives a log-series with p*e^t
        p = _logarithmic_p(mean)
        q = p * math.exp(t)
        return -q / ((1.0 - q) * np.log1p(-q))


def _gc_mean(beta, k):
    """Mean of the GammaCount law: sum_{y>=1} P(ky, beta); beta may be an array."""
    b = np.asarray(beta, float)
    total = np.zeros(b.shape)
    y = 1
    while True:
        term = special.gammainc(k * y, b)
        total += term
        if float(np.max(term)) < 1e-14 or y > 100000:
            break
        y += 1
    return total


def _gc_beta(mean, k):
    """Invert the GammaCount mean for the renewal rate, elementwise bisection."""
    m = np.asarray(mean, float)
    lo = np.full(m.shape, 1e-12)
    hi = np.maximum(2.0 * k * (m + 1.0), 10.0)
    for _ in range(60):  # expand until the bracket covers, then bisect
        bad = _gc_mean(hi, k) < m
        if not bad.any():
            break
        hi = np.where(bad, hi * 2.0, hi)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        takes_hi = _gc_mean(mid, k) < m
        lo = np.where(takes_hi, mid, lo)
        hi = np.where(takes_hi, hi, mid)
    return 0.5 * (lo + hi)


class _GammaCountOps(_DiscreteOps):
    n_shape = 1
    shape_names = ("k",)

    def check_shape(self, shape):
        _check(shape[0] > 0, ParameterError, "GammaCount: k must be > 0")

    def logpdf(self, mean, shape, y):
        k = shape[0]
        beta = _gc_beta(mean, k)
        upper = special.gammainc(k * (np.asarray(y, float) + 1.0), beta)
        lower = np.where(np.asarray(y) > 0, special.gammainc(k * np.asarray(y, float), beta), 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(lower - upper)
        return (np.where(np.isnan(out), -np.inf, out))

    def logsf(self, mean, shape, y):
        k = shape[0]
        beta = _gc_beta(mean, k)
        with np.errstate(divide="ignore"):
            return (np.log(special.gammainc(k * (np.asarray(y, float) + 1.0), beta)))

    def sample(self, mean, shape, rng, size):
        # count renewals of a Gamma(k, beta) process inside the unit interval
        k = shape[0]
        beta = _gc_beta(mean, k)
        out_shape = size if size is not None else np.shape(beta)
        flat = np.ascontiguousarray(np.broadcast_to(beta, out_shape), dtype=float).reshape(-1)
        elapsed = rng.gamma(k, 1.0 / flat) if flat.size else np.empty(0)
        counts = np.zeros(flat.shape, dtype=np.int64)
        active = elapsed <= 1.0
        while active.any():
            counts[active] += 1
            elapsed[active] = elapsed[active] + rng.gamma(k, 1.0 / flat[active])
            active = elapsed <= 1.0
        return counts.astype(float).reshape(out_shape)

    def second_moment(self, mean, shape):
        k = shape[0]
        beta = _gc_beta(mean, k)
        total = np.zeros(np.shape(beta))
        y = 1
        while True:
            term = (2.0 * y - 1.0) * special.gammainc(k * y, beta)
            total += term
            if float(np.max(term)) < 1e-14 or y > 100000:
                break
            y += 1
        return total

    # MGF: superexponential tail, finite for every t; numeric fallback only.


class _GenPoissonOps(_DiscreteOps):
    n_shape = 1
    shape_names = ("lam",)

    def check_shape(self, shape):
        _check(0.0 <= shape[0] < 1.0, ParameterError, "GenPoisson: lam must be in [0, 1)")

    def logpdf(self, mean, shape, y):
        lam = shape[0]
        theta = np.asarray(mean, float) * (1.0 - lam)
        lin = theta + lam * np.asarray(y, float)
        out = (np.log(theta) + special.xlogy(np.asarray(y, float) - 1.0, lin)
               - lin - special.gammaln(np.asarray(y, float) + 1.0))
        return (out)

    def logsf(self, mean, shape, y):
        m_b, y_b = np.broadcast_arrays(np.asarray(mean, float), np.asarray(y, float))
        ymax = int(np.max(y_b))
        grid = np.arange(0, ymax + 1, dtype=float)
        lp = self.logpdf(m_b[..., None], shape, grid)
        cdf = np.cumsum(np.exp(lp), axis=-1)
        taken = np.take_along_axis(cdf, y_b.astype(int)[..., None], axis=-1)[..., 0]
        with np.errstate(divide="ignore"):
            out = np.log1p(-np.minimum(taken, 1.0))
        return (out)

    def sample(self, mean, shape, rng, size):
        # branching representation: Poisson(theta) ancestors, Poisson(lam) offspring
        lam = shape[0]
        theta = np.asarray(mean, float) * (1.0 - lam)
        out_shape = size if size is not None else np.shape(theta)
        flat = np.ascontiguousarray(np.broadcast_to(theta, out_shape), dtype=float).reshape(-1)
        current = np.asarray(rng.poisson(flat), dtype=np.int64).reshape(flat.shape)
        total = current.copy()
        while (current > 0).any():
            idx = np.nonzero(current > 0)[0]
            nxt = np.asarray(rng.poisson(lam * current[idx]), dtype=np.int64).reshape(idx.shape)
            total[idx] += nxt
            current = np.zeros_like(current)
            current[idx] = nxt
        return total.astype(float).reshape(out_shape)

    def second_moment(self, mean, shape):
        lam = shape[0]
        m = np.asarray(mean, float)
        return m / (1.0 - lam) ** 2 + m * m

    def mgf_tmax(self, mean, shape):
        lam = shape[0]
        if lam == 0.0:
            return np.inf, False
        return lam - 1.0 - math.log(lam), False


class _ContinuousOps(_Ops):
    allow_zero = True  # y = 0 allowed unless the density is singular there

    def check_support(self, shape, y):
        lo_ok = np.all(y >= 0) if self._zero_ok(shape) else np.all(y > 0)
        _check(bool(lo_ok), SupportError,
               f"{type(self).__name__}: observations outside the support")

    def _zero_ok(self, shape) -> bool:
        return True


class _GammaOps(_ContinuousOps):
    n_shape = 1
    shape_names = ("k",)

    def check_shape(self, shape):
        _check(shape[0] > 0, ParameterError, "Gamma: k must be > 0")

    def _zero_ok(self, shape):
        return shape[0] >= 1.0

    def logpdf(self, mean, shape, y):
        k = shape[0]
        scale = np.asarray(mean, float) / k
        out = special.xlogy(k - 1.0, y) - np.asarray(y, float) / scale \
            - special.gammaln(k) - k * np.log(scale)
        return (out)

    def logsf(self, mean, shape, y):
        k = shape[0]
        with np.errstate(divide="ignore"):
            return (np.log(special.gammaincc(k, np.asarray(y, float) * k / np.asarray(mean, float))))

    def sample(self, mean, shape, rng, size):
        k = shape[0]
        return rng.gamma(k, np.asarray(mean, float) / k, size=size)

    def second_moment(self, mean, shape):
        return mean * mean * (1.0 + 1.0 / shape[0])

    def mgf_tmax(self, mean, shape):
        return shape[0] / np.asarray(mean, float), False

    def log_mgf(self, mean, shape, t):
        k = shape[0]
        return -k * np.log1p(-t * np.asarray(mean, float) / k)

    def esscher_mean(self, mean, shape, t):
        k = shape[0]
        m = np.asarray(mean, float)
        return m / (1.0 - t * m / k)


class _LogNormalOps(_ContinuousOps):
    n_shape = 1
    shape_names = ("s",)

    def check_shape(self, shape):
        _check(shape[0] > 0, ParameterError, "LogNormal: s must be > 0")

    def _mu(self, mean, s):
        return np.log(np.asarray(mean, float)) - 0.5 * s * s

    def logpdf(self, mean, shape, y):
        s = shape[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            ly = np.log(np.asarray(y, float))
            z = (ly - self._mu(mean, s)) / s
            out = -ly - math.log(s) - 0.5 * math.log(2.0 * math.pi) - 0.5 * z * z
        return (np.where(np.isnan(out), -np.inf, out))  # density -> 0 at y=0

    def logsf(self, mean, shape, y):
        s = shape[0]
        with np.errstate(divide="ignore"):
            z = (np.log(np.asarray(y, float)) - self._mu(mean, s)) / s
        return (special.log_ndtr(-z))

    def sample(self, mean, shape, rng, size):
        s = shape[0]
        return rng.lognormal(self._mu(mean, s), s, size=size)

    def second_moment(self, mean, shape):
        return mean * mean * math.exp(shape[0] ** 2)

    def mgf_tmax(self, mean, shape):
        return np.zeros(np.shape(mean)) if np.ndim(mean) else 0.0, False


class _LogLogisticOps(_ContinuousOps):
    n_shape = 1
    shape_names = ("c",)

    def check_shape(self, shape):
        _check(shape[0] > 1, ParameterError,
               "LogLogistic: c must be > 1 for the mean to exist")

    def _scale(self, mean, c):
        b = math.pi / c
        return np.asarray(mean, float) * math.sin(b) / b

    def logpdf(self, mean, shape, y):
        c = shape[0]
        a = self._scale(mean, c)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = c * (np.log(np.asarray(y, float)) - np.log(a))
            out = math.log(c) - np.log(np.asarray(y, float)) + z - 2.0 * _softplus(z)
        return (np.where(np.isnan(out), -np.inf, out))  # c > 1: density -> 0 at 0

    def logsf(self, mean, shape, y):
        c = shape[0]
        a = self._scale(mean, c)
        with np.errstate(divide="ignore"):
            z = c * (np.log(np.asarray(y, float)) - np.log(a))
        return (-_softplus(z))

    def sample(self, mean, shape, rng, size):
        c = shape[0]
        a = self._scale(mean, c)
        u = rng.random(size if size is not None else np.shape(mean))
        return a * (u / (1.0 - u)) ** (1.0 / c)

    def second_moment(self, mean, shape):
        c = shape[0]
        if c <= 2.0:
            raise DivergenceError("LogLogistic: second moment requires c > 2")
        a = self._scale(mean, c)
        b2 = 2.0 * math.pi / c
        return a * a * b2 / math.sin(b2)

    def mgf_tmax(self, mean, shape):
        return np.zeros(np.shape(mean)) if np.ndim(mean) else 0.0, False


class _InvGaussianOps(_ContinuousOps):
    n_shape = 1
    shape_names = ("lam",)

    def check_shape(self, shape):
        _check(shape[0] > 0, ParameterError, "InvGaussian: lam must be > 0")

    def logpdf(self, mean, shape, y):
        lam = shape[0]
        m = np.asarray(mean, float)
        yv = np.asarray(y, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 0.5 * (math.log(lam) - math.log(2.0 * math.pi) - 3.0 * np.log(yv)) \
                - lam * (yv - m) ** 2 / (2.0 * m * m * yv)
        return (np.where(np.isnan(out), -np.inf, out))  # density -> 0 at y=0

    def logsf(self, mean, shape, y):
        lam = shape[0]
        m = np.asarray(mean, float)
        yv = np.asarray(y, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = stats.invgauss.logsf(yv, m / lam, scale=lam)
        return (np.where(yv == 0.0, 0.0, out))

    def sample(self, mean, shape, rng, size):
        return rng.wald(np.asarray(mean, float), shape[0], size=size)

    def second_moment(self, mean, shape):
        m = np.asarray(mean, float)
        return m * m + m ** 3 / shape[0]

    def mgf_tmax(self, mean, shape):
        lam = shape[0]
        return lam / (2.0 * np.asarray(mean, float) ** 2), True

    def log_mgf(self, mean, shape, t):
        lam = shape[0]
        m = np.asarray(mean, float)
        return lam / m * (1.0 - np.sqrt(np.maximum(1.0 - 2.0 * m * m * t / lam, 0.0)))

    def esscher_mean(self, mean, shape, t):
        lam = shape[0]
        m = np.asarray(mean, float)
        return m / np.sqrt(1.0 - 2.0 * m * m * t / lam)


class _ParetoLomaxOps(_ContinuousOps):
    n_shape = 1
    shape_names = ("a",)

    def check_shape(self, shape):
        _check(shape[0] > 1, ParameterError,
               "ParetoLomax: a must be > 1 for the mean to exist")

    def logpdf(self, mean, shape, y):
        a = shape[0]
        s = np.asarray(mean, float) * (a - 1.0)
        return (math.log(a) - np.log(s) - (a + 1.0) * np.log1p(np.asarray(y, float) / s))

    def logsf(self, mean, shape, y):
        a = shape[0]
        s = np.asarray(mean, float) * (a - 1.0)
        return (-a * np.log1p(np.asarray(y, float) / s))

    def sample(self, mean, shape, rng, size):
        a = shape[0]
        s = np.asarray(mean, float) * (a - 1.0)
        u = rng.random(size if size is not None else np.shape(mean))
        return s * (u ** (-1.0 / a) - 1.0)

    def second_moment(self, mean, shape):
        a = shape[0]
        if a <= 2.0:
            raise DivergenceError("ParetoLomax: second moment requires a > 2")
        return 2.0 * mean * mean * (a - 1.0) / (a - 2.0)

    def mgf_tmax(self, mean, shape):
        return np.zeros(np.shape(mean)) if np.ndim(mean) else 0.0, False


class _BurrOps(_ContinuousOps):
    n_shape = 2
    shape_names = ("c", "k")

    def check_shape(self, shape):
        c, k = shape
        _check(c > 0 and k > 0, ParameterError, "Burr: c and k must be > 0")
        _check(c * k > 1, ParameterError, "Burr: ck must be > 1 for the mean to exist")

    def _zero_ok(self, shape):
        return shape[0] >= 1.0

    def _scale(self, mean, c, k):
        g = special.gamma
        return np.asarray(mean, float) * g(k) / (g(1.0 + 1.0 / c) * g(k - 1.0 / c))

    def logpdf(self, mean, shape, y):
        c, k = shape
        s = self._scale(mean, c, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = c * (np.log(np.asarray(y, float)) - np.log(s))
            out = math.log(c * k) - np.log(np.asarray(y, float)) + z - (k + 1.0) * _softplus(z)
        # at y=0 the density is k/s when c=1 and 0 when c>1
        zero_limit = (math.log(k) - np.log(s)) if c == 1.0 else -np.inf
        return (np.where(np.isnan(out), zero_limit, out))

    def logsf(self, mean, shape, y):
        c, k = shape
        s = self._scale(mean, c, k)
        with np.errstate(divide="ignore"):
            z = c * (np.log(np.asarray(y, float)) - np.log(s))
        return (-k * _softplus(z))

    def sample(self, mean, shape, rng, size):
        c, k = shape
        s = self._scale(mean, c, k)
        u = rng.random(size if size is not None else np.shape(mean))
        return s * (u ** (-1.0 / k) - 1.0) ** (1.0 / c)

    def second_moment(self, mean, shape):
        c, k = shape
        if c * k <= 2.0:
            raise DivergenceError("Burr: second moment requires ck > 2")
        s = self._scale(mean, c, k)
        g = special.gamma
        return s * s * g(1.0 + 2.0 / c) * g(k - 2.0 / c) / g(k)

    def mgf_tmax(self, mean, shape):
        return np.zeros(np.shape(mean)) if np.ndim(mean) else 0.0, False


class _WeibullOps(_ContinuousOps):
    n_shape = 1
    shape_names = ("k",)

    def check_shape(self, shape):
        _check(shape[0] > 0, ParameterError, "Weibull: k must be > 0")

    def _zero_ok(self, shape):
        return shape[0] >= 1.0

    def _scale(self, mean, k):
        return np.asarray(mean, float) / special.gamma(1.0 + 1.0 / k)

    def logpdf(self, mean, shape, y):
        k = shape[0]
        lam = self._scale(mean, k)
        z = (np.asarray(y, float) / lam) ** k
        return (math.log(k) - np.log(lam) + special.xlogy(k - 1.0, np.asarray(y, float) / lam) - z)

    def logsf(self, mean, shape, y):
        k = shape[0]
        lam = self._scale(mean, k)
        return (-((np.asarray(y, float) / lam) ** k))

    def sample(self, mean, shape, rng, size):
        k = shape[0]
        lam = self._scale(mean, k)
        return lam * rng.weibull(k, size=size if size is not None else np.shape(mean))

    def second_moment(self, mean, shape):
        k = shape[0]
        lam = self._scale(mean, k)
        return lam * lam * special.gamma(1.0 + 2.0 / k)

    def mgf_tmax(self, mean, shape):
        k = shape[0]
        if k > 1.0:
            return np.inf, False
        if k == 1.0:
            return 1.0 / self._scale(mean, k), False
        return np.zeros(np.shape(mean)) if np.ndim(mean) else 0.0, False


_OPS: dict[Family, _Ops] = {
    Family.POISSON: _PoissonOps(),
    Family.NEG_BINOM: _NegBinomOps(),
    Family.LOGARITHMIC: _LogarithmicOps(),
    Family.GAMMA_COUNT: _GammaCountOps(),
    Family.GEN_POISSON: _GenPoissonOps(),
    Family.GAMMA: _GammaOps(),
    Family.LOG_NORMAL: _LogNormalOps(),
    Family.LOG_LOGISTIC: _LogLogisticOps(),
    Family.INV_GAUSSIAN: _InvGaussianOps(),
    Family.PARETO_LOMAX: _ParetoLomaxOps(),
    Family.BURR: _BurrOps(),
    Family.WEIBULL: _WeibullOps(),
}


def _split_params(family: Family, params: Sequence[float]):
    ops = _OPS[family]
    if len(params) != 1 + ops.n_shape:
        raise ParameterError(
            f"{family.value} takes {1 + ops.n_shape} parameters (mean"
            + ("".join(", " + n for n in ops.shape_names)) + f"), got {len(params)}")
    mean = params[0]
    shape = tuple(float(p) for p in params[1:])
    return ops, mean, shape


def validate_params(family: Family, params: Sequence[float]) -> None:
    """Raise ParameterError unless params are valid for the family."""
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    ops.check_mean(np.asarray(mean, float))


def check_support(family: Family, params: Sequence[float], y) -> None:
    """Raise SupportError unless y lies in the family's support."""
    ops, _, shape = _split_params(family, params)
    ops.check_shape(shape)
    ops.check_support(shape, np.asarray(y, float))


def mean_domain_mask(family: Family, mean) -> np.ndarray:
    """Elementwise: is this a valid mean for the family?

    Latent draws can push a link-induced mean outside the family's domain
    (Logarithmic needs mean > 1); callers mask those draws instead of
    failing the whole batch.
    """
    return _OPS[family].mean_ok(np.asarray(mean, float))


def _scalarize(out, *inputs):
    if all(np.ndim(x) == 0 for x in inputs):
        return float(out)
    return out


def log_density(family: Family, params: Sequence[float], y):
    """Log pmf/pdf at y. The mean entry of params may be an array.

    Raises SupportError for out-of-support y and ParameterError for bad
    params. Results are floored at -700.
    """
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    mean_a = np.asarray(mean, float)
    ops.check_mean(mean_a)
    y_a = np.asarray(y, float)
    ops.check_support(shape, y_a)
    return _scalarize(_floor(ops.logpdf(mean_a, shape, y_a)), mean, y)


def log_survival(family: Family, params: Sequence[float], y):
    """log P(Y > y), floored at -700; monotone non-increasing in y."""
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    mean_a = np.asarray(mean, float)
    ops.check_mean(mean_a)
    y_a = np.asarray(y, float)
    ops.check_support(shape, y_a)
    return _scalarize(_floor(ops.logsf(mean_a, shape, y_a)), mean, y)


def sample(family: Family, params: Sequence[float], rng: np.random.Generator, size=None):
    """Draw from the family. mean may be an array (size then follows it)."""
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    mean_a = np.asarray(mean, float)
    ops.check_mean(mean_a)
    out = ops.sample(mean_a, shape, rng, size)
    if size is None and np.ndim(mean) == 0 and np.ndim(out) == 0:
        return float(out)
    return out


def mean_value(family: Family, params: Sequence[float]):
    """E[Y]; by construction the leading parameter."""
    _split_params(family, params)  # arity check
    return params[0]


def second_moment(family: Family, params: Sequence[float]):
    """E[Y^2]; closed form where it exists, DivergenceError where it does not."""
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    return _scalarize(ops.second_moment(np.asarray(mean, float), shape), mean)


def mgf_threshold(family: Family, params: Sequence[float]):
    """(tmax, inclusive): the largest t for which E[e^{tY}] exists."""
    ops, mean, shape = _split_params(family, params)
    return ops.mgf_tmax(np.asarray(mean, float), shape)


def _check_mgf_domain(family: Family, ops, mean, shape, t: float, strict_boundary=False):
    tmax, inclusive = ops.mgf_tmax(mean, shape)
    if strict_boundary:
        inclusive = False
    bad = t >= tmax if inclusive is False else t > tmax
    if bool(np.any(bad)):
        raise DivergenceError(
            f"{family.value}: MGF diverges at alpha={t} (limit {float(np.min(tmax)):.6g})")


def log_mgf(family: Family, params: Sequence[float], t: float):
    """log E[e^{tY}], closed form or numeric; DivergenceError outside the domain."""
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    mean_a = np.asarray(mean, float)
    ops.check_mean(mean_a)
    _check_mgf_domain(family, ops, mean_a, shape, t)
    out = ops.log_mgf(mean_a, shape, t)
    if out is None:
        out = _numeric_log_mgf(family, ops, mean_a, shape, t)
    return _scalarize(out, mean)


def esscher_tilted_mean(family: Family, params: Sequence[float], t: float):
    """E[Y e^{tY}] / E[e^{tY}]."""
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    mean_a = np.asarray(mean, float)
    ops.check_mean(mean_a)
    _check_mgf_domain(family, ops, mean_a, shape, t, strict_boundary=True)
    out = ops.esscher_mean(mean_a, shape, t)
    if out is None:
        num = _numeric_expect(family, ops, mean_a, shape, lambda y: y * np.exp(t * y))
        den = np.exp(_numeric_log_mgf(family, ops, mean_a, shape, t))
        out = num / den
    return _scalarize(out, mean)


def _numeric_log_mgf(family, ops, mean, shape, t):
    return np.log(_numeric_expect(family, ops, mean, shape, lambda y: np.exp(t * y)))


def _numeric_expect(family, ops, mean, shape, fn):
    """Brute-force expectation: truncated summation or adaptive quadrature."""
    mean_a = np.asarray(mean, float)
    flat = np.atleast_1d(mean_a).reshape(-1)
    worker = _discrete_sum if family.discrete else _quad_expect
    out = np.array([worker(ops, m, shape, fn) for m in flat])
    return out.reshape(mean_a.shape) if mean_a.shape else out[0]


_SUM_BLOCK = 128


def _discrete_sum(ops, mean, shape, fn):
    total = 0.0
    mass = 0.0
    prev_block = np.inf
    growth = 0
    start = ops.support_min
    while True:
        ys = np.arange(start, start + _SUM_BLOCK, dtype=float)
        p = np.exp(ops.logpdf(np.asarray(mean, float), shape, ys))
        w = np.zeros_like(p)
        nz = p > 0.0
        if np.any(nz):
            with np.errstate(over="ignore"):
                w[nz] = np.asarray(fn(ys[nz]), float) * p[nz]
        total += float(np.sum(w))
        mass += float(np.sum(p))
        block_max = float(np.max(np.abs(w)))
        if mass > 1.0 - _MASS_TOL:
            if block_max <= _REL_TOL * max(abs(total), 1e-300):
                break
            growth = growth + 1 if block_max > prev_block else 0
            if growth > 3:
                raise DivergenceError("truncated summation diverges: weighted terms grow")
        prev_block = block_max
        start += _SUM_BLOCK
        if start > 1000000:
            raise NumericError("truncated summation did not converge")
    return total


def _quad_expect(ops, mean, shape, fn):
    mean_arr = np.asarray(mean, float)

    def integrand(y):
        lp = float(ops.logpdf(mean_arr, shape, float(y)))
        if lp < -745.0:
            # density underflows double precision; skip fn so growing
            # weights (e.g. exp(t*y)) cannot overflow against a zero factor
            return 0.0
        return float(fn(np.asarray(y))) * math.exp(lp)

    a, err_a = integrate.quad(integrand, 0.0, mean, epsrel=_REL_TOL, limit=200)
    b, err_b = integrate.quad(integrand, mean, np.inf, epsrel=_REL_TOL, limit=200)
    out = a + b
    if not math.isfinite(out):
        raise DivergenceError("quadrature expectation diverged")
    return out


def conditional_expectation(family: Family, params: Sequence[float], weight: WeightFn):
    """E[pi(Y) | params] for the weight functions used by premium principles.

    Closed forms where available, otherwise truncated summation (discrete)
    or adaptive quadrature (continuous) to relative tolerance 1e-8.
    """
    ops, mean, shape = _split_params(family, params)
    ops.check_shape(shape)
    mean_a = np.asarray(mean, float)
    ops.check_mean(mean_a)
    if weight.kind == "identity":
        return _scalarize(mean_a + 0.0, mean)
    if weight.kind == "square":
        return _scalarize(ops.second_moment(mean_a, shape), mean)
    if weight.kind == "exp":
        return _scalarize(np.exp(log_mgf(family, params, weight.alpha)), mean)
    if weight.kind == "yexp":
        t = weight.alpha
        num_log = log_mgf(family, params, t)
        tilted = esscher_tilted_mean(family, params, t)
        return _scalarize(np.asarray(tilted) * np.exp(np.asarray(num_log)), mean)
    # custom weight: numeric only
    return _scalarize(_numeric_expect(family, ops, mean_a, shape, weight.func), mean)


# ---------------------------------------------------------------------------
# Priors over the latent variable.
# ---------------------------------------------------------------------------

_PRIOR_FAMILIES = (Family.GAMMA, Family.LOG_NORMAL, Family.INV_GAUSSIAN, Family.WEIBULL)


@dataclass(frozen=True)
class PriorSpec:
    """A prior for the latent risk variable, in natural parameterization.

    Gamma(shape, rate), LogNormal(mu_log, sigma_log), InvGaussian(mean, lam),
    Weibull(shape, scale). When mean_constraint is set the parameters must
    reproduce it to 1e-12.
    """

    family: Family
    params: tuple[float, ...]
    mean_constraint: float | None = None

    def __post_init__(self):
        if self.family not in _PRIOR_FAMILIES:
            raise ParameterError(f"prior family must be one of "
                                 f"{[f.value for f in _PRIOR_FAMILIES]}, got {self.family.value}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if len(self.params) != 2:
            raise ParameterError("priors take exactly 2 parameters")
        if not all(math.isfinite(p) for p in self.params):
            raise ParameterError("prior parameters must be finite")
        if self.family is Family.LOG_NORMAL:
            if self.params[1] <= 0:
                raise ParameterError("LogNormal prior: sigma_log must be > 0")
        elif not all(p > 0 for p in self.params):
            raise ParameterError("prior parameters must be positive")
        if self.mean_constraint is not None:
            m = self.mean()
            if abs(m - self.mean_constraint) > 1e-12 * max(1.0, abs(self.mean_constraint)):
                raise ParameterError(
                    f"prior mean {m!r} violates mean_constraint {self.mean_constraint!r}")

    @staticmethod
    def from_mean_variance(family: Family, mean: float, variance: float,
                           constrain: bool = True) -> "PriorSpec":
        """Natural parameters from a (mean, variance) pair."""
        if mean <= 0 or variance <= 0:
            raise ParameterError("prior mean and variance must be positive")
        if family is Family.GAMMA:
            params = (mean * mean / variance, mean / variance)
        elif family is Family.LOG_NORMAL:
            s2 = math.log1p(variance / (mean * mean))
            params = (math.log(mean) - 0.5 * s2, math.sqrt(s2))
        elif family is Family.INV_GAUSSIAN:
            params = (mean, mean ** 3 / variance)
        elif family is Family.WEIBULL:
            cv2 = variance / (mean * mean)

            def f(log_k):
                k = math.exp(log_k)
                g1 = special.gammaln(1.0 + 1.0 / k)
                g2 = special.gammaln(1.0 + 2.0 / k)
                return math.expm1(g2 - 2.0 * g1) - cv2

            log_k = optimize.brentq(f, math.log(0.05), math.log(500.0), xtol=1e-14)
            k = math.exp(log_k)
            params = (k, mean / special.gamma(1.0 + 1.0 / k))
        else:
            raise ParameterError(f"unsupported prior family {family.value}")
        return PriorSpec(family, params, mean_constraint=mean if constrain else None)

    def mean(self) -> float:
        a, b = self.params
        if self.family is Family.GAMMA:
            return a / b
        if self.family is Family.LOG_NORMAL:
            return math.exp(a + 0.5 * b * b)
        if self.family is Family.INV_GAUSSIAN:
            return a
        return b * special.gamma(1.0 + 1.0 / a)  # Weibull

    def variance(self) -> float:
        a, b = self.params
        if self.family is Family.GAMMA:
            return a / (b * b)
        if self.family is Family.LOG_NORMAL:
            return math.expm1(b * b) * math.exp(2.0 * a + b * b)
        if self.family is Family.INV_GAUSSIAN:
            return a ** 3 / b
        g1 = special.gamma(1.0 + 1.0 / a)
        g2 = special.gamma(1.0 + 2.0 / a)
        return b * b * (g2 - g1 * g1)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        a, b = self.params
        if self.family is Family.GAMMA:
            return rng.gamma(a, 1.0 / b, size=size)
        if self.family is Family.LOG_NORMAL:
            return rng.lognormal(a, b, size=size)
        if self.family is Family.INV_GAUSSIAN:
            return rng.wald(a, b, size=size)
        return b * rng.weibull(a, size=size)

    def ppf(self, q) -> np.ndarray:
        a, b = self.params
        if self.family is Family.GAMMA:
            return stats.gamma.ppf(q, a, scale=1.0 / b)
        if self.family is Family.LOG_NORMAL:
            return np.exp(a + b * special.ndtri(q))
        if self.family is Family.INV_GAUSSIAN:
            return stats.invgauss.ppf(q, a / b, scale=b)
        return b * (-np.log1p(-np.asarray(q, float))) ** (1.0 / a)

    def spec_id(self) -> str:
        """Stable identifier used to tie prior draws to their prior."""
        return f"{self.family.value}({self.params[0]!r},{self.params[1]!r})"

    def to_dict(self) -> dict:
        return {"family": self.family.value, "params": list(self.params),
                "mean_constraint": self.mean_constraint}

    @staticmethod
    def from_dict(d: dict) -> "PriorSpec":
        return PriorSpec(Family(d["family"]), tuple(d["params"]),
                         mean_constraint=d.get("mean_constraint"))


# ---------------------------------------------------------------------------
# The full Bayesian model: per-dimension families + link + prior.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Per-dimension model families with their fixed parameters, the link,
    and the prior. Dimensions are conditionally independent given the latent
    variable (the joint log-likelihood is the sum over dimensions)."""

    families: tuple[Family, ...]
    shape_params: tuple[tuple[float, ...], ...]
    link: Link
    prior: PriorSpec

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "shape_params",
                           tuple(tuple(float(x) for x in sp) for sp in self.shape_params))
        if len(self.families) < 1:
            raise ParameterError("ModelSpec needs at least one dimension")
        if len(self.shape_params) != len(self.families):
            raise ParameterError("shape_params must have one entry per dimension")
        for fam, sp in zip(self.families, self.shape_params):
            ops = _OPS[fam]
            if len(sp) != ops.n_shape:
                raise ParameterError(
                    f"{fam.value} takes {ops.n_shape} fixed parameters, got {len(sp)}")
            ops.check_shape(sp)

    @property
    def dims(self) -> int:
        return len(self.families)

    def params_for(self, d: int, mean) -> tuple:
        """Full parameter vector (mean first) for dimension d (0-based)."""
        return (mean, *self.shape_params[d])

    def check_theta(self, theta) -> None:
        if self.link is Link.MULTIPLICATIVE_FRAILTY and bool(np.any(np.asarray(theta) <= 0)):
            raise ParameterError("frailty link requires theta > 0")

    def to_dict(self) -> dict:
        return {
            "families": [f.value for f in self.families],
            "shape_params": [list(sp) for sp in self.shape_params],
            "link": self.link.value,
            "prior": self.prior.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            families=tuple(Family(f) for f in d["families"]),
            shape_params=tuple(tuple(sp) for sp in d["shape_params"]),
            link=Link(d["link"]),
            prior=PriorSpec.from_dict(d["prior"]),
        )
