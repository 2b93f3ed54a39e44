"""Synthetic portfolios with a latent risk effect, plus the study driver.

Each policyholder gets a systematic effect alpha (the manual rate is
exp(alpha)) and a latent draw from the prior; observations then come from
the model family at the induced mean. The study driver prices whole
generated portfolios exactly, fits the surrogate on a balanced slice, and
reports train/test/full R2 per (model, prior, principle) cell.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .balance import select_subportfolio
from .distributions import Family, Link, ModelSpec, PriorSpec, link_mean, sample
from .errors import ConfigError, CredkitError, DivergenceError
from .ioutil import atomic_write_text, fmt17
from .oracle import (
    PremiumPrinciple,
    draw_prior,
    manual_premium_batch,
    premium_batch,
)
from .portfolio import Censor, Observation, Policyholder, Portfolio
from .surrogate import (
    SurrogateConfig,
    fit_surrogate,
    metrics_from_values,
    predict_batch,
)

FREQUENCY_FAMILIES = frozenset({
    Family.POISSON, Family.NEG_BINOM, Family.GAMMA_COUNT,
    Family.GEN_POISSON, Family.LOGARITHMIC,
})

# one fixed dispersion set per family; chosen so second moments exist for
# the principle columns the study reports
DISPERSION_DEFAULTS = {
    Family.POISSON: (),
    Family.NEG_BINOM: (0.86,),
    Family.GAMMA_COUNT: (1.5,),
    Family.GEN_POISSON: (0.3,),
    Family.LOGARITHMIC: (),
    Family.GAMMA: (2.0,),
    Family.LOG_NORMAL: (0.8,),
    Family.INV_GAUSSIAN: (2.0,),
    Family.PARETO_LOMAX: (3.0,),
    Family.BURR: (2.0, 2.0),
    Family.LOG_LOGISTIC: (3.0,),
    Family.WEIBULL: (1.5,),
}


@dataclass(frozen=True)
class AlphaSpec:
    """Distribution of the systematic effect; manual rate is exp(alpha)."""

    kind: str = "normal"
    loc: float = math.log(0.3)
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in ("normal", "fixed"):
            raise ConfigError("alpha kind must be 'normal' or 'fixed'")
        if self.kind == "normal" and self.scale <= 0:
            raise ConfigError("alpha scale must be positive")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(size, self.loc)
        return rng.normal(self.loc, self.scale, size=size)


ALPHA_FREQUENCY = AlphaSpec("normal", math.log(0.3), 0.5)
ALPHA_SEVERITY = AlphaSpec("normal", math.log(5.0), 0.5)

DEFAULT_PRIOR_VARIANCE = 0.58


def default_prior(family: Family = Family.GAMMA) -> PriorSpec:
    """Mean-one prior with the default variance, for scenarios without one."""
    return PriorSpec.from_mean_variance(family, 1.0, DEFAULT_PRIOR_VARIANCE)


@dataclass(frozen=True)
class Scenario:
    family: Family
    prior: PriorSpec
    principles: tuple = ()
    N: int = 1000
    n: int = 5
    alpha: AlphaSpec | None = None
    dispersion: tuple | None = None
    link: Link | None = None
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.n < 1:
            raise ConfigError("scenario needs N >= 1 and n >= 1")
        object.__setattr__(self, "principles", tuple(self.principles))
        if self.family is Family.LOGARITHMIC and self.link is Link.MULTIPLICATIVE_FRAILTY:
            raise ConfigError(
                "Logarithmic scenarios need the log-additive link; a frailty "
                "near zero cannot keep every mean above 1")

    @property
    def resolved_link(self) -> Link:
        if self.link is not None:
            return self.link
        if self.family is Family.LOGARITHMIC:
            return Link.LOG_ADDITIVE
        return Link.MULTIPLICATIVE_FRAILTY

    @property
    def resolved_alpha(self) -> AlphaSpec:
        if self.alpha is not None:
            return self.alpha
        return ALPHA_FREQUENCY if self.family in FREQUENCY_FAMILIES else ALPHA_SEVERITY

    @property
    def resolved_dispersion(self) -> tuple:
        if self.dispersion is not None:
            return tuple(self.dispersion)
        return DISPERSION_DEFAULTS[self.family]

    def model_spec(self) -> ModelSpec:
        return ModelSpec(families=(self.family,),
                         shape_params=(self.resolved_dispersion,),
                         link=self.resolved_link, prior=self.prior)


@dataclass(frozen=True)
class Truths:
    """Hidden generating values, kept outside the portfolio for diagnostics."""

    alpha: np.ndarray
    theta: np.ndarray


def generate_portfolio(sc: Scenario) -> tuple:
    """(Portfolio, Truths): n exact observations per policyholder."""
    model = sc.model_spec()
    rng = np.random.default_rng(np.random.SeedSequence(sc.seed))
    alpha = sc.resolved_alpha.sample(rng, sc.N)
    if sc.family is Family.LOGARITHMIC:
        # mean = exp(alpha) * exp(theta) with theta > 0; alpha >= 0.05
        # keeps every induced mean above the family's support floor of 1
        alpha = np.maximum(alpha, 0.05)
    theta = np.asarray(sc.prior.sample(rng, size=sc.N), dtype=float)
    mu = np.exp(alpha)
    mean = link_mean(sc.resolved_link, mu, theta)
    floor = 1.0 if sc.family is Family.LOGARITHMIC else 0.0
    if not np.all(np.isfinite(mean)) or np.any(mean <= floor):
        raise ConfigError(
            f"prior/link pairing induces invalid means for {sc.family.value}")
    disp = sc.resolved_dispersion
    values = np.empty((sc.n, sc.N))
    for j in range(sc.n):
        values[j] = sample(sc.family, (mean, *disp), rng)
    members = []
    width = len(str(sc.N))
    for i in range(sc.N):
        history = tuple(
            Observation(period=j + 1, dim=1, value=float(values[j, i]),
                        exposure=1.0, censor=Censor.EXACT)
            for j in range(sc.n)
        )
        members.append(Policyholder(id=f"p{i + 1:0{width}d}",
                                    mu_per_dim=(float(mu[i]),),
                                    history=history))
    return Portfolio(model=model, members=tuple(members)), Truths(alpha, theta)


@dataclass(frozen=True)
class StudyRow:
    model: str
    prior: str
    principle: str
    r2_train: object  # float, or 'divergent'/'error'
    r2_test: object
    r2_full: object
    M: int
    N: int
    K: int
    seed: int
    wall_seconds: float


STUDY_HEADER = "model,prior,principle,R2_train,R2_test,R2_full,M,N,K,seed,wall_seconds"


def _cell(sc: Scenario, principle: PremiumPrinciple, K: int, fraction: float,
          surrogate_config: SurrogateConfig, cell_seed: int) -> StudyRow:
    start = time.perf_counter()
    label = dict(model=sc.family.value, prior=sc.prior.family.value,
                 principle=principle.kind.value, N=sc.N, K=K, seed=cell_seed)
    try:
        pf, _ = generate_portfolio(sc)
        draws = draw_prior(sc.prior, K, cell_seed)
        prem = np.array([e.value for e in premium_batch(pf, draws, principle)])
        man = np.array([e.value for e in manual_premium_batch(pf, draws, principle)])
        ids = select_subportfolio(pf, fraction, seed=cell_seed)
        chosen = set(ids)
        pick = np.array([ph.id in chosen for ph in pf.members], dtype=bool)
        sub = Portfolio(model=pf.model,
                        members=tuple(ph for ph in pf.members if ph.id in chosen))
        cfg = replace(surrogate_config, seed=cell_seed)
        fitted = fit_surrogate(sub, prem[pick], man[pick], config=cfg)
        _, full_fit = predict_batch(fitted, pf, man)
        r2_full = metrics_from_values(prem, full_fit).r2
        wall = time.perf_counter() - start
        return StudyRow(r2_train=fitted.fit_metrics["train"].r2,
                        r2_test=fitted.fit_metrics["test"].r2,
                        r2_full=r2_full, M=len(sub.members),
                        wall_seconds=wall, **label)
    except DivergenceError:
        token = "divergent"
    except CredkitError:
        token = "error"
    wall = time.perf_counter() - start
    return StudyRow(r2_train=token, r2_test=token, r2_full=token,
                    M=0, wall_seconds=wall, **label)


def run_study(scenarios, K: int = 5000, fraction: float = 0.05,
              surrogate_config: SurrogateConfig | None = None,
              seed: int = 0, threads: int = 1) -> list:
    """One StudyRow per (scenario, principle), in scenario order.

    A cell that raises gets 'divergent' (nonexistent expectation) or 'error'
    tokens in its R2 columns and the run continues. Cell seeds derive from
    `seed` and the cell position; the surrogate seed is overridden per cell,
    so the grid is reproducible apart from wall_seconds.
    """
    if K < 1 or not 0 < fraction <= 1 or threads < 1:
        raise ConfigError("need K >= 1, fraction in (0, 1], threads >= 1")
    surrogate_config = surrogate_config or SurrogateConfig()
    cells = [(sc, pr) for sc in scenarios for pr in sc.principles]
    seeds = [seed * 100003 + idx for idx in range(len(cells))]
    if threads == 1:
        return [
            _cell(sc, pr, K, fraction, surrogate_config, s)
            for (sc, pr), s in zip(cells, seeds)
        ]
    rows = [None] * len(cells)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {
            pool.submit(_cell, sc, pr, K, fraction, surrogate_config, s): i
            for i, ((sc, pr), s) in enumerate(zip(cells, seeds))
        }
        for fut, i in futures.items():
            rows[i] = fut.result()
    return rows


def _r2_text(value) -> str:
    return value if isinstance(value, str) else fmt17(value)


def save_study_csv(path, rows) -> None:
    lines = [STUDY_HEADER]
    for r in rows:
        lines.append(",".join([
            r.model, r.prior, r.principle,
            _r2_text(r.r2_train), _r2_text(r.r2_test), _r2_text(r.r2_full),
            str(r.M), str(r.N), str(r.K), str(r.seed),
            format(r.wall_seconds, ".3f"),
        ]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_study_csv(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != STUDY_HEADER.split(","):
            raise ConfigError(f"unexpected study header: {reader.fieldnames}")
        rows = []
        for rec in reader:
            def num(token):
                return token if token in ("divergent", "error") else float(token)
            rows.append(StudyRow(
                model=rec["model"], prior=rec["prior"], principle=rec["principle"],
                r2_train=num(rec["R2_train"]), r2_test=num(rec["R2_test"]),
                r2_full=num(rec["R2_full"]), M=int(rec["M"]), N=int(rec["N"]),
                K=int(rec["K"]), seed=int(rec["seed"]),
                wall_seconds=float(rec["wall_seconds"]),
            ))
    return rows


def format_study_table(rows) -> str:
    """Aligned text table with R2 given as percentages."""
    def pct(value):
        return value if isinstance(value, str) else f"{100.0 * value:.2f}%"

    header = ("model", "prior", "principle", "R2_train", "R2_test", "R2_full",
              "M", "N", "K")
    body = [
        (r.model, r.prior, r.principle, pct(r.r2_train), pct(r.r2_test),
         pct(r.r2_full), str(r.M), str(r.N), str(r.K))
        for r in rows
    ]
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
              for i, h in enumerate(header)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(tuple("-" * w for w in widths))]
    out.extend(line(row) for row in body)
    return "\n".join(out) + "\n"
