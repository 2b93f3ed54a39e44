"""Cube-method balanced sampling of a representative sub-portfolio.

Selects 0/1 inclusion indicators whose balancing-variable totals match the
full portfolio. The flight phase walks the inclusion-probability vector
along null directions of the constraint matrix, so X^T pi is invariant
while entries hit 0 or 1; the landing phase relaxes constraints one at a
time (trailing columns first) and finishes any stragglers by Bernoulli
rounding. Every step is a martingale, so E[indicator_i] = pi_i exactly.

The first balancing column is pi itself, which pins the realized sample
size to sum(pi) up to the number of balancing variables.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericError, ParameterError
from .portfolio import Censor, Portfolio

_TOL = 1e-9


class BalanceWarning(UserWarning):
    """Balancing-variable matrix is rank deficient; dependent columns dropped."""


@dataclass(frozen=True)
class BalanceProblem:
    X: np.ndarray
    pi: np.ndarray
    seed: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        if X.ndim != 2 or pi.ndim != 1 or X.shape[0] != pi.shape[0]:
            raise ParameterError("X must be N x p with pi of length N")
        if not np.all(np.isfinite(X)):
            raise ParameterError("balancing variables must be finite")
        if not np.all((pi > 0) & (pi <= 1)):
            raise ParameterError("inclusion probabilities must lie in (0, 1]")
        if X.shape[1] >= X.shape[0]:
            raise ParameterError("need fewer balancing variables than units")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class SampleResult:
    indicator: np.ndarray
    achieved_size: int
    balance_gaps: np.ndarray


def _null_step_vector(B: np.ndarray) -> np.ndarray | None:
    """A unit vector u with B^T u = 0, or None when B's rows are independent."""
    m = B.shape[0]
    u_mat, s, _ = np.linalg.svd(B, full_matrices=True)
    rank = int(np.sum(s > (s[0] if s.size else 0.0) * max(B.shape) * np.finfo(float).eps))
    if rank >= m:
        return None
    return u_mat[:, m - 1]


def _flight(X: np.ndarray, pi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Walk pi to at most p fractional entries, preserving X^T pi."""
    out = pi.astype(float).copy()
    n, p = X.shape
    stream = [i for i in range(n) if _TOL < out[i] < 1.0 - _TOL]
    buffer = stream[: p + 1]
    cursor = len(buffer)
    max_steps = 10 * n + 100
    for _ in range(max_steps):
        if not buffer:
            return out
        u = _null_step_vector(X[buffer])
        if u is None:
            return out
        lam_up = np.inf
        lam_dn = np.inf
        for j, i in enumerate(buffer):
            uj = u[j]
            if uj > _TOL:
                lam_up = min(lam_up, (1.0 - out[i]) / uj)
                lam_dn = min(lam_dn, out[i] / uj)
            elif uj < -_TOL:
                lam_up = min(lam_up, out[i] / -uj)
                lam_dn = min(lam_dn, (1.0 - out[i]) / -uj)
        if not (np.isfinite(lam_up) and np.isfinite(lam_dn)):
            return out
        if rng.uniform() < lam_dn / (lam_up + lam_dn):
            step = lam_up
        else:
            step = -lam_dn
        for j, i in enumerate(buffer):
            out[i] += step * u[j]
        kept = []
        for i in buffer:
            if out[i] <= _TOL:
                out[i] = 0.0
            elif out[i] >= 1.0 - _TOL:
                out[i] = 1.0
            else:
                kept.append(i)
        buffer = kept
        while len(buffer) < p + 1 and cursor < len(stream):
            i = stream[cursor]
            cursor += 1
            if _TOL < out[i] < 1.0 - _TOL:
                buffer.append(i)
    raise NumericError("flight phase failed to converge")


def _independent_columns(X: np.ndarray) -> np.ndarray:
    """Indices of a maximal independent column subset, original order."""
    rank = np.linalg.matrix_rank(X)
    if rank == X.shape[1]:
        return np.arange(X.shape[1])
    _, _, pivots = linalg.qr(X, mode="economic", pivoting=True)
    return np.sort(pivots[:rank])


def _work_matrix(problem: BalanceProblem) -> np.ndarray:
    keep = _independent_columns(problem.X)
    if keep.shape[0] < problem.X.shape[1]:
        warnings.warn(
            f"balancing matrix has rank {keep.shape[0]} < {problem.X.shape[1]}; "
            "dropping dependent columns",
            BalanceWarning, stacklevel=3,
        )
        return problem.X[:, keep]
    return problem.X


def flight_phase(problem: BalanceProblem) -> np.ndarray:
    """Balanced rounding: at most p entries stay fractional; X^T pi preserved."""
    rng = np.random.default_rng(np.random.SeedSequence(problem.seed).spawn(2)[0])
    return _flight(_work_matrix(problem), problem.pi, rng)


def ht_balance_gaps(X: np.ndarray, pi: np.ndarray, indicator: np.ndarray) -> np.ndarray:
    """Relative deviation of Horvitz-Thompson totals from population totals."""
    selected = indicator.astype(bool)
    estimate = (X[selected] / pi[selected, None]).sum(axis=0)
    population = X.sum(axis=0)
    scale = np.where(np.abs(population) > 1e-12, np.abs(population), 1.0)
    return np.abs(estimate - population) / scale


def landing_phase(problem: BalanceProblem, pi_star: np.ndarray) -> SampleResult:
    """Round the flight output to {0,1} by suppressing trailing constraints."""
    rng = np.random.default_rng(np.random.SeedSequence(problem.seed).spawn(2)[1])
    X = _work_matrix(problem)
    current = np.asarray(pi_star, dtype=float).copy()
    cols = X.shape[1]
    while cols > 1 and np.any((current > _TOL) & (current < 1.0 - _TOL)):
        cols -= 1
        current = _flight(X[:, :cols], current, rng)
    frac = (current > _TOL) & (current < 1.0 - _TOL)
    if np.any(frac):
        current[frac] = (rng.uniform(size=int(frac.sum())) < current[frac]).astype(float)
    indicator = np.rint(current).astype(np.int64)
    return SampleResult(
        indicator=indicator,
        achieved_size=int(indicator.sum()),
        balance_gaps=ht_balance_gaps(problem.X, problem.pi, indicator),
    )


def cube_sample(problem: BalanceProblem) -> SampleResult:
    """flight_phase then landing_phase under the problem's seed."""
    return landing_phase(problem, flight_phase(problem))


# ---------------------------------------------------------------------------
# Portfolio-level selection
# ---------------------------------------------------------------------------


def _avg_claim(portfolio: Portfolio, d: int) -> np.ndarray:
    out = np.zeros(len(portfolio.members))
    for i, ph in enumerate(portfolio.members):
        values = [obs.value for obs in ph.history
                  if obs.dim == d and obs.censor is not Censor.MISSING]
        out[i] = float(np.mean(values)) if values else 0.0
    return out


def balance_column(portfolio: Portfolio, name: str) -> np.ndarray:
    """Resolve a balancing variable by name.

    mu_d: fitted manual mean; avg_claim_d: mean observed value (censored
    values enter at face value); n_d: observed-period count; attr_*: the
    raw attribute column.
    """
    dims = portfolio.model.dims
    if name.startswith("mu_"):
        d = _parse_dim(name, 3, dims)
        return np.array([ph.mu_per_dim[d - 1] for ph in portfolio.members])
    if name.startswith("avg_claim_"):
        return _avg_claim(portfolio, _parse_dim(name, 10, dims))
    if name.startswith("n_"):
        d = _parse_dim(name, 2, dims)
        return np.array([float(ph.n_per_dim[d - 1]) for ph in portfolio.members])
    if name.startswith("attr_"):
        names = portfolio.attribute_names
        if name not in names:
            raise ConfigError(f"unknown balance variable {name!r}")
        k = names.index(name)
        return np.array([ph.attributes[k][1] for ph in portfolio.members])
    raise ConfigError(f"unknown balance variable {name!r}")


def _parse_dim(name: str, prefix_len: int, dims: int) -> int:
    try:
        d = int(name[prefix_len:])
    except ValueError:
        raise ConfigError(f"unknown balance variable {name!r}") from None
    if not (1 <= d <= dims):
        raise ConfigError(f"balance variable {name!r} exceeds D={dims}")
    return d


def default_balance_vars(portfolio: Portfolio) -> list[str]:
    dims = portfolio.model.dims
    return [f"mu_{d}" for d in range(1, dims + 1)] + \
        [f"avg_claim_{d}" for d in range(1, dims + 1)]


@dataclass(frozen=True)
class SelectionReport:
    ids: tuple[str, ...]
    indicator: np.ndarray
    target_size: int
    achieved_size: int
    var_names: tuple[str, ...]
    ht_gaps: dict[str, float] = field(default_factory=dict)


def select_subportfolio_report(portfolio: Portfolio, fraction: float,
                               balance_vars: Sequence[str] | None = None,
                               seed: int = 0) -> SelectionReport:
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(portfolio.members)
    if n == 0:
        raise ConfigError("cannot sample from an empty portfolio")
    names = list(balance_vars) if balance_vars is not None \
        else default_balance_vars(portfolio)
    raw = [balance_column(portfolio, name) for name in names]
    pi = np.full(n, float(fraction))

    # z-score for conditioning; constant columns are trivially balanced by
    # the pi column, so they drop out of the geometry
    columns = [pi]
    kept_raw = []
    kept_names = []
    for name, col in zip(names, raw):
        sd = float(np.std(col))
        kept_raw.append(col)
        kept_names.append(name)
        if sd > 0:
            columns.append((col - float(np.mean(col))) / sd)
    X = np.column_stack(columns)

    if fraction == 1.0:
        indicator = np.ones(n, dtype=np.int64)
    else:
        indicator = cube_sample(BalanceProblem(X=X, pi=pi, seed=seed)).indicator
    selected = indicator.astype(bool)
    gaps = ht_balance_gaps(np.column_stack(kept_raw), pi, indicator) if kept_raw \
        else np.zeros(0)
    return SelectionReport(
        ids=tuple(ph.id for ph, s in zip(portfolio.members, selected) if s),
        indicator=indicator,
        target_size=int(round(fraction * n)),
        achieved_size=int(indicator.sum()),
        var_names=tuple(kept_names),
        ht_gaps={name: float(g) for name, g in zip(kept_names, gaps)},
    )


def select_subportfolio(portfolio: Portfolio, fraction: float,
                        balance_vars: Sequence[str] | None = None,
                        seed: int = 0) -> list[str]:
    """Ids of a balanced sub-portfolio of roughly fraction * N members."""
    return list(select_subportfolio_report(portfolio, fraction,
                                           balance_vars, seed).ids)
