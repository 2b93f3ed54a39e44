"""Credibility index: log-likelihood of a claim history at a pinned latent value.

The index evaluates a policyholder's conditional log-likelihood with the
latent variable frozen at theta_tilde: exact observations contribute their
log density, right-censored ones their log survival, missing ones zero.
Per-dimension sub-indexes sum to the total under conditional independence.

For exponential dispersion families there is also a refined form,

    theta_tilde * sum_j S(Y_j)/phi_j - sum_j C(theta_tilde)/phi_j,

which drops the theta-free remainder and is one-to-one in the sufficient
statistic sum_j S(Y_j)/phi_j whenever theta_tilde != 0.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, SchemaError, SupportError
from .distributions import Link, ModelSpec, link_mean, log_density, log_survival
from .ioutil import atomic_write_text, fmt17
from .portfolio import Censor, Policyholder, Portfolio


@dataclass(frozen=True)
class IndexValue:
    total: float
    per_dim: tuple[float, ...]
    theta_tilde: float
    n_per_dim: tuple[int, ...]


# EDF building blocks are named by tag so specs stay serializable
S_FUNCTIONS: dict[str, Callable[[float], float]] = {
    "identity": lambda y: y,
    "log": lambda y: float(np.log(y)),
}

C_FUNCTIONS: dict[str, Callable[[float], float]] = {
    "exp": lambda t: float(np.exp(t)),          # Poisson cumulant
    "half_square": lambda t: 0.5 * t * t,       # Gaussian cumulant
    "neg_log_neg": lambda t: float(-np.log(-t)),  # exponential/gamma, t < 0
}


@dataclass(frozen=True)
class EdfSpec:
    """Exponential dispersion family pieces: S, cumulant C, dispersions phi."""

    s_tag: str
    c_tag: str
    phi: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.s_tag not in S_FUNCTIONS:
            raise ParameterError(f"unknown S tag {self.s_tag!r}; have {sorted(S_FUNCTIONS)}")
        if self.c_tag not in C_FUNCTIONS:
            raise ParameterError(f"unknown C tag {self.c_tag!r}; have {sorted(C_FUNCTIONS)}")
        if not self.phi or any(p <= 0 or not np.isfinite(p) for p in self.phi):
            raise ParameterError(f"dispersions must be positive, got {self.phi!r}")

    def phi_for(self, n: int) -> tuple[float, ...]:
        # a single phi applies to every period
        if len(self.phi) == 1:
            return self.phi * n
        if len(self.phi) != n:
            raise ParameterError(f"need {n} dispersions, got {len(self.phi)}")
        return self.phi

    def to_dict(self) -> dict:
        return {"s_tag": self.s_tag, "c_tag": self.c_tag, "phi": list(self.phi)}

    @classmethod
    def from_dict(cls, data: dict) -> "EdfSpec":
        return cls(s_tag=data["s_tag"], c_tag=data["c_tag"], phi=tuple(data["phi"]))


POISSON_EDF = EdfSpec(s_tag="identity", c_tag="exp", phi=(1.0,))


def _contribution(model: ModelSpec, obs, mu: float, theta_tilde: float) -> float:
    mean = obs.exposure * link_mean(model.link, mu, theta_tilde)
    params = model.params_for(obs.dim - 1, mean)
    family = model.families[obs.dim - 1]
    if obs.censor is Censor.EXACT:
        return log_density(family, params, obs.value)
    return log_survival(family, params, obs.value)


def credibility_index(ph: Policyholder, model: ModelSpec, theta_tilde: float) -> IndexValue:
    """Index of a policyholder's history at latent value theta_tilde.

    theta_tilde lives on the link scale: the induced mean for dimension d
    is exposure * mu_d * theta_tilde under the frailty link and
    exposure * mu_d * exp(theta_tilde) under the log-additive link.
    Contributions accumulate in history order, so appending one
    observation changes the total by exactly that observation's term.
    """
    if ph.dims != model.dims:
        raise ParameterError(f"policyholder has D={ph.dims}, model has D={model.dims}")
    model.check_theta(theta_tilde)
    per_dim = [0.0] * model.dims
    total = 0.0
    for obs in ph.history:
        if obs.censor is Censor.MISSING:
            continue
        term = _contribution(model, obs, ph.mu_per_dim[obs.dim - 1], theta_tilde)
        per_dim[obs.dim - 1] += term
        total += term
    return IndexValue(total=total, per_dim=tuple(per_dim),
                      theta_tilde=float(theta_tilde), n_per_dim=ph.n_per_dim)


class IndexBatch:
    """Vectorized index totals for many policyholders at once.

    Builds flat per-dimension arrays from a portfolio so that totals for a
    whole vector of theta_tilde values (one per member) cost a handful of
    array ops. Used by the surrogate tuning loop.
    """

    def __init__(self, portfolio: Portfolio):
        model = portfolio.model
        self.model = model
        self.size = len(portfolio.members)
        per_dim: list[dict[str, list]] = [
            {"member": [], "value": [], "exposure": [], "mu": [], "censored": []}
            for _ in range(model.dims)
        ]
        for i, ph in enumerate(portfolio.members):
            for obs in ph.history:
                if obs.censor is Censor.MISSING:
                    continue
                box = per_dim[obs.dim - 1]
                box["member"].append(i)
                box["value"].append(obs.value)
                box["exposure"].append(obs.exposure)
                box["mu"].append(ph.mu_per_dim[obs.dim - 1])
                box["censored"].append(obs.censor is Censor.RIGHT_CENSORED)
        self._dims = []
        for d, box in enumerate(per_dim):
            self._dims.append({
                "member": np.asarray(box["member"], dtype=np.int64),
                "value": np.asarray(box["value"], dtype=float),
                "exposure": np.asarray(box["exposure"], dtype=float),
                "mu": np.asarray(box["mu"], dtype=float),
                "censored": np.asarray(box["censored"], dtype=bool),
            })

    def dim_totals(self, theta: np.ndarray) -> np.ndarray:
        """Per-dimension sub-index totals, shape (members, dims)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ParameterError(f"theta must have shape ({self.size},)")
        self.model.check_theta(theta)
        out = np.zeros((self.size, self.model.dims))
        for d, box in enumerate(self._dims):
            if box["member"].size == 0:
                continue
            mean = box["exposure"] * link_mean(self.model.link, box["mu"],
                                               theta[box["member"]])
            family = self.model.families[d]
            shape = self.model.shape_params[d]
            cens = box["censored"]
            contrib = np.empty(mean.shape)
            if np.any(~cens):
                contrib[~cens] = log_density(family, (mean[~cens], *shape),
                                             box["value"][~cens])
            if np.any(cens):
                contrib[cens] = log_survival(family, (mean[cens], *shape),
                                             box["value"][cens])
            np.add.at(out[:, d], box["member"], contrib)
        return out

    def totals(self, theta: np.ndarray) -> np.ndarray:
        """Index totals, one per member, at per-member theta values."""
        return self.dim_totals(theta).sum(axis=1)


def _exact_values(ph: Policyholder) -> list[float]:
    values = []
    for obs in ph.history:
        if obs.censor is Censor.MISSING:
            continue
        if obs.censor is Censor.RIGHT_CENSORED:
            raise SupportError(
                "refined index is defined for fully observed histories; "
                "found a right-censored observation"
            )
        values.append(obs.value)
    return values


def sufficient_statistic(ph: Policyholder, edf: EdfSpec) -> float:
    """sum_j S(Y_j)/phi_j over the exact observations, in history order."""
    values = _exact_values(ph)
    phi = edf.phi_for(len(values))
    s = S_FUNCTIONS[edf.s_tag]
    return float(sum(s(y) / p for y, p in zip(values, phi)))


def refined_credibility_index(ph: Policyholder, edf: EdfSpec, theta_tilde: float) -> float:
    """EDF refined index: theta * sum S(Y_j)/phi_j - sum C(theta)/phi_j.

    Requires theta_tilde != 0 so the map from the sufficient statistic is
    one-to-one; censored observations are rejected.
    """
    theta_tilde = float(theta_tilde)
    if abs(theta_tilde) < 1e-6:
        raise ParameterError("refined index requires theta_tilde != 0")
    values = _exact_values(ph)
    phi = edf.phi_for(len(values))
    c_theta = C_FUNCTIONS[edf.c_tag](theta_tilde)
    stat = sufficient_statistic(ph, edf)
    return theta_tilde * stat - c_theta * float(sum(1.0 / p for p in phi))


def index_batch(portfolio: Portfolio, theta_tilde) -> list[IndexValue]:
    """credibility_index for every member; theta_tilde scalar or one per member."""
    theta = np.broadcast_to(np.asarray(theta_tilde, dtype=float),
                            (len(portfolio.members),))
    return [credibility_index(ph, portfolio.model, float(t))
            for ph, t in zip(portfolio.members, theta)]


def save_index_csv(path: str | os.PathLike, ids: Sequence[str],
                   values: Sequence[IndexValue]) -> None:
    """Export schema: id,theta_tilde,index_total,index_dim_1..D,n_dim_1..D."""
    if len(ids) != len(values):
        raise SchemaError("ids and values must align")
    dims = len(values[0].per_dim) if values else 1
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", "theta_tilde", "index_total"]
                    + [f"index_dim_{d}" for d in range(1, dims + 1)]
                    + [f"n_dim_{d}" for d in range(1, dims + 1)])
    for pid, v in zip(ids, values):
        if len(v.per_dim) != dims:
            raise SchemaError("mixed dimensionality in index export")
        writer.writerow([pid, fmt17(v.theta_tilde), fmt17(v.total)]
                        + [fmt17(x) for x in v.per_dim]
                        + [str(n) for n in v.n_per_dim])
    atomic_write_text(path, buf.getvalue())


def load_index_csv(path: str | os.PathLike) -> list[tuple[str, IndexValue]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "theta_tilde", "index_total"]:
            raise SchemaError(f"{path}: not an index export")
        dims = sum(1 for name in header if name.startswith("index_dim_"))
        out = []
        for row in reader:
            if not row:
                continue
            rec = dict(zip(header, row))
            out.append((rec["id"], IndexValue(
                total=float(rec["index_total"]),
                per_dim=tuple(float(rec[f"index_dim_{d}"]) for d in range(1, dims + 1)),
                theta_tilde=float(rec["theta_tilde"]),
                n_per_dim=tuple(int(rec[f"n_dim_{d}"]) for d in range(1, dims + 1)),
            )))
    return out
