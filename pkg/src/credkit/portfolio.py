"""Portfolio data model and CSV ingestion.

A portfolio is a list of policyholders; each policyholder carries fitted
per-dimension manual means (covariate effects already absorbed), opaque
numeric attributes, and a claim history of per-period, per-dimension
observations with exposure and a censor code.

CSV schema (UTF-8, header required)::

    id,period,dim,value,exposure,censor,mu_1..mu_D,attr_*

censor is one of ``exact``, ``rcens``, ``missing`` (lowercase); ``value``
must be empty exactly when censor is ``missing``. Floats are written with
17 significant digits so save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import SchemaError, SequencingError, SupportError
from .distributions import ModelSpec, check_support
from .ioutil import fmt17 as _fmt


class Censor(enum.Enum):
    EXACT = "exact"
    RIGHT_CENSORED = "rcens"
    MISSING = "missing"


# compact integer codes used by the array views consumed by the oracle
CENSOR_CODE = {Censor.EXACT: 0, Censor.RIGHT_CENSORED: 1, Censor.MISSING: 2}


@dataclass(frozen=True)
class Observation:
    """One claim record: dimension `dim` of period `period`."""

    period: int
    dim: int
    value: float | None
    exposure: float
    censor: Censor

    def __post_init__(self):
        if not isinstance(self.period, int) or self.period < 1:
            raise SchemaError(f"period must be an integer >= 1, got {self.period!r}")
        if not isinstance(self.dim, int) or self.dim < 1:
            raise SchemaError(f"dim must be an integer >= 1, got {self.dim!r}")
        if not (0.0 < self.exposure <= 1.0):
            raise SchemaError(f"exposure must lie in (0, 1], got {self.exposure!r}")
        if self.censor is Censor.MISSING:
            if self.value is not None:
                raise SchemaError("missing observation must not carry a value")
        elif self.value is None:
            raise SchemaError(f"{self.censor.value} observation requires a value")


@dataclass(frozen=True)
class Policyholder:
    """One contract: manual means per dimension plus its claim history.

    `n_per_dim[d-1]` counts the non-missing observations for dimension d;
    it is derived from `history` at construction.
    """

    id: str
    mu_per_dim: tuple[float, ...]
    history: tuple[Observation, ...] = ()
    attributes: tuple[tuple[str, float], ...] = ()
    n_per_dim: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if not self.id:
            raise SchemaError("policyholder id must be non-empty")
        if not self.mu_per_dim or any(m <= 0 or not np.isfinite(m) for m in self.mu_per_dim):
            raise SchemaError(f"mu_per_dim must be strictly positive, got {self.mu_per_dim!r}")
        dims = len(self.mu_per_dim)
        counts = [0] * dims
        for obs in self.history:
            if obs.dim > dims:
                raise SchemaError(f"observation dim {obs.dim} exceeds D={dims}")
            if obs.censor is not Censor.MISSING:
                counts[obs.dim - 1] += 1
        object.__setattr__(self, "n_per_dim", tuple(counts))

    @property
    def dims(self) -> int:
        return len(self.mu_per_dim)

    @property
    def max_period(self) -> int:
        return max((obs.period for obs in self.history), default=0)

    def attribute_vector(self) -> np.ndarray:
        return np.array([v for _, v in self.attributes], dtype=float)

    def arrays(self) -> dict[str, np.ndarray]:
        """History as flat arrays (missing rows carry value nan)."""
        n = len(self.history)
        out = {
            "period": np.empty(n, dtype=np.int64),
            "dim": np.empty(n, dtype=np.int64),
            "value": np.empty(n, dtype=float),
            "exposure": np.empty(n, dtype=float),
            "censor": np.empty(n, dtype=np.int64),
        }
        for i, obs in enumerate(self.history):
            out["period"][i] = obs.period
            out["dim"][i] = obs.dim
            out["value"][i] = np.nan if obs.value is None else obs.value
            out["exposure"][i] = obs.exposure
            out["censor"][i] = CENSOR_CODE[obs.censor]
        return out


@dataclass(frozen=True)
class Portfolio:
    model: ModelSpec
    members: tuple[Policyholder, ...]

    def __post_init__(self):
        seen = set()
        for ph in self.members:
            if ph.id in seen:
                raise SchemaError(f"duplicate policyholder id {ph.id!r}")
            seen.add(ph.id)
            if ph.dims != self.model.dims:
                raise SchemaError(
                    f"policyholder {ph.id!r} has D={ph.dims}, model has D={self.model.dims}"
                )

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[Policyholder]:
        return iter(self.members)

    def member(self, id: str) -> Policyholder:
        for ph in self.members:
            if ph.id == id:
                return ph
        raise KeyError(id)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.members[0].attributes) if self.members else ()


def append_observation(ph: Policyholder, obs: Observation) -> Policyholder:
    """Return a new Policyholder with obs appended.

    The new observation must continue the current period or open the next
    one; gaps and duplicate (period, dim) slots are sequencing errors.
    """
    if obs.dim > ph.dims:
        raise SchemaError(f"observation dim {obs.dim} exceeds D={ph.dims}")
    current = ph.max_period
    if obs.period == current:
        if any(o.period == obs.period and o.dim == obs.dim for o in ph.history):
            raise SequencingError(
                f"period {obs.period} dim {obs.dim} already recorded for {ph.id!r}"
            )
    elif obs.period != current + 1:
        raise SequencingError(
            f"expected period {current} or {current + 1}, got {obs.period}"
        )
    return Policyholder(
        id=ph.id,
        mu_per_dim=ph.mu_per_dim,
        history=ph.history + (obs,),
        attributes=ph.attributes,
    )


_BASE_COLUMNS = ("id", "period", "dim", "value", "exposure", "censor")
_CENSOR_TOKENS = {c.value: c for c in Censor}


def _parse_float(token: str, line: int, column: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise SchemaError(f"line {line}, column {column!r}: not a number: {token!r}") from None
    if not np.isfinite(value):
        raise SchemaError(f"line {line}, column {column!r}: non-finite value {token!r}")
    return value


def _parse_int(token: str, line: int, column: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise SchemaError(f"line {line}, column {column!r}: not an integer: {token!r}") from None


def load_portfolio(path: str | os.PathLike, model: ModelSpec) -> Portfolio:
    """Read a portfolio CSV and validate it against the model.

    Schema violations raise SchemaError naming the line and column;
    values outside the family's support raise SupportError.
    """
    dims = model.dims
    mu_cols = [f"mu_{d}" for d in range(1, dims + 1)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header required") from None
        expected = list(_BASE_COLUMNS) + mu_cols
        if header[: len(expected)] != expected:
            raise SchemaError(
                f"line 1: header must start with {','.join(expected)}, got {','.join(header)}"
            )
        attr_cols = header[len(expected):]
        for name in attr_cols:
            if not name.startswith("attr_"):
                raise SchemaError(f"line 1: trailing column {name!r} must be attr_*")

        order: list[str] = []
        mus: dict[str, tuple[float, ...]] = {}
        attrs: dict[str, tuple[tuple[str, float], ...]] = {}
        rows: dict[str, list[Observation]] = {}
        seen_slots: set[tuple[str, int, int]] = set()
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"line {line}: expected {len(header)} fields, got {len(row)}"
                )
            rec = dict(zip(header, row))
            pid = rec["id"]
            if not pid:
                raise SchemaError(f"line {line}, column 'id': empty id")
            period = _parse_int(rec["period"], line, "period")
            dim = _parse_int(rec["dim"], line, "dim")
            if not (1 <= dim <= dims):
                raise SchemaError(f"line {line}, column 'dim': {dim} outside [1, {dims}]")
            token = rec["censor"]
            if token not in _CENSOR_TOKENS:
                raise SchemaError(
                    f"line {line}, column 'censor': {token!r} not in exact/rcens/missing"
                )
            censor = _CENSOR_TOKENS[token]
            raw_value = rec["value"]
            if censor is Censor.MISSING:
                if raw_value != "":
                    raise SchemaError(
                        f"line {line}, column 'value': must be empty when censor=missing"
                    )
                value = None
            else:
                if raw_value == "":
                    raise SchemaError(
                        f"line {line}, column 'value': required when censor={token}"
                    )
                value = _parse_float(raw_value, line, "value")
            exposure = _parse_float(rec["exposure"], line, "exposure")
            mu = tuple(_parse_float(rec[c], line, c) for c in mu_cols)
            if any(m <= 0 for m in mu):
                raise SchemaError(f"line {line}: mu columns must be strictly positive")
            attr = tuple((c, _parse_float(rec[c], line, c)) for c in attr_cols)

            try:
                obs = Observation(period=period, dim=dim, value=value,
                                  exposure=exposure, censor=censor)
            except SchemaError as exc:
                raise SchemaError(f"line {line}: {exc}") from None
            if value is not None:
                try:
                    check_support(model.families[dim - 1],
                                  model.params_for(dim - 1, mu[dim - 1]), value)
                except SupportError as exc:
                    raise SupportError(f"line {line}, column 'value': {exc}") from None

            slot = (pid, period, dim)
            if slot in seen_slots:
                raise SchemaError(
                    f"line {line}: duplicate observation for id={pid!r} period={period} dim={dim}"
                )
            seen_slots.add(slot)
            if pid not in mus:
                order.append(pid)
                mus[pid] = mu
                attrs[pid] = attr
                rows[pid] = []
            else:
                if mus[pid] != mu:
                    raise SchemaError(
                        f"line {line}: mu columns disagree with earlier rows for id={pid!r}"
                    )
                if attrs[pid] != attr:
                    raise SchemaError(
                        f"line {line}: attr columns disagree with earlier rows for id={pid!r}"
                    )
            rows[pid].append(obs)

    members = tuple(
        Policyholder(id=pid, mu_per_dim=mus[pid], history=tuple(rows[pid]),
                     attributes=attrs[pid])
        for pid in order
    )
    return Portfolio(model=model, members=members)


def save_portfolio(portfolio: Portfolio, path: str | os.PathLike) -> None:
    """Write the CSV form; load_portfolio(save(p)) == p field-for-field."""
    dims = portfolio.model.dims
    attr_names = portfolio.attribute_names
    for ph in portfolio.members:
        if tuple(name for name, _ in ph.attributes) != attr_names:
            raise SchemaError(f"policyholder {ph.id!r} has inconsistent attribute columns")
        if not ph.history:
            # the format is row-per-observation; encode a data-free member
            # with explicit censor=missing rows instead
            raise SchemaError(f"policyholder {ph.id!r} has no rows to write")
    header = list(_BASE_COLUMNS) + [f"mu_{d}" for d in range(1, dims + 1)] + list(attr_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ph in portfolio.members:
            mu_fields = [_fmt(m) for m in ph.mu_per_dim]
            attr_fields = [_fmt(v) for _, v in ph.attributes]
            for obs in ph.history:
                writer.writerow(
                    [ph.id, str(obs.period), str(obs.dim),
                     "" if obs.value is None else _fmt(obs.value),
                     _fmt(obs.exposure), obs.censor.value]
                    + mu_fields + attr_fields
                )
