"""Closed-form premium surrogate: spline factor g(.) plus latent regressor h(.).

The fitted object prices a policyholder as manual * exp(g(L(theta), n)),
where L is the per-dimension credibility index evaluated at theta = h(features)
and n counts observed periods per dimension. Fitting alternates between a
penalized least-squares fit of g on the log premium ratio and a bounded 1-D
search for the per-policyholder theta that g would have preferred; h then
smooths those pseudo-observations over the rating features. The loop keeps
the best state seen, so reported training error never degrades.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .balance import balance_column
from .credindex import IndexBatch, credibility_index
from .distributions import Link, ModelSpec
from .errors import NumericError, ParameterError, SchemaError
from .ioutil import atomic_write_text, fmt17
from .portfolio import Policyholder, Portfolio
from .splines import SplineBasis, additive_design, ridge_solve, tensor_design
from .trees import BaggedTrees

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

FORM_ADDITIVE = "rating_factor_additive"
FORM_UNSTRUCTURED = "unstructured"

MODEL_FILE_VERSION = 1


@dataclass(frozen=True)
class Metrics:
    """Premium-scale fit quality: R2 = 1 - MSE/MST, errors vs targets."""

    r2: float
    me: float
    mae: float
    mape: float
    mse: float

    def to_dict(self) -> dict:
        return {"r2": self.r2, "me": self.me, "mae": self.mae,
                "mape": self.mape, "mse": self.mse}

    @classmethod
    def from_dict(cls, payload: dict) -> "Metrics":
        return cls(**{k: float(payload[k]) for k in ("r2", "me", "mae", "mape", "mse")})


def metrics_from_values(targets, fitted) -> Metrics:
    targets = np.asarray(targets, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    if targets.shape != fitted.shape or targets.ndim != 1 or targets.size < 2:
        raise ParameterError("need matching 1-D target/fitted arrays, length >= 2")
    resid = targets - fitted
    mse = float(np.mean(resid * resid))
    mst = float(np.mean((targets - targets.mean()) ** 2))
    if mst == 0.0:
        raise NumericError("targets have zero variance; R2 undefined (MST = 0)")
    return Metrics(
        r2=1.0 - mse / mst,
        me=float(np.mean(resid)),
        mae=float(np.mean(np.abs(resid))),
        mape=float(np.mean(np.abs(resid) / np.abs(targets))),
        mse=mse,
    )


@dataclass(frozen=True)
class GComponent:
    """Spline log-factor over the stacked inputs (L_1..L_D, n_1..n_D).

    `active` lists which of the `n_inputs` columns actually carry a basis;
    zero-range inputs fold into the intercept. Coefficients are laid out as
    [intercept, block_1, ..., block_q] for the additive form and
    [intercept, tensor block] for the unstructured one.
    """

    form: str
    n_inputs: int
    active: tuple
    bases: tuple
    coefficients: np.ndarray
    ridge_lam: float

    def __post_init__(self):
        if self.form not in (FORM_ADDITIVE, FORM_UNSTRUCTURED):
            raise ParameterError(f"unknown surrogate form: {self.form!r}")
        if self.ridge_lam < 0:
            raise ParameterError("ridge lambda must be >= 0")
        if len(self.active) != len(self.bases):
            raise ParameterError("one basis per active input required")
        if any(not 0 <= a < self.n_inputs for a in self.active):
            raise ParameterError("active input index out of range")
        coef = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coef)
        expected = self._design_width()
        if coef.shape != (expected,):
            raise ParameterError(
                f"coefficient length {coef.shape} does not match basis size {expected}")

    def _design_width(self) -> int:
        if not self.bases:
            return 1
        if self.form == FORM_ADDITIVE:
            return 1 + sum(b.size for b in self.bases)
        width = 1
        for b in self.bases:
            width *= b.size
        return 1 + width

    def design(self, inputs: np.ndarray) -> np.ndarray:
        """Design matrix for rows of raw inputs, shape (m, n_inputs)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[1] != self.n_inputs:
            raise ParameterError("input width mismatch")
        if not self.bases:
            return np.ones((inputs.shape[0], 1))
        cols = [inputs[:, a] for a in self.active]
        if self.form == FORM_ADDITIVE:
            return additive_design(self.bases, cols)
        return tensor_design(self.bases, cols)

    def penalty_mask(self) -> np.ndarray:
        mask = np.ones(self._design_width())
        mask[0] = 0.0
        return mask

    def evaluate(self, inputs: np.ndarray) -> np.ndarray:
        """g values for rows of raw inputs; out-of-range inputs clamp."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        clipped = self.count_out_of_range(inputs)
        if clipped:
            logger.info("surrogate factor clamped %d input value(s) outside "
                        "the trained range", clipped)
        return self.design(inputs) @ self.coefficients

    def count_out_of_range(self, inputs: np.ndarray) -> int:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        total = 0
        for basis, a in zip(self.bases, self.active):
            total += int(np.count_nonzero(basis.out_of_range(inputs[:, a])))
        return total

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "n_inputs": self.n_inputs,
            "active": [int(a) for a in self.active],
            "bases": [b.to_dict() for b in self.bases],
            "coefficients": [float(c) for c in self.coefficients],
            "ridge_lam": float(self.ridge_lam),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GComponent":
        return cls(
            form=str(payload["form"]),
            n_inputs=int(payload["n_inputs"]),
            active=tuple(int(a) for a in payload["active"]),
            bases=tuple(SplineBasis.from_dict(b) for b in payload["bases"]),
            coefficients=np.asarray(payload["coefficients"], dtype=float),
            ridge_lam=float(payload["ridge_lam"]),
        )


@dataclass(frozen=True)
class HComponent:
    """Feature-driven regressor producing theta values, one per policyholder."""

    regressor: BaggedTrees
    feature_names: tuple

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.regressor.predict(np.atleast_2d(np.asarray(features, dtype=float)))

    def to_dict(self) -> dict:
        return {"regressor": self.regressor.to_dict(),
                "feature_names": list(self.feature_names)}

    @classmethod
    def from_dict(cls, payload: dict) -> "HComponent":
        return cls(regressor=BaggedTrees.from_dict(payload["regressor"]),
                   feature_names=tuple(payload["feature_names"]))


@dataclass(frozen=True)
class SurrogateConfig:
    form: str = FORM_ADDITIVE
    ridge_lam: float = 1e-4
    interior_knots: int | None = None  # default 8 additive / 3 tensor
    max_iter: int = 20
    rel_tol: float = 1e-4
    patience: int = 3
    n_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 5
    holdout_fraction: float = 0.3
    restarts: int = 3
    seed: int = 0
    feature_names: tuple | None = None

    def knots(self) -> int:
        if self.interior_knots is not None:
            return self.interior_knots
        return 8 if self.form == FORM_ADDITIVE else 3

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "ridge_lam": self.ridge_lam,
            "interior_knots": self.interior_knots,
            "max_iter": self.max_iter,
            "rel_tol": self.rel_tol,
            "patience": self.patience,
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "holdout_fraction": self.holdout_fraction,
            "restarts": self.restarts,
            "seed": self.seed,
            "feature_names": list(self.feature_names) if self.feature_names else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SurrogateConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in payload.items() if k in known}
        if kwargs.get("feature_names") is not None:
            kwargs["feature_names"] = tuple(kwargs["feature_names"])
        return cls(**kwargs)


@dataclass(frozen=True)
class SurrogateModel:
    g: GComponent
    h: HComponent | None
    theta_bounds: tuple
    model: ModelSpec
    fit_metrics: dict = field(default_factory=dict)
    iterations_used: int = 0
    converged: bool = True

    def __post_init__(self):
        lo, hi = self.theta_bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ParameterError("theta bounds must be finite with lo < hi")
        object.__setattr__(self, "theta_bounds", (float(lo), float(hi)))

    def theta_for(self, features: np.ndarray) -> np.ndarray:
        lo, hi = self.theta_bounds
        if self.h is None:
            feats = np.atleast_2d(np.asarray(features, dtype=float))
            return np.full(feats.shape[0], 0.5 * (lo + hi))
        return np.clip(self.h.predict(features), lo, hi)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FILE_VERSION,
            "g": self.g.to_dict(),
            "h": self.h.to_dict() if self.h is not None else None,
            "theta_bounds": [self.theta_bounds[0], self.theta_bounds[1]],
            "model": self.model.to_dict(),
            "fit_metrics": {k: m.to_dict() for k, m in self.fit_metrics.items()},
            "iterations_used": self.iterations_used,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SurrogateModel":
        version = int(payload.get("version", -1))
        if version != MODEL_FILE_VERSION:
            raise SchemaError(f"unsupported surrogate file version: {version}")
        return cls(
            g=GComponent.from_dict(payload["g"]),
            h=HComponent.from_dict(payload["h"]) if payload["h"] is not None else None,
            theta_bounds=(float(payload["theta_bounds"][0]),
                          float(payload["theta_bounds"][1])),
            model=ModelSpec.from_dict(payload["model"]),
            fit_metrics={k: Metrics.from_dict(m)
                         for k, m in payload["fit_metrics"].items()},
            iterations_used=int(payload["iterations_used"]),
            converged=bool(payload["converged"]),
        )


def save_model(path, model: SurrogateModel) -> None:
    atomic_write_text(path, json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_model(path) -> SurrogateModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not a surrogate model file: {exc}") from exc
    return SurrogateModel.from_dict(payload)


def theta_bounds_for(model: ModelSpec) -> tuple:
    """Search interval for the index parameter, by link family."""
    if model.link is Link.LOG_ADDITIVE:
        return (-3.0, 3.0)
    lo = float(model.prior.ppf(0.001))
    hi = float(model.prior.ppf(0.999))
    if not lo < hi:
        raise NumericError("prior quantile interval is empty")
    return (lo, hi)


def default_feature_names(portfolio: Portfolio) -> tuple:
    names = [f"mu_{d}" for d in range(1, portfolio.model.dims + 1)]
    names.extend(sorted(portfolio.attribute_names))
    return tuple(names)


def feature_matrix(portfolio: Portfolio, names) -> np.ndarray:
    cols = [balance_column(portfolio, name) for name in names]
    return np.column_stack(cols) if cols else np.zeros((len(portfolio.members), 0))


def features_for(ph: Policyholder, names) -> np.ndarray:
    attrs = dict(ph.attributes)
    out = []
    for name in names:
        if name.startswith("mu_"):
            d = int(name[3:])
            out.append(ph.mu_per_dim[d - 1])
        elif name in attrs:
            out.append(float(attrs[name]))
        else:
            raise ParameterError(f"policyholder {ph.id!r} lacks feature {name!r}")
    return np.asarray(out, dtype=float)


def _g_inputs(dim_idx: np.ndarray, n_mat: np.ndarray) -> np.ndarray:
    return np.hstack([dim_idx, n_mat])


def fit_g(targets, inputs, form: str = FORM_ADDITIVE, lam: float = 1e-4,
          interior: int | None = None) -> GComponent:
    """Penalized LS of the log premium ratio on the spline basis.

    `inputs` is (m, n_inputs) raw columns; zero-range columns are dropped
    from the basis (their contribution is a constant, absorbed by the
    intercept).
    """
    targets = np.asarray(targets, dtype=float)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if targets.ndim != 1 or inputs.shape[0] != targets.shape[0]:
        raise ParameterError("targets and inputs must align")
    if not (np.all(np.isfinite(targets)) and np.all(np.isfinite(inputs))):
        raise ParameterError("fit inputs must be finite")
    if interior is None:
        interior = 8 if form == FORM_ADDITIVE else 3
    active = []
    bases = []
    for j in range(inputs.shape[1]):
        col = inputs[:, j]
        if np.ptp(col) == 0.0:
            continue
        active.append(j)
        bases.append(SplineBasis.from_data(col, interior=interior))
    probe = GComponent(form=form, n_inputs=inputs.shape[1], active=tuple(active),
                       bases=tuple(bases),
                       coefficients=np.zeros(_width(form, bases)), ridge_lam=lam)
    design = probe.design(inputs)
    coef = ridge_solve(design, targets, lam, probe.penalty_mask())
    return replace(probe, coefficients=coef)


def _width(form: str, bases) -> int:
    if not bases:
        return 1
    if form == FORM_ADDITIVE:
        return 1 + sum(b.size for b in bases)
    w = 1
    for b in bases:
        w *= b.size
    return 1 + w


def _objective_batch(batch: IndexBatch, n_mat: np.ndarray, g: GComponent,
                     premiums: np.ndarray, manuals: np.ndarray,
                     theta: np.ndarray) -> np.ndarray:
    factors = np.exp(g.design(_g_inputs(batch.dim_totals(theta), n_mat)) @ g.coefficients)
    resid = premiums - manuals * factors
    return resid * resid


def _golden_batch(evalf, a, b, tol: float):
    """Vectorized golden-section minimization on per-row intervals [a, b]."""
    a = a.copy()
    b = b.copy()
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    with np.errstate(over="ignore"):
        f1 = evalf(x1)
        f2 = evalf(x2)
        while np.max(b - a) > tol:
            move_b = f1 < f2
            b[move_b] = x2[move_b]
            x2[move_b] = x1[move_b]
            f2[move_b] = f1[move_b]
            x1[move_b] = b[move_b] - GOLDEN * (b[move_b] - a[move_b])
            keep = ~move_b
            a[keep] = x1[keep]
            x1[keep] = x2[keep]
            f1[keep] = f2[keep]
            x2[keep] = a[keep] + GOLDEN * (b[keep] - a[keep])
            probe = np.where(move_b, x1, x2)
            fp = evalf(probe)
            f1 = np.where(move_b, fp, f1)
            f2 = np.where(move_b, f2, fp)
        out = 0.5 * (a + b)
        return out, evalf(out)


def tune_theta_batch(portfolio: Portfolio, g: GComponent, premiums, manuals,
                     bounds, tol: float = 1e-6, current=None) -> np.ndarray:
    """Golden-section argmin of the squared premium residual, per member.

    The objective often has two exact zeros (the index is unimodal in theta,
    so a reachable target premium is hit once on each side of its peak).
    When `current` theta values are supplied, a second windowed search runs
    around them and wins any tie, so the alternating fit prefers the
    minimizer closest to the incoming state instead of flip-flopping.
    """
    premiums = np.asarray(premiums, dtype=float)
    manuals = np.asarray(manuals, dtype=float)
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ParameterError("bounds must be finite with lo < hi")
    m = len(portfolio.members)
    if premiums.shape != (m,) or manuals.shape != (m,):
        raise ParameterError("premiums/manuals must have one entry per member")
    mid = 0.5 * (lo + hi)
    n_mat = np.array([ph.n_per_dim for ph in portfolio.members], dtype=float)
    flat = np.all(n_mat.sum(axis=1) == 0) or not any(
        a < portfolio.model.dims for a in g.active)
    if flat:
        # g ignores the index inputs entirely, or nobody has data: the
        # objective is constant in theta and the midpoint is the tie-break
        return np.full(m, mid)
    batch = IndexBatch(portfolio)

    def evalf(theta):
        return _objective_batch(batch, n_mat, g, premiums, manuals, theta)

    x_glob, f_glob = _golden_batch(evalf, np.full(m, lo), np.full(m, hi), tol)
    out = x_glob
    if current is not None:
        cur = np.clip(np.asarray(current, dtype=float), lo, hi)
        xs, fs = [x_glob], [f_glob]
        for w_frac in (0.125, 0.02):
            w = w_frac * (hi - lo)
            x_l, f_l = _golden_batch(evalf, np.maximum(cur - w, lo),
                                     np.minimum(cur + w, hi), tol)
            xs.append(x_l)
            fs.append(f_l)
        cand = np.stack(xs)
        fval = np.stack(fs)
        tie = 1e-10 * np.maximum(premiums * premiums, 1.0)
        dist = np.abs(cand - cur[None, :])
        dist[fval > fval.min(axis=0) + tie] = np.inf
        out = cand[np.argmin(dist, axis=0), np.arange(m)]
    # constant-objective members (no informative history) go to the midpoint
    zero_n = n_mat.sum(axis=1) == 0
    out[zero_n] = mid
    return out


def tune_theta(ph: Policyholder, premium: float, manual: float, g: GComponent,
               model: ModelSpec, bounds, tol: float = 1e-6) -> float:
    """Single-policyholder version of the bounded theta search."""
    single = Portfolio(model=model, members=(ph,))
    out = tune_theta_batch(single, g, np.array([premium]), np.array([manual]),
                           bounds, tol=tol)
    return float(out[0])


def _informative(ph: Policyholder) -> bool:
    return any(n > 0 for n in ph.n_per_dim)


def _factor_for_state(batch, n_mat, g, theta):
    return np.exp(g.design(_g_inputs(batch.dim_totals(theta), n_mat)) @ g.coefficients)


_START_SLOPES = (-1.5, -0.75, 0.0, 0.75, 1.5, 2.25, 3.0)


def _profile_starts(batch: IndexBatch, n_mat: np.ndarray, targets: np.ndarray,
                    prem: np.ndarray, man: np.ndarray, bounds: tuple[float, float],
                    link: Link, config: SurrogateConfig,
                    log_mu: np.ndarray) -> list[np.ndarray]:
    """Starting theta profiles whose one-shot g fits best recover the premiums.

    The alternation cannot escape a bad starting basin: the tuner's
    proximity tie-break and the tree stage both pull theta back toward
    wherever it started. Sweeping a coarse family of level/slope profiles
    in log mu (slope 0 covers flat starts) costs a few dozen ridge solves
    and surfaces the basins that the premium data actually supports. The
    top `restarts` candidates with distinct slopes are returned so the
    caller can race them.
    """
    lo, hi = bounds
    zc = log_mu - np.median(log_mu)
    if link is Link.LOG_ADDITIVE:
        levels = np.linspace(lo, hi, 8)

        def make(level, slope):
            return np.clip(level + slope * zc, lo, hi)
    else:
        levels = np.log(np.geomspace(lo, hi, 8))

        def make(level, slope):
            return np.clip(np.exp(level + slope * zc), lo, hi)

    scored = []
    for level in levels:
        for slope in _START_SLOPES:
            theta = make(level, slope)
            inputs = _g_inputs(batch.dim_totals(theta), n_mat)
            g = fit_g(targets, inputs, form=config.form, lam=config.ridge_lam,
                      interior=config.knots())
            fitted = man * _factor_for_state(batch, n_mat, g, theta)
            mse = float(np.mean((prem - fitted) ** 2))
            scored.append((mse, slope, theta))
    scored.sort(key=lambda item: item[0])
    picks, used = [], set()
    for _, slope, theta in scored:
        if slope in used:
            continue
        picks.append(theta)
        used.add(slope)
        if len(picks) == max(1, config.restarts):
            break
    return picks


def fit_surrogate(sub: Portfolio, premiums, manuals, model: ModelSpec | None = None,
                  config: SurrogateConfig | None = None) -> SurrogateModel:
    """Alternating fit of (g, h) on a sub-portfolio with known premiums.

    `premiums` and `manuals` map id -> value (or align with member order).
    Members with no informative history are excluded from fitting; predict
    routes them straight to the manual premium anyway.
    """
    config = config or SurrogateConfig()
    model = model or sub.model
    prem = _aligned(sub, premiums, "premiums")
    man = _aligned(sub, manuals, "manuals")
    if np.any(prem <= 0) or np.any(man <= 0):
        raise ParameterError("premiums and manuals must be strictly positive")
    keep = np.array([_informative(ph) for ph in sub.members], dtype=bool)
    members = tuple(ph for ph, k in zip(sub.members, keep) if k)
    prem, man = prem[keep], man[keep]
    if len(members) < 50:
        raise ParameterError(
            f"need at least 50 informative policyholders to fit, got {len(members)}")

    feat_names = tuple(config.feature_names or default_feature_names(sub))
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    order = rng.permutation(len(members))
    n_test = int(round(config.holdout_fraction * len(members)))
    if 0 < n_test < len(members) - 1:
        test_idx = np.sort(order[:n_test])
        train_idx = np.sort(order[n_test:])
    else:
        test_idx = np.arange(len(members))
        train_idx = np.arange(len(members))

    def subset(idx):
        pf = Portfolio(model=model, members=tuple(members[i] for i in idx))
        return pf, prem[idx], man[idx]

    train_pf, train_prem, train_man = subset(train_idx)
    test_pf, test_prem, test_man = subset(test_idx)

    bounds = theta_bounds_for(model)
    lo, hi = bounds

    batch = IndexBatch(train_pf)
    n_mat = np.array([ph.n_per_dim for ph in train_pf.members], dtype=float)
    features = feature_matrix(train_pf, feat_names)
    targets = np.log(train_prem) - np.log(train_man)

    log_mu = np.array([float(np.mean(np.log(ph.mu_per_dim)))
                       for ph in train_pf.members])
    starts = _profile_starts(batch, n_mat, targets, train_prem, train_man,
                             bounds, model.link, config, log_mu)

    use_holdout = 0 < n_test < len(members) - 1
    if use_holdout:
        test_batch = IndexBatch(test_pf)
        test_n = np.array([ph.n_per_dim for ph in test_pf.members], dtype=float)
        test_feats = feature_matrix(test_pf, feat_names)

    def selection_mse(g, h):
        # premium-scale MSE pooled over train and holdout members; train
        # alone keeps tree-overfit accidents, the small holdout alone keeps
        # split-lucky ones, so states are judged on everything available
        theta_tr = np.clip(h.predict(features), lo, hi)
        fit_tr = train_man * _factor_for_state(batch, n_mat, g, theta_tr)
        sse = float(np.sum((train_prem - fit_tr) ** 2))
        count = len(train_prem)
        if use_holdout:
            theta_te = np.clip(h.predict(test_feats), lo, hi)
            fit_te = test_man * _factor_for_state(test_batch, test_n, g, theta_te)
            sse += float(np.sum((test_prem - fit_te) ** 2))
            count += len(test_prem)
        return sse / count

    best = None  # (sel mse, g, h, iterations, converged)
    for branch, start in enumerate(starts):
        wiggle = rng.uniform(-1.0, 1.0, size=len(train_idx))
        if model.link is Link.LOG_ADDITIVE:
            theta = np.clip(start + 0.02 * (hi - lo) * wiggle, lo, hi)
        else:
            theta = np.clip(start * np.exp(0.02 * wiggle), lo, hi)

        # the tree refit adds noise to each iterate, so a single flat or
        # worse reading does not mean the branch is done; require `patience`
        # consecutive readings without material improvement over its best
        branch_best = None
        h_prev = None
        stall = 0
        converged = False
        iterations = 0
        for iterations in range(1, config.max_iter + 1):
            inputs = _g_inputs(batch.dim_totals(theta), n_mat)
            g = fit_g(targets, inputs, form=config.form, lam=config.ridge_lam,
                      interior=config.knots())
            if h_prev is not None:
                # (g, previous h) is an aligned pair: this g was fit at
                # exactly the thetas h_prev produces
                cand = selection_mse(g, h_prev)
                if branch_best is None or cand < branch_best[0]:
                    branch_best = (cand, g, h_prev)
            pseudo = tune_theta_batch(train_pf, g, train_prem, train_man,
                                      bounds, current=theta)
            trees = BaggedTrees(n_trees=config.n_trees,
                                max_depth=config.max_depth,
                                min_leaf=config.min_leaf,
                                seed=config.seed + 977 * branch + iterations)
            h = HComponent(regressor=trees.fit(features, pseudo),
                           feature_names=feat_names)
            theta = np.clip(h.predict(features), lo, hi)
            mse = selection_mse(g, h)
            if branch_best is None:
                branch_best = (mse, g, h)
                if mse == 0.0:
                    converged = True
                    break
                h_prev = h
                continue
            material = branch_best[0] > 0 and \
                (branch_best[0] - mse) / branch_best[0] >= config.rel_tol
            if mse < branch_best[0]:
                branch_best = (mse, g, h)
            if branch_best[0] == 0.0:
                converged = True
                break
            stall = 0 if material else stall + 1
            if stall >= config.patience:
                converged = True
                break
            h_prev = h
        if best is None or branch_best[0] < best[0]:
            best = (*branch_best, iterations, converged)
    _, g, h, iterations, converged = best

    out = SurrogateModel(g=g, h=h, theta_bounds=bounds, model=model,
                         iterations_used=iterations, converged=converged)
    train_metrics = _metrics_for(out, train_pf, train_prem, train_man)
    test_metrics = _metrics_for(out, test_pf, test_prem, test_man)
    return replace(out, fit_metrics={"train": train_metrics, "test": test_metrics})


def _aligned(pf: Portfolio, values, what: str) -> np.ndarray:
    if isinstance(values, dict):
        try:
            return np.array([float(values[ph.id]) for ph in pf.members])
        except KeyError as exc:
            raise ParameterError(f"{what} missing for policyholder {exc}") from exc
    arr = np.asarray(values, dtype=float)
    if arr.shape != (len(pf.members),):
        raise ParameterError(f"{what} must align with the portfolio members")
    return arr


def _metrics_for(model: SurrogateModel, pf: Portfolio, prem: np.ndarray,
                 man: np.ndarray) -> Metrics:
    factors, fitted = predict_batch(model, pf, man)
    return metrics_from_values(prem, fitted)


def predict_batch(model: SurrogateModel, pf: Portfolio, manuals) -> tuple:
    """(factors, premiums) for every member; no-history members stay manual."""
    man = _aligned(pf, manuals, "manuals")
    if np.any(man <= 0):
        raise ParameterError("manual premiums must be strictly positive")
    factors = np.ones(len(pf.members))
    informative = np.array([_informative(ph) for ph in pf.members], dtype=bool)
    if np.any(informative):
        members = tuple(ph for ph, k in zip(pf.members, informative) if k)
        live = Portfolio(model=model.model, members=members)
        feats = feature_matrix(live, model.h.feature_names) if model.h is not None \
            else np.zeros((len(members), 0))
        theta = model.theta_for(feats)
        batch = IndexBatch(live)
        n_mat = np.array([ph.n_per_dim for ph in members], dtype=float)
        g_vals = model.g.evaluate(_g_inputs(batch.dim_totals(theta), n_mat))
        factors[informative] = np.exp(g_vals)
    return factors, man * factors


def predict_premium(model: SurrogateModel, ph: Policyholder, manual: float) -> float:
    """manual * exp(g(L, n)); exactly the manual when there is no history."""
    manual = float(manual)
    if manual <= 0:
        raise ParameterError("manual premium must be strictly positive")
    if not _informative(ph):
        return manual
    if model.h is not None:
        feats = features_for(ph, model.h.feature_names)[None, :]
    else:
        feats = np.zeros((1, 0))
    theta = float(model.theta_for(feats)[0])
    idx = credibility_index(ph, model.model, theta)
    row = np.concatenate([np.asarray(idx.per_dim, dtype=float),
                          np.asarray(ph.n_per_dim, dtype=float)])
    g_val = float(model.g.evaluate(row[None, :])[0])
    return manual * math.exp(g_val)


def assess(model: SurrogateModel, rows) -> Metrics:
    """Premium-scale fit metrics on (premium, manual, policyholder) rows."""
    rows = list(rows)
    if len(rows) < 2:
        raise ParameterError("need at least 2 assessment rows")
    targets = np.array([float(r[0]) for r in rows])
    fitted = np.array([predict_premium(model, r[2], float(r[1])) for r in rows])
    return metrics_from_values(targets, fitted)


def save_predictions_csv(path, ids, manuals, factors, premiums) -> None:
    lines = ["id,manual,factor,premium"]
    for i, m, f, p in zip(ids, manuals, factors, premiums):
        lines.append(f"{i},{fmt17(m)},{fmt17(f)},{fmt17(p)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_predictions_csv(path) -> list:
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "manual", "factor", "premium"]:
            raise SchemaError(f"unexpected prediction header: {reader.fieldnames}")
        out = []
        for row in reader:
            out.append((row["id"], float(row["manual"]), float(row["factor"]),
                        float(row["premium"])))
    return out
