"""Run configuration: one JSON file drives every CLI command.

Schema (all keys top level unless nested):

    seed        int, required (fixed seeding only; no wall-clock fallback)
    K           prior draws per premium, default 5000
    fraction    sub-portfolio fraction in (0, 1], default 0.05
    threads     worker cap, default 1
    principle   {"kind": ..., "alpha": ...}; alpha may be omitted for kinds
                with a shipped default
    model       ModelSpec dict {"families", "shape_params", "link", "prior"};
                derived from `scenario` when absent
    scenario    generation recipe, see `scenario_from_dict`
    scenarios   list of scenario dicts for the study grid
    balance_vars list of column names for balanced sampling (optional)
    surrogate   SurrogateConfig overrides (optional)
    paths       output/input file names, resolved against the out directory

A prior is either {"family", "params"} or {"family", "mean", "variance"}.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .distributions import Family, Link, ModelSpec, PriorSpec
from .errors import ConfigError, CredkitError
from .oracle import PremiumPrinciple, PrincipleKind
from .surrogate import SurrogateConfig
from .synth import AlphaSpec, Scenario

# applied when the config names a principle but omits alpha; loadings in
# the range practitioners quote for these principles
DEFAULT_PRINCIPLE_ALPHAS = {
    PrincipleKind.EXPECTED_VALUE: 0.1,
    PrincipleKind.STD_DEV: 0.1,
    PrincipleKind.VARIANCE: 0.1,
    PrincipleKind.EXPONENTIAL: 0.2,
    PrincipleKind.ESSCHER: 0.2,
}

DEFAULT_PATHS = {
    "portfolio": "portfolio.csv",
    "truths": "truths.csv",
    "subportfolio": "subportfolio.csv",
    "selection": "selection.json",
    "premiums": "premiums.csv",
    "manuals": "manuals.csv",
    "model": "surrogate.json",
    "predictions": "predictions.csv",
    "assessment": "assessment.json",
    "study": "study.csv",
    "report_dir": "report",
}

_TOP_KEYS = {"seed", "K", "fraction", "threads", "principle", "model",
             "scenario", "scenarios", "balance_vars", "surrogate", "paths"}


def principle_from_dict(d: dict) -> PremiumPrinciple:
    try:
        kind = PrincipleKind(d["kind"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad principle: {d!r}") from exc
    if kind is PrincipleKind.UTILITY:
        raise ConfigError("utility principles need a callable; not configurable")
    if "alpha" in d:
        return PremiumPrinciple(kind=kind, alpha=float(d["alpha"]))
    return PremiumPrinciple(kind=kind,
                            alpha=DEFAULT_PRINCIPLE_ALPHAS.get(kind, 0.0))


def prior_from_dict(d: dict) -> PriorSpec:
    try:
        if "params" in d:
            return PriorSpec.from_dict(d)
        return PriorSpec.from_mean_variance(Family(d["family"]),
                                            float(d["mean"]),
                                            float(d["variance"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad prior: {d!r} ({exc})") from exc


def alpha_from_dict(d: dict) -> AlphaSpec:
    known = {"kind", "loc", "scale"}
    if set(d) - known:
        raise ConfigError(f"unknown alpha keys: {sorted(set(d) - known)}")
    spec = AlphaSpec(kind=d.get("kind", "normal"), loc=float(d.get("loc", 0.0)),
                     scale=float(d.get("scale", 0.5)))
    return spec


def scenario_from_dict(d: dict, default_seed: int) -> Scenario:
    """Recipe keys: family, prior, N, n, principles, alpha, dispersion,
    link, seed (defaults to the run seed)."""
    known = {"family", "prior", "N", "n", "principles", "alpha", "dispersion",
             "link", "seed"}
    if set(d) - known:
        raise ConfigError(f"unknown scenario keys: {sorted(set(d) - known)}")
    try:
        family = Family(d["family"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad scenario family: {d.get('family')!r}") from exc
    if "prior" not in d:
        raise ConfigError("scenario needs a prior")
    link = None
    if "link" in d:
        try:
            link = Link(d["link"])
        except ValueError as exc:
            raise ConfigError(f"bad link: {d['link']!r}") from exc
    return Scenario(
        family=family,
        prior=prior_from_dict(d["prior"]),
        principles=tuple(principle_from_dict(p) for p in d.get("principles", [])),
        N=int(d.get("N", 1000)),
        n=int(d.get("n", 5)),
        alpha=alpha_from_dict(d["alpha"]) if "alpha" in d else None,
        dispersion=tuple(d["dispersion"]) if "dispersion" in d else None,
        link=link,
        seed=int(d.get("seed", default_seed)),
    )


def surrogate_from_dict(d: dict, seed: int) -> SurrogateConfig:
    names = {f.name for f in dataclasses.fields(SurrogateConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown surrogate keys: {sorted(unknown)}")
    kwargs = dict(d)
    if "feature_names" in kwargs and kwargs["feature_names"] is not None:
        kwargs["feature_names"] = tuple(kwargs["feature_names"])
    kwargs.setdefault("seed", seed)
    try:
        return SurrogateConfig(**kwargs)
    except CredkitError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad surrogate config: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int
    K: int = 5000
    fraction: float = 0.05
    threads: int = 1
    principle: PremiumPrinciple = field(
        default_factory=lambda: PremiumPrinciple(kind=PrincipleKind.NET))
    model: ModelSpec | None = None
    scenario: Scenario | None = None
    scenarios: tuple = ()
    balance_vars: tuple | None = None
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    paths: dict = field(default_factory=dict)
    out_dir: str = "."

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        unknown = set(self.paths) - set(DEFAULT_PATHS)
        if unknown:
            raise ConfigError(f"unknown path keys: {sorted(unknown)}")
        merged = dict(DEFAULT_PATHS)
        merged.update(self.paths)
        object.__setattr__(self, "paths", merged)

    @property
    def resolved_model(self) -> ModelSpec:
        if self.model is not None:
            return self.model
        if self.scenario is not None:
            return self.scenario.model_spec()
        raise ConfigError("config has neither a model nor a scenario")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, self.paths[name])

    @classmethod
    def from_dict(cls, data: dict, seed: int | None = None,
                  out_dir: str = ".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if seed is None:
            if "seed" not in data:
                raise ConfigError("seed is required (in the file or via --seed)")
            seed = int(data["seed"])
        seed = int(seed)
        model = None
        if "model" in data:
            try:
                model = ModelSpec.from_dict(data["model"])
            except CredkitError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad model: {exc}") from exc
        return cls(
            seed=seed,
            K=int(data.get("K", 5000)),
            fraction=float(data.get("fraction", 0.05)),
            threads=int(data.get("threads", 1)),
            principle=(principle_from_dict(data["principle"])
                       if "principle" in data
                       else PremiumPrinciple(kind=PrincipleKind.NET)),
            model=model,
            scenario=(scenario_from_dict(data["scenario"], seed)
                      if "scenario" in data else None),
            scenarios=tuple(scenario_from_dict(s, seed)
                            for s in data.get("scenarios", [])),
            balance_vars=(tuple(data["balance_vars"])
                          if "balance_vars" in data else None),
            surrogate=surrogate_from_dict(data.get("surrogate", {}), seed),
            paths=dict(data.get("paths", {})),
            out_dir=out_dir,
        )


def load_config(path: str | os.PathLike, seed: int | None = None,
                out_dir: str | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data, seed=seed,
                               out_dir=out_dir if out_dir is not None else ".")


def describe_config(cfg: RunConfig) -> str:
    """Human summary used by the validate subcommand."""
    lines = [f"seed={cfg.seed} K={cfg.K} fraction={cfg.fraction} "
             f"threads={cfg.threads}",
             f"principle: {cfg.principle.kind.value}"]
    if cfg.model is not None:
        fams = ",".join(f.value for f in cfg.model.families)
        lines.append(f"model: {fams} / {cfg.model.link.value} / "
                     f"{cfg.model.prior.family.value} prior")
    if cfg.scenario is not None:
        sc = cfg.scenario
        lines.append(f"scenario: {sc.family.value}-{sc.prior.family.value} "
                     f"N={sc.N} n={sc.n}")
    if cfg.scenarios:
        cells = sum(max(1, len(sc.principles)) for sc in cfg.scenarios)
        lines.append(f"study: {len(cfg.scenarios)} scenarios, {cells} cells")
    lines.append(f"out: {os.path.abspath(cfg.out_dir)}")
    return "\n".join(lines)
