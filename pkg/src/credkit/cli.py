"""credkit command line: generate, price, sample, fit, predict, assess,
study, report, validate, and the chained pipeline.

Every command is driven by one JSON config (see `config`), is deterministic
for a fixed seed, and writes its outputs atomically, so a rerun either
reproduces a file byte for byte or replaces it whole.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .balance import SelectionReport, select_subportfolio_report
from .config import RunConfig, describe_config, load_config
from .credindex import IndexBatch
from .errors import ConfigError, CredkitError, SchemaError, exit_code_for
from .ioutil import atomic_write_text, fmt17
from .oracle import (
    draw_prior,
    load_premiums_csv,
    manual_premium,
    premium,
    save_premiums_csv,
)
from .portfolio import Portfolio, load_portfolio, save_portfolio
from .surrogate import (
    SurrogateModel,
    feature_matrix,
    fit_surrogate,
    load_model,
    load_predictions_csv,
    metrics_from_values,
    predict_batch,
    save_model,
    save_predictions_csv,
)
from .synth import Truths, format_study_table, generate_portfolio, run_study, save_study_csv

HIST_BINS = 30
G_GRID_POINTS = 50


# ---------------------------------------------------------------------------
# Small shared helpers.
# ---------------------------------------------------------------------------

def _atomic_portfolio(pf: Portfolio, path: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    os.close(fd)
    try:
        save_portfolio(pf, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _member_map(fn, members, threads: int) -> list:
    """Order-preserving map over policyholders, optionally threaded."""
    members = list(members)
    if threads <= 1 or len(members) < 2:
        return [fn(ph) for ph in members]
    slices = np.array_split(np.arange(len(members)), threads * 4)
    out = [None] * len(members)

    def work(idx):
        return [fn(members[i]) for i in idx]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, idx) for idx in slices if len(idx)]
        slots = [idx for idx in slices if len(idx)]
        for idx, fut in zip(slots, futures):
            for i, value in zip(idx, fut.result()):
                out[i] = value
    return out


@contextlib.contextmanager
def _stage(name: str):
    """Prefix pipeline errors with the stage that raised them."""
    try:
        yield
    except CredkitError as exc:
        exc.args = (f"{name}: {exc}",)
        raise
    except FileNotFoundError as exc:
        # a fresh instance: OSError renders errno/strerror, not args
        raise FileNotFoundError(f"{name}: {exc}") from exc


def _write_truths(path: str, pf: Portfolio, truths: Truths) -> None:
    lines = ["id,alpha,theta"]
    for ph, a, t in zip(pf.members, truths.alpha, truths.theta):
        lines.append(f"{ph.id},{fmt17(a)},{fmt17(t)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands. Each takes the config plus optional in-memory inputs so the
# pipeline can chain them without re-reading its own files.
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> Portfolio:
    if cfg.scenario is None:
        raise ConfigError("generate needs a scenario section in the config")
    pf, truths = generate_portfolio(cfg.scenario)
    _atomic_portfolio(pf, cfg.path("portfolio"))
    _write_truths(cfg.path("truths"), pf, truths)
    print(f"wrote {cfg.path('portfolio')} ({len(pf.members)} policyholders)")
    return pf


def cmd_oracle(cfg: RunConfig, pf: Portfolio | None = None) -> None:
    model = cfg.resolved_model
    if pf is None:
        pf = load_portfolio(cfg.path("portfolio"), model)
    draws = draw_prior(model.prior, cfg.K, cfg.seed)
    prem = _member_map(lambda ph: premium(ph, model, draws, cfg.principle),
                       pf.members, cfg.threads)
    man = _member_map(lambda ph: manual_premium(ph, model, draws, cfg.principle),
                      pf.members, cfg.threads)
    ids = [ph.id for ph in pf.members]
    save_premiums_csv(cfg.path("premiums"), ids, prem, cfg.principle, draws)
    save_premiums_csv(cfg.path("manuals"), ids, man, cfg.principle, draws)
    print(f"wrote {cfg.path('premiums')} and {cfg.path('manuals')} "
          f"({len(ids)} rows, K={draws.K})")


def cmd_sample(cfg: RunConfig, pf: Portfolio | None = None
               ) -> tuple[Portfolio, SelectionReport]:
    model = cfg.resolved_model
    if pf is None:
        pf = load_portfolio(cfg.path("portfolio"), model)
    report = select_subportfolio_report(pf, cfg.fraction, cfg.balance_vars,
                                        seed=cfg.seed)
    chosen = set(report.ids)
    sub = Portfolio(model=model,
                    members=tuple(ph for ph in pf.members if ph.id in chosen))
    _atomic_portfolio(sub, cfg.path("subportfolio"))
    _write_json(cfg.path("selection"), _selection_payload(cfg, report))
    print(f"selected {report.achieved_size}/{len(pf.members)} "
          f"(target {report.target_size})")
    return sub, report


def _selection_payload(cfg: RunConfig, report: SelectionReport) -> dict:
    return {
        "fraction": cfg.fraction,
        "seed": cfg.seed,
        "target_size": report.target_size,
        "achieved_size": report.achieved_size,
        "balance_vars": list(report.var_names),
        "ht_gaps": {k: report.ht_gaps[k] for k in report.var_names},
        "ids": list(report.ids),
    }


def cmd_fit(cfg: RunConfig, sub: Portfolio | None = None,
            premiums=None, manuals=None) -> SurrogateModel:
    model = cfg.resolved_model
    if sub is None:
        sub = load_portfolio(cfg.path("subportfolio"), model)
    if premiums is None:
        premiums = {r.id: r.value for r in load_premiums_csv(cfg.path("premiums"))}
    if manuals is None:
        manuals = {r.id: r.value for r in load_premiums_csv(cfg.path("manuals"))}
    fitted = fit_surrogate(sub, premiums, manuals, model=model,
                           config=cfg.surrogate)
    save_model(cfg.path("model"), fitted)
    train = fitted.fit_metrics["train"].r2
    test = fitted.fit_metrics["test"].r2
    print(f"wrote {cfg.path('model')} (R2 train {train:.4f}, test {test:.4f})")
    return fitted


def cmd_predict(cfg: RunConfig, smodel: SurrogateModel | None = None,
                pf: Portfolio | None = None, manuals=None) -> None:
    if smodel is None:
        smodel = load_model(cfg.path("model"))
    if pf is None:
        pf = load_portfolio(cfg.path("portfolio"), smodel.model)
    if manuals is None:
        if os.path.exists(cfg.path("manuals")):
            rows = load_premiums_csv(cfg.path("manuals"))
            manuals = {r.id: r.value for r in rows}
        else:
            draws = draw_prior(smodel.model.prior, cfg.K, cfg.seed)
            manuals = np.array([
                e.value for e in _member_map(
                    lambda ph: manual_premium(ph, smodel.model, draws,
                                              cfg.principle),
                    pf.members, cfg.threads)
            ])
    factors, premiums = predict_batch(smodel, pf, manuals)
    if isinstance(manuals, dict):
        manual_values = np.array([manuals[ph.id] for ph in pf.members])
    else:
        manual_values = np.asarray(manuals, dtype=float)
    save_predictions_csv(cfg.path("predictions"),
                         [ph.id for ph in pf.members],
                         manual_values, factors, premiums)
    print(f"wrote {cfg.path('predictions')} ({len(pf.members)} rows)")


def cmd_assess(cfg: RunConfig, fitted: SurrogateModel | None = None,
               report: SelectionReport | None = None) -> dict:
    predictions = load_predictions_csv(cfg.path("predictions"))
    oracle_rows = load_premiums_csv(cfg.path("premiums"))
    target_by_id = {r.id: r.value for r in oracle_rows}
    pairs = [(target_by_id[pid], pred) for pid, _, _, pred in predictions
             if pid in target_by_id]
    if len(pairs) < 2:
        raise SchemaError("predictions and premiums share fewer than 2 ids")
    metrics = metrics_from_values([p[0] for p in pairs], [p[1] for p in pairs])
    payload = {"compared": len(pairs),
               "surrogate_vs_oracle": metrics.to_dict()}
    if fitted is None and os.path.exists(cfg.path("model")):
        fitted = load_model(cfg.path("model"))
    if fitted is not None:
        payload["fit"] = {k: m.to_dict() for k, m in fitted.fit_metrics.items()}
    if report is not None:
        balance = _selection_payload(cfg, report)
        balance.pop("ids")
        payload["balance"] = balance
    elif os.path.exists(cfg.path("selection")):
        with open(cfg.path("selection"), "r", encoding="utf-8") as fh:
            balance = json.load(fh)
        balance.pop("ids", None)
        payload["balance"] = balance
    _write_json(cfg.path("assessment"), payload)
    print(f"R2 vs oracle: {metrics.r2:.4f} over {len(pairs)} policyholders")
    return payload


def cmd_study(cfg: RunConfig) -> None:
    if not cfg.scenarios:
        raise ConfigError("study needs a scenarios list in the config")
    rows = run_study(cfg.scenarios, K=cfg.K, fraction=cfg.fraction,
                     surrogate_config=cfg.surrogate, seed=cfg.seed,
                     threads=cfg.threads)
    save_study_csv(cfg.path("study"), rows)
    print(format_study_table(rows), end="")


def cmd_report(cfg: RunConfig, smodel: SurrogateModel | None = None,
               pf: Portfolio | None = None, predictions=None,
               oracle_rows=None) -> None:
    if smodel is None:
        smodel = load_model(cfg.path("model"))
    if pf is None:
        pf = load_portfolio(cfg.path("portfolio"), smodel.model)
    if predictions is None:
        predictions = load_predictions_csv(cfg.path("predictions"))
    if oracle_rows is None:
        oracle_rows = load_premiums_csv(cfg.path("premiums"))
    out = cfg.path("report_dir")
    os.makedirs(out, exist_ok=True)
    _report_index_files(out, smodel, pf)
    _report_g_grid(out, smodel, pf)
    _report_qq(out, predictions, oracle_rows)
    _report_premium_hist(out, predictions)
    print(f"wrote plot data under {out}")


# ---------------------------------------------------------------------------
# Report internals: plot-ready CSV grids, no rendering.
# ---------------------------------------------------------------------------

def _live_indexes(smodel: SurrogateModel, pf: Portfolio):
    """(members, theta, per-dim index matrix) for members with history."""
    live = tuple(ph for ph in pf.members if any(n > 0 for n in ph.n_per_dim))
    if not live:
        return (), np.zeros(0), np.zeros((0, pf.model.dims))
    sub = Portfolio(model=pf.model, members=live)
    if smodel.h is not None:
        feats = feature_matrix(sub, smodel.h.feature_names)
    else:
        feats = np.zeros((len(live), 0))
    theta = smodel.theta_for(feats)
    dim_idx = IndexBatch(sub).dim_totals(theta)
    return live, theta, dim_idx


def _report_index_files(out: str, smodel: SurrogateModel, pf: Portfolio) -> None:
    live, _, dim_idx = _live_indexes(smodel, pf)
    dims = pf.model.dims
    lines = ["id,dim,std_frequency,index"]
    for i, ph in enumerate(live):
        sums = np.zeros(dims)
        expected = np.zeros(dims)
        for obs in ph.history:
            if obs.value is None:
                continue
            d = obs.dim - 1
            sums[d] += obs.value
            expected[d] += obs.exposure * ph.mu_per_dim[d]
        for d in range(dims):
            if expected[d] > 0:
                lines.append(f"{ph.id},{d + 1},{fmt17(sums[d] / expected[d])},"
                             f"{fmt17(dim_idx[i, d])}")
    atomic_write_text(os.path.join(out, "index_vs_frequency.csv"),
                      "\n".join(lines) + "\n")

    hist_lines = ["dim,bin_left,bin_right,count"]
    columns = [(str(d + 1), dim_idx[:, d]) for d in range(dims)]
    columns.append(("total", dim_idx.sum(axis=1)))
    for label, values in columns:
        if values.size == 0:
            continue
        counts, edges = np.histogram(values, bins=HIST_BINS)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            hist_lines.append(f"{label},{fmt17(lo)},{fmt17(hi)},{int(c)}")
    atomic_write_text(os.path.join(out, "index_hist.csv"),
                      "\n".join(hist_lines) + "\n")


def _report_g_grid(out: str, smodel: SurrogateModel, pf: Portfolio) -> None:
    """One block per g input: that input swept, the others at their medians.

    Every input column is written alongside g, so the file replays through
    the fitted g directly.
    """
    live, theta, dim_idx = _live_indexes(smodel, pf)
    dims = pf.model.dims
    names = [f"L_{d + 1}" for d in range(dims)] + [f"n_{d + 1}" for d in range(dims)]
    header = ",".join(names) + ",g"
    if not live:
        atomic_write_text(os.path.join(out, "g_grid.csv"), header + "\n")
        return
    n_mat = np.array([ph.n_per_dim for ph in live], dtype=float)
    inputs = np.hstack([dim_idx, n_mat])
    center = np.median(inputs, axis=0)
    blocks = []
    for j in range(inputs.shape[1]):
        lo, hi = float(inputs[:, j].min()), float(inputs[:, j].max())
        if j >= dims:
            grid = np.unique(inputs[:, j])
        elif hi > lo:
            grid = np.linspace(lo, hi, G_GRID_POINTS)
        else:
            grid = np.array([lo])
        block = np.tile(center, (len(grid), 1))
        block[:, j] = grid
        blocks.append(block)
    matrix = np.vstack(blocks)
    g_vals = smodel.g.evaluate(matrix)
    lines = [header]
    for row, g in zip(matrix, g_vals):
        lines.append(",".join(fmt17(v) for v in row) + f",{fmt17(g)}")
    atomic_write_text(os.path.join(out, "g_grid.csv"), "\n".join(lines) + "\n")


def _report_qq(out: str, predictions, oracle_rows) -> None:
    predicted = {pid: pred for pid, _, _, pred in predictions}
    shared = [(r.value, predicted[r.id]) for r in oracle_rows
              if r.id in predicted]
    lines = ["oracle,surrogate"]
    if shared:
        q_oracle = np.sort([s[0] for s in shared])
        q_pred = np.sort([s[1] for s in shared])
        lines.extend(f"{fmt17(a)},{fmt17(b)}" for a, b in zip(q_oracle, q_pred))
    atomic_write_text(os.path.join(out, "qq.csv"), "\n".join(lines) + "\n")


def _report_premium_hist(out: str, predictions) -> None:
    values = np.array([pred for _, _, _, pred in predictions])
    lines = ["bin_left,bin_right,count"]
    if values.size:
        counts, edges = np.histogram(values, bins=HIST_BINS)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            lines.append(f"{fmt17(lo)},{fmt17(hi)},{int(c)}")
    atomic_write_text(os.path.join(out, "premium_hist.csv"),
                      "\n".join(lines) + "\n")


def cmd_pipeline(cfg: RunConfig) -> None:
    """generate (if a scenario is configured), sample, price the slice,
    fit, predict everywhere, assess, and emit plot data; any stage error
    carries the stage name."""
    model = cfg.resolved_model
    with _stage("generate"):
        if cfg.scenario is not None:
            pf = cmd_generate(cfg)
        else:
            pf = load_portfolio(cfg.path("portfolio"), model)
    with _stage("sample"):
        sub, report = cmd_sample(cfg, pf)
    with _stage("oracle"):
        draws = draw_prior(model.prior, cfg.K, cfg.seed)
        sub_prem = _member_map(
            lambda ph: premium(ph, model, draws, cfg.principle),
            sub.members, cfg.threads)
        full_man = _member_map(
            lambda ph: manual_premium(ph, model, draws, cfg.principle),
            pf.members, cfg.threads)
        save_premiums_csv(cfg.path("premiums"), [ph.id for ph in sub.members],
                          sub_prem, cfg.principle, draws)
        save_premiums_csv(cfg.path("manuals"), [ph.id for ph in pf.members],
                          full_man, cfg.principle, draws)
    man_by_id = {ph.id: est.value for ph, est in zip(pf.members, full_man)}
    with _stage("fit"):
        fitted = cmd_fit(cfg, sub,
                         premiums=[e.value for e in sub_prem],
                         manuals=man_by_id)
    with _stage("predict"):
        cmd_predict(cfg, fitted, pf, manuals=man_by_id)
    with _stage("assess"):
        cmd_assess(cfg, fitted, report)
    with _stage("report"):
        cmd_report(cfg, fitted, pf)


def cmd_validate(cfg: RunConfig) -> None:
    for name in sorted(cfg.paths):
        parent = os.path.dirname(os.path.abspath(cfg.path(name)))
        if not os.path.isdir(parent):
            raise ConfigError(f"path {name!r}: directory {parent} does not exist")
    print(describe_config(cfg))
    print("config ok")


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.
# ---------------------------------------------------------------------------

_COMMANDS = [
    ("generate", cmd_generate, "draw a synthetic portfolio from the scenario"),
    ("oracle", cmd_oracle, "compute premiums and manual premiums by simulation"),
    ("sample", cmd_sample, "select a balanced sub-portfolio"),
    ("fit", cmd_fit, "fit the surrogate on the priced sub-portfolio"),
    ("predict", cmd_predict, "evaluate the surrogate over a portfolio"),
    ("assess", cmd_assess, "compare surrogate premiums against oracle premiums"),
    ("study", cmd_study, "run the scenario grid and emit the R2 table"),
    ("report", cmd_report, "emit plot-ready CSV data from fitted artifacts"),
    ("validate", cmd_validate, "check a config file and describe the run"),
    ("pipeline", cmd_pipeline, "run sample, oracle, fit, predict, assess, report"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="credkit",
        description="credibility premiums by simulation, scaled up by a "
                    "fitted surrogate")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, fn, help_text in _COMMANDS:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap for batch work")
        sp.add_argument("--out", default=None,
                        help="directory for inputs/outputs (default .)")
        sp.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed,
                          out_dir=args.out if args.out is not None else ".")
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg = dataclasses.replace(cfg, threads=args.threads)
        os.makedirs(cfg.out_dir, exist_ok=True)
        args.func(cfg)
    except (CredkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
