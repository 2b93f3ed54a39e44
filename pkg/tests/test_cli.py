import json
import os
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from credkit.cli import main
from credkit.config import DEFAULT_PRINCIPLE_ALPHAS, RunConfig, load_config
from credkit.distributions import Family, Link, ModelSpec, PriorSpec
from credkit.errors import ConfigError
from credkit.oracle import (
    PremiumEstimate,
    PremiumPrinciple,
    PrincipleKind,
    conjugate_net_premium,
    draw_prior,
    load_premiums_csv,
    save_premiums_csv,
)
from credkit.portfolio import (
    Censor,
    Observation,
    Policyholder,
    Portfolio,
    load_portfolio,
    save_portfolio,
)
from credkit.surrogate import (
    FORM_ADDITIVE,
    GComponent,
    SurrogateModel,
    load_model,
    load_predictions_csv,
    save_predictions_csv,
)

BASE_CONFIG = {
    "seed": 21,
    "K": 400,
    "fraction": 0.6,
    "principle": {"kind": "net"},
    "scenario": {
        "family": "Poisson",
        "prior": {"family": "Gamma", "mean": 1.0, "variance": 0.5},
        "N": 120,
        "n": 5,
    },
    "surrogate": {"n_trees": 20, "max_iter": 5},
}


def write_config(directory, data=None):
    path = directory / "config.json"
    path.write_text(json.dumps(data if data is not None else BASE_CONFIG))
    return str(path)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestConfig:
    def test_seed_required(self):
        data = {k: v for k, v in BASE_CONFIG.items() if k != "seed"}
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)
        cfg = RunConfig.from_dict(data, seed=5)
        assert cfg.seed == 5 and cfg.scenario.seed == 5

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1, "portfolioo": "x"})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1, "paths": {"premium": "x.csv"}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict(
                {"seed": 1, "scenario": dict(BASE_CONFIG["scenario"], prio=1)})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1, "surrogate": {"trees": 3}})

    def test_principle_alpha_defaults(self):
        cfg = RunConfig.from_dict(
            {"seed": 1, "principle": {"kind": "exponential"}})
        assert cfg.principle.alpha == DEFAULT_PRINCIPLE_ALPHAS[
            PrincipleKind.EXPONENTIAL]
        cfg = RunConfig.from_dict(
            {"seed": 1, "principle": {"kind": "std_dev", "alpha": 0.3}})
        assert cfg.principle.alpha == 0.3
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1, "principle": {"kind": "utility"}})

    def test_prior_forms(self):
        by_moments = RunConfig.from_dict(dict(BASE_CONFIG)).scenario.prior
        explicit = RunConfig.from_dict(
            {"seed": 1, "scenario": dict(BASE_CONFIG["scenario"],
                                         prior={"family": "Gamma",
                                                "params": [2.0, 2.0]})}
        ).scenario.prior
        assert by_moments.family is Family.GAMMA
        assert by_moments.params == pytest.approx(explicit.params)

    def test_model_section(self):
        spec = ModelSpec(families=(Family.POISSON,), shape_params=((),),
                         link=Link.MULTIPLICATIVE_FRAILTY,
                         prior=PriorSpec.from_mean_variance(Family.GAMMA, 1.0, 0.5))
        cfg = RunConfig.from_dict({"seed": 1, "model": spec.to_dict()})
        assert cfg.resolved_model == spec
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1}).resolved_model

    def test_value_ranges(self):
        for bad in ({"K": 0}, {"fraction": 0.0}, {"fraction": 1.2},
                    {"threads": 0}):
            with pytest.raises(ConfigError):
                RunConfig.from_dict(dict(BASE_CONFIG, **bad))

    def test_paths_resolve_against_out_dir(self):
        cfg = RunConfig.from_dict(dict(BASE_CONFIG), out_dir="/tmp/xyz")
        assert cfg.path("portfolio") == os.path.join("/tmp/xyz", "portfolio.csv")
        cfg2 = RunConfig.from_dict(
            dict(BASE_CONFIG, paths={"portfolio": "pf.csv"}), out_dir=".")
        assert cfg2.path("portfolio") == os.path.join(".", "pf.csv")
        assert cfg2.path("model") == os.path.join(".", "surrogate.json")

    def test_surrogate_seed_follows_run_seed(self):
        cfg = RunConfig.from_dict(dict(BASE_CONFIG))
        assert cfg.surrogate.seed == cfg.seed
        cfg2 = RunConfig.from_dict(
            dict(BASE_CONFIG, surrogate={"n_trees": 10, "seed": 3}))
        assert cfg2.surrogate.seed == 3

    def test_bad_json_and_missing_file(self, tmp_path):
        bad = tmp_path / "x.json"
        bad.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(bad)
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.json")


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    root = tmp_path_factory.mktemp("flow")
    cfg_path = write_config(root)
    out = str(root / "out")

    def run(cmd):
        return main([cmd, "--config", cfg_path, "--out", out])

    for cmd in ("generate", "oracle", "sample", "fit", "predict", "assess",
                "report"):
        assert run(cmd) == 0, cmd
    cfg = load_config(cfg_path, out_dir=out)
    return SimpleNamespace(root=root, out=out, cfg_path=cfg_path, cfg=cfg)


class TestCommandFlow:
    def test_generate_output(self, flow):
        text = read(flow.cfg.path("portfolio")).decode()
        assert len(text.splitlines()) == 1 + 120 * 5
        pf = load_portfolio(flow.cfg.path("portfolio"), flow.cfg.resolved_model)
        assert len(pf.members) == 120
        truths = read(flow.cfg.path("truths")).decode().splitlines()
        assert truths[0] == "id,alpha,theta" and len(truths) == 121

    def test_oracle_matches_conjugate(self, flow):
        rows = load_premiums_csv(flow.cfg.path("premiums"))
        assert len(rows) == 120
        pf = load_portfolio(flow.cfg.path("portfolio"), flow.cfg.resolved_model)
        a, b = flow.cfg.resolved_model.prior.params
        for ph, row in list(zip(pf.members, rows))[:8]:
            sum_y = sum(o.value for o in ph.history)
            exact = conjugate_net_premium(a, b, ph.mu_per_dim[0], 5, sum_y)
            assert abs(row.value - exact) <= 3.0 * row.std_error + 1e-12

    def test_sample_outputs_agree(self, flow):
        with open(flow.cfg.path("selection")) as fh:
            sel = json.load(fh)
        sub = load_portfolio(flow.cfg.path("subportfolio"),
                             flow.cfg.resolved_model)
        assert [ph.id for ph in sub.members] == sel["ids"]
        assert sel["achieved_size"] == len(sub.members)
        assert abs(sel["achieved_size"] - 72) <= 1
        assert set(sel["ht_gaps"]) == set(sel["balance_vars"])

    def test_fit_writes_model(self, flow):
        model = load_model(flow.cfg.path("model"))
        assert set(model.fit_metrics) == {"train", "test"}
        assert model.fit_metrics["train"].r2 <= 1.0

    def test_predict_factor_arithmetic(self, flow):
        rows = load_predictions_csv(flow.cfg.path("predictions"))
        assert len(rows) == 120
        for _, manual, factor, premium in rows:
            assert abs(manual * factor - premium) <= 1e-12 * max(1.0, premium)

    def test_assess_payload(self, flow):
        with open(flow.cfg.path("assessment")) as fh:
            payload = json.load(fh)
        assert payload["compared"] == 120
        assert payload["surrogate_vs_oracle"]["r2"] > 0.5
        assert "train" in payload["fit"] and "test" in payload["fit"]
        assert "ht_gaps" in payload["balance"]

    def test_report_files(self, flow):
        report = flow.cfg.path("report_dir")
        for name in ("index_vs_frequency.csv", "index_hist.csv", "g_grid.csv",
                     "qq.csv", "premium_hist.csv"):
            assert os.path.exists(os.path.join(report, name)), name

    def test_g_grid_replays_through_g(self, flow):
        model = load_model(flow.cfg.path("model"))
        lines = read(os.path.join(flow.cfg.path("report_dir"),
                                  "g_grid.csv")).decode().splitlines()
        assert lines[0] == "L_1,n_1,g"
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        replay = model.g.evaluate(data[:, :2])
        np.testing.assert_array_equal(replay, data[:, 2])

    def test_qq_is_sorted(self, flow):
        lines = read(os.path.join(flow.cfg.path("report_dir"),
                                  "qq.csv")).decode().splitlines()
        assert lines[0] == "oracle,surrogate"
        cols = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        assert len(cols) == 120
        assert np.all(np.diff(cols[:, 0]) >= 0)
        assert np.all(np.diff(cols[:, 1]) >= 0)

    def test_premium_hist_counts(self, flow):
        lines = read(os.path.join(flow.cfg.path("report_dir"),
                                  "premium_hist.csv")).decode().splitlines()
        counts = [int(ln.split(",")[2]) for ln in lines[1:]]
        assert sum(counts) == 120


class TestDeterminism:
    def test_generate_rerun_byte_identical(self, tmp_path):
        cfg_path = write_config(
            tmp_path, dict(BASE_CONFIG, scenario=dict(BASE_CONFIG["scenario"],
                                                      N=10)))
        out = str(tmp_path / "out")
        assert main(["generate", "--config", cfg_path, "--out", out]) == 0
        first = read(os.path.join(out, "portfolio.csv"))
        assert len(first.decode().splitlines()) == 1 + 10 * 5
        assert main(["generate", "--config", cfg_path, "--out", out]) == 0
        assert read(os.path.join(out, "portfolio.csv")) == first

    def test_seed_flag_overrides(self, tmp_path):
        cfg_path = write_config(
            tmp_path, dict(BASE_CONFIG, scenario=dict(BASE_CONFIG["scenario"],
                                                      N=10)))
        out = str(tmp_path / "out")
        main(["generate", "--config", cfg_path, "--out", out])
        base = read(os.path.join(out, "portfolio.csv"))
        main(["generate", "--config", cfg_path, "--out", out, "--seed", "99"])
        assert read(os.path.join(out, "portfolio.csv")) != base

    def test_threads_do_not_change_oracle(self, tmp_path):
        data = dict(BASE_CONFIG, scenario=dict(BASE_CONFIG["scenario"], N=40),
                    K=200)
        cfg_path = write_config(tmp_path, data)
        outputs = []
        for threads, sub in (("1", "a"), ("3", "b")):
            out = str(tmp_path / sub)
            assert main(["generate", "--config", cfg_path, "--out", out]) == 0
            assert main(["oracle", "--config", cfg_path, "--out", out,
                         "--threads", threads]) == 0
            outputs.append(read(os.path.join(out, "premiums.csv")))
        assert outputs[0] == outputs[1]


class TestPipeline:
    def config(self):
        return dict(BASE_CONFIG,
                    fraction=1.0,
                    K=300,
                    scenario=dict(BASE_CONFIG["scenario"], N=100),
                    surrogate={"n_trees": 15, "max_iter": 4})

    def test_full_run_is_reproducible(self, tmp_path):
        cfg_path = write_config(tmp_path, self.config())
        outs = [str(tmp_path / "run1"), str(tmp_path / "run2")]
        for out in outs:
            assert main(["pipeline", "--config", cfg_path, "--out", out]) == 0
        names = ["portfolio.csv", "truths.csv", "subportfolio.csv",
                 "selection.json", "premiums.csv", "manuals.csv",
                 "surrogate.json", "predictions.csv", "assessment.json",
                 os.path.join("report", "index_vs_frequency.csv"),
                 os.path.join("report", "index_hist.csv"),
                 os.path.join("report", "g_grid.csv"),
                 os.path.join("report", "qq.csv"),
                 os.path.join("report", "premium_hist.csv")]
        for name in names:
            a = read(os.path.join(outs[0], name))
            b = read(os.path.join(outs[1], name))
            assert a == b, name

    def test_fraction_one_prices_everyone(self, tmp_path):
        cfg_path = write_config(tmp_path, self.config())
        out = str(tmp_path / "out")
        assert main(["pipeline", "--config", cfg_path, "--out", out]) == 0
        with open(os.path.join(out, "assessment.json")) as fh:
            payload = json.load(fh)
        assert payload["compared"] == 100
        assert payload["balance"]["achieved_size"] == 100
        rows = load_premiums_csv(os.path.join(out, "premiums.csv"))
        assert len(rows) == 100

    def test_stage_name_in_errors(self, tmp_path, capsys):
        data = {k: v for k, v in self.config().items() if k != "scenario"}
        data["model"] = ModelSpec(
            families=(Family.POISSON,), shape_params=((),),
            link=Link.MULTIPLICATIVE_FRAILTY,
            prior=PriorSpec.from_mean_variance(Family.GAMMA, 1.0, 0.5),
        ).to_dict()
        cfg_path = write_config(tmp_path, data)
        out = str(tmp_path / "out")
        code = main(["pipeline", "--config", cfg_path, "--out", out])
        assert code == 3
        assert "generate:" in capsys.readouterr().err


class TestStudyCommand:
    def config(self):
        return {
            "seed": 2,
            "K": 300,
            "fraction": 0.6,
            "surrogate": {"n_trees": 15, "max_iter": 4},
            "scenarios": [{
                "family": "Poisson",
                "prior": {"family": "Gamma", "mean": 1.0, "variance": 0.5},
                "N": 100, "n": 5, "seed": 5,
                "principles": [{"kind": "net"}],
            }],
        }

    def test_study_writes_grid(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, self.config())
        out = str(tmp_path / "out")
        assert main(["study", "--config", cfg_path, "--out", out]) == 0
        printed = capsys.readouterr().out
        assert "R2_full" in printed and "Poisson" in printed
        lines = read(os.path.join(out, "study.csv")).decode().splitlines()
        assert lines[0] == ("model,prior,principle,R2_train,R2_test,R2_full,"
                            "M,N,K,seed,wall_seconds")
        assert len(lines) == 2

    def test_study_deterministic_but_for_wall(self, tmp_path):
        cfg_path = write_config(tmp_path, self.config())
        grids = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            assert main(["study", "--config", cfg_path, "--out", out]) == 0
            lines = read(os.path.join(out, "study.csv")).decode().splitlines()
            grids.append([ln.rsplit(",", 1)[0] for ln in lines])
        assert grids[0] == grids[1]

    def test_study_without_scenarios(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"seed": 1})
        assert main(["study", "--config", cfg_path,
                     "--out", str(tmp_path / "o")]) == 2


class TestHandFixtures:
    MODEL = ModelSpec(families=(Family.POISSON,), shape_params=((),),
                      link=Link.MULTIPLICATIVE_FRAILTY,
                      prior=PriorSpec.from_mean_variance(Family.GAMMA, 1.0, 0.5))

    def hand_portfolio(self):
        hand = Policyholder(id="hand", mu_per_dim=(0.5,), history=(
            Observation(1, 1, 2.0, 1.0, Censor.EXACT),
            Observation(2, 1, 0.0, 1.0, Censor.EXACT),
            Observation(3, 1, 0.0, 1.0, Censor.EXACT),
        ))
        other = Policyholder(id="other", mu_per_dim=(1.0,), history=(
            Observation(1, 1, 1.0, 1.0, Censor.EXACT),
            Observation(2, 1, 0.0, 1.0, Censor.EXACT),
            Observation(3, 1, None, 1.0, Censor.MISSING),
        ))
        return Portfolio(model=self.MODEL, members=(hand, other))

    def write_artifacts(self, out, values=(1.0, 2.0)):
        os.makedirs(out, exist_ok=True)
        pf = self.hand_portfolio()
        save_portfolio(pf, os.path.join(out, "portfolio.csv"))
        g = GComponent(form=FORM_ADDITIVE, n_inputs=2, active=(), bases=(),
                       coefficients=np.array([0.0]), ridge_lam=1e-4)
        model = SurrogateModel(g=g, h=None, theta_bounds=(0.5, 1.5),
                               model=self.MODEL)
        from credkit.surrogate import save_model

        save_model(os.path.join(out, "surrogate.json"), model)
        draws = draw_prior(self.MODEL.prior, 10, 0)
        principle = PremiumPrinciple(kind=PrincipleKind.NET)
        estimates = [PremiumEstimate(value=v, std_error=0.0, ess=10.0)
                     for v in values]
        save_premiums_csv(os.path.join(out, "premiums.csv"),
                          [ph.id for ph in pf.members], estimates, principle,
                          draws)
        save_predictions_csv(os.path.join(out, "predictions.csv"),
                             [ph.id for ph in pf.members],
                             [v / 1.0 for v in values], [1.0, 1.0],
                             list(values))
        return pf

    def test_qq_of_identical_vectors_is_diagonal(self, tmp_path):
        out = str(tmp_path / "out")
        self.write_artifacts(out)
        cfg_path = write_config(tmp_path, {"seed": 1})
        assert main(["report", "--config", cfg_path, "--out", out]) == 0
        lines = read(os.path.join(out, "report", "qq.csv")).decode().splitlines()
        assert len(lines) == 3
        for ln in lines[1:]:
            a, b = ln.split(",")
            assert a == b

    def test_standardized_frequency_fixture(self, tmp_path):
        out = str(tmp_path / "out")
        self.write_artifacts(out)
        cfg_path = write_config(tmp_path, {"seed": 1})
        assert main(["report", "--config", cfg_path, "--out", out]) == 0
        lines = read(os.path.join(out, "report",
                                  "index_vs_frequency.csv")).decode().splitlines()
        assert lines[0] == "id,dim,std_frequency,index"
        by_id = {ln.split(",")[0]: ln.split(",") for ln in lines[1:]}
        # hand: sum y = 2 over three periods at mu = 0.5 -> 2 / 1.5
        assert float(by_id["hand"][2]) == pytest.approx(2.0 / 1.5, abs=1e-15)
        # missing periods drop out of both sums
        assert float(by_id["other"][2]) == pytest.approx(0.5, abs=1e-15)

    def test_oracle_no_data_rows_equal_manual(self, tmp_path):
        empty = Policyholder(id="empty", mu_per_dim=(0.7,), history=(
            Observation(1, 1, None, 1.0, Censor.MISSING),
        ))
        filled = Policyholder(id="filled", mu_per_dim=(1.0,), history=(
            Observation(1, 1, 2.0, 1.0, Censor.EXACT),
        ))
        pf = Portfolio(model=self.MODEL, members=(empty, filled))
        out = str(tmp_path / "out")
        os.makedirs(out)
        save_portfolio(pf, os.path.join(out, "portfolio.csv"))
        cfg_path = write_config(tmp_path, {
            "seed": 3, "K": 500, "model": self.MODEL.to_dict(),
            "principle": {"kind": "net"},
        })
        assert main(["oracle", "--config", cfg_path, "--out", out]) == 0
        prem = {r.id: r.value for r in
                load_premiums_csv(os.path.join(out, "premiums.csv"))}
        man = {r.id: r.value for r in
               load_premiums_csv(os.path.join(out, "manuals.csv"))}
        assert prem["empty"] == man["empty"]
        assert prem["filled"] != man["filled"]


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["validate", "--config", str(tmp_path / "absent.json")])
        assert code == 3

    def test_bad_config_key(self, tmp_path):
        cfg_path = write_config(tmp_path, {"seed": 1, "bogus": 2})
        assert main(["validate", "--config", cfg_path]) == 2

    def test_missing_seed_is_config_error(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"K": 10})
        assert main(["validate", "--config", cfg_path]) == 2
        assert main(["validate", "--config", cfg_path, "--seed", "4"]) == 0
        assert "config ok" in capsys.readouterr().out

    def test_validate_rejects_unresolvable_path(self, tmp_path):
        cfg_path = write_config(
            tmp_path, {"seed": 1,
                       "paths": {"portfolio": "nodir/pf.csv"}})
        assert main(["validate", "--config", cfg_path,
                     "--out", str(tmp_path)]) == 2

    def test_oracle_without_portfolio_file(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main(["oracle", "--config", cfg_path,
                     "--out", str(tmp_path / "empty")]) == 3

    def test_divergent_premium_is_numeric_error(self, tmp_path, capsys):
        data = dict(BASE_CONFIG,
                    scenario={"family": "ParetoLomax",
                              "prior": {"family": "Gamma", "mean": 1.0,
                                        "variance": 0.3},
                              "N": 10, "n": 3},
                    principle={"kind": "exponential", "alpha": 0.2})
        cfg_path = write_config(tmp_path, data)
        out = str(tmp_path / "out")
        assert main(["generate", "--config", cfg_path, "--out", out]) == 0
        assert main(["oracle", "--config", cfg_path, "--out", out]) == 4

    def test_bad_threads_flag(self, tmp_path):
        cfg_path = write_config(tmp_path, {"seed": 1})
        assert main(["validate", "--config", cfg_path, "--threads", "0"]) == 2


def test_module_entrypoint_help():
    proc = subprocess.run([sys.executable, "-m", "credkit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "pipeline" in proc.stdout


def test_console_script_help():
    proc = subprocess.run(["credkit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "generate" in proc.stdout
