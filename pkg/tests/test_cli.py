import csv
import io
import json
import math

import numpy as np
import pytest

from mfnash import cli
from mfnash.errors import ConfigError

CHEAP = {
    "mv_constant": {},
    "mv_state_dep": {},
    "lqr": {},
    "mfg_consistency": {"ode_dt": 1e-2},
    "verify_equilibrium": {"M": 500, "t": [0.0], "x": [1.0], "deviations": [1.0],
                           "epsilons": [0.1, 0.05]},
    "mfg_nash_sweep": {"M_mc": 40, "N_list": [4, 8], "epsilons": [0.1, 0.05]},
    "mf_error_sweep": {"M_mc": 40, "N_list": [2, 4]},
}

GOLDEN_HEADERS = {
    "mv_constant": "s,A,C,phi,A_exact,C_exact,phi_exact",
    "mv_state_dep": "s,A,C,phi_coef,A_exact,C_exact,phi_coef_exact",
    "lqr": "s,alpha,beta,phi_coef,alpha_riccati,beta_exact",
    "verify_equilibrium": ("t,x,v,epsilon,ratio,ratio_se,extrapolated_limit,extrapolated_se,"
                           "analytic_limit,verdict"),
    "mfg_consistency": "s,m,phi_T_s,alpha,beta",
    "mfg_nash_sweep": "N,epsilon,gap,gap_se,limiting_diff,d_N,d_N_se,verdict",
    "mf_error_sweep": "N,error,error_se,error_times_n_minus_1",
}


def write_config(tmp_path, experiment, name="cfg.toml", **over):
    d = cli.defaults(experiment)
    d.update(CHEAP[experiment])
    d.update(over)
    d["path"] = str(tmp_path / "out")
    text = cli.template(experiment)  # sanity: template is valid TOML for the same keys
    assert text.startswith("experiment = ")
    path = tmp_path / name
    path.write_text(json.dumps(d) if name.endswith(".json") else _toml(d))
    return path


def _toml(d):
    return "\n".join(f"{k} = {cli._toml_value(v)}" for k, v in d.items()) + "\n"


class TestListing:
    def test_seven_experiments_in_stable_order(self, capsys):
        assert cli.main(["list"]) == 0
        out = capsys.readouterr().out
        names = [line for line in out.splitlines() if not line.startswith(" ")]
        assert names == ["mv_constant", "mv_state_dep", "lqr", "verify_equilibrium",
                         "mfg_consistency", "mfg_nash_sweep", "mf_error_sweep"]
        assert [n for n, _, _ in cli.list_experiments()] == names

    @pytest.mark.parametrize("experiment", list(cli.EXPERIMENTS))
    def test_each_default_revalidates(self, experiment):
        d = cli.defaults(experiment)
        assert cli.validate(d) == cli.validate(cli.validate(d))

    @pytest.mark.parametrize("experiment", list(cli.EXPERIMENTS))
    def test_template_round_trips(self, experiment):
        raw = cli.tomllib.loads(cli.template(experiment))
        assert cli.validate(raw) == cli.validate(cli.defaults(experiment))

    def test_documented_defaults(self):
        d = cli.defaults("mfg_nash_sweep")
        assert d["N_list"] == [4, 16, 64, 256]
        assert d["M_mc"] == 2000 and d["seed"] == 42 and d["dt"] == 1e-2
        v = cli.defaults("verify_equilibrium")
        assert v["M"] == 100000 and v["ode_dt"] == 1e-3
        assert (v["r"], v["alpha"], v["sigma"], v["gamma"], v["T"]) == (0.05, 0.1, 0.2, 2.0, 1.0)


class TestValidation:
    def test_missing_gamma_names_key(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text('experiment = "mv_constant"\n[model]\nr = 0.05\nalpha = 0.1\n'
                        'sigma = 0.2\nT = 1.0\n')
        assert cli.main(["run", str(path)]) == 1
        err = capsys.readouterr().err
        assert "model.gamma" in err and "missing" in err

    def test_model_keys_have_no_silent_defaults(self):
        with pytest.raises(ConfigError, match="model.r"):
            cli.validate({"experiment": "mv_constant"})

    @pytest.mark.parametrize("raw,key", [
        ({"experiment": "nope"}, "experiment"),
        ({**{"experiment": "lqr"}, "a": 0.1, "b": 1, "sigma": 0.1, "gamma": 1, "T": 1,
          "bogus": 3}, "bogus"),
        ({"experiment": "lqr", "model": {"a": {"deep": 1}}}, "model.a"),
        ({"experiment": "lqr", "extra": {"a": 1}}, "extra"),
        ({"experiment": "lqr", "a": 0.1, "b": 1, "sigma": 0.1, "gamma": -1, "T": 1},
         "model.gamma"),
        ({"experiment": "lqr", "a": 0.1, "b": 1, "sigma": 0.1, "gamma": 1, "T": 1,
          "ode_dt": 0.3}, "numerics.ode_dt"),
        ({"experiment": "lqr", "a": "x", "b": 1, "sigma": 0.1, "gamma": 1, "T": 1}, "model.a"),
    ])
    def test_rejections_name_the_key(self, raw, key):
        with pytest.raises(ConfigError) as info:
            cli.validate(raw)
        assert str(info.value).startswith(key)

    def test_seed_rejected_for_deterministic_experiment(self, tmp_path, capsys):
        path = write_config(tmp_path, "mv_constant")
        assert cli.main(["run", str(path), "--seed", "3"]) == 1
        assert "--seed" in capsys.readouterr().err

    def test_verify_family_keys(self):
        d = cli.defaults("verify_equilibrium")
        d["family"] = "lqr"
        with pytest.raises(ConfigError, match="model.a"):
            cli.validate(d)

    def test_window_past_horizon(self):
        d = cli.defaults("mfg_nash_sweep")
        d["t"] = 0.95
        with pytest.raises(ConfigError, match="numerics.t"):
            cli.validate(d)


@pytest.mark.parametrize("experiment", list(cli.EXPERIMENTS))
def test_golden_csv_header(tmp_path, experiment):
    path = write_config(tmp_path, experiment)
    code = cli.main(["run", str(path), "--format", "csv"])
    assert code in (0, 2)
    raw = (tmp_path / "out" / "results.csv").read_bytes()
    assert b"\r" not in raw
    text = raw.decode("utf-8")
    assert text.splitlines()[0] == GOLDEN_HEADERS[experiment]
    rows = list(csv.reader(io.StringIO(text)))
    assert len(rows) > 1 and all(len(r) == len(rows[0]) for r in rows)
    assert cli.CSV_COLUMNS[experiment] == GOLDEN_HEADERS[experiment].split(",")


def test_mv_constant_json_matches_closed_form(tmp_path):
    path = write_config(tmp_path, "mv_constant")
    assert cli.main(["run", str(path)]) == 0
    res = json.loads((tmp_path / "out" / "results.json").read_text())
    phi = np.array(res["phi"])
    s = np.array(res["equilibrium"]["s"])
    r, alpha, sigma, gamma, T = 0.05, 0.1, 0.2, 2.0, 1.0
    exact = (alpha - r) / (gamma * sigma ** 2) * np.exp(-r * (T - s))
    assert np.max(np.abs(phi - exact)) <= 1e-10


def test_manifest_contents(tmp_path):
    path = write_config(tmp_path, "mfg_nash_sweep")
    cli.main(["run", str(path)])
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["seed"] == 42 and man["config"]["M_mc"] == 40
    assert len(man["version_hash"]) == 64
    assert set(man["outputs"]) == {"results.json"}
    assert man["verdict"] in ("PASS", "FAIL")
    assert math.isfinite(man["summary"]["analytic_limit"])


@pytest.mark.parametrize("experiment", ["verify_equilibrium", "mfg_nash_sweep", "mf_error_sweep",
                                        "mfg_consistency"])
def test_manifest_rerun_is_bitwise(tmp_path, experiment):
    path = write_config(tmp_path, experiment)
    cli.main(["run", str(path), "--threads", "1"])
    first = tmp_path / "out"
    man = json.loads((first / "manifest.json").read_text())
    name = next(iter(man["outputs"]))
    data = (first / name).read_bytes()
    again = tmp_path / "again"
    cli.main(["run", str(first / "manifest.json"), "--output", str(again), "--threads", "3"])
    assert (again / name).read_bytes() == data
    man2 = json.loads((again / "manifest.json").read_text())
    assert man2["outputs"] == man["outputs"]


def test_seed_override_changes_stochastic_output(tmp_path):
    path = write_config(tmp_path, "mf_error_sweep")
    cli.main(["run", str(path), "--seed", "7"])
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["seed"] == 7 and man["config"]["seed"] == 7


def test_perturbed_strategy_exits_two(tmp_path):
    path = write_config(tmp_path, "verify_equilibrium", M=100000, t=[0.0], x=[1.0],
                        deviations=[-0.5], perturbation=0.5,
                        epsilons=[0.08, 0.04, 0.02, 0.01])
    assert cli.main(["run", str(path)]) == 2
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["verdict"] == "FAIL" and man["summary"]["n_failed"] == 1


def test_template_subcommand_writes_file(tmp_path):
    out = tmp_path / "t.toml"
    assert cli.main(["template", "lqr", "--output", str(out)]) == 0
    assert cli.validate(cli.tomllib.loads(out.read_text()))["experiment"] == "lqr"


def test_compute_errors_exit_one(tmp_path, capsys):
    path = write_config(tmp_path, "mfg_consistency", a=0.0, Gamma2=1.0 / (
        0.25 * (1 - math.exp(-0.125)) / 0.125), ode_dt=1e-3)
    assert cli.main(["run", str(path)]) == 1
    assert "SingularConsistencyError" in capsys.readouterr().err
