"""Config-driven experiment runner.

A config is a TOML file (or a JSON object, including a previously written
manifest) holding ``experiment`` plus flat keys, optionally grouped one
level deep in ``[model]``, ``[numerics]`` and ``[output]`` tables::

    experiment = "mv_constant"

    [model]
    r = 0.05
    alpha = 0.1
    sigma = 0.2
    gamma = 2.0
    T = 1.0

Every run writes ``results.json`` or ``results.csv`` and ``manifest.json``
(resolved config, seed, source hash, output hashes and a summary) into
the output directory.  Exit status: 0 complete/PASS, 2 any FAIL, 1 errors.
"""

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import lq_equilibria as lq
from . import mfg_lqg as game
from .cost import REPORT_CSV_COLUMNS, reports_to_csv, verify_equilibrium
from .errors import ConfigError, MFNashError
from .mf_sde import TimeGrid
from .rng import set_default_threads

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REQUIRED = object()
SECTIONS = ("model", "numerics", "output")


@dataclass(frozen=True)
class Key:
    kind: str            # float | int | str | floats | ints | choice
    default: object = REQUIRED
    section: str = "numerics"
    check: object = None  # callable(value) -> error message or None
    choices: tuple = ()


def _positive(v):
    vals = v if isinstance(v, list) else [v]
    return None if all(x > 0 for x in vals) else "must be positive"


def _nonneg(v):
    vals = v if isinstance(v, list) else [v]
    return None if all(x >= 0 for x in vals) else "must be non-negative"


def _atleast2(v):
    vals = v if isinstance(v, list) else [v]
    return None if all(x >= 2 for x in vals) else "must be >= 2"


def _nonempty(v):
    return None if len(v) > 0 else "must be non-empty"


def _decreasing_pos(v):
    if not v:
        return "must be non-empty"
    if any(x <= 0 for x in v):
        return "must be positive"
    if any(a <= b for a, b in zip(v, v[1:])):
        return "must be strictly decreasing"
    return None


def _model(kind, default, check=None):
    return Key(kind, default, "model", check)


MV_KEYS = {"r": _model("float", 0.05), "alpha": _model("float", 0.1),
           "sigma": _model("float", 0.2), "gamma": _model("float", 2.0, _positive),
           "T": _model("float", 1.0, _positive)}
LQR_KEYS = {"a": _model("float", 0.2), "b": _model("float", 0.5), "sigma": _model("float", 0.3),
            "gamma": _model("float", 1.0, _positive), "T": _model("float", 1.0, _positive)}
GAME_KEYS = {"a": _model("float", 0.2), "b": _model("float", 0.5), "sigma": _model("float", 0.3),
             "gamma": _model("float", 1.0, _positive), "Gamma1": _model("float", 0.5),
             "Gamma2": _model("float", 0.5), "T": _model("float", 1.0, _positive),
             "y0": _model("float", 1.0)}

OUTPUT_KEYS = {"path": Key("str", "results", "output"),
               "format": Key("choice", "json", "output", choices=("json", "csv"))}
ODE = {"ode_dt": Key("float", 1e-3, check=_positive)}
SIM = {"dt": Key("float", 1e-2, check=_positive), "seed": Key("int", 42, check=_nonneg)}

VERIFY_KEYS = {
    "family": Key("choice", "mv_constant", "model",
                  choices=("mv_constant", "mv_state_dep", "lqr")),
    **{k: Key(v.kind, REQUIRED, "model", v.check) for k, v in MV_KEYS.items()},
    **ODE, **SIM,
    "M": Key("int", 100000, check=_atleast2),
    "t": Key("floats", [0.0, 0.3, 0.6], check=_nonneg),
    "x": Key("floats", [0.5, 1.0, 2.0], check=_nonempty),
    "deviations": Key("floats", [-1.0, -0.5, 0.5, 1.0], check=_nonempty),
    "epsilons": Key("floats", [0.08, 0.04, 0.02, 0.01], check=_decreasing_pos),
    "perturbation": Key("float", 0.0),
    "tol_se": Key("float", 3.0, check=_positive),
}
# Which model keys each verification family requires.
VERIFY_FAMILY_KEYS = {"mv_constant": tuple(MV_KEYS), "mv_state_dep": tuple(MV_KEYS),
                      "lqr": tuple(LQR_KEYS)}
VERIFY_KEYS.update({k: Key(v.kind, REQUIRED, "model", v.check) for k, v in LQR_KEYS.items()
                    if k not in VERIFY_KEYS})

EXPERIMENTS = {
    "mv_constant": {**MV_KEYS, **ODE},
    "mv_state_dep": {**MV_KEYS, **ODE},
    "lqr": {**LQR_KEYS, **ODE},
    "verify_equilibrium": VERIFY_KEYS,
    "mfg_consistency": {**GAME_KEYS, **ODE},
    "mfg_nash_sweep": {**GAME_KEYS, **SIM,
                       "M_mc": Key("int", 2000, check=_atleast2),
                       "N_list": Key("ints", [4, 16, 64, 256], check=_atleast2),
                       "epsilons": Key("floats", [0.1], check=_decreasing_pos),
                       "t": Key("float", 0.0, check=_nonneg),
                       "x": Key("float", 1.0),
                       "deviation": Key("float", 1.0)},
    "mf_error_sweep": {**GAME_KEYS, **SIM,
                       "M_mc": Key("int", 2000, check=_atleast2),
                       "N_list": Key("ints", [4, 16, 64, 256], check=_atleast2)},
}
for _schema in EXPERIMENTS.values():
    _schema.update(OUTPUT_KEYS)

# Verification defaults per family (the family's model keys are required in a config).
_FAMILY_DEFAULTS = {"mv_constant": {k: v.default for k, v in MV_KEYS.items()},
                    "mv_state_dep": {k: v.default for k, v in MV_KEYS.items()},
                    "lqr": {k: v.default for k, v in LQR_KEYS.items()}}


def defaults(experiment):
    """Documented default configuration of ``experiment`` (flat dict)."""
    if experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {experiment!r}")
    out = {"experiment": experiment}
    for k, spec in EXPERIMENTS[experiment].items():
        if spec.default is not REQUIRED:
            out[k] = list(spec.default) if isinstance(spec.default, list) else spec.default
    if experiment == "verify_equilibrium":
        out.update(_FAMILY_DEFAULTS[out["family"]])
    return out


def required_keys(experiment, family=None):
    schema = EXPERIMENTS[experiment]
    if experiment == "verify_equilibrium":
        return list(VERIFY_FAMILY_KEYS[family or "mv_constant"])
    return [k for k, s in schema.items() if s.section == "model"]


def _coerce(key, spec, value):
    def num(x, integer):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(key, f"expected a number, got {x!r}")
        if integer:
            if float(x) != int(x):
                raise ConfigError(key, f"expected an integer, got {x!r}")
            return int(x)
        if not math.isfinite(float(x)):
            raise ConfigError(key, "must be finite")
        return float(x)

    if spec.kind in ("float", "int"):
        return num(value, spec.kind == "int")
    if spec.kind in ("floats", "ints"):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list of numbers, got {value!r}")
        return [num(x, spec.kind == "ints") for x in value]
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    if spec.kind == "choice" and value not in spec.choices:
        raise ConfigError(key, f"must be one of {list(spec.choices)}, got {value!r}")
    return value


def flatten(raw):
    """Merge the optional one-level tables into a flat dict."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a table")
    flat = {}
    for k, v in raw.items():
        if k in SECTIONS and isinstance(v, dict):
            for kk, vv in v.items():
                if isinstance(vv, dict):
                    raise ConfigError(f"{k}.{kk}", "nesting deeper than one level")
                if kk in flat:
                    raise ConfigError(f"{k}.{kk}", "key given twice")
                flat[kk] = vv
        elif isinstance(v, dict):
            raise ConfigError(k, f"unknown table; allowed tables are {list(SECTIONS)}")
        else:
            if k in flat:
                raise ConfigError(k, "key given twice")
            flat[k] = v
    return flat


def validate(raw):
    """Resolve a raw config into a complete flat dict, or raise ConfigError."""
    flat = flatten(raw)
    exp = flat.pop("experiment", None)
    if exp is None:
        raise ConfigError("experiment", "missing required key")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {exp!r}; see `list`")
    schema = EXPERIMENTS[exp]
    unknown = sorted(set(flat) - set(schema))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key for experiment {exp!r}")
    out = {"experiment": exp}
    family = None
    if exp == "verify_equilibrium":
        family = _coerce("family", schema["family"], flat.get("family", "mv_constant"))
    need = set(required_keys(exp, family))
    for k, spec in schema.items():
        where = f"{spec.section}.{k}"
        if k in flat:
            val = _coerce(where, spec, flat[k])
        elif k in need or (spec.default is REQUIRED and spec.section != "model"):
            raise ConfigError(where, "missing required key")
        elif spec.default is REQUIRED:
            continue
        else:
            val = list(spec.default) if isinstance(spec.default, list) else spec.default
        if spec.check is not None:
            msg = spec.check(val)
            if msg:
                raise ConfigError(where, msg)
        out[k] = val
    if exp == "verify_equilibrium":
        extra = [k for k in out if k != "experiment" and schema[k].section == "model" and k != "family"
                 and k not in need]
        if extra:
            raise ConfigError(f"model.{extra[0]}", f"not a parameter of family {family!r}")
    _check_ranges(exp, out)
    return out


def _check_ranges(exp, c):
    def grid_check(key, t0, T, dt):
        try:
            TimeGrid.from_dt(t0, T, dt)
        except MFNashError as e:
            raise ConfigError(key, str(e)) from None

    if "ode_dt" in c:
        grid_check("numerics.ode_dt", 0.0, c["T"], c["ode_dt"])
    if "dt" in c:
        grid_check("numerics.dt", 0.0, c["T"], c["dt"])
    mv = exp in ("mv_constant", "mv_state_dep") or c.get("family", "").startswith("mv")
    if mv and c["sigma"] == 0:
        raise ConfigError("model.sigma", "must be nonzero")
    if exp.startswith("mfg") or exp == "mf_error_sweep":
        for k in ("Gamma1", "Gamma2"):
            if c[k] == 0:
                raise ConfigError(f"model.{k}", "must be nonzero")
    if exp == "verify_equilibrium":
        dt = c["dt"]
        if c["epsilons"][-1] < dt * (1 - 1e-9):
            raise ConfigError("numerics.epsilons", f"smallest epsilon is below dt = {dt}")
        for t in c["t"]:
            if t + c["epsilons"][0] > c["T"] + 1e-12:
                raise ConfigError("numerics.t", f"window [{t}, {t}+{c['epsilons'][0]}] exceeds T")
        if c["family"] == "mv_state_dep" and any(x <= 0 for x in c["x"]):
            raise ConfigError("numerics.x", "state-dependent risk aversion needs x > 0")
    if exp == "mfg_nash_sweep":
        if c["t"] + c["epsilons"][0] > c["T"] + 1e-12:
            raise ConfigError("numerics.t", "t + max(epsilons) exceeds T")
        if c["epsilons"][-1] < c["dt"] * (1 - 1e-9):
            raise ConfigError("numerics.epsilons", "smallest epsilon is below dt")
    if exp == "mf_error_sweep" and len(c["N_list"]) < 2:
        raise ConfigError("numerics.N_list", "needs at least two entries")


def load_config(path):
    """Read a TOML or JSON config (a manifest's ``config`` entry is used if present)."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read config: {e.strerror}") from None
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON: {e}") from None
        if isinstance(raw, dict) and isinstance(raw.get("config"), dict):
            raw = raw["config"]
    else:
        try:
            raw = tomllib.loads(text.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(str(path), f"invalid TOML: {e}") from None
    return raw


def source_hash():
    """SHA-256 over the package sources, in sorted file order."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# experiments; each returns (json_payload, csv_text, summary, verdict)


def _csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def _mv_params(c, mode="constant"):
    return lq.MVParams(c["r"], c["alpha"], c["sigma"], c["gamma"], c["T"], mode)


def _lqr_params(c):
    return lq.LQRParams(c["a"], c["b"], c["sigma"], c["gamma"], c["T"])


def _game_params(c, N=16):
    return game.GameParams(c["a"], c["b"], c["sigma"], c["gamma"], c["Gamma1"], c["Gamma2"],
                           c["T"], c["y0"], N)


def _verdict(ok):
    return "PASS" if ok else "FAIL"


def run_mv_constant(c):
    p = _mv_params(c)
    grid = TimeGrid.from_dt(0.0, p.T, c["ode_dt"])
    eq = lq.solve_mv_constant(p, grid)
    s = grid.points
    cf = eq.closed_form
    phi = eq.feedback_gain(s)
    A_x, C_x, phi_x = cf["A"](s), cf["C"](s), cf["phi"](s)
    err = {"A": float(np.max(np.abs(eq.A - A_x))), "C": float(np.max(np.abs(eq.C - C_x))),
           "phi": float(np.max(np.abs(phi - phi_x)))}
    ok = err["A"] <= 1e-8 and err["C"] <= 1e-8 and err["phi"] <= 1e-10
    payload = {"equilibrium": eq.to_dict(), "phi": phi.tolist(), "phi_exact": phi_x.tolist(),
               "max_abs_error": err}
    rows = zip(s, eq.A, eq.C, phi, A_x, C_x, phi_x)
    csv_text = _csv(["s", "A", "C", "phi", "A_exact", "C_exact", "phi_exact"], rows)
    return payload, csv_text, {"max_abs_error": err, "phi_0": float(phi[0])}, _verdict(ok)


def run_mv_state_dep(c):
    p = _mv_params(c, "inverse_state")
    grid = TimeGrid.from_dt(0.0, p.T, c["ode_dt"])
    eq = lq.solve_mv_state_dep(p, grid)
    s = grid.points
    cf = eq.closed_form
    gain = eq.feedback_gain(s)
    A_x, C_x, g_x = cf["A"](s), cf["C"](s), cf["phi_gain"](s)
    err = {"A": float(np.max(np.abs(eq.A - A_x))), "C": float(np.max(np.abs(eq.C - C_x))),
           "phi_coef": float(np.max(np.abs(gain - g_x)))}
    ok = err["A"] <= 1e-8 and err["C"] <= 1e-8 and err["phi_coef"] <= 1e-10
    payload = {"equilibrium": eq.to_dict(), "phi_coef": gain.tolist(),
               "phi_coef_exact": g_x.tolist(), "max_abs_error": err}
    rows = zip(s, eq.A, eq.C, gain, A_x, C_x, g_x)
    csv_text = _csv(["s", "A", "C", "phi_coef", "A_exact", "C_exact", "phi_coef_exact"], rows)
    return payload, csv_text, {"max_abs_error": err, "phi_coef_0": float(gain[0])}, _verdict(ok)


def run_lqr(c):
    p = _lqr_params(c)
    grid = TimeGrid.from_dt(0.0, p.T, c["ode_dt"])
    eq = lq.solve_lqr(p, grid)
    s = grid.points
    ric = lq.solve_lqr_riccati_direct(p, grid)
    beta_x = lq.lqr_beta(p, s)
    gain = eq.feedback_gain(s)
    err = {"alpha_vs_riccati": float(np.max(np.abs(eq.A - ric))),
           "beta": float(np.max(np.abs(eq.C - beta_x)))}
    ok = err["alpha_vs_riccati"] <= 1e-7 and err["beta"] <= 1e-8
    payload = {"equilibrium": eq.to_dict(), "phi_coef": gain.tolist(),
               "alpha_riccati": ric.tolist(), "max_abs_error": err}
    rows = zip(s, eq.A, eq.C, gain, ric, beta_x)
    csv_text = _csv(["s", "alpha", "beta", "phi_coef", "alpha_riccati", "beta_exact"], rows)
    return payload, csv_text, {"max_abs_error": err, "phi_coef_0": float(gain[0])}, _verdict(ok)


def build_equilibrium(c):
    ode_grid = TimeGrid.from_dt(0.0, c["T"], c["ode_dt"])
    fam = c["family"]
    if fam == "mv_constant":
        return lq.solve_mv_constant(_mv_params(c), ode_grid)
    if fam == "mv_state_dep":
        return lq.solve_mv_state_dep(_mv_params(c, "inverse_state"), ode_grid)
    return lq.solve_lqr(_lqr_params(c), ode_grid)


def run_verify_equilibrium(c):
    eq = build_equilibrium(c)
    dyn, cost = eq.model()
    grid = TimeGrid.from_dt(0.0, c["T"], c["dt"])
    pert = c["perturbation"]
    uhat = eq.phi.shifted(pert) if pert else eq.phi
    reports = []
    for t in c["t"]:
        for x in c["x"]:
            base = uhat.value(t, x)
            devs = [base + d for d in c["deviations"]]
            chk = verify_equilibrium(dyn, cost, uhat, t, x, devs, c["epsilons"], grid, c["M"],
                                     c["seed"], c["tol_se"],
                                     equilibrium=None if pert else eq)
            reports.extend(chk.reports)
    ok = all(r.passed for r in reports)
    analytic_ok = None
    if not pert:
        analytic_ok = all(abs(r.extrapolated_limit - r.analytic_limit)
                          <= c["tol_se"] * r.extrapolated_std_error for r in reports)
    payload = {"verdict": _verdict(ok), "tol_se": c["tol_se"],
               "analytic_within_tol": analytic_ok, "reports": [r.to_dict() for r in reports]}
    summary = {"n_reports": len(reports), "n_failed": sum(not r.passed for r in reports),
               "analytic_within_tol": analytic_ok,
               "max_extrapolated_limit": max(r.extrapolated_limit for r in reports)}
    return payload, reports_to_csv(reports), summary, _verdict(ok)


def run_mfg_consistency(c):
    p = _game_params(c)
    grid = TimeGrid.from_dt(0.0, p.T, c["ode_dt"])
    sol = game.solve_consistency(p, grid)
    s = grid.points
    phi_T = sol.phi_kernel(p.T, s)
    lim = sol.limiting
    residual = sol.fixed_point_residual()
    mean_gap = abs(sol.mean_traj[-1] - sol.xbar_T)
    ok = residual <= 1e-8 and mean_gap <= 1e-8
    payload = {**sol.to_dict(), "phi_T_s": phi_T.tolist(), "alpha": lim.alpha.tolist(),
               "beta": lim.beta.tolist(), "fixed_point_residual": residual,
               "terminal_mean_gap": mean_gap}
    rows = zip(s, sol.mean_traj, phi_T, lim.alpha, lim.beta)
    csv_text = _csv(["s", "m", "phi_T_s", "alpha", "beta"], rows)
    summary = {"xbar_T": sol.xbar_T, "mass": sol.mass, "fixed_point_residual": residual}
    return payload, csv_text, summary, _verdict(ok)


def run_mfg_nash_sweep(c):
    p = _game_params(c, N=max(c["N_list"]))
    grid = TimeGrid.from_dt(0.0, p.T, c["dt"])
    rep = game.nash_gap_sweep(p, c["deviation"], c["t"], c["N_list"], c["epsilons"], grid,
                              c["M_mc"], c["seed"], x=c["x"])
    slope_ok = (len(set(c["N_list"])) < 2 or not math.isfinite(rep.slope_N)
                or abs(rep.slope_N + 0.5) <= 0.2)
    ok = rep.passed and slope_ok
    summary = {"C": rep.C, "slope_N": rep.slope_N, "slope_N_ci": list(rep.slope_N_ci),
               "cells_passed": rep.passed, "slope_within_band": slope_ok,
               "analytic_limit": rep.analytic_limit, "ansatz_limit": rep.ansatz_limit}
    payload = {**rep.to_dict(), "slope_within_band": slope_ok, "verdict": _verdict(ok)}
    return payload, rep.to_csv(), summary, _verdict(ok)


def run_mf_error_sweep(c):
    p = _game_params(c, N=max(c["N_list"]))
    grid = TimeGrid.from_dt(0.0, p.T, c["dt"])
    rep = game.mean_field_error_sweep(p, c["N_list"], grid, c["M_mc"], c["seed"])
    if math.isfinite(rep.slope):
        verdict = _verdict(abs(rep.slope + 1.0) <= 0.15)
    else:
        verdict = "n/a"
    summary = {"slope": rep.slope, "slope_ci": list(rep.slope_ci)}
    return {**rep.to_dict(), "verdict": verdict}, rep.to_csv(), summary, verdict


RUNNERS = {"mv_constant": run_mv_constant, "mv_state_dep": run_mv_state_dep, "lqr": run_lqr,
           "verify_equilibrium": run_verify_equilibrium, "mfg_consistency": run_mfg_consistency,
           "mfg_nash_sweep": run_mfg_nash_sweep, "mf_error_sweep": run_mf_error_sweep}

CSV_COLUMNS = {
    "mv_constant": ["s", "A", "C", "phi", "A_exact", "C_exact", "phi_exact"],
    "mv_state_dep": ["s", "A", "C", "phi_coef", "A_exact", "C_exact", "phi_coef_exact"],
    "lqr": ["s", "alpha", "beta", "phi_coef", "alpha_riccati", "beta_exact"],
    "verify_equilibrium": REPORT_CSV_COLUMNS,
    "mfg_consistency": ["s", "m", "phi_T_s", "alpha", "beta"],
    "mfg_nash_sweep": game.NASH_CSV_COLUMNS,
    "mf_error_sweep": ["N", "error", "error_se", "error_times_n_minus_1"],
}


def _sha(data):
    return hashlib.sha256(data).hexdigest()


def run_experiment(config, output=None, fmt=None):
    """Run a validated config; returns ``(exit_code, manifest)``."""
    c = dict(config)
    if output is not None:
        c["path"] = str(output)
    if fmt is not None:
        c["format"] = fmt
    c = validate(c)
    payload, csv_text, summary, verdict = RUNNERS[c["experiment"]](c)
    out_dir = Path(c["path"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if c["format"] == "csv":
        name, data = "results.csv", csv_text.encode("utf-8")
    else:
        name = "results.json"
        data = (json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n").encode()
    (out_dir / name).write_bytes(data)
    manifest = {"experiment": c["experiment"], "config": c, "seed": c.get("seed"),
                "package_version": __version__, "version_hash": source_hash(),
                "outputs": {name: _sha(data)}, "summary": summary, "verdict": verdict}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return (2 if verdict == "FAIL" else 0), manifest


def list_experiments():
    """``(name, required keys, defaults)`` in a fixed order."""
    return [(name, required_keys(name), defaults(name)) for name in EXPERIMENTS]


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def template(experiment):
    """TOML text of the default config for ``experiment``."""
    d = defaults(experiment)
    schema = EXPERIMENTS[experiment]
    lines = [f"experiment = {_toml_value(experiment)}"]
    for sec in SECTIONS:
        keys = [k for k in d if k != "experiment" and schema[k].section == sec]
        if keys:
            lines += ["", f"[{sec}]"] + [f"{k} = {_toml_value(d[k])}" for k in keys]
    return "\n".join(lines) + "\n"


def _parser():
    ap = argparse.ArgumentParser(prog="mfnash", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config (TOML or JSON manifest)")
    r.add_argument("config")
    r.add_argument("--output", help="output directory (overrides output.path)")
    r.add_argument("--format", choices=("json", "csv"), help="results format")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--threads", type=int, help="worker threads for noise generation")
    sub.add_parser("list", help="list experiments, required keys and defaults")
    t = sub.add_parser("template", help="print or write a default config")
    t.add_argument("experiment")
    t.add_argument("--output", help="file to write instead of stdout")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "list":
            for name, req, d in list_experiments():
                print(f"{name}")
                print(f"  required: {', '.join(req) if req else '(none)'}")
                print(f"  defaults: {json.dumps({k: v for k, v in d.items() if k != 'experiment'})}")
            return 0
        if args.command == "template":
            text = template(args.experiment)
            if args.output:
                Path(args.output).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads", "must be >= 1")
            set_default_threads(args.threads)
        raw = flatten(load_config(args.config))
        if args.seed is not None:
            exp = raw.get("experiment")
            if exp in EXPERIMENTS and "seed" not in EXPERIMENTS[exp]:
                raise ConfigError("--seed", f"experiment {exp!r} is deterministic and takes no seed")
            raw["seed"] = args.seed
        code, manifest = run_experiment(raw, args.output, args.format)
        print(json.dumps({"experiment": manifest["experiment"], "verdict": manifest["verdict"],
                          "outputs": manifest["outputs"], "summary": manifest["summary"]}))
        return code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except MFNashError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
