"""Command line entry points: estimate, diagnose, simulate, crosstab.

Runs are reproducible by construction. The effective configuration is the
merge of built-in defaults, then the config file (TOML, or JSON), then
command line flags; its SHA-256 hash (first 12 hex digits) and the seed
are embedded in every output file, and re-running with identical inputs
writes byte-identical outputs. CSV outputs are RFC 4180 with headers; a
single leading '# config_hash=... seed=...' comment line carries the
provenance (readers that object to comments can skip the first line).

Covariate columns in the input CSV are handled in two ways: columns named
under [prior].covariates must be constant per row unit and enter the prior
location index for alpha; all other covariate columns are treated as
strictly exogenous outcome regressors and partialled out before
estimation. Sequentially exogenous regressors (lagged outcomes and the
like) are NOT supported by the built-in partialling; supply residualized
outcomes, or a gamma estimated by an appropriate external method, instead.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .criteria import ShrinkageProblem, WeightSpec
from .estimators import (
    ConstantMu,
    CovariateIndex,
    ls_estimate,
    moment_lambda_b,
    one_way_shrink,
    oneway_sigma2,
    partial_out_covariates,
    posterior_mean,
    projected_one_way_shrink,
    sigma2_estimate,
)
from .graph import (
    EigenSolverError,
    GraphError,
    PanelError,
    build_graph,
    connectivity_report,
    drop_isolated_units,
    extract_largest_component,
    read_panel_csv,
)
from .hyperopt import GridSpec, _log_axis, select
from .simulate import DESIGNS, DesignParams, run_experiment, quintile_crosstab
from .sparse_linalg import SolverConfig, SolverError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4


class ConfigError(ValueError):
    """Bad configuration file or flag combination."""


_SOLVER_DEFAULTS = {
    "rel_tol": 1e-8,
    "max_iter": 0,
    "num_probes": 64,
    "probe_kind": "gaussian",
    "probe_seed": None,
}

_GRID_DEFAULTS = {
    "lambda_min": 1e-3,
    "lambda_max": 1e3,
    "num_lambda": 25,
    "phi_max": 0.9,
    "num_phi": 15,
    "mu": "concentrated",
    "refine_rounds": 1,
    "refine_density": 3,
}

_GRID_COARSE = dict(_GRID_DEFAULTS, num_lambda=7, num_phi=5)

_DESIGN_KEYS = {
    "preset", "n_reps", "estimators",
    "r", "c", "s", "T", "pi_match", "pi_mob",
    "alpha_dist", "beta_dist", "sigma_alpha2", "sigma_beta2", "sigma2",
}


def _defaults(command: str) -> dict:
    common = {"seed": 0, "threads": 0, "out_dir": "."}
    if command == "estimate":
        return {
            "input": None,
            **common,
            "criterion": "ure",
            "estimator": "eb",
            "weight": "all",
            "sigma2": None,
            "drop_isolated": False,
            "largest_component": False,
            "solver": dict(_SOLVER_DEFAULTS),
            "grid": dict(_GRID_DEFAULTS),
            "prior": {"covariates": []},
        }
    if command == "diagnose":
        return {
            "input": None,
            **common,
            "drop_isolated": False,
            "largest_component": False,
        }
    if command == "simulate":
        return {
            **common,
            "weight": "beta",
            "solver": {**_SOLVER_DEFAULTS, "rel_tol": 1e-6, "num_probes": 16},
            "grid": dict(_GRID_COARSE),
            "design": {
                "preset": "1",
                "n_reps": 3,
                "estimators": ["ls", "eb_ure", "eb_1way", "oracle"],
            },
        }
    if command == "crosstab":
        return {"input_a": None, "input_b": None, "seed": 0, "out_dir": "."}
    raise ValueError(command)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r} as TOML")


def _render_toml(cfg: dict) -> str:
    lines = []
    sections = []
    for k, v in cfg.items():
        if isinstance(v, dict):
            sections.append((k, v))
        elif v is None:
            lines.append(f"# {k} is unset")
        else:
            lines.append(f"{k} = {_toml_value(v)}")
    for name, sec in sections:
        lines.append("")
        lines.append(f"[{name}]")
        for k, v in sec.items():
            if v is None:
                lines.append(f"# {k} is unset")
            else:
                lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _load_config_file(path: str) -> dict:
    raw = Path(path).read_bytes()
    if path.endswith(".json"):
        try:
            cfg = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    else:
        import tomli

        try:
            cfg = tomli.loads(raw.decode("utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config root must be a table/object")
    return cfg


def _merge_config(command: str, file_cfg: dict, flags: dict) -> dict:
    cfg = _defaults(command)
    section_keys = {k for k, v in cfg.items() if isinstance(v, dict)}
    if command == "simulate":
        design_allowed = _DESIGN_KEYS
    for key, val in file_cfg.items():
        if key in section_keys:
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table")
            allowed = design_allowed if key == "design" else set(cfg[key])
            unknown = set(val) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
            cfg[key].update(val)
        elif key in cfg:
            cfg[key] = val
        else:
            raise ConfigError(f"unknown config key: {key!r}")
    for key, val in flags.items():
        if val is None:
            continue
        if key not in cfg:
            raise ConfigError(f"flag does not apply to {command}: {key}")
        cfg[key] = val
    return cfg


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def config_hash(cfg: dict) -> str:
    """First 12 hex digits of the SHA-256 of the effective config.

    out_dir is excluded: it moves the files, it does not change them."""
    hashed = {k: v for k, v in cfg.items() if k != "out_dir"}
    canon = json.dumps(_jsonable(hashed), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _meta_line(chash: str, seed) -> str:
    return f"# config_hash={chash} seed={seed}"


def _write_csv(path, header, rows, chash, seed):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_meta_line(chash, seed) + "\r\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, payload: dict):
    Path(path).write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _fmt(v) -> str:
    return repr(float(v))


def _resolve_threads(threads: int) -> int:
    if threads and threads > 0:
        return threads
    return os.cpu_count() or 1


def _solver_from_config(sec: dict, seed: int) -> SolverConfig:
    probe_seed = sec.get("probe_seed")
    return SolverConfig(
        rel_tol=float(sec["rel_tol"]),
        max_iter=int(sec["max_iter"]),
        num_probes=int(sec["num_probes"]),
        probe_kind=str(sec["probe_kind"]),
        probe_seed=int(seed if probe_seed is None else probe_seed),
    )


def _grid_from_config(sec: dict) -> GridSpec:
    lo, hi, num = float(sec["lambda_min"]), float(sec["lambda_max"]), int(sec["num_lambda"])
    if not 0 < lo <= hi:
        raise ConfigError("grid needs 0 < lambda_min <= lambda_max")
    axis = _log_axis(lo, hi, num) if lo < hi else (lo,)
    phi_max, num_phi = float(sec["phi_max"]), int(sec["num_phi"])
    if not 0 <= phi_max < 1:
        raise ConfigError("grid needs 0 <= phi_max < 1")
    phi = tuple(np.linspace(-phi_max, phi_max, num_phi)) if phi_max > 0 else (0.0,)
    mu = sec["mu"]
    if not isinstance(mu, str):
        mu = float(mu)
    return GridSpec(
        lambda_a=axis,
        lambda_b=axis,
        phi=phi,
        mu=mu,
        refine_rounds=int(sec["refine_rounds"]),
        refine_density=int(sec["refine_density"]),
    )


def _csv_x_names(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = next(csv.reader(fh))
    return [h.strip() for h in header[4:]]


def _preprocess(panel, cfg):
    """Apply --drop-isolated and --largest-component; track original ids."""
    row_ids = np.arange(1, panel.r + 1, dtype=np.int64)
    col_ids = np.arange(1, panel.c + 1, dtype=np.int64)
    steps = []
    if cfg.get("drop_isolated"):
        panel, cmap = drop_isolated_units(panel)
        row_ids, col_ids = row_ids[cmap.row_ids - 1], col_ids[cmap.col_ids - 1]
        steps.append("drop_isolated")
    if cfg.get("largest_component"):
        panel, cmap = extract_largest_component(panel)
        row_ids, col_ids = row_ids[cmap.row_ids - 1], col_ids[cmap.col_ids - 1]
        steps.append("largest_component")
    return panel, row_ids, col_ids, steps


def _unit_means(i_idx: np.ndarray, col: np.ndarray, r: int) -> np.ndarray:
    counts = np.bincount(i_idx, minlength=r)
    return np.bincount(i_idx, weights=col, minlength=r) / counts


def cmd_estimate(cfg: dict) -> int:
    if not cfg.get("input"):
        raise ConfigError("estimate needs --input (or 'input' in the config)")
    chash = config_hash(cfg)
    seed = int(cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = read_panel_csv(cfg["input"])
    x_names = _csv_x_names(cfg["input"]) if panel.x is not None else []
    panel, row_ids, col_ids, steps = _preprocess(panel, cfg)

    prior_names = list(cfg.get("prior", {}).get("covariates", []))
    unknown = [nm for nm in prior_names if nm not in x_names]
    if unknown:
        raise ConfigError(
            f"[prior].covariates names {unknown} not among covariate columns {x_names}"
        )
    prior_idx = [x_names.index(nm) for nm in prior_names]
    outcome_idx = [k for k in range(len(x_names)) if k not in prior_idx]

    solver_cfg = _solver_from_config(cfg["solver"], seed)
    gamma = None
    if outcome_idx and panel.x is not None:
        sub = dc_replace(panel, x=panel.x[:, outcome_idx])
        Y, gamma = partial_out_covariates(sub, config=solver_cfg)
    else:
        Y = panel.y.copy()

    graph = build_graph(dc_replace(panel, x=None))
    prior = ConstantMu()
    if prior_idx:
        cols = [_unit_means(graph.i_idx, panel.x[:, k], graph.r) for k in prior_idx]
        Z_a = np.column_stack([np.ones(graph.r)] + cols)
        prior = CovariateIndex(Z_a=Z_a)

    weight = WeightSpec(cfg["weight"])
    sigma2 = cfg.get("sigma2")
    sigma2 = None if sigma2 is None else float(sigma2)
    estimator = cfg["estimator"]
    threads = _resolve_threads(int(cfg["threads"]))

    selection: dict = {"estimator": estimator, "criterion": None}
    if estimator == "eb":
        problem = ShrinkageProblem(graph, Y, sigma2=sigma2, solver=solver_cfg)
        sel = select(
            problem,
            criterion=cfg["criterion"],
            grid=_grid_from_config(cfg["grid"]),
            weight=weight,
            prior=prior,
            trace_mode="auto",
            threads=threads,
        )
        post_prior = prior.with_delta(sel.delta) if isinstance(prior, CovariateIndex) else prior
        result = posterior_mean(
            graph, Y, sel.hyperparams, prior=post_prior, sigma2=problem.sigma2, config=solver_cfg
        )
        selection.update(sel.to_dict())
        selection["criterion"] = sel.criterion
        sigma2_used = problem.sigma2
        alpha_rows = list(zip(row_ids, result.alpha_hat))
        beta_rows = list(zip(col_ids, result.beta_hat))
    elif estimator == "ls":
        result = ls_estimate(graph, Y, solver_cfg)
        sigma2_used = sigma2 if sigma2 is not None else sigma2_estimate(graph, Y, ls=result)
        alpha_rows = list(zip(row_ids, result.alpha_hat))
        beta_rows = list(zip(col_ids, result.beta_hat))
    elif estimator in ("oneway", "projoneway"):
        s2 = sigma2 if sigma2 is not None else oneway_sigma2(graph, Y)
        try:
            lam = moment_lambda_b(graph, Y, s2)
        except ValueError:
            lam = float(graph.d_b.sum())
            log.warning("moment rule found no signal variance; applying full shrinkage")
        if estimator == "oneway":
            beta = one_way_shrink(graph, Y, lam)
        else:
            beta = projected_one_way_shrink(graph, Y, lam, solver_cfg)
        selection["lambda_b"] = lam
        sigma2_used = s2
        alpha_rows = []
        beta_rows = list(zip(col_ids, beta))
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")

    est_path = out_dir / "estimates.csv"
    rows = [("alpha", int(uid), _fmt(v)) for uid, v in alpha_rows]
    rows += [("beta", int(uid), _fmt(v)) for uid, v in beta_rows]
    _write_csv(est_path, ("unit_type", "unit_id", "estimate"), rows, chash, seed)

    selection.update(
        {
            "config_hash": chash,
            "seed": seed,
            "sigma2": sigma2_used,
            "gamma": gamma,
            "preprocessing": steps,
            "r_used": graph.r,
            "c_used": graph.c,
            "n_used": graph.n,
            "weight": weight.kind,
        }
    )
    sel_path = out_dir / "selection.json"
    _write_json(sel_path, selection)

    conn_path = out_dir / "connectivity.json"
    conn_path.write_text(
        _connectivity_json(graph, chash, seed) + "\n", encoding="utf-8"
    )
    print(f"config_hash={chash}")
    for p in (est_path, sel_path, conn_path):
        print(str(p))
    return EXIT_OK


def _connectivity_json(graph, chash: str, seed: int) -> str:
    report = connectivity_report(graph)
    sqrt_c = float(np.sqrt(graph.c))
    return report.to_json(
        config_hash=chash,
        seed=seed,
        r=graph.r,
        c=graph.c,
        n=graph.n,
        rho_full_scaled=[v * sqrt_c for v in report.rho_full],
        rho_proj_scaled=[v * sqrt_c for v in report.rho_proj],
    )


def cmd_diagnose(cfg: dict) -> int:
    if not cfg.get("input"):
        raise ConfigError("diagnose needs --input (or 'input' in the config)")
    chash = config_hash(cfg)
    seed = int(cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    panel = read_panel_csv(cfg["input"])
    panel, _, _, _ = _preprocess(panel, cfg)
    graph = build_graph(dc_replace(panel, x=None))
    conn_path = out_dir / "connectivity.json"
    conn_path.write_text(_connectivity_json(graph, chash, seed) + "\n", encoding="utf-8")
    print(f"config_hash={chash}")
    print(str(conn_path))
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    chash = config_hash(cfg)
    seed = int(cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    design_cfg = dict(cfg["design"])
    preset = design_cfg.pop("preset", None)
    n_reps = int(design_cfg.pop("n_reps"))
    estimators = tuple(design_cfg.pop("estimators"))
    if preset is not None:
        if preset not in DESIGNS:
            raise ConfigError(f"unknown design preset {preset!r}; choose from {sorted(DESIGNS)}")
        base = DESIGNS[preset]
        fields = {
            "r": base.r, "c": base.c, "s": base.s, "T": base.T,
            "pi_match": base.pi_match, "pi_mob": base.pi_mob,
            "alpha_dist": base.alpha_dist, "beta_dist": base.beta_dist,
            "sigma2": base.sigma2,
        }
        fields.update(design_cfg)
        params = DesignParams.from_config(fields)
    else:
        params = DesignParams.from_config(design_cfg)

    solver_cfg = _solver_from_config(cfg["solver"], seed)
    grid = _grid_from_config(cfg["grid"])
    weight = WeightSpec(cfg["weight"])
    processes = _resolve_threads(int(cfg["threads"]))

    report = run_experiment(
        params,
        n_reps=n_reps,
        estimators=estimators,
        grid=grid,
        weight=weight,
        seed=seed,
        solver=solver_cfg,
        processes=processes,
    )

    reps_path = out_dir / "reps.csv"
    keys: list[str] = []
    for rep in report.reps:
        for k in rep:
            if k not in keys:
                keys.append(k)
    rows = []
    for rep in report.reps:
        rows.append(
            tuple(
                ""
                if k not in rep or rep[k] is None
                else (_fmt(rep[k]) if isinstance(rep[k], float) else rep[k])
                for k in keys
            )
        )
    _write_csv(reps_path, tuple(keys), rows, chash, seed)

    summary = report.summary()
    summary["config_hash"] = chash
    summary["failures"] = report.failures
    summary_path = out_dir / "summary.json"
    _write_json(summary_path, summary)

    written = [reps_path, summary_path]
    if report.scatter:
        scatter_path = out_dir / "scatter.csv"
        cols = list(report.scatter)
        n = len(report.scatter[cols[0]])
        srows = [
            tuple(_fmt(report.scatter[c][idx]) for c in cols) for idx in range(n)
        ]
        _write_csv(scatter_path, tuple(cols), srows, chash, seed)
        written.append(scatter_path)

    print(f"config_hash={chash}")
    for p in written:
        print(str(p))
    if report.failures:
        print(
            f"warning: {len(report.failures)} of {n_reps} replications failed",
            file=sys.stderr,
        )
        return EXIT_PARTIAL
    return EXIT_OK


def _read_estimates_csv(path: str) -> dict[int, float]:
    """unit_id -> estimate for the beta rows of an estimates CSV."""
    out: dict[int, float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows, None)
        if header is None or [h.strip() for h in header[:3]] != ["unit_type", "unit_id", "estimate"]:
            raise PanelError(f"{path}: expected header unit_type,unit_id,estimate")
        for row in rows:
            if not row:
                continue
            if row[0].strip() == "beta":
                out[int(row[1])] = float(row[2])
    if not out:
        raise PanelError(f"{path}: no beta rows found")
    return out


def cmd_crosstab(cfg: dict) -> int:
    chash = config_hash(cfg)
    seed = int(cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    a = _read_estimates_csv(cfg["input_a"])
    b = _read_estimates_csv(cfg["input_b"])
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))[:5]
        only_b = sorted(set(b) - set(a))[:5]
        raise PanelError(
            f"unit id mismatch between estimate files (only in first: {only_a}, "
            f"only in second: {only_b})"
        )
    ids = sorted(a)
    table = quintile_crosstab(
        np.array([a[i] for i in ids]), np.array([b[i] for i in ids])
    )
    header = ("quintile", "b1", "b2", "b3", "b4", "b5", "total")
    rows = []
    for qa in range(5):
        rows.append((f"a{qa + 1}", *[int(v) for v in table[qa]], int(table[qa].sum())))
    rows.append(("total", *[int(v) for v in table.sum(axis=0)], int(table.sum())))
    path = out_dir / "crosstab.csv"
    _write_csv(path, header, rows, chash, seed)
    print(f"config_hash={chash}")
    print(str(path))
    return EXIT_OK


def _add_common(sp, *, input_flag=True, preprocessing=False, stochastic=True):
    if input_flag:
        sp.add_argument("--input", help="input panel CSV (header i,t,j,y[,covariates...])")
    sp.add_argument("--config", help="TOML (or JSON) config file")
    sp.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    if stochastic:
        sp.add_argument("--seed", type=int, help="seed for every stochastic step (default 0)")
        sp.add_argument(
            "--threads",
            type=int,
            help="worker threads/processes; 0 = logical cores; 1 = deterministic reference path",
        )
    if preprocessing:
        sp.add_argument(
            "--drop-isolated",
            dest="drop_isolated",
            action="store_const",
            const=True,
            help="drop unmatched units and re-index densely before anything else",
        )
        sp.add_argument(
            "--largest-component",
            dest="largest_component",
            action="store_const",
            const=True,
            help="restrict to the largest connected component",
        )
    sp.add_argument(
        "--print-defaults",
        action="store_true",
        help="print the subcommand's default config as TOML and exit",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="twoway-eb",
        description=(
            "Shrinkage estimation of two-way effects (row ability, column "
            "value-added) from bipartite matched panel data"
        ),
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("estimate", help="estimate effects from a panel CSV")
    _add_common(sp, preprocessing=True)
    sp.add_argument("--criterion", choices=("ure", "mle"), help="hyperparameter selector (default ure)")
    sp.add_argument(
        "--estimator",
        choices=("eb", "ls", "oneway", "projoneway"),
        help="eb (default), ls (no shrinkage), oneway / projoneway (column side only)",
    )
    sp.add_argument("--weight", choices=WeightSpec.KINDS, help="risk weighting (default all)")
    sp.add_argument("--sigma2", type=float, help="noise variance override (default: estimated)")

    sp = sub.add_parser("diagnose", help="connectivity diagnostics of a panel CSV")
    _add_common(sp, preprocessing=True)

    sp = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    _add_common(sp, input_flag=False)
    sp.add_argument("--weight", choices=WeightSpec.KINDS, help="risk weighting (default beta)")

    sp = sub.add_parser("crosstab", help="5x5 rank-quintile cross tabulation of two estimate files")
    sp.add_argument("input_a", nargs="?", help="first estimates CSV")
    sp.add_argument("input_b", nargs="?", help="second estimates CSV")
    sp.add_argument("--config", help="TOML (or JSON) config file")
    sp.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    sp.add_argument("--print-defaults", action="store_true", help="print defaults and exit")
    return p


_COMMANDS = {
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "crosstab": cmd_crosstab,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    command = args.command
    if getattr(args, "print_defaults", False):
        sys.stdout.write(_render_toml(_defaults(command)))
        return EXIT_OK

    flag_keys = {
        "input", "input_a", "input_b", "out_dir", "seed", "threads",
        "criterion", "estimator", "weight", "sigma2",
        "drop_isolated", "largest_component",
    }
    flags = {k: getattr(args, k) for k in flag_keys if hasattr(args, k)}
    try:
        file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
        cfg = _merge_config(command, file_cfg, flags)
        if command == "crosstab" and (not cfg["input_a"] or not cfg["input_b"]):
            raise ConfigError("crosstab needs two estimate CSV paths")
        return _COMMANDS[command](cfg)
    except (ConfigError, PanelError, GraphError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, EigenSolverError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
