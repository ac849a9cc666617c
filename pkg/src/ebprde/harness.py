"""Experiment orchestration for the diagnose, risk-check and table1 commands.

Every experiment cell (case, n, rep) is a pure function of the run
configuration and its ``seed_stream`` labels, so cells can be evaluated in
any order (or in worker processes) and the sorted output is byte-identical
across runs.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import gmodel_fit, gmodel_plugin_density, naive_plugin_density, prde_density
from .estimators import FitResult, aggregate_stats, known_fit, select_estimator
from .fission import H_POLICIES, build_fission_plan, default_scarce, h_from_policy, risk_hat
from .lmm import CASE_IDS, CaseSpec, build_case_design, draw_truth, simulate
from .oracle import kl_loss_prde, mean_se, true_risk_decomposed
from .priors import GaussMix, Prior, Uniform
from .rng import seed_stream
from .select import ClassSpec, RiskContext, select

CSV_HEADER = ("case", "n", "h_policy", "method", "rep", "metric", "value", "mc_se", "status")
METRICS = ("risk_hat", "true_risk", "excess", "abs_err", "D_n", "IF_n", "D_sum", "D_ref",
           "beta_err", "sigma_err", "runtime_ms")
COMMANDS = ("diagnose", "risk-check", "table1")
NO_POLICY = "na"
SUMMARY_REP = -1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILED_CELL = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "diagnose": dict(cases=("A",), n_grid=(50, 100, 200, 400, 800, 1600, 2500), h_policies=("1",), reps=20),
    "risk-check": dict(cases=("A",), n_grid=(100, 400, 1600), h_policies=("1",), reps=100),
    "table1": dict(cases=CASE_IDS, n_grid=(1000,), h_policies=H_POLICIES, reps=50, rb_nodes=7),
}


@dataclass(frozen=True)
class RunConfig:
    """Settings of one harness command.

    ``rb_nodes`` is the Gauss-Hermite size for the fission noise expectation;
    ``nodes`` is used for every exact (oracle) integral.
    """

    command: str
    cases: tuple = ("A",)
    n_grid: tuple = (1000,)
    h_policies: tuple = ("1",)
    reps: int = 20
    seed: int = 20240601
    mode: str = "known"
    nodes: int = 61
    rb_nodes: int = 21
    out: str | None = None
    format: str = "csv"
    scarce: str = "auto"
    prior_kind: str = "gaussmix"
    prior_grid: tuple = (0.25, 1.0)
    g0_weights: tuple = (0.7, 0.3)
    g0_variances: tuple = (0.25, 1.0)
    sigma: float = 1.0
    beta: tuple = (0.0,)
    covariates_are_squared: str = "auto"
    workers: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for c in self.cases:
            if c not in CASE_IDS:
                raise ConfigError(f"unknown case {c!r}")
        if not self.cases or not self.n_grid or not self.h_policies:
            raise ConfigError("cases, n_grid and h_policies must be nonempty")
        if any(int(n) < 2 for n in self.n_grid):
            raise ConfigError("every n must be at least 2")
        for p in self.h_policies:
            try:
                h_from_policy(p, 100)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.reps < 1 or self.nodes < 3 or self.rb_nodes < 2 or self.workers < 1:
            raise ConfigError("reps, node counts and workers must be positive")
        if self.mode not in ("known", "estimated"):
            raise ConfigError("mode must be 'known' or 'estimated'")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be 'csv' or 'json'")
        if self.scarce not in ("auto", "on", "off"):
            raise ConfigError("scarce must be 'auto', 'on' or 'off'")
        if self.covariates_are_squared not in ("auto", "true", "false"):
            raise ConfigError("covariates_are_squared must be 'auto', 'true' or 'false'")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        try:
            self.g0()
            self.class_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def g0(self) -> Prior:
        return GaussMix(np.array(self.g0_weights, float), np.array(self.g0_variances, float))

    def class_spec(self) -> ClassSpec:
        if self.prior_kind == "gaussmix":
            return ClassSpec.gaussmix(self.prior_grid)
        if self.prior_kind == "spikeslab":
            return ClassSpec.spikeslab()
        if self.prior_kind in ("discrete", "gaussian"):
            return ClassSpec(self.prior_kind, grid=tuple(self.prior_grid))
        if self.prior_kind == "uniform":
            return ClassSpec("uniform")
        raise ConfigError(f"unknown prior kind {self.prior_kind!r}")

    def scarce_flag(self) -> bool | None:
        return {"auto": None, "on": True, "off": False}[self.scarce]

    def case_spec(self, case: str, n: int) -> CaseSpec:
        sq = {"auto": None, "true": True, "false": False}[self.covariates_are_squared]
        fe = self.mode == "estimated" and len(self.beta) > 0 and any(self.beta)
        return CaseSpec(case, int(n), covariates_are_squared=sq, with_fixed_effects=fe,
                        d=len(self.beta) if fe else 1)


def _split(value: str) -> tuple:
    return tuple(s.strip() for s in value.replace(";", ",").split(",") if s.strip())


def _parse_field(key: str, raw: str):
    try:
        if key in ("cases", "h_policies"):
            return _split(raw)
        if key == "n_grid":
            return tuple(int(x) for x in _split(raw))
        if key in ("prior_grid", "g0_weights", "g0_variances", "beta"):
            return tuple(float(x) for x in _split(raw))
        if key in ("reps", "seed", "nodes", "rb_nodes", "workers"):
            return int(raw)
        if key == "sigma":
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None
    return raw.strip()


_SECTION_KEYS = {
    "run": ("cases", "n_grid", "h_policies", "reps", "seed", "mode", "nodes", "rb_nodes", "out", "format",
            "scarce", "workers", "covariates_are_squared"),
    "prior": ("prior_kind", "prior_grid"),
    "truth": ("g0_weights", "g0_variances", "sigma", "beta"),
}
_ALIASES = {"prior": {"kind": "prior_kind", "grid": "prior_grid"}}


def read_config_file(path: str) -> dict:
    """Parse an INI-style file with [run], [prior] and [truth] sections.

    A section named after the command (e.g. [table1]) may override [run] keys.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values: dict = {}
    for section in parser.sections():
        keys = _SECTION_KEYS.get(section, _SECTION_KEYS["run"] if section in COMMANDS else None)
        if keys is None:
            raise ConfigError(f"unknown config section [{section}]")
        for raw_key, raw in parser[section].items():
            key = _ALIASES.get(section, {}).get(raw_key, raw_key)
            if key not in keys:
                raise ConfigError(f"unknown key {raw_key!r} in [{section}]")
            values.setdefault(section, {})[key] = _parse_field(key, raw)
    return values


def build_config(command: str, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    kw = dict(_DEFAULTS[command])
    file_values = file_values or {}
    for section in ("run", "prior", "truth", command):
        kw.update(file_values.get(section, {}))
    for key, val in (overrides or {}).items():
        if val is not None:
            kw[key] = _parse_field(key, val) if isinstance(val, str) else val
    return RunConfig(command=command, **kw)


# ---------------------------------------------------------------------------
# Rows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    case: str
    n: int
    h_policy: str
    method: str
    rep: int
    metric: str
    value: float | None
    mc_se: float | None = None
    status: str = "ok"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric {self.metric!r} is not in the vocabulary")
        if self.status == "ok" and (self.value is None or not math.isfinite(self.value)):
            raise ValueError(f"non-finite value in an ok row: {self}")

    def sort_key(self):
        return (self.case, self.n, self.h_policy, self.method, self.rep, self.metric)

    def cells(self) -> list[str]:
        fmt = (lambda x: "" if x is None else repr(float(x)))
        return [self.case, str(self.n), self.h_policy, self.method, str(self.rep), self.metric,
                fmt(self.value), fmt(self.mc_se), self.status]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in sorted(rows, key=ResultRow.sort_key):
        writer.writerow(row.cells())
    return buf.getvalue()


def summarize(rows) -> list[ResultRow]:
    """Per (case, n, h, method, metric): mean over ok reps with its MC SE, rep = -1."""
    groups: dict = {}
    for r in rows:
        if r.rep == SUMMARY_REP:
            continue
        groups.setdefault((r.case, r.n, r.h_policy, r.method, r.metric), []).append(r)
    out = []
    for (case, n, h, method, metric), rs in groups.items():
        vals = [r.value for r in sorted(rs, key=lambda r: r.rep) if r.status == "ok"]
        if not vals:
            out.append(ResultRow(case, n, h, method, SUMMARY_REP, metric, None, None, "failed"))
            continue
        m, se = mean_se(vals)
        out.append(ResultRow(case, n, h, method, SUMMARY_REP, metric, m, se))
    return out


def method_label(method: str, h_policy: str) -> str:
    return method if h_policy == NO_POLICY else f"{method}[h={h_policy}]"


def json_summary(rows) -> dict:
    """{case: {method: {mean, se, reps}}} for the headline metric of each command."""
    out: dict = {}
    per_rep: dict = {}
    for r in rows:
        if r.rep != SUMMARY_REP and r.status == "ok":
            per_rep.setdefault((r.case, r.n, r.h_policy, r.method, r.metric), 0)
            per_rep[(r.case, r.n, r.h_policy, r.method, r.metric)] += 1
    for r in sorted(rows, key=ResultRow.sort_key):
        if r.rep != SUMMARY_REP or r.metric not in ("excess", "abs_err", "D_n", "IF_n"):
            continue
        name = method_label(r.method, r.h_policy)
        if r.metric in ("D_n", "IF_n"):
            name = f"{name}:{r.metric}"
        if len({x.n for x in rows}) > 1:
            name = f"{name}@n={r.n}"
        out.setdefault(r.case, {})[name] = {
            "mean": r.value, "se": r.mc_se,
            "reps": per_rep.get((r.case, r.n, r.h_policy, r.method, r.metric), 0)}
    return out


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

def _simulate_cell(cfg: RunConfig, case: str, n: int, rep: int):
    spec = cfg.case_spec(case, n)
    design = build_case_design(spec, seed_stream(cfg.seed, case, n, rep, "design"))
    beta = np.array(cfg.beta if spec.with_fixed_effects else (0.0,))
    truth = draw_truth(cfg.g0(), n, beta, cfg.sigma, seed_stream(cfg.seed, case, n, rep, "truth"))
    data = simulate(design, truth, seed_stream(cfg.seed, case, n, rep, "data"))
    if cfg.mode == "known":
        fit = known_fit(truth.beta, truth.sigma)
    else:
        fit = select_estimator(data, design, rng=seed_stream(cfg.seed, case, n, rep, "estimator"))
    stats = aggregate_stats(data, design, fit.beta_hat, fit.sigma_hat)
    return design, truth, data, fit, stats


def _fit_rows(case, n, rep, fit: FitResult, truth) -> list[ResultRow]:
    if fit.regime == "known":
        return []
    beta_err = float(np.linalg.norm(fit.beta_hat - truth.beta)) if fit.beta_hat.size else 0.0
    return [ResultRow(case, n, NO_POLICY, "estimator", rep, "beta_err", beta_err),
            ResultRow(case, n, NO_POLICY, "estimator", rep, "sigma_err", abs(fit.sigma_hat - truth.sigma))]


def _diagnose_cell(cfg: RunConfig, case: str, n: int, rep: int) -> list[ResultRow]:
    spec = cfg.case_spec(case, n)
    design = build_case_design(spec, seed_stream(cfg.seed, case, n, rep, "design"))
    base = build_fission_plan(design, 1)
    eta = design.eta
    ref = math.log(n) / eta if eta > 0 else math.log(n)
    rows = []
    for policy in cfg.h_policies:
        plan = base.with_h(h_from_policy(policy, n))
        rows += [ResultRow(case, n, policy, "fission", rep, "D_n", plan.D_n),
                 ResultRow(case, n, policy, "fission", rep, "IF_n", plan.IF_n),
                 ResultRow(case, n, policy, "fission", rep, "D_sum", plan.D_n * plan.kappa),
                 ResultRow(case, n, policy, "fission", rep, "D_ref", ref)]
    return rows


def _risk_check_cell(cfg: RunConfig, case: str, n: int, rep: int) -> list[ResultRow]:
    design, truth, data, fit, stats = _simulate_cell(cfg, case, n, rep)
    rows = _fit_rows(case, n, rep, fit, truth)
    scarce = cfg.scarce_flag()
    if scarce is None:
        scarce = default_scarce(design)
    base = build_fission_plan(design, 1)
    priors = {"uniform": Uniform(), "g0": cfg.g0()}
    for policy in cfg.h_policies:
        plan = base.with_h(h_from_policy(policy, n))
        if scarce and plan.n_improved == 0:
            continue
        coords = plan.improved_coords if scarce else None
        for name, prior in priors.items():
            est = risk_hat(prior, stats, plan, design, fit.sigma_hat, scarce, cfg.rb_nodes).total
            true = true_risk_decomposed(truth, design, prior, cfg.nodes, coords).total
            rows += [ResultRow(case, n, policy, name, rep, "risk_hat", est),
                     ResultRow(case, n, policy, name, rep, "true_risk", true),
                     ResultRow(case, n, policy, name, rep, "abs_err", abs(est - true))]
    return rows


def _table1_cell(cfg: RunConfig, case: str, n: int, rep: int) -> list[ResultRow]:
    design, truth, data, fit, stats = _simulate_cell(cfg, case, n, rep)
    rows = _fit_rows(case, n, rep, fit, truth)
    g0 = cfg.g0()
    oracle_stats = aggregate_stats(data, design, truth.beta if design.d else 0.0, truth.sigma)
    bayes = kl_loss_prde(prde_density(g0, oracle_stats, known_fit(truth.beta, truth.sigma), design),
                         truth, design, cfg.nodes)

    def emit(method, policy, density):
        loss = kl_loss_prde(density, truth, design, cfg.nodes)
        rows.extend([ResultRow(case, n, policy, method, rep, "true_risk", loss),
                     ResultRow(case, n, policy, method, rep, "excess", loss - bayes)])

    context = RiskContext(design, stats, fit.sigma_hat, cfg.rb_nodes)
    spec = cfg.class_spec()
    for policy in cfg.h_policies:
        res = select(spec, data, design, fit, policy, cfg.scarce_flag(), context=context)
        plan = context.plan_for(res.risk_at_opt.h_used)
        shrink = plan.improved if res.risk_at_opt.scarce_mode else None
        emit("proposed", policy, prde_density(res.g_hat, stats, fit, design, shrink))
        rows.append(ResultRow(case, n, policy, "proposed", rep, "risk_hat", res.risk_at_opt.total))
    em = gmodel_fit(stats, fit, cfg.prior_grid if cfg.prior_kind == "gaussmix" else (0.25, 1.0))
    emit("gmodel", NO_POLICY, gmodel_plugin_density(em, stats, fit, design))
    emit("naive", NO_POLICY, naive_plugin_density(stats, fit, design))
    return rows


_CELL_FUNCS = {"diagnose": _diagnose_cell, "risk-check": _risk_check_cell, "table1": _table1_cell}


def _expected_failed_rows(cfg: RunConfig, case, n, rep) -> list[ResultRow]:
    def failed(policy, method, metric):
        return ResultRow(case, n, policy, method, rep, metric, None, None, "failed")

    if cfg.command == "diagnose":
        return [failed(p, "fission", m) for p in cfg.h_policies for m in ("D_n", "IF_n", "D_sum", "D_ref")]
    if cfg.command == "risk-check":
        return [failed(p, name, m) for p in cfg.h_policies for name in ("uniform", "g0")
                for m in ("risk_hat", "true_risk", "abs_err")]
    rows = [failed(p, "proposed", m) for p in cfg.h_policies for m in ("true_risk", "excess", "risk_hat")]
    return rows + [failed(NO_POLICY, meth, m) for meth in ("gmodel", "naive") for m in ("true_risk", "excess")]


def run_cell(args) -> tuple[list[ResultRow], bool]:
    cfg, case, n, rep = args
    try:
        return _CELL_FUNCS[cfg.command](cfg, case, n, rep), True
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError):
        return _expected_failed_rows(cfg, case, n, rep), False


@dataclass
class RunResult:
    rows: list = field(default_factory=list)
    failed_cells: int = 0

    @property
    def exit_code(self) -> int:
        return EXIT_FAILED_CELL if self.failed_cells else EXIT_OK

    def csv(self) -> str:
        return rows_to_csv(self.rows)

    def summary(self) -> dict:
        return json_summary(self.rows)


def run(cfg: RunConfig) -> RunResult:
    cells = [(cfg, c, int(n), r) for c in cfg.cases for n in cfg.n_grid for r in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_cell, cells, chunksize=1))
    else:
        results = [run_cell(c) for c in cells]
    rows = [row for rs, _ in results for row in rs]
    rows += summarize(rows)
    return RunResult(rows, sum(1 for _, ok in results if not ok))


def write_outputs(cfg: RunConfig, result: RunResult, stdout) -> None:
    if cfg.format == "json":
        text = json.dumps(result.summary(), indent=2, sort_keys=True) + "\n"
    else:
        text = result.csv()
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        if cfg.format == "csv" and cfg.command == "table1":
            stem = cfg.out[:-4] if cfg.out.endswith(".csv") else cfg.out
            with open(stem + ".summary.json", "w", encoding="utf-8") as fh:
                fh.write(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    else:
        stdout.write(text)
