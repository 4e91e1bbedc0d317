"""Command-line front end: ``greenmsm <command> --config run.yaml``.

Exit codes: 0 success, 2 bad input (config, CSV, model), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, InputError, ModelError, NumericalError
from .inference import hazard_ratios, intensity_matrix, predict_matrix, scenario_compare, sojourn_summary
from .likelihood import PanelDataset, format_float, format_sig6
from .model import ModelSpec, ParameterSet, parse_transition, transition_label
from .optim import FitOptions, FitResult, fit
from .pipeline import PreprocessSettings, build_analysis_table, read_harvest_csv, read_sensor_csv, round_panel
from .simulate import grouped_trajectories, sample_panel

log = logging.getLogger("greenmsm")

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
DEFAULT_HORIZON = 30.0
ALGORITHM_CHOICES = ("bfgs", "nelder-mead", "both")

_SCHEMA = {
    "data": {
        "sensor_csv", "harvest_csv", "panel_csv", "reference_greenhouse", "cutpoints",
        "screening", "window", "start_date", "days",
    },
    "model": {"states", "transitions", "covariates"},
    "fit": {
        "algorithm", "max_iterations", "gradient_tolerance", "function_tolerance",
        "simplex_tolerance", "max_evaluations", "compute_hessian",
    },
    "scenario": {"base", "offsets"},
    "simulate": {"baseline", "beta", "n_subjects", "n_groups", "n_days", "observation_times"},
}
_TOP = set(_SCHEMA) | {"horizon", "seed", "out"}


@dataclass(frozen=True)
class SimulationConfig:
    theta: ParameterSet
    n_subjects: int = 200
    n_groups: int = 8
    n_days: int = 100
    observation_times: tuple[float, ...] | None = None


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    sensor_csv: Path | None = None
    harvest_csv: Path | None = None
    panel_csv: Path | None = None
    reference_greenhouse: str | None = None
    cutpoints: tuple[float, float] | None = None
    screening: tuple[str, ...] = ()
    window: int = 7
    start_date: Any = None
    days: int | None = None
    fit_options: dict = field(default_factory=dict)
    algorithm: str = "bfgs"
    horizon: float = DEFAULT_HORIZON
    scenario_base: dict = field(default_factory=dict)
    scenario_offsets: dict = field(default_factory=dict)
    simulation: SimulationConfig | None = None
    out: Path = Path("out")
    seed: int = 0
    echo: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return self.spec.n_parameters

    def options(self, algorithm: str) -> FitOptions:
        return FitOptions(algorithm=algorithm, **self.fit_options)


# -- config parsing --------------------------------------------------------

def _line(node) -> int:
    return node.start_mark.line + 1


class _Reader:
    """Walks a composed YAML tree so every error can cite a line."""

    def __init__(self, text: str):
        self.loader = yaml.SafeLoader(text)
        try:
            self.root = self.loader.get_single_node()
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", None if mark is None else mark.line + 1) from None

    def value(self, node):
        return self.loader.construct_object(node, deep=True)

    def mapping(self, node, allowed: set, where: str) -> dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{where} must be a mapping", _line(node))
        out = {}
        for k, v in node.value:
            key = self.value(k)
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in {where}; allowed: {sorted(allowed)}", _line(k))
            if key in out:
                raise ConfigError(f"duplicate key {key!r} in {where}", _line(k))
            out[key] = v
        return out

    def seq(self, node, where: str) -> list:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{where} must be a list", _line(node))
        return list(node.value)

    def scalar(self, node, kind, where: str):
        v = self.value(node)
        ok = isinstance(v, kind) and not isinstance(v, bool) if kind is not bool else isinstance(v, bool)
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v, ok = float(v), True
        if not ok:
            raise ConfigError(f"{where} must be {kind.__name__}, got {v!r}", _line(node))
        return v

    def names(self, node, where: str) -> list[str]:
        return [str(self.scalar(n, str, where)) for n in self.seq(node, where)]

    def covariate_map(self, node, known: Sequence[str], where: str) -> dict[str, float]:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{where} must be a mapping", _line(node))
        out = {}
        for k, v in node.value:
            name = str(self.value(k))
            if name not in known:
                raise ConfigError(f"{where} names unknown covariate {name!r}; model covariates: {list(known)}", _line(k))
            out[name] = self.scalar(v, float, f"{where}.{name}")
        return out


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    """Validate a YAML run configuration.

    Relative paths are resolved against ``base_dir``.  Unknown keys,
    self-transitions and unknown covariates are rejected with the line they
    appear on.
    """
    r = _Reader(text)
    if r.root is None:
        raise ConfigError("configuration is empty", 1)
    top = r.mapping(r.root, _TOP, "top level")
    if "model" not in top:
        raise ConfigError("missing required section 'model'", _line(r.root))
    base = Path(base_dir)
    kw: dict[str, Any] = {}

    model = r.mapping(top["model"], _SCHEMA["model"], "model")
    for req in ("states", "transitions"):
        if req not in model:
            raise ConfigError(f"model is missing required key {req!r}", _line(top["model"]))
    states = r.names(model["states"], "model.states")
    pairs = []
    for n in r.seq(model["transitions"], "model.transitions"):
        try:
            pairs.append(parse_transition(str(r.value(n))))
        except InputError as exc:
            raise ConfigError(str(exc), _line(n)) from None
    covs = r.names(model["covariates"], "model.covariates") if "covariates" in model else []
    try:
        spec = ModelSpec.build(states, pairs, covs)
    except InputError as exc:
        raise ConfigError(str(exc), _line(top["model"])) from None
    kw["spec"] = spec

    if "data" in top:
        data = r.mapping(top["data"], _SCHEMA["data"], "data")
        for key in ("sensor_csv", "harvest_csv", "panel_csv"):
            if key in data:
                kw[key] = base / r.scalar(data[key], str, f"data.{key}")
        if "reference_greenhouse" in data:
            kw["reference_greenhouse"] = str(r.value(data["reference_greenhouse"]))
        if "cutpoints" in data:
            cp = [r.scalar(n, float, "data.cutpoints") for n in r.seq(data["cutpoints"], "data.cutpoints")]
            if len(cp) != 2 or not cp[0] < cp[1]:
                raise ConfigError("data.cutpoints must be two increasing numbers", _line(data["cutpoints"]))
            kw["cutpoints"] = tuple(cp)
        if "screening" in data:
            kw["screening"] = tuple(r.names(data["screening"], "data.screening"))
        if "window" in data:
            w = r.scalar(data["window"], int, "data.window")
            if w < 3 or w % 2 == 0:
                raise ConfigError("data.window must be odd and >= 3", _line(data["window"]))
            kw["window"] = w
        if "start_date" in data:
            kw["start_date"] = r.value(data["start_date"])
        if "days" in data:
            kw["days"] = r.scalar(data["days"], int, "data.days")
        if "panel_csv" not in kw and ("sensor_csv" in kw) != ("harvest_csv" in kw):
            raise ConfigError("data needs both sensor_csv and harvest_csv, or panel_csv", _line(top["data"]))

    if "fit" in top:
        fit_node = r.mapping(top["fit"], _SCHEMA["fit"], "fit")
        opts = {}
        for key, node in fit_node.items():
            if key == "algorithm":
                algo = r.scalar(node, str, "fit.algorithm")
                if algo not in ALGORITHM_CHOICES:
                    raise ConfigError(f"fit.algorithm must be one of {ALGORITHM_CHOICES}", _line(node))
                kw["algorithm"] = algo
            elif key in ("max_iterations", "max_evaluations"):
                opts[key] = r.scalar(node, int, f"fit.{key}")
            elif key == "compute_hessian":
                opts[key] = r.scalar(node, bool, f"fit.{key}")
            else:
                opts[key] = r.scalar(node, float, f"fit.{key}")
        try:
            FitOptions(**opts)
        except InputError as exc:
            raise ConfigError(str(exc), _line(top["fit"])) from None
        kw["fit_options"] = opts

    if "horizon" in top:
        h = r.scalar(top["horizon"], float, "horizon")
        if not h > 0 or not math.isfinite(h):
            raise ConfigError("horizon must be positive", _line(top["horizon"]))
        kw["horizon"] = h
    if "seed" in top:
        seed = r.scalar(top["seed"], int, "seed")
        if seed < 0:
            raise ConfigError("seed must be non-negative", _line(top["seed"]))
        kw["seed"] = seed
    kw["out"] = base / (r.scalar(top["out"], str, "out") if "out" in top else "out")

    if "scenario" in top:
        sc = r.mapping(top["scenario"], _SCHEMA["scenario"], "scenario")
        if "base" in sc:
            kw["scenario_base"] = r.covariate_map(sc["base"], covs, "scenario.base")
        if "offsets" in sc:
            kw["scenario_offsets"] = r.covariate_map(sc["offsets"], covs, "scenario.offsets")

    if "simulate" in top:
        kw["simulation"] = _parse_simulation(r, top["simulate"], spec)

    echo = yaml.safe_load(text)
    echo.pop("out", None)
    kw["echo"] = echo
    return RunConfig(**kw)


def _parse_simulation(r: _Reader, node, spec: ModelSpec) -> SimulationConfig:
    sim = r.mapping(node, _SCHEMA["simulate"], "simulate")
    if "baseline" not in sim:
        raise ConfigError("simulate is missing required key 'baseline'", _line(node))
    labels = set(spec.transitions.labels)
    baseline = {}
    for k, v in r.mapping(sim["baseline"], labels, "simulate.baseline").items():
        q = r.scalar(v, float, f"simulate.baseline.{k}")
        if not q > 0:
            raise ConfigError(f"baseline intensity for {k} must be positive", _line(v))
        baseline[k] = q
    missing = sorted(labels - set(baseline))
    if missing:
        raise ConfigError(f"simulate.baseline is missing transitions {missing}", _line(sim["baseline"]))
    beta = {}
    if "beta" in sim:
        for k, v in r.mapping(sim["beta"], labels, "simulate.beta").items():
            beta[k] = r.covariate_map(v, spec.covariate_names, f"simulate.beta.{k}")
    kw = {}
    for key in ("n_subjects", "n_groups", "n_days"):
        if key in sim:
            val = r.scalar(sim[key], int, f"simulate.{key}")
            if val < 1:
                raise ConfigError(f"simulate.{key} must be at least 1", _line(sim[key]))
            kw[key] = val
    if "observation_times" in sim:
        kw["observation_times"] = tuple(
            r.scalar(n, float, "simulate.observation_times") for n in r.seq(sim["observation_times"], "simulate.observation_times")
        )
    theta = ParameterSet.from_intensities(spec, baseline, beta)
    return SimulationConfig(theta=theta, **kw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


# -- output helpers ----------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Run:
    """Collects declared inputs and written outputs for the manifest."""

    def __init__(self, command: str, cfg: RunConfig, config_path: Path):
        self.command = command
        self.cfg = cfg
        self.config_path = config_path
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        cfg.out.mkdir(parents=True, exist_ok=True)

    def use(self, path: Path | None, what: str) -> Path:
        if path is None:
            raise InputError(f"{self.command} needs {what} in the config")
        if not path.is_file():
            raise InputError(f"{what} {path} does not exist")
        self.inputs[path.name] = _sha256(path)
        return path

    def write_text(self, name: str, text: str) -> None:
        p = self.cfg.out / name
        p.write_text(text)
        self.outputs[name] = hashlib.sha256(text.encode()).hexdigest()

    def write_rows(self, name: str, header: Sequence[str], rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.write_text(name, buf.getvalue())

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config": self.cfg.echo,
            "config_sha256": _sha256(self.config_path),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }
        p = self.cfg.out / f"manifest_{self.command}.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n")


def _g(x) -> str:
    return format_sig6(x) if x is not None else ""


def _settings(cfg: RunConfig) -> PreprocessSettings:
    return PreprocessSettings(
        reference_group=cfg.reference_greenhouse,
        covariates=tuple(cfg.spec.covariate_names),
        cutpoints=cfg.cutpoints,
        start_date=cfg.start_date,
        days=cfg.days,
        window=cfg.window,
        screening=cfg.screening,
    )


def _preprocess(run: _Run):
    cfg = run.cfg
    sensors = read_sensor_csv(run.use(cfg.sensor_csv, "data.sensor_csv"))
    harvest = read_harvest_csv(run.use(cfg.harvest_csv, "data.harvest_csv"))
    return build_analysis_table(sensors, harvest, _settings(cfg))


def _load_panel(run: _Run) -> PanelDataset:
    cfg = run.cfg
    if cfg.panel_csv is not None:
        panel = PanelDataset.read_csv(run.use(cfg.panel_csv, "data.panel_csv"))
    else:
        panel = round_panel(_preprocess(run).panel)
    names = cfg.spec.covariate_names
    missing = [c for c in names if c not in panel.covariate_names]
    if missing:
        raise InputError(f"panel lacks model covariates {missing}")
    return panel.with_covariates(names)


def _load_fit(run: _Run) -> FitResult:
    path = run.cfg.out / "fit.json"
    if not path.is_file():
        raise InputError(f"{path} not found; run `greenmsm fit` first")
    run.inputs[path.name] = _sha256(path)
    res = FitResult.from_dict(json.loads(path.read_text()))
    if res.spec.to_dict() != run.cfg.spec.to_dict():
        raise ModelError(f"{path} was fitted under a different model than the config declares")
    return res


def _matrix_rows(P: np.ndarray, labels: Sequence[str]):
    return [[labels[i]] + [format_sig6(v) for v in P[i]] for i in range(P.shape[0])]


# -- subcommands ---------------------------------------------------------------

def cmd_preprocess(run: _Run, args) -> None:
    table = _preprocess(run)
    buf = io.StringIO()
    table.panel.write_csv(buf, float_format=format_sig6)
    run.write_text("panel.csv", buf.getvalue())
    daily = table.daily
    cols = list(daily.columns)
    rows = []
    for rec in daily.itertuples(index=False):
        rows.append([v if isinstance(v, str) else (str(int(v)) if isinstance(v, (int, np.integer)) else format_sig6(v)) for v in rec])
    run.write_rows("daily.csv", cols, rows)
    if table.correlations is not None:
        c = table.correlations
        run.write_rows("correlations.csv", ["variable"] + list(c.columns), _matrix_rows(c.to_numpy(), list(c.index)))
    counts = table.panel.state_counts(3)
    total = max(int(counts.sum()), 1)
    lines = [
        f"cut-points (kg): t1 = {format_sig6(table.cutpoints.t1)}, t2 = {format_sig6(table.cutpoints.t2)}",
        f"subjects: {len(table.panel)}, observations: {table.panel.n_observations}",
        "state occupancy: " + ", ".join(f"{k + 1}: {int(n)} ({100 * n / total:.1f}%)" for k, n in enumerate(counts)),
        f"partial days after gap filling: {table.partial_days}",
        f"slots still missing after gap filling: {table.residual_gaps}",
    ]
    run.write_text("preprocess.txt", "\n".join(lines) + "\n")


def cmd_fit(run: _Run, args) -> None:
    cfg = run.cfg
    panel = _load_panel(run)
    algos = ["bfgs", "nelder_mead"] if cfg.algorithm == "both" else [cfg.algorithm.replace("-", "_")]
    results = {}
    for a in algos:
        results[a] = fit(panel, cfg.spec, opts=cfg.options(a))
        run.write_json(f"fit_{a}.json", results[a].to_dict())
    primary = results[algos[0]]
    run.write_json("fit.json", primary.to_dict())
    header = ["algorithm", "log_likelihood", "aic", "n_parameters", "converged", "iterations", "evaluations"]
    rows = [
        [a, format_sig6(r.log_likelihood), format_sig6(r.aic), r.n_parameters, r.converged, r.iterations, r.n_evaluations]
        for a, r in results.items()
    ]
    run.write_rows("comparison.csv", header, rows)
    lines = [f"{'Algorithm':<12} {'logLik':>12} {'AIC':>12}  k"]
    for a, r in results.items():
        name = "BFGS" if a == "bfgs" else "Nelder-Mead"
        lines.append(f"{name:<12} {r.log_likelihood:>12.2f} {r.aic:>12.2f}  {r.n_parameters}")
    lines.append("")
    for a, r in results.items():
        lines.append(f"{a}: {'converged' if r.converged else 'NOT converged'} ({r.message})")
    run.write_text("fit.txt", "\n".join(lines) + "\n")


def cmd_report(run: _Run, args) -> None:
    cfg = run.cfg
    res = _load_fit(run)
    spec = res.spec
    labels = list(spec.states.labels)
    Q = intensity_matrix(res, spec)
    run.write_rows("intensities.csv", ["from"] + labels, _matrix_rows(Q, labels))
    hrs = hazard_ratios(res, spec)
    run.write_rows(
        "hazard_ratios.csv",
        ["transition", "covariate", "hr", "ci_low", "ci_high", "unstable"],
        [[e.label, e.covariate, _g(e.hr), _g(e.ci_low), _g(e.ci_high), e.unstable] for e in hrs],
    )
    fc = predict_matrix(res, spec, None, cfg.horizon)
    run.write_rows("horizon_matrix.csv", ["from"] + labels, _matrix_rows(fc.matrix, labels))
    soj = sojourn_summary(res, spec)
    run.write_rows(
        "sojourns.csv",
        ["state", "label", "sojourn_days", "ci_low", "ci_high"],
        [[s["state"], labels[s["state"] - 1], _g(s["sojourn"]), _g(s["ci_low"]), _g(s["ci_high"])] for s in soj],
    )
    lines = [
        f"algorithm: {res.algorithm}, logLik {res.log_likelihood:.4f}, AIC {res.aic:.4f}, k = {res.n_parameters}",
        f"converged: {res.converged} ({res.message})",
        "",
        "hazard ratios (95% CI):",
    ]
    for e in hrs:
        ci = f"({e.ci_low:.3f}, {e.ci_high:.3f})" if e.ci_low is not None else "(n/a)"
        flag = "  [unstable]" if e.unstable else ""
        lines.append(f"  {e.label:<6} {e.covariate:<12} {e.hr:8.3f} {ci}{flag}")
    lines += ["", f"predicted state after {format_float(cfg.horizon)} days (covariates at their means):"]
    for i, lab in enumerate(labels):
        lines.append(f"  {lab:<10} " + " ".join(f"{v:.3f}" for v in fc.matrix[i]))
    lines += ["", "mean sojourn (days):"]
    for s in soj:
        ci = f" ({s['ci_low']:.2f}, {s['ci_high']:.2f})" if s["ci_low"] is not None else ""
        lines.append(f"  {labels[s['state'] - 1]:<10} {s['sojourn']:.2f}{ci}")
    run.write_text("report.txt", "\n".join(lines) + "\n")


def cmd_predict(run: _Run, args) -> None:
    cfg = run.cfg
    res = _load_fit(run)
    labels = list(res.spec.states.labels)
    fc = predict_matrix(res, res.spec, cfg.scenario_base or None, cfg.horizon)
    run.write_rows("prediction.csv", ["from"] + labels, _matrix_rows(fc.matrix, labels))
    cov = ", ".join(f"{k} = {format_float(v)}" for k, v in fc.covariates.items()) or "none"
    lines = [f"P({format_float(cfg.horizon)} days), covariates: {cov}"]
    for i, lab in enumerate(labels):
        lines.append(f"  {lab:<10} " + " ".join(f"{v:.4f}" for v in fc.matrix[i]))
    run.write_text("prediction.txt", "\n".join(lines) + "\n")


def cmd_scenario(run: _Run, args) -> None:
    cfg = run.cfg
    res = _load_fit(run)
    if not cfg.scenario_offsets:
        raise InputError("scenario needs scenario.offsets in the config")
    names = res.spec.covariate_names
    base = {n: cfg.scenario_base.get(n, 0.0) for n in names}
    alt = {n: base[n] + cfg.scenario_offsets.get(n, 0.0) for n in names}
    sc = scenario_compare(res, res.spec, base, alt, cfg.horizon)
    labels = list(res.spec.states.labels)
    rows = []
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            rows.append([a, b, format_sig6(sc.base.matrix[i, j]), format_sig6(sc.alt.matrix[i, j]), format_sig6(sc.delta[i, j])])
    run.write_rows("scenario.csv", ["from", "to", "p_base", "p_alt", "delta"], rows)
    run.write_rows(
        "scenario_sojourns.csv",
        ["state", "sojourn_base", "sojourn_alt", "ratio"],
        [[labels[i], _g(sc.sojourn_base[i]), _g(sc.sojourn_alt[i]), _g(sc.sojourn_ratio[i])] for i in range(len(labels))],
    )
    shift = ", ".join(f"{k} {v:+g} SD" for k, v in cfg.scenario_offsets.items())
    lines = [f"scenario: {shift}; horizon {format_float(cfg.horizon)} days", "change in P (alt - base):"]
    for i, lab in enumerate(labels):
        lines.append(f"  {lab:<10} " + " ".join(f"{v:+.4f}" for v in sc.delta[i]))
    lines.append("sojourn ratio (alt / base): " + ", ".join(f"{lab} {v:.3f}" for lab, v in zip(labels, sc.sojourn_ratio)))
    run.write_text("scenario.txt", "\n".join(lines) + "\n")


def cmd_simulate(run: _Run, args) -> None:
    cfg = run.cfg
    sim = cfg.simulation
    if sim is None:
        raise InputError("simulate needs a 'simulate' section in the config")
    spec = cfg.spec
    trajs = grouped_trajectories(sim.n_subjects, sim.n_groups, sim.n_days, spec.covariate_names, cfg.seed)
    obs = sim.observation_times or tuple(float(d) for d in range(sim.n_days))
    panel = sample_panel(sim.theta, spec, trajs, obs, cfg.seed)
    buf = io.StringIO()
    panel.write_csv(buf)
    run.write_text("simulated_panel.csv", buf.getvalue())
    rows = [[n, format_float(v)] for n, v in zip(spec.parameter_names(), sim.theta.to_vector())]
    run.write_rows("true_parameters.csv", ["parameter", "coordinate"], rows)
    counts = panel.state_counts(spec.K)
    run.write_text(
        "simulate.txt",
        f"subjects: {len(panel)}, observations: {panel.n_observations}, seed: {cfg.seed}\n"
        f"state counts: {', '.join(str(int(c)) for c in counts)}\n",
    )


COMMANDS = {
    "preprocess": cmd_preprocess,
    "fit": cmd_fit,
    "report": cmd_report,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "scenario": cmd_scenario,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greenmsm", description="Multi-state yield models for greenhouse panels.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--algorithm", choices=ALGORITHM_CHOICES, help="override fit.algorithm")
        p.add_argument("--horizon", type=float, help="forecast horizon in days")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    echo = dict(cfg.echo)
    changes: dict[str, Any] = {}
    if args.algorithm is not None:
        changes["algorithm"] = args.algorithm
        echo.setdefault("fit", {})
        echo["fit"] = dict(echo["fit"] or {}, algorithm=args.algorithm)
    if args.horizon is not None:
        if not args.horizon > 0 or not math.isfinite(args.horizon):
            raise InputError("--horizon must be positive")
        changes["horizon"] = args.horizon
        echo["horizon"] = args.horizon
    if args.seed is not None:
        if args.seed < 0:
            raise InputError("--seed must be non-negative")
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    echo["seed"] = changes.get("seed", cfg.seed)
    changes["echo"] = echo
    return replace(cfg, **changes)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        run = _Run(args.command, cfg, args.config)
        COMMANDS[args.command](run, args)
        run.finish()
    except InputError as exc:
        print(f"greenmsm {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"greenmsm {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"greenmsm {args.command}: wrote {', '.join(sorted(run.outputs))} to {cfg.out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
