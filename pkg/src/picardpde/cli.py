"""Command-line front end: run a configured problem and write reports.

Configs are INI files with the sections ``[problem]``, ``[grid]``, ``[run]``,
``[estimation]`` and ``[output]``; see the README for every key. Exit codes:
0 fixed point reached, 2 iteration limit reached, 3 divergence, 4 bad
config, 5 evaluation failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import expr as ex
from .analysis import DEFAULT_SAMPLES, DEFAULT_SEED, compute_constants, error_bound
from .expr import ExprError
from .mesh import Domain, Grid, GridError, sample, write_csv
from .picard import (
    DEFAULT_SCHEME, DivergenceError, EvaluationError, Problem, ProblemError,
    iterate, required_ghost,
)
from .problems import BUILTIN_IDS, builtin

log = logging.getLogger("picardpde")

EXIT_OK = 0
EXIT_MAX_ITER = 2
EXIT_DIVERGED = 3
EXIT_CONFIG = 4
EXIT_EVAL = 5

OUT_ENV = "PICARDPDE_OUT"
# provisional time interval for the constants when the config gives none
PROVISIONAL_T = 1.0


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class ProblemSection:
    name: str = ""
    n: int = 1
    m: int = 0
    k: int = 1
    F: str = "0"
    G: str | None = None
    g: str | None = None
    c: tuple = ("0",)
    lo: tuple | None = None
    hi: tuple | None = None
    t_lo: float | None = None
    t_hi: float | None = None
    R: float = 1.0
    exact: str | None = None
    L: float | None = None
    M: float | None = None


@dataclass(frozen=True)
class GridSection:
    n_t: int = 65
    n_x: tuple | None = None
    ghost: int | None = None
    stencil: str = DEFAULT_SCHEME


@dataclass(frozen=True)
class RunSection:
    p_max: int = 10
    tol: float = 1e-9
    norm: str = "sup"
    symmetric_time: bool = False


@dataclass(frozen=True)
class EstimationSection:
    samples: int = DEFAULT_SAMPLES
    seed: int = DEFAULT_SEED
    box_center: str = "u0"


@dataclass(frozen=True)
class OutputSection:
    dir: str = "."
    report: str = "report.json"
    iterations_csv: str = "iterations.csv"
    dump_fields: str = "none"


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSection
    grid: GridSection = field(default_factory=GridSection)
    run: RunSection = field(default_factory=RunSection)
    estimation: EstimationSection = field(default_factory=EstimationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def effective(self) -> dict:
        """Fully resolved settings for the report (output location left out)."""
        out = {name: asdict(getattr(self, name)) for name in ("problem", "grid", "run", "estimation")}
        out["output"] = {k: v for k, v in asdict(self.output).items() if k != "dir"}
        return json.loads(json.dumps(out))


_SECTIONS = {
    "problem": ProblemSection,
    "grid": GridSection,
    "run": RunSection,
    "estimation": EstimationSection,
    "output": OutputSection,
}

_LIST_KEYS = {"c", "lo", "hi", "n_x"}


def _convert(cls, key: str, raw: str):
    kinds = {f.name: f.type for f in fields(cls)}
    kind = kinds[key]
    try:
        if key in _LIST_KEYS:
            value = json.loads(raw)
            if not isinstance(value, list):
                raise ValueError("expected a bracketed list")
            if key == "c":
                return tuple(str(v) for v in value)
            if key == "n_x":
                return tuple(int(v) for v in value)
            return tuple(float(v) for v in value)
        if key == "ghost":
            return None if raw.strip() == "auto" else int(raw)
        if kind.startswith("bool"):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"not a boolean: {raw!r}")
            return lowered in ("true", "yes", "1")
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw.strip()
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def _builtin_section(id: str) -> tuple[ProblemSection, GridSection, RunSection]:
    bp = builtin(id)
    p = bp.problem
    d = p.domain
    text = ex.to_string
    section = ProblemSection(
        name=id, n=p.n, m=p.m, k=p.k, F=text(p.F),
        G=None if p.G is None else text(p.G), g=None if p.g is None else text(p.g),
        c=tuple(text(ci) for ci in p.c), lo=d.lo, hi=d.hi, t_lo=d.t_lo, t_hi=d.t_hi,
        R=p.R, exact=None if p.exact is None else text(p.exact))
    return section, GridSection(n_t=bp.n_t, n_x=tuple(bp.n_x)), RunSection(p_max=bp.p_max)


def parse_config(text: str) -> RunConfig:
    """Parse and validate INI text into a :class:`RunConfig`."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    if not cp.has_section("problem"):
        raise ConfigError("missing [problem] section")

    values: dict[str, dict] = {}
    for name, cls in _SECTIONS.items():
        allowed = {f.name for f in fields(cls)} | ({"builtin"} if name == "problem" else set())
        items = dict(cp.items(name)) if cp.has_section(name) else {}
        bad = set(items) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        values[name] = items

    problem_items = values["problem"]
    base_problem, base_grid, base_run = ProblemSection(), GridSection(), RunSection()
    if "builtin" in problem_items:
        id = problem_items.pop("builtin")
        if id not in BUILTIN_IDS:
            raise ConfigError(f"unknown builtin {id!r}")
        base_problem, base_grid, base_run = _builtin_section(id)
    problem = replace(base_problem, **{k: _convert(ProblemSection, k, v) for k, v in problem_items.items()})
    grid = replace(base_grid, **{k: _convert(GridSection, k, v) for k, v in values["grid"].items()})
    sections = {"run": replace(base_run, **{k: _convert(RunSection, k, v) for k, v in values["run"].items()})}
    for name in ("estimation", "output"):
        cls = _SECTIONS[name]
        sections[name] = cls(**{k: _convert(cls, k, v) for k, v in values[name].items()})
    cfg = RunConfig(problem=problem, grid=grid, **sections)
    return _complete(cfg)


def _complete(cfg: RunConfig) -> RunConfig:
    """Fill derived defaults and check cross-field rules."""
    p, g, r, e, o = cfg.problem, cfg.grid, cfg.run, cfg.estimation, cfg.output
    if p.n < 1 or p.m < 0 or p.k < 1:
        raise ConfigError("need n >= 1, m >= 0, k >= 1")
    if p.lo is None:
        p = replace(p, lo=(0.0,) * p.k)
    if p.hi is None:
        p = replace(p, hi=(1.0,) * p.k)
    if len(p.lo) != p.k or len(p.hi) != p.k:
        raise ConfigError(f"lo and hi need {p.k} entries")
    if (p.t_lo is None) != (p.t_hi is None):
        raise ConfigError("give both t_lo and t_hi, or neither")
    if len(p.c) != p.n:
        raise ConfigError(f"need {p.n} initial functions in c, got {len(p.c)}")
    if (p.G is None) != (p.g is None):
        raise ConfigError("a split needs both G and g")
    if g.n_x is None:
        g = replace(g, n_x=(33,) * p.k)
    if len(g.n_x) != p.k:
        raise ConfigError(f"n_x needs {p.k} entries")
    if g.ghost is not None and g.ghost < 0:
        raise ConfigError("ghost must be 'auto' or a nonnegative integer")
    if g.stencil not in ("compact", "composed"):
        raise ConfigError("stencil must be 'compact' or 'composed'")
    if r.p_max < 1 or not r.tol > 0:
        raise ConfigError("need p_max >= 1 and tol > 0")
    if r.norm not in ("sup", "cN"):
        raise ConfigError("norm must be 'sup' or 'cN'")
    if e.samples < 1:
        raise ConfigError("samples must be >= 1")
    if e.box_center not in ("u0", "u0_bar"):
        raise ConfigError("box_center must be 'u0' or 'u0_bar'")
    if o.dump_fields not in ("none", "last", "all"):
        raise ConfigError("dump_fields must be 'none', 'last' or 'all'")
    return replace(cfg, problem=p, grid=g)


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return json.dumps(list(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_ini(cfg: RunConfig) -> str:
    """Serialize ``cfg`` so that :func:`parse_config` returns an equal config."""
    buf = io.StringIO()
    for name in _SECTIONS:
        section = getattr(cfg, name)
        buf.write(f"[{name}]\n")
        for f in fields(section):
            value = getattr(section, f.name)
            if value is None:
                if f.name == "ghost":
                    buf.write("ghost = auto\n")
                continue
            buf.write(f"{f.name} = {_fmt_value(value)}\n")
        buf.write("\n")
    return buf.getvalue().rstrip("\n") + "\n"


def builtin_config(id: str) -> RunConfig:
    problem, grid, run = _builtin_section(id)
    return _complete(RunConfig(problem=problem, grid=grid, run=run))


def export_builtin(id: str, path: str | os.PathLike) -> Path:
    """Write the config of builtin ``id`` to ``path``."""
    if id not in BUILTIN_IDS:
        raise ConfigError(f"unknown builtin {id!r}")
    path = Path(path)
    path.write_text(config_to_ini(builtin_config(id)), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# running


def build_problem(cfg: RunConfig, t_lo: float, t_hi: float, ghost: int = 0) -> Problem:
    p = cfg.problem
    try:
        domain = Domain(p.k, p.lo, p.hi, t_lo, t_hi, ghost)
        return Problem.from_text(p.n, p.m, p.k, p.F, p.c, domain, R=p.R, G=p.G, g=p.g,
                                 exact=p.exact, L_override=p.L, M_override=p.M)
    except (ExprError, ProblemError, GridError) as exc:
        raise ConfigError(str(exc)) from exc


def _time_interval(cfg: RunConfig, threads: int) -> tuple[float, float]:
    p = cfg.problem
    if p.t_lo is not None:
        return p.t_lo, p.t_hi
    lo = -PROVISIONAL_T if cfg.run.symmetric_time else 0.0
    prob = build_problem(cfg, lo, PROVISIONAL_T)
    grid = Grid(prob.domain, cfg.grid.n_t, cfg.grid.n_x)
    constants = compute_constants(prob, grid, cfg.estimation.samples, cfg.estimation.seed,
                                  threads, cfg.estimation.box_center)
    d1 = constants.delta1 if math.isfinite(constants.delta1) else PROVISIONAL_T
    return (-d1 if cfg.run.symmetric_time else 0.0), d1


@dataclass
class RunResult:
    exit_code: int
    report: dict
    history: object = None
    grid: Grid | None = None
    wall_time: float = 0.0


def _error_vs_exact(prob: Problem, grid: Grid, exact_field, u) -> float | None:
    if exact_field is None:
        return None
    return float(np.max(np.abs(u.interior() - exact_field.interior())))


def execute(cfg: RunConfig, threads: int = 1) -> RunResult:
    """Run analysis and iteration for ``cfg``; never raises for run-time failures."""
    started = time.perf_counter()
    report: dict = {"version": __version__, "config": cfg.effective()}
    try:
        t_lo, t_hi = _time_interval(cfg, threads)
        probe = build_problem(cfg, t_lo, t_hi)
        stencil = cfg.grid.stencil
        ghost = cfg.grid.ghost if cfg.grid.ghost is not None else required_ghost(probe, cfg.run.p_max, stencil)
        prob = build_problem(cfg, t_lo, t_hi, ghost)
        grid = Grid(prob.domain, cfg.grid.n_t, cfg.grid.n_x)
    except (ConfigError, GridError) as exc:
        return _failed(report, EXIT_CONFIG, "config", str(exc), started)
    except (EvaluationError, ExprError) as exc:
        return _failed(report, EXIT_EVAL, "evaluation", str(exc), started)

    try:
        constants = compute_constants(prob, grid, cfg.estimation.samples, cfg.estimation.seed,
                                      threads, cfg.estimation.box_center)
    except (EvaluationError, ExprError) as exc:
        return _failed(report, EXIT_EVAL, "evaluation", str(exc), started)
    report["constants"] = constants.to_dict()
    span = max(abs(t_lo), abs(t_hi))
    run_gamma = constants.L * span ** prob.n / math.factorial(prob.n - 1)
    report["run"] = {
        "t_lo": t_lo, "t_hi": t_hi, "ghost": ghost,
        "grid_shape": list(grid.shape),
        "within_delta1": bool(span <= constants.delta1 * (1 + 1e-12)),
        "run_gamma": run_gamma,
    }
    messages: list[str] = []
    if constants.gamma >= 1:
        messages.append(f"gamma = {constants.gamma:.6g} >= 1: the error bound does not apply")

    exit_code = EXIT_OK
    error = None
    history = None
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        try:
            history = iterate(prob, grid, cfg.run.p_max, cfg.run.tol, cfg.run.norm, threads, stencil)
            exit_code = EXIT_OK if history.stop_reason == "fixed_point" else EXIT_MAX_ITER
        except DivergenceError as exc:
            history = exc.history
            exit_code, error = EXIT_DIVERGED, {"code": "divergence", "message": str(exc)}
        except (EvaluationError, ExprError) as exc:
            exit_code, error = EXIT_EVAL, {"code": "evaluation", "message": str(exc)}

    rows = []
    if history is not None:
        exact_field = sample(prob.exact, grid) if prob.exact is not None else None
        for state in history:
            row = {
                "p": state.p,
                "increment_norm": state.increment_norm,
                "increment_sup": state.increment_sup,
                "increment_cN": state.increment_cn,
                "measured_ratio": state.measured_ratio,
            }
            if constants.gamma < 1:
                row["error_bound"] = error_bound(prob.R, constants.gamma, state.p)
            if exact_field is not None:
                row["error_vs_exact"] = _error_vs_exact(prob, grid, exact_field, state.u)
            row["ball_escape"] = state.ball_escape
            rows.append(row)
        report["start_offset"] = history[0].increment_sup
        messages.extend(history.warnings)
    report["iterations"] = rows
    report["stop_reason"] = history.stop_reason if history is not None else "error"
    report["exit_code"] = exit_code
    report["warnings"] = messages
    if error is not None:
        report["error"] = error
    return RunResult(exit_code, report, history, grid, time.perf_counter() - started)


def _failed(report: dict, code: int, kind: str, message: str, started: float) -> RunResult:
    report.update(iterations=[], stop_reason="error", exit_code=code,
                  error={"code": kind, "message": message})
    return RunResult(code, report, wall_time=time.perf_counter() - started)


ITERATION_COLUMNS = ("p", "increment_norm", "increment_sup", "increment_cN", "measured_ratio",
                     "error_bound", "error_vs_exact")


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def write_outputs(result: RunResult, cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / cfg.output.report).write_text(report_json(result.report), encoding="utf-8")
    (out_dir / "timing.json").write_text(json.dumps({"wall_time_s": result.wall_time}) + "\n",
                                         encoding="utf-8")
    with open(out_dir / cfg.output.iterations_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ITERATION_COLUMNS)
        for row in result.report["iterations"]:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) for c in ITERATION_COLUMNS])
    if result.history is None or cfg.output.dump_fields == "none":
        return
    states = list(result.history) if cfg.output.dump_fields == "all" else [result.history.last]
    field_dir = out_dir / "fields"
    field_dir.mkdir(exist_ok=True)
    for state in states:
        write_csv(state.u, field_dir / f"u_{state.p:03d}.csv")


def _out_dir(cfg: RunConfig, config_path: Path | None, cli_out: str | None) -> Path:
    if cli_out:
        return Path(cli_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    base = config_path.parent if config_path is not None else Path(".")
    return base / cfg.output.dir


# --------------------------------------------------------------------------
# entry point


def _print_error(code: str, message: str) -> None:
    print(json.dumps({"code": code, "message": message}), file=sys.stderr)


def _summary(result: RunResult) -> str:
    rep = result.report
    lines = []
    if "constants" in rep:
        c = rep["constants"]
        lines.append(f"K={c['K']} M={c['M']:.6g} L={c['L']:.6g} delta={c['delta']} "
                     f"delta1={c['delta1']} gamma={c['gamma']:.6g}")
    for row in rep["iterations"]:
        parts = [f"p={row['p']:2d}", f"increment={row['increment_norm']:.3e}"]
        if row["measured_ratio"] is not None:
            parts.append(f"ratio={row['measured_ratio']:.3f}")
        if "error_vs_exact" in row:
            parts.append(f"error={row['error_vs_exact']:.3e}")
        lines.append("  ".join(parts))
    lines.append(f"stop: {rep['stop_reason']} (exit {rep['exit_code']})")
    return "\n".join(lines)


def cmd_run(args) -> int:
    path = Path(args.config)
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        _print_error("config", str(exc))
        return EXIT_CONFIG
    result = execute(cfg, threads=args.threads)
    try:
        write_outputs(result, cfg, _out_dir(cfg, path, args.out))
    except OSError as exc:
        _print_error("io", str(exc))
        return EXIT_CONFIG
    if "error" in result.report:
        _print_error(result.report["error"]["code"], result.report["error"]["message"])
    for message in result.report.get("warnings", []):
        log.warning(message)
    if not args.quiet:
        print(_summary(result))
    return result.exit_code


def cmd_check(args) -> int:
    try:
        cfg = load_config(args.config)
        p = cfg.problem
        t_lo = p.t_lo if p.t_lo is not None else 0.0
        t_hi = p.t_hi if p.t_hi is not None else PROVISIONAL_T
        prob = build_problem(cfg, t_lo, t_hi, cfg.grid.ghost or 0)
        Grid(prob.domain, cfg.grid.n_t, cfg.grid.n_x)
    except (ConfigError, GridError) as exc:
        _print_error("config", str(exc))
        return EXIT_CONFIG
    if not args.quiet:
        print(config_to_ini(cfg), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        export_builtin(args.id, args.path)
    except ConfigError as exc:
        _print_error("config", str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _print_error("io", str(exc))
        return EXIT_CONFIG
    return EXIT_OK


def cmd_list(args) -> int:
    for id in BUILTIN_IDS:
        print(f"{id:18s} {builtin(id).description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="picardpde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("--out", help=f"output directory (overrides the config and ${OUT_ENV})")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run a config and write reports")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("check", parents=[common], help="validate a config without running it")
    p.add_argument("config")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("export", parents=[common], help="write the config of a builtin problem")
    p.add_argument("id", choices=BUILTIN_IDS)
    p.add_argument("path")
    p.set_defaults(func=cmd_export)
    p = sub.add_parser("list", parents=[common], help="list builtin problems")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        _print_error("config", "--threads must be >= 1")
        return EXIT_CONFIG
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
