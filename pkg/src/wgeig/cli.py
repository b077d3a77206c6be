"""Experiment driver: configuration, presets, convergence runs and output files."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .algorithms import direct_wg, two_grid, two_space
from .analysis import (ConvergenceRow, ConvergenceTable, OrderModel, eigenfunction_error,
                       spectrum_for)
from .mesh import PATTERNS, build_l_shape, build_unit_square
from .polyspace import project_Qh_many
from .solvers import DEFAULT_TOL, SolverError

DOMAINS = ("unit_square", "l_shape")
ALGORITHMS = ("direct", "two_grid", "two_space")
CSV_COLUMNS = ("level", "H", "h", "index", "lambda_approx", "lambda_exact", "eig_error",
               "eigfun_error_triplebar", "order_lambda", "order_fun", "lower_bound_flag",
               "wall_time_coarse", "wall_time_fine")
# finest h allowed without --unlock-large, keyed by "k = 1" / "k >= 2"
DESK_LIMIT = {1: Fraction(1, 256), 2: Fraction(1, 64)}

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def parse_size(text) -> Fraction:
    try:
        value = Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse mesh size {text!r}") from exc
    if value <= 0:
        raise ConfigError(f"mesh size must be positive, got {text!r}")
    if value.numerator != 1:
        raise ConfigError(f"mesh size {text!r} is not of the form 1/n")
    return value


def parse_schedule(text: str) -> list:
    """``"1/4,1/16;1/8,1/64"`` -> [(1/4, 1/16), (1/8, 1/64)]; single sizes give 1-tuples."""
    levels = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        levels.append(tuple(parse_size(s) for s in chunk.split(",")))
    return levels


def format_schedule(levels) -> str:
    return ";".join(",".join(str(s) for s in lvl) for lvl in levels)


@dataclass
class ExperimentConfig:
    """One convergence study.

    ``schedule`` holds (H, h) pairs for two-grid runs and (h,) for the others.
    """

    algorithm: str = "direct"
    domain: str = "unit_square"
    pattern: str = "right_up"
    k: int = 1
    k1: int = 1
    k2: int = 2
    epsilon: float = 0.0
    schedule: list = field(default_factory=list)
    nev: int = 6
    tol: float = DEFAULT_TOL
    gamma: float | None = None
    out_dir: str | None = None
    csv: str | None = None
    plot_data: str | None = None
    unlock_large: bool = False
    jobs: int = 1
    name: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.algorithm == "two_space":
            if not 1 <= self.k1 <= self.k2:
                raise ConfigError(f"need 1 <= k1 <= k2, got k1={self.k1}, k2={self.k2}")
        elif self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.nev < 1:
            raise ConfigError(f"nev must be >= 1, got {self.nev}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if not self.schedule:
            raise ConfigError("schedule is empty")
        for i, lvl in enumerate(self.schedule):
            if self.algorithm == "two_grid":
                if len(lvl) != 2:
                    raise ConfigError(f"level {i}: two_grid needs an (H, h) pair, got {lvl}")
                H, h = lvl
                ratio = H / h
                m = ratio.numerator.bit_length() - 1
                if ratio.denominator != 1 or ratio.numerator != 2 ** m or m < 1:
                    raise ConfigError(f"level {i}: h={h} is not H/2^m with m >= 1 for H={H}")
            elif len(lvl) != 1:
                raise ConfigError(f"level {i}: {self.algorithm} takes a single size h, got {lvl}")
        return self

    @property
    def degree(self) -> int:
        """Degree of the space the reported eigenpairs live in."""
        return self.k2 if self.algorithm == "two_space" else self.k

    def desk_limit(self) -> Fraction:
        return DESK_LIMIT[1 if self.degree == 1 else 2]

    def order_model(self) -> OrderModel:
        k = self.k1 if self.algorithm == "two_space" else self.k
        return OrderModel(k, self.epsilon, self.k2 if self.algorithm == "two_space" else None,
                          convex=self.domain == "unit_square", gamma_override=self.gamma)


_INT_KEYS = {"k", "k1", "k2", "nev", "jobs"}
_FLOAT_KEYS = {"epsilon", "tol", "gamma"}
_BOOL_KEYS = {"unlock_large"}


def _coerce(key, value):
    if key not in {f.name for f in dataclasses.fields(ExperimentConfig)}:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        if key == "schedule":
            return parse_schedule(value) if isinstance(value, str) else list(value)
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return None if value in (None, "", "none") else float(value)
        if key in _BOOL_KEYS:
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        if key == "algorithm":
            return str(value).replace("-", "_")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def load_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(key.replace("-", "_"), value)
    return out


def make_config(**kw) -> ExperimentConfig:
    kw = {k: _coerce(k, v) for k, v in kw.items()}
    return ExperimentConfig(**kw).validate()


def _sched(*pairs):
    return [tuple(Fraction(s) for s in p) for p in pairs]


_FIG_SIZES = _sched(("1/4",), ("1/8",), ("1/16",), ("1/32",), ("1/64",))

_PRESETS = {
    "table1": dict(algorithm="two_grid", k=1, epsilon=0.0, pattern="crisscross",
                   schedule=_sched(("1/4", "1/16"), ("1/8", "1/64"), ("1/16", "1/256"))),
    "table2": dict(algorithm="two_grid", k=1, epsilon=0.1, pattern="crisscross",
                   schedule=_sched(("1/4", "1/16"), ("1/8", "1/64"), ("1/16", "1/256"))),
    "table3_4": dict(algorithm="two_grid", k=2, epsilon=0.1,
                     schedule=_sched(("1/4", "1/16"), ("1/8", "1/64"), ("1/16", "1/256"))),
    "table6_7": dict(algorithm="two_grid", k=2, epsilon=0.1,
                     schedule=_sched(("1/4", "1/8"), ("1/16", "1/64"), ("1/64", "1/512"))),
    "fig1_2": dict(algorithm="two_space", k1=1, k2=2, epsilon=0.2, schedule=_FIG_SIZES),
    "fig3_4": dict(algorithm="two_space", k1=2, k2=3, epsilon=0.2, schedule=_FIG_SIZES),
    "table8": dict(algorithm="two_grid", domain="l_shape", k=2, epsilon=0.1,
                   schedule=_sched(("1/4", "1/8"), ("1/16", "1/64"), ("1/64", "1/512"))),
}


def presets() -> dict:
    """Named configurations for the reference convergence studies."""
    return {name: make_config(name=name, **dict(kw, schedule=list(kw["schedule"])))
            for name, kw in _PRESETS.items()}


# ---------------------------------------------------------------- running

@dataclass
class RunOutcome:
    config: ExperimentConfig
    table: ConvergenceTable
    skipped: list
    files: dict

    @property
    def failed(self) -> bool:
        return any(r.failed for r in self.table.rows)

    @property
    def exit_code(self) -> int:
        return EXIT_SOLVER if self.failed else EXIT_OK


def _build_mesh(cfg: ExperimentConfig, size: Fraction):
    n = size.denominator
    if cfg.domain == "unit_square":
        return build_unit_square(n, cfg.pattern)
    return build_l_shape(n, cfg.pattern)


def _run_level(cfg: ExperimentConfig, lvl, spectrum) -> ConvergenceRow:
    indices = list(range(1, cfg.nev + 1))
    t0 = time.perf_counter()
    if cfg.algorithm == "direct":
        (h,) = lvl
        res = direct_wg(_build_mesh(cfg, h), cfg.k, cfg.epsilon, nev=cfg.nev, tol=cfg.tol)
        forms = res.forms
        values = [float(v) for v in res.eigenvalues]
        funcs = [res.function(j - 1) for j in indices]
        wall_coarse, wall_fine = [0.0] * cfg.nev, [time.perf_counter() - t0] * cfg.nev
        H = None
    else:
        if cfg.algorithm == "two_grid":
            H, h = lvl
            m = int(round(math.log2(H / h)))
            results, forms = two_grid(_build_mesh(cfg, H), m, cfg.k, cfg.epsilon,
                                      index=indices, tol=cfg.tol, return_forms=True)
        else:
            (h,) = lvl
            H = None
            results, forms = two_space(_build_mesh(cfg, h), cfg.k1, cfg.k2, cfg.epsilon,
                                       index=indices, tol=cfg.tol, return_forms=True)
        values = [r.value for r in results]
        funcs = [r.corrected for r in results]
        wall_coarse = [r.timings["coarse_solve"] for r in results]
        wall_fine = [r.timings["fine_setup"] + r.timings["transfer"] + r.timings["fine_solve"]
                     + r.timings["quotient"] for r in results]
    row = ConvergenceRow(None if H is None else float(H), float(h), values,
                         wall_coarse=wall_coarse, wall_fine=wall_fine)
    if spectrum is not None:
        exact = spectrum.values(cfg.nev)
        row.eig_errors = [float(e - v) for e, v in zip(exact, values)]
        projected = {}
        row.fun_errors = []
        for j, u in zip(indices, funcs):
            cluster = spectrum.cluster_of(j)
            if id(cluster) not in projected:
                projected[id(cluster)] = project_Qh_many(cluster.functions, forms.space)
            row.fun_errors.append(eigenfunction_error(forms.space, u, cluster.functions,
                                                      forms=forms,
                                                      projected=projected[id(cluster)]))
    return row


def _safe_level(cfg, lvl, spectrum) -> ConvergenceRow:
    try:
        return _run_level(cfg, lvl, spectrum)
    except (SolverError, ZeroDivisionError, np.linalg.LinAlgError, MemoryError) as exc:
        H = float(lvl[0]) if len(lvl) == 2 else None
        return ConvergenceRow(H, float(lvl[-1]), [], failed=f"{type(exc).__name__}: {exc}")


def run(cfg: ExperimentConfig, write: bool = True) -> RunOutcome:
    """Execute the schedule; levels beyond the desk limit are skipped unless unlocked."""
    cfg.validate()
    spectrum = spectrum_for(cfg.domain, cfg.nev)
    active, skipped = [], []
    for lvl in cfg.schedule:
        if not cfg.unlock_large and lvl[-1] < cfg.desk_limit():
            skipped.append(lvl)
        else:
            active.append(lvl)
    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            rows = list(pool.map(lambda lvl: _safe_level(cfg, lvl, spectrum), active))
    else:
        rows = [_safe_level(cfg, lvl, spectrum) for lvl in active]
    table = ConvergenceTable(cfg.algorithm, cfg.domain,
                             cfg.k1 if cfg.algorithm == "two_space" else cfg.k,
                             cfg.epsilon, cfg.pattern,
                             cfg.k2 if cfg.algorithm == "two_space" else None, rows)
    outcome = RunOutcome(cfg, table, skipped, {})
    if write:
        _write_outputs(outcome)
    return outcome


# ---------------------------------------------------------------- output

def _fmt(x, spec=".4e"):
    return "" if x is None else format(x, spec)


def _size_label(x):
    return "" if x is None else str(Fraction(x).limit_denominator(1 << 20))


def _good_rows(table):
    return [r for r in table.rows if r.failed is None]


def _per_level_orders(table, attr):
    """orders[level][index] aligned with successful rows (None on the first)."""
    good = _good_rows(table)
    n = len(good)
    out = [[None] * len(good[0].values) for _ in range(n)] if good else []
    if n < 2 or getattr(good[0], attr) is None:
        return out
    for j, (orders, _) in enumerate(getattr(table, "eigenvalue_orders" if attr == "eig_errors"
                                            else "eigenfunction_orders")()):
        for i, o in enumerate(orders):
            out[i + 1][j] = o
    return out


def _monotone_flags(table):
    good = _good_rows(table)
    flags = [[None] * len(good[0].values) for _ in good] if good else []
    for i in range(1, len(good)):
        flags[i] = [b > a for a, b in zip(good[i - 1].values, good[i].values)]
    return flags


def format_table(outcome: RunOutcome) -> str:
    """Human-readable table: size rows, then per-index error (or value) and order rows."""
    cfg, table = outcome.config, outcome.table
    good = _good_rows(table)
    lines = []
    head = f"{cfg.name or cfg.algorithm}: {cfg.algorithm} on {cfg.domain} ({cfg.pattern})"
    if cfg.algorithm == "two_space":
        head += f", k1={cfg.k1}, k2={cfg.k2}"
    else:
        head += f", k={cfg.k}"
    lines.append(head + f", epsilon={cfg.epsilon:g}")
    w = 16
    if table.algorithm == "two_grid":
        lines.append("H".ljust(w) + "".join(_size_label(r.H).rjust(w) for r in good))
    lines.append("h".ljust(w) + "".join(_size_label(r.h).rjust(w) for r in good))
    if good and good[0].eig_errors is not None:
        eo = _per_level_orders(table, "eig_errors")
        fo = _per_level_orders(table, "fun_errors")
        for j in range(cfg.nev):
            lines.append(f"lam_{j + 1} err".ljust(w)
                         + "".join(_fmt(r.eig_errors[j]).rjust(w) for r in good))
            lines.append("order".ljust(w) + "".join(_fmt(o[j], ".4f").rjust(w) for o in eo))
        for j in range(cfg.nev):
            lines.append(f"u_{j + 1} err".ljust(w)
                         + "".join(_fmt(r.fun_errors[j]).rjust(w) for r in good))
            lines.append("order".ljust(w) + "".join(_fmt(o[j], ".4f").rjust(w) for o in fo))
        model = cfg.order_model()
        if cfg.algorithm == "two_grid":
            H, h = cfg.schedule[0]
            p = math.log(float(h)) / math.log(float(H))
            lines.append(f"predicted orders in H: eigenvalue {model.two_grid_eigenvalue(p):.4g}, "
                         f"eigenfunction {model.two_grid_eigenfunction(p):.4g}")
        elif cfg.algorithm == "two_space":
            lines.append(f"predicted eigenvalue order in h: {model.two_space_eigenvalue():.4g}")
    elif good:
        flags = _monotone_flags(table)
        for j in range(cfg.nev):
            trend = "up" if len(good) > 1 and all(f[j] for f in flags[1:]) else "not monotone"
            lines.append(f"lam_{j + 1}".ljust(w)
                         + "".join(format(r.values[j], ".10f").rjust(w) for r in good)
                         + f"  trend: {trend}")
    for r in table.rows:
        if r.failed:
            lines.append(f"level H={_size_label(r.H)} h={_size_label(r.h)} FAILED: {r.failed}")
    for lvl in outcome.skipped:
        lines.append(f"skipped level {format_schedule([lvl])} (beyond desk limit; "
                     f"use --unlock-large)")
    return "\n".join(lines) + "\n"


def csv_rows(outcome: RunOutcome) -> list:
    table = outcome.table
    good = _good_rows(table)
    eo = _per_level_orders(table, "eig_errors")
    fo = _per_level_orders(table, "fun_errors")
    mono = _monotone_flags(table) if good and good[0].eig_errors is None else None
    spectrum = spectrum_for(table.domain, outcome.config.nev)
    exact = spectrum.values(outcome.config.nev) if spectrum is not None else None
    rows = []
    for i, r in enumerate(good):
        for j, lam in enumerate(r.values):
            if mono is not None:
                flag = mono[i][j]
            else:
                flag = r.eig_errors[j] >= 0
            rows.append([
                i, _size_label(r.H), _size_label(r.h), j + 1, repr(lam),
                "" if exact is None else repr(float(exact[j])),
                "" if r.eig_errors is None else repr(r.eig_errors[j]),
                "" if r.fun_errors is None else repr(r.fun_errors[j]),
                "" if eo[i][j] is None else repr(eo[i][j]),
                "" if fo[i][j] is None else repr(fo[i][j]),
                "" if flag is None else int(flag),
                f"{r.wall_coarse[j]:.6f}", f"{r.wall_fine[j]:.6f}",
            ])
    return rows


def format_csv(outcome: RunOutcome) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(csv_rows(outcome))
    return buf.getvalue()


def format_plot_data(outcome: RunOutcome) -> str:
    """Blocks of ``H h |eig_error| eigfun_error`` per index (or ``H h value``)."""
    good = _good_rows(outcome.table)
    lines = []
    for j in range(outcome.config.nev):
        lines.append(f"# index {j + 1}")
        for r in good:
            H = "nan" if r.H is None else repr(r.H)
            if r.eig_errors is None:
                lines.append(f"{H} {r.h!r} {r.values[j]!r}")
            else:
                lines.append(f"{H} {r.h!r} {abs(r.eig_errors[j])!r} {r.fun_errors[j]!r}")
        lines.append("")
        lines.append("")
    return "\n".join(lines)


def _write_outputs(outcome: RunOutcome) -> None:
    cfg = outcome.config
    base = Path(cfg.out_dir) if cfg.out_dir else None
    stem = cfg.name or cfg.algorithm

    def resolve(explicit, suffix):
        if explicit:
            return Path(explicit)
        if base is not None:
            return base / f"{stem}{suffix}"
        return None

    targets = {"table": resolve(None, ".txt"), "csv": resolve(cfg.csv, ".csv"),
               "plot_data": resolve(cfg.plot_data, ".dat")}
    writers = {"table": format_table, "csv": format_csv, "plot_data": format_plot_data}
    for key, path in targets.items():
        if path is None:
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(writers[key](outcome))
        outcome.files[key] = path


# ---------------------------------------------------------------- command line

def _add_common(p, solver_flags=True):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--domain", choices=DOMAINS)
    p.add_argument("--pattern", choices=PATTERNS)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--schedule", help='levels, e.g. "1/4,1/16;1/8,1/64" or "1/8;1/16"')
    p.add_argument("--nev", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--gamma", type=float, help="override the dual-regularity exponent")
    p.add_argument("--out-dir")
    p.add_argument("--csv")
    p.add_argument("--plot-data")
    p.add_argument("--unlock-large", action="store_true", default=None)
    p.add_argument("--jobs", type=int, help="levels run concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgeig", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("direct", "two-grid"):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--k", type=int)
    p = sub.add_parser("two-space")
    _add_common(p)
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p = sub.add_parser("preset")
    p.add_argument("name")
    _add_common(p)
    sub.add_parser("list-presets")
    return parser


_FLAG_KEYS = ("domain", "pattern", "epsilon", "schedule", "nev", "tol", "gamma", "out_dir",
              "csv", "plot_data", "unlock_large", "jobs", "k", "k1", "k2")


def config_from_args(args) -> ExperimentConfig:
    if args.command == "preset":
        table = presets()
        if args.name not in table:
            raise ConfigError(f"unknown preset {args.name!r}; try list-presets")
        values = dataclasses.asdict(table[args.name])
    else:
        values = {"algorithm": args.command.replace("-", "_")}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        values.update(load_config_text(text))
        if args.command != "preset":
            values["algorithm"] = args.command.replace("-", "_")
    for key in _FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return make_config(**values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-presets":
        for name, cfg in presets().items():
            deg = f"k1={cfg.k1} k2={cfg.k2}" if cfg.algorithm == "two_space" else f"k={cfg.k}"
            print(f"{name:10s} {cfg.algorithm:9s} {cfg.domain:11s} {deg:10s} "
                  f"eps={cfg.epsilon:g} schedule={format_schedule(cfg.schedule)}")
        return EXIT_OK
    try:
        cfg = config_from_args(args)
    except (ConfigError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outcome = run(cfg)
    sys.stdout.write(format_table(outcome))
    for key, path in outcome.files.items():
        print(f"wrote {key}: {path}")
    if outcome.failed:
        print("one or more levels failed; partial results written", file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
