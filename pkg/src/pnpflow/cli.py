"""Command line interface: configuration files, presets, CSV output.

Coefficient functions in configuration files use a deliberately tiny
expression language: numbers, x, pi, + - * / ^ (or **), parentheses,
sin, cos, and indicator(lo, hi) for a closed-interval step.  No general
interpreter is involved.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .driver import ConvergenceRow, RunConfig, RunResult, convergence_study, run
from .errors import ConfigurationError, SolverError
from .mesh import Grid1D, build_grid
from .model import BoundaryEnd, PnpModel, SpeciesSpec
from .optimizer import PgParams

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


# ---------------------------------------------------------------- expressions

_TOKEN_RE = re.compile(r"""
    (?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),])
  | (?P<ws>\s+)
  | (?P<bad>.)
""", re.VERBOSE)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    for mo in _TOKEN_RE.finditer(text):
        kind = mo.lastgroup
        if kind == "ws":
            continue
        if kind == "bad":
            raise ConfigurationError(
                f"bad character {mo.group()!r} in expression {text!r}")
        tokens.append((kind, mo.group()))
    tokens.append(("end", ""))
    return tokens


class Expression:
    """Compiled coefficient function of x; keeps its source text."""

    def __init__(self, fn, source: str):
        self._fn = fn
        self.source = source

    def __call__(self, x):
        return self._fn(np.asarray(x, dtype=float))

    def __repr__(self):
        return f"Expression({self.source!r})"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, tok = self.next()
        if tok != value:
            raise ConfigurationError(
                f"expected {value!r} in expression {self.text!r}, got {tok!r}")

    def parse(self):
        fn = self.expr()
        if self.peek()[0] != "end":
            raise ConfigurationError(
                f"trailing input in expression {self.text!r}: "
                f"{self.peek()[1]!r}")
        return fn

    def expr(self):
        fn = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            rhs = self.term()
            fn = (lambda a, b: lambda x: a(x) + b(x)) (fn, rhs) \
                if op == "+" else (lambda a, b: lambda x: a(x) - b(x))(fn, rhs)
        return fn

    def term(self):
        fn = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            rhs = self.unary()
            fn = (lambda a, b: lambda x: a(x) * b(x))(fn, rhs) \
                if op == "*" else (lambda a, b: lambda x: a(x) / b(x))(fn, rhs)
        return fn

    def unary(self):
        if self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            inner = self.unary()
            return inner if op == "+" else (lambda a: lambda x: -a(x))(inner)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.next()
            expo = self.unary()
            return (lambda a, b: lambda x: a(x) ** b(x))(base, expo)
        return base

    def atom(self):
        kind, tok = self.next()
        if kind == "num":
            v = float(tok)
            return lambda x: v
        if kind == "name":
            if tok == "x":
                return lambda x: x
            if tok == "pi":
                return lambda x: np.pi
            if tok in ("sin", "cos"):
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                f = np.sin if tok == "sin" else np.cos
                return (lambda g, f=f: lambda x: f(g(x)))(arg)
            if tok == "indicator":
                self.expect("(")
                lo = self._constant(self.expr())
                self.expect(",")
                hi = self._constant(self.expr())
                self.expect(")")
                if not hi >= lo:
                    raise ConfigurationError(
                        f"indicator bounds out of order in {self.text!r}")
                return lambda x: ((x >= lo) & (x <= hi)).astype(float)
            raise ConfigurationError(
                f"unknown name {tok!r} in expression {self.text!r}")
        if tok == "(":
            fn = self.expr()
            self.expect(")")
            return fn
        raise ConfigurationError(
            f"unexpected token {tok!r} in expression {self.text!r}")

    def _constant(self, fn) -> float:
        probe = fn(np.array([0.0, 1.0]))
        vals = np.broadcast_to(np.asarray(probe, dtype=float), (2,))
        if vals[0] != vals[1]:
            raise ConfigurationError(
                f"indicator bounds must be constants in {self.text!r}")
        return float(vals[0])


def parse_expression(text: str) -> Expression:
    return Expression(_Parser(text).parse(), text.strip())


# -------------------------------------------------------------- config files

_SECTION_KEYS = {
    "domain": {"a": True, "b": True, "N": True},
    "time": {"tau": True, "T": True, "snapshots": False},
    "poisson": {"epsilon": True, "f": True},
    "bc.left": {"kind": True, "phi_b": False, "beta": False},
    "bc.right": {"kind": True, "phi_b": False, "beta": False},
    "solver": {"tol": False, "iter_max": False, "delta_override": False,
               "enforce_clamp": False},
}
_SPECIES_KEYS = {"z": True, "D": True, "rho_in": True}


@dataclass
class ParsedConfig:
    """Configuration as a model/grid/run triple plus its raw sections."""

    model: PnpModel
    grid: Grid1D
    run_cfg: RunConfig
    raw: dict[str, dict[str, str]]


def _read_sections(text: str) -> dict[str, dict[str, str]]:
    import configparser

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse configuration: {exc}") from exc
    return {name: dict(cp[name]) for name in cp.sections()}


def _check_keys(section: str, entries: dict[str, str],
                allowed: dict[str, bool]) -> None:
    for key in entries:
        if key not in allowed:
            raise ConfigurationError(
                f"unknown key {key!r} in section [{section}]")
    for key, required in allowed.items():
        if required and key not in entries:
            raise ConfigurationError(
                f"section [{section}] is missing required key {key!r}")


def _get_float(section: str, entries: dict[str, str], key: str) -> float:
    try:
        return float(entries[key])
    except ValueError as exc:
        raise ConfigurationError(
            f"[{section}] {key} = {entries[key]!r} is not a number") from exc


def _get_int(section: str, entries: dict[str, str], key: str) -> int:
    raw = entries[key]
    try:
        v = int(raw)
    except ValueError as exc:
        raise ConfigurationError(
            f"[{section}] {key} = {raw!r} is not an integer") from exc
    return v


def _parse_bc(section: str, entries: dict[str, str]) -> BoundaryEnd:
    _check_keys(section, entries, _SECTION_KEYS[section])
    kind = entries["kind"].strip().lower()
    phi_b = _get_float(section, entries, "phi_b") if "phi_b" in entries else 0.0
    beta = _get_float(section, entries, "beta") if "beta" in entries else 0.0
    if kind != "robin" and "beta" in entries:
        raise ConfigurationError(
            f"[{section}] beta only applies to robin boundaries")
    try:
        return BoundaryEnd(kind=kind, phi_b=phi_b, beta=beta)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc


def parse_config_text(text: str) -> ParsedConfig:
    """Parse a configuration document into model, grid and run settings."""
    sections = _read_sections(text)

    species_names = sorted(n for n in sections if n.startswith("species."))
    known = set(_SECTION_KEYS) | set(species_names)
    for name in sections:
        if name not in known:
            raise ConfigurationError(f"unknown section [{name}]")
    for name in ("domain", "time", "poisson", "bc.left", "bc.right"):
        if name not in sections:
            raise ConfigurationError(f"missing required section [{name}]")
    if not species_names:
        raise ConfigurationError("configuration defines no species")
    expected = [f"species.{i + 1}" for i in range(len(species_names))]
    if species_names != expected:
        raise ConfigurationError(
            f"species sections must be numbered consecutively from 1, "
            f"got {species_names}")

    dom = sections["domain"]
    _check_keys("domain", dom, _SECTION_KEYS["domain"])
    grid = build_grid(_get_float("domain", dom, "a"),
                      _get_float("domain", dom, "b"),
                      _get_int("domain", dom, "N"))

    tm = sections["time"]
    _check_keys("time", tm, _SECTION_KEYS["time"])
    snapshots: tuple[float, ...] = ()
    if "snapshots" in tm:
        try:
            snapshots = tuple(float(s) for s in tm["snapshots"].split(",") if s.strip())
        except ValueError as exc:
            raise ConfigurationError(
                f"[time] snapshots must be a comma list of times") from exc

    species = []
    for name in expected:
        entries = sections[name]
        _check_keys(name, entries, _SPECIES_KEYS)
        species.append(SpeciesSpec(
            z=_get_float(name, entries, "z"),
            D=parse_expression(entries["D"]),
            rho_in=parse_expression(entries["rho_in"])))

    po = sections["poisson"]
    _check_keys("poisson", po, _SECTION_KEYS["poisson"])
    model = PnpModel(
        species=tuple(species),
        epsilon=parse_expression(po["epsilon"]),
        f=parse_expression(po["f"]),
        left=_parse_bc("bc.left", sections["bc.left"]),
        right=_parse_bc("bc.right", sections["bc.right"]))

    pg = PgParams()
    delta_override = None
    if "solver" in sections:
        so = sections["solver"]
        _check_keys("solver", so, _SECTION_KEYS["solver"])
        kwargs = {}
        if "tol" in so:
            kwargs["tol"] = _get_float("solver", so, "tol")
        if "iter_max" in so:
            kwargs["iter_max"] = _get_int("solver", so, "iter_max")
        if "enforce_clamp" in so:
            val = so["enforce_clamp"].strip().lower()
            if val not in ("true", "false", "yes", "no", "1", "0"):
                raise ConfigurationError(
                    f"[solver] enforce_clamp = {so['enforce_clamp']!r} "
                    "is not a boolean")
            kwargs["enforce_clamp"] = val in ("true", "yes", "1")
        pg = PgParams(**kwargs)
        if "delta_override" in so:
            delta_override = _get_float("solver", so, "delta_override")

    run_cfg = RunConfig(tau=_get_float("time", tm, "tau"),
                        T=_get_float("time", tm, "T"),
                        snapshot_times=snapshots, pg=pg,
                        delta_override=delta_override)
    return ParsedConfig(model=model, grid=grid, run_cfg=run_cfg, raw=sections)


def parse_config(source: str) -> ParsedConfig:
    """Parse a configuration file path or a preset name."""
    if source in PRESETS:
        return parse_config_text(PRESETS[source])
    path = Path(source)
    if not path.exists():
        raise ConfigurationError(f"no such config file or preset: {source!r}")
    return parse_config_text(path.read_text())


def serialize_config(cfg: ParsedConfig) -> str:
    """Write a configuration back out; parsing the result reproduces it."""
    lines = []
    for name, entries in cfg.raw.items():
        lines.append(f"[{name}]")
        for key, value in entries.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


# ------------------------------------------------------------------- presets

_PRESET_BASE = """\
[domain]
a = -1
b = 1
N = 40

[time]
tau = 0.01
T = {T}
snapshots = {snapshots}

[species.1]
z = 1
D = 1
rho_in = {rho1}

[species.2]
z = -1
D = 1
rho_in = 2 + sin(pi * x)

[poisson]
epsilon = 1
f = 0

[bc.left]
kind = dirichlet
phi_b = -1

[bc.right]
kind = dirichlet
phi_b = 1
"""

PRESETS = {
    "example51": _PRESET_BASE.format(T="0.5", snapshots="0, 0.5",
                                     rho1="2 - x^2"),
    "example52": _PRESET_BASE.format(T="2", snapshots="0, 0.05, 0.25, 1.5, 2",
                                     rho1="2 - x^2"),
    "example53": _PRESET_BASE.format(T="2", snapshots="0, 0.015, 0.1, 1, 2",
                                     rho1="(10/3) * indicator(-0.5, 0.5)"),
}


# ---------------------------------------------------------------- csv output

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _fmt_time(t: float) -> str:
    return format(float(t), "g")


def write_snapshot_files(out_dir: Path, result: RunResult) -> list[Path]:
    paths = []
    centers = result.grid.centers
    for snap in result.snapshots:
        label = _fmt_time(snap.t_requested)
        for i in range(snap.rho.shape[0]):
            path = out_dir / f"rho_{i + 1}_t{label}.csv"
            _write_xy(path, centers, snap.rho[i])
            paths.append(path)
        path = out_dir / f"phi_t{label}.csv"
        _write_xy(path, centers, snap.phi[1:-1])
        paths.append(path)
    return paths


def _write_xy(path: Path, x: np.ndarray, value: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"])
        for xi, vi in zip(x, value):
            w.writerow([_fmt(xi), _fmt(vi)])


def write_convergence_csv(path: Path, rows: list[ConvergenceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "tau", "field", "error", "order"])
        for row in rows:
            for name, err in row.errors.items():
                order = row.orders[name]
                w.writerow([_fmt(row.h), _fmt(row.tau), name, _fmt(err),
                            "" if order is None else _fmt(order)])


class DiagnosticsWriter:
    """Streams diagnostics rows to CSV as the run produces them."""

    def __init__(self, path: Path, num_species: int):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        header = ["t", "energy", "kinetic"] \
            + [f"mass_{i + 1}" for i in range(num_species)] \
            + ["min_rho", "pg_iters", "pg_status"]
        self._writer.writerow(header)

    def __call__(self, rec) -> None:
        row = [_fmt(rec.t), _fmt(rec.energy), _fmt(rec.kinetic)] \
            + [_fmt(m) for m in rec.mass] \
            + [_fmt(rec.min_rho), str(rec.pg_iters), rec.pg_status]
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ------------------------------------------------------------------ commands

def _apply_overrides(cfg: ParsedConfig, args) -> ParsedConfig:
    grid, run_cfg = cfg.grid, cfg.run_cfg
    if args.N is not None:
        grid = build_grid(grid.a, grid.b, args.N)
    updates = {}
    if args.tau is not None:
        updates["tau"] = args.tau
    if getattr(args, "T", None) is not None:
        updates["T"] = args.T
    if args.tol is not None:
        updates["pg"] = replace(run_cfg.pg, tol=args.tol)
    if getattr(args, "solver", None) is not None:
        updates["solver"] = args.solver
    if updates:
        run_cfg = replace(run_cfg, **updates)
    return ParsedConfig(model=cfg.model, grid=grid, run_cfg=run_cfg,
                        raw=cfg.raw)


def _load(args) -> ParsedConfig:
    source = args.preset if args.preset else args.config
    return _apply_overrides(parse_config(source), args)


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = DiagnosticsWriter(out_dir / "diagnostics.csv",
                                   cfg.model.num_species)
    except OSError as exc:
        print(f"cannot write to output directory: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        result = run(cfg.model, cfg.grid, cfg.run_cfg, step_callback=writer)
    except ConfigurationError as exc:
        writer.close()
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        writer.close()
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    writer.close()

    try:
        write_snapshot_files(out_dir, result)
    except OSError as exc:
        print(f"cannot write snapshots: {exc}", file=sys.stderr)
        return EXIT_IO

    last = result.diagnostics.records[-1]
    print(f"completed {len(result.diagnostics.records) - 1} steps to "
          f"t={_fmt_time(last.t)} on N={cfg.grid.N} cells")
    print(f"final energy {last.energy:.9e}, min density {last.min_rho:.6e}")
    print(f"wall time {result.seconds:.2f} s (informational)")
    return EXIT_OK


def cmd_converge(args) -> int:
    try:
        cfg = _load(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        rows = convergence_study(
            cfg.model, cfg.grid.a, cfg.grid.b, base_N=args.base_N,
            levels=args.levels, coupling=args.coupling, T_eval=args.T,
            ref_N=args.ref_N, ref_tau=args.ref_tau, pg=cfg.run_cfg.pg,
            ref_solver=args.ref_solver,
            level_solver=args.solver if args.solver else "pg")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    try:
        write_convergence_csv(out_dir / "convergence.csv", rows)
    except OSError as exc:
        print(f"cannot write convergence table: {exc}", file=sys.stderr)
        return EXIT_IO

    names = list(rows[0].errors)
    print("h        tau       " + "  ".join(f"{n:>12s} (order)" for n in names))
    for row in rows:
        cells = []
        for n in names:
            order = row.orders[n]
            cells.append(f"{row.errors[n]:12.4e} "
                         f"({'  -  ' if order is None else f'{order:5.2f}'})")
        print(f"{row.h:<8.5g} {row.tau:<9.5g} " + "  ".join(cells))
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="path to a configuration file")
    src.add_argument("--preset", choices=sorted(PRESETS),
                     help="built-in example configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tol", type=float, default=None,
                   help="override solver stopping tolerance")
    p.add_argument("--tau", type=float, default=None, help="override step size")
    p.add_argument("--N", type=int, default=None, help="override cell count")
    p.add_argument("--solver", choices=["pg", "newton"], default=None,
                   help="inner minimizer (default: projected gradient)")
    p.add_argument("-v", "--verbose", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pnp",
        description="Structure-preserving transport solver for "
                    "Poisson-Nernst-Planck systems")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="advance a configuration in time")
    _add_common(p_run)
    p_run.add_argument("--T", type=float, default=None, help="override horizon")
    p_run.set_defaults(func=cmd_run)

    p_conv = sub.add_parser("converge", help="self-convergence study")
    _add_common(p_conv)
    p_conv.add_argument("--coupling", choices=["tau=h", "tau=h2"],
                        default="tau=h", help="step size per level")
    p_conv.add_argument("--levels", type=int, default=4)
    p_conv.add_argument("--base-N", dest="base_N", type=int, default=20)
    p_conv.add_argument("--ref-N", dest="ref_N", type=int, default=640)
    p_conv.add_argument("--ref-tau", dest="ref_tau", type=float, default=1e-4)
    p_conv.add_argument("--T", type=float, default=0.5,
                        help="evaluation time of the study")
    p_conv.add_argument("--ref-solver", dest="ref_solver",
                        choices=["pg", "newton"], default="newton",
                        help="inner minimizer for the reference run")
    p_conv.set_defaults(func=cmd_converge)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
