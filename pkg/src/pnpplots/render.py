"""Figure rendering for solver CSV output.

The renderer is numerics-free by design: it reads the CSV artifacts
written by the solver CLI, applies nothing beyond the log scaling of
the convergence view, and draws.  Schemas are validated up front so a
mismatched or truncated file fails with an expected-vs-found header
message instead of a confusing matplotlib error.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("snapshots", "diagnostics", "convergence")

XY_HEADER = ["x", "value"]
CONVERGENCE_HEADER = ["h", "tau", "field", "error", "order"]
DIAGNOSTICS_SHAPE = ["t", "energy", "kinetic", "mass_1..mass_s",
                     "min_rho", "pg_iters", "pg_status"]

_SNAPSHOT_NAME = re.compile(r"^(rho_\d+|phi)_t(.+)\.csv$")


class PlotDataError(Exception):
    """Missing or ill-formed input data."""


@dataclass(frozen=True)
class PlotSpec:
    """One rendering request: where to read, what to draw, where to save."""

    in_dir: Path
    kind: str
    out_path: Path
    field: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PlotDataError(f"{path.name}: {exc}") from exc
    if not rows:
        raise PlotDataError(f"{path.name}: file is empty")
    return rows[0], rows[1:]


def _check_header(path: Path, found: list[str], expected: list[str]) -> None:
    if found != expected:
        raise PlotDataError(
            f"{path.name}: expected header {expected}, found {found}")


def _column(path: Path, rows: list[list[str]], header: list[str],
            name: str) -> np.ndarray:
    idx = header.index(name)
    try:
        return np.array([float(r[idx]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise PlotDataError(
            f"{path.name}: bad value in column {name!r}: {exc}") from exc


def _field_order(name: str) -> tuple[int, str]:
    # species panels in index order, the potential last
    return (1, "") if name == "phi" else (0, name)


# -------------------------------------------------------------- snapshots

def _collect_snapshots(spec: PlotSpec) -> dict:
    series: dict[str, list[tuple[float, np.ndarray, np.ndarray]]] = {}
    for path in sorted(spec.in_dir.glob("*.csv")):
        m = _SNAPSHOT_NAME.match(path.name)
        if m is None:
            continue
        name, label = m.group(1), m.group(2)
        if spec.field is not None and name != spec.field:
            continue
        try:
            t = float(label)
        except ValueError:
            raise PlotDataError(
                f"{path.name}: unrecognized snapshot time {label!r}") from None
        header, rows = _read_rows(path)
        _check_header(path, header, XY_HEADER)
        x = _column(path, rows, header, "x")
        v = _column(path, rows, header, "value")
        series.setdefault(name, []).append((t, x, v))
    if not series:
        raise PlotDataError(
            f"no snapshot files (rho_<i>_t<t>.csv / phi_t<t>.csv) "
            f"in {spec.in_dir}")
    for curves in series.values():
        curves.sort(key=lambda item: item[0])
    return series


def snapshot_figure(spec: PlotSpec):
    """One panel per field, one curve per snapshot time."""
    series = _collect_snapshots(spec)
    names = sorted(series, key=_field_order)
    fig, axes = plt.subplots(1, len(names),
                             figsize=(4.0 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        for t, x, v in series[name]:
            ax.plot(x, v, label=f"t={t:g}")
        ax.set_xlabel("x")
        ax.set_ylabel("value")
        ax.set_title(name)
        ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


# ------------------------------------------------------------ diagnostics

def _diagnostics_table(spec: PlotSpec):
    path = spec.in_dir / "diagnostics.csv"
    if not path.exists():
        raise PlotDataError(f"no diagnostics.csv in {spec.in_dir}")
    header, rows = _read_rows(path)
    mass_names = [n for n in header if n.startswith("mass_")]
    expected = ["t", "energy", "kinetic"] + mass_names \
        + ["min_rho", "pg_iters", "pg_status"]
    well_formed = (
        mass_names == [f"mass_{i + 1}" for i in range(len(mass_names))]
        and len(mass_names) >= 1 and header == expected)
    if not well_formed:
        raise PlotDataError(
            f"{path.name}: expected header {DIAGNOSTICS_SHAPE}, "
            f"found {header}")
    if not rows:
        raise PlotDataError(f"{path.name}: no data rows")
    t = _column(path, rows, header, "t")
    energy = _column(path, rows, header, "energy")
    masses = [_column(path, rows, header, n) for n in mass_names]
    min_rho = _column(path, rows, header, "min_rho")
    return t, energy, masses, min_rho


def diagnostics_figure(spec: PlotSpec):
    """Stacked panels: energy, per-species mass, minimum density vs t."""
    t, energy, masses, min_rho = _diagnostics_table(spec)
    fig, axes = plt.subplots(3, 1, figsize=(6.0, 7.5), sharex=True)
    axes[0].plot(t, energy, marker=".", ms=3)
    axes[0].set_ylabel("energy")
    for i, mass in enumerate(masses):
        axes[1].plot(t, mass, marker=".", ms=3, label=f"mass_{i + 1}")
    axes[1].set_ylabel("mass")
    axes[1].legend(fontsize="small")
    axes[2].plot(t, min_rho, marker=".", ms=3)
    axes[2].set_ylabel("min density")
    axes[2].set_xlabel("t")
    fig.tight_layout()
    return fig


# ------------------------------------------------------------- convergence

def _convergence_table(spec: PlotSpec) -> dict:
    path = spec.in_dir / "convergence.csv"
    if not path.exists():
        raise PlotDataError(f"no convergence.csv in {spec.in_dir}")
    header, rows = _read_rows(path)
    _check_header(path, header, CONVERGENCE_HEADER)
    if not rows:
        raise PlotDataError(f"{path.name}: no data rows")
    table: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        if len(r) != len(CONVERGENCE_HEADER):
            raise PlotDataError(f"{path.name}: malformed row {r}")
        try:
            h, err = float(r[0]), float(r[3])
        except ValueError as exc:
            raise PlotDataError(
                f"{path.name}: bad value in row {r}: {exc}") from exc
        if spec.field is None or r[2] == spec.field:
            table.setdefault(r[2], []).append((h, err))
    if not table:
        raise PlotDataError(
            f"{path.name}: no rows for field {spec.field!r}")
    for pts in table.values():
        pts.sort()
    return table


def convergence_figure(spec: PlotSpec):
    """Log-log error vs h per field with slope-1 and slope-2 guides."""
    table = _convergence_table(spec)
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for name in sorted(table, key=_field_order):
        pts = table[name]
        ax.loglog([h for h, _ in pts], [e for _, e in pts],
                  marker="o", label=name)
    hs = np.array(sorted({h for pts in table.values() for h, _ in pts}))
    top = max(e for pts in table.values() for _, e in pts)
    for p, style in ((1, "--"), (2, ":")):
        ax.loglog(hs, top * (hs / hs[-1]) ** p, style, color="gray",
                  label=f"slope {p}")
    ax.set_xlabel("h")
    ax.set_ylabel("error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


# ------------------------------------------------------------------ saving

_FIGURES = {"snapshots": snapshot_figure,
            "diagnostics": diagnostics_figure,
            "convergence": convergence_figure}


def _save(fig, out_path: Path) -> Path:
    try:
        fig.savefig(out_path, dpi=150)
    except OSError as exc:
        raise PlotDataError(f"cannot write {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return out_path


def render(spec: PlotSpec) -> Path:
    return _save(_FIGURES[spec.kind](spec), spec.out_path)


def render_snapshots(spec: PlotSpec) -> Path:
    return _save(snapshot_figure(spec), spec.out_path)


def render_diagnostics(spec: PlotSpec) -> Path:
    return _save(diagnostics_figure(spec), spec.out_path)


def render_convergence(spec: PlotSpec) -> Path:
    return _save(convergence_figure(spec), spec.out_path)
