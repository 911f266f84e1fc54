"""Rendering of solver CSV artifacts as figures."""

from .render import (CONVERGENCE_HEADER, KINDS, XY_HEADER, PlotDataError,
                     PlotSpec, convergence_figure, diagnostics_figure,
                     render, render_convergence, render_diagnostics,
                     render_snapshots, snapshot_figure)

__all__ = [
    "CONVERGENCE_HEADER",
    "KINDS",
    "XY_HEADER",
    "PlotDataError",
    "PlotSpec",
    "convergence_figure",
    "diagnostics_figure",
    "render",
    "render_convergence",
    "render_diagnostics",
    "render_snapshots",
    "snapshot_figure",
]
