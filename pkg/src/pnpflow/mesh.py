"""Uniform staggered 1D grid and its difference/average operators.

Cell-centered quantities (densities, potential) live at the N cell
centers; momenta live at the N-1 interior faces.  The two boundary
faces always carry an implicit zero flux, so interior-face arrays never
store them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class Grid1D:
    """Uniform mesh of N cells on [a, b] with spacing h = (b - a) / N.

    Attributes
    ----------
    centers : ndarray, shape (N,)
        Cell centers a + (j - 1/2) h for j = 1..N.
    faces : ndarray, shape (N+1,)
        Cell faces a + j h for j = 0..N.
    """

    a: float
    b: float
    N: int
    h: float
    centers: np.ndarray
    faces: np.ndarray


def build_grid(a: float, b: float, N: int) -> Grid1D:
    """Construct the uniform staggered grid on [a, b] with N cells."""
    if not b > a:
        raise ConfigurationError(f"domain requires b > a, got [{a}, {b}]")
    if N < 2:
        raise ConfigurationError(f"grid needs at least 2 cells, got N={N}")
    h = (b - a) / N
    faces = a + h * np.arange(N + 1, dtype=float)
    centers = a + h * (np.arange(N, dtype=float) + 0.5)
    return Grid1D(a=float(a), b=float(b), N=int(N), h=h,
                  centers=centers, faces=faces)


def divergence_dh(face_values: np.ndarray, h: float) -> np.ndarray:
    """Centered divergence of an interior-face field, one value per cell.

    Input has length N-1 along the last axis (interior faces only); the
    boundary faces contribute implicit zeros.  Output has length N:
    out_j = (v_{j+1/2} - v_{j-1/2}) / h.
    """
    v = np.asarray(face_values, dtype=float)
    if v.shape[-1] < 1:
        raise ConfigurationError("divergence_dh needs at least one interior face")
    return np.diff(v, axis=-1, prepend=0.0, append=0.0) / h


def face_average(face_values: np.ndarray) -> np.ndarray:
    """Average adjacent face values onto cells, zero-padded at the walls.

    Input has length N-1 along the last axis, output length N:
    out_j = (v_{j-1/2} + v_{j+1/2}) / 2.
    """
    v = np.asarray(face_values, dtype=float)
    if v.shape[-1] < 1:
        raise ConfigurationError("face_average needs at least one interior face")
    pad = [(0, 0)] * (v.ndim - 1) + [(1, 1)]
    padded = np.pad(v, pad, mode="constant")
    return 0.5 * (padded[..., :-1] + padded[..., 1:])
