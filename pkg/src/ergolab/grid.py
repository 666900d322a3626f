"""Rectangular grids used to discretize measures and transfer operators.

A Grid partitions a box (possibly with periodic coordinates) into equal
cells.  Cells are indexed flat, C-order over the per-dimension indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Grid:
    lows: tuple[float, ...]
    highs: tuple[float, ...]
    cells: tuple[int, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        dim = len(self.cells)
        if not (len(self.lows) == len(self.highs) == len(self.periodic) == dim):
            raise ValueError("grid field lengths disagree")
        if any(c < 2 for c in self.cells):
            raise ValueError("need at least 2 cells per dimension")
        if any(h <= l for l, h in zip(self.lows, self.highs)):
            raise ValueError("empty grid box")

    # -- geometry -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def widths(self) -> np.ndarray:
        """Cell width per dimension."""
        return (np.asarray(self.highs) - np.asarray(self.lows)) / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axis_centers(self, axis: int) -> np.ndarray:
        w = self.widths[axis]
        return self.lows[axis] + w * (np.arange(self.cells[axis]) + 0.5)

    def centers(self) -> np.ndarray:
        """Cell centers, shape (n_cells, dim), flat C-order."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    # -- point location -----------------------------------------------------

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Map points (n, dim) to flat cell indices; -1 for out-of-box points.

        Periodic coordinates are wrapped before binning.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.zeros(len(pts), dtype=np.int64)
        oob = np.zeros(len(pts), dtype=bool)
        for a in range(self.dim):
            lo, hi, n = self.lows[a], self.highs[a], self.cells[a]
            x = pts[:, a]
            if self.periodic[a]:
                x = lo + np.mod(x - lo, hi - lo)
            else:
                oob |= (x < lo) | (x > hi)
            k = np.floor((x - lo) / (hi - lo) * n).astype(np.int64)
            np.clip(k, 0, n - 1, out=k)
            idx = idx * n + k
        idx[oob] = -1
        return idx

    def unravel(self, flat: np.ndarray) -> tuple[np.ndarray, ...]:
        return np.unravel_index(np.asarray(flat), self.cells)

    def neighbors(self, flat: int) -> list[int]:
        """Face-adjacent flat indices, honoring periodic wrap."""
        multi = [int(v) for v in np.unravel_index(flat, self.cells)]
        out = []
        for a in range(self.dim):
            for step in (-1, 1):
                m = list(multi)
                m[a] += step
                if self.periodic[a]:
                    m[a] %= self.cells[a]
                elif not (0 <= m[a] < self.cells[a]):
                    continue
                out.append(int(np.ravel_multi_index(m, self.cells)))
        return out

    def refine(self, factor: int) -> "Grid":
        if factor < 1:
            raise ValueError("factor must be >= 1")
        return Grid(self.lows, self.highs, tuple(c * factor for c in self.cells), self.periodic)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "lows": list(self.lows),
            "highs": list(self.highs),
            "cells": list(self.cells),
            "periodic": list(self.periodic),
        }

    @staticmethod
    def from_json(obj: dict) -> "Grid":
        return Grid(
            tuple(float(v) for v in obj["lows"]),
            tuple(float(v) for v in obj["highs"]),
            tuple(int(v) for v in obj["cells"]),
            tuple(bool(v) for v in obj["periodic"]),
        )


def circle_grid(n: int) -> Grid:
    """n-cell grid on the unit circle [0,1)."""
    return Grid((0.0,), (1.0,), (int(n),), (True,))


def interval_grid(lo: float, hi: float, n: int) -> Grid:
    return Grid((float(lo),), (float(hi),), (int(n),), (False,))


def cylinder_grid(x_lo: float, x_hi: float, n_s: int, n_x: int) -> Grid:
    """Grid on the cylinder: periodic first coordinate in [0,1), interval second."""
    return Grid((0.0, float(x_lo)), (1.0, float(x_hi)), (int(n_s), int(n_x)), (True, False))
