"""Grid discretizations of transfer operators.

Two kinds:

* ``ulam`` — cell-to-cell transition fractions of the map (optionally composed
  with an exact noise-kernel convolution).  Row-stochastic; its left Perron
  vector approximates the invariant/stationary density.
* ``ruelle`` — weighted operator (L_phi g)(x) = sum over preimages y of
  e^{phi(y)} g(y) for full-branched expanding circle maps; the log of its
  leading eigenvalue is the topological pressure of phi.

Noisy matrices are kept in factored form (Ulam factor times convolution
factor); products are only materialized on demand for small grids.

Ulam subsampling uses a fixed midpoint lattice per cell rather than random
points, so matrices are bit-reproducible and carry no seed dependence.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .grid import Grid
from .maps import MapSystem, UnsupportedSystemError
from .measures import EmpiricalMeasure

ROW_SUM_TOL = 1e-9


class SinkMassError(RuntimeError):
    """Too much mass escaped the (non-periodic) grid during assembly."""


class StationaryDensityError(RuntimeError):
    """Power iteration failed: reducible chain or no convergence."""

    def __init__(self, msg: str, residual: float, recurrent_classes: int = 1):
        super().__init__(msg)
        self.residual = residual
        self.recurrent_classes = recurrent_classes


@dataclass
class TransferMatrix:
    grid: Grid
    factors: list            # scipy CSR matrices, applied left-to-right to row vectors
    kind: str                 # "ulam" | "ruelle"
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.grid.n_cells

    def entries(self) -> sp.csr_matrix:
        """Materialized product of the factors (small grids only)."""
        out = self.factors[0]
        for f in self.factors[1:]:
            out = out @ f
        return sp.csr_matrix(out)

    def apply_left(self, v: np.ndarray) -> np.ndarray:
        for f in self.factors:
            v = v @ f
        return np.asarray(v).ravel()

    def apply_right(self, v: np.ndarray) -> np.ndarray:
        for f in reversed(self.factors):
            v = f @ v
        return np.asarray(v).ravel()

    def row_sums(self) -> np.ndarray:
        return self.apply_right(np.ones(self.n))


def _cell_lattice(grid: Grid, subsamples_per_cell: int) -> np.ndarray:
    """Midpoint lattice offsets within one cell, shape (m, dim)."""
    if grid.dim == 1:
        m = subsamples_per_cell
        u = ((np.arange(m) + 0.5) / m).reshape(-1, 1)
    else:
        k = max(int(math.ceil(math.sqrt(subsamples_per_cell))), 2)
        a = (np.arange(k) + 0.5) / k
        U, V = np.meshgrid(a, a, indexing="ij")
        u = np.stack([U.ravel(), V.ravel()], axis=-1)
    return u * grid.widths


def ulam_matrix(
    system: MapSystem,
    grid: Grid,
    subsamples_per_cell: int = 32,
    seed: Optional[int] = None,
    max_sink_fraction: float = 1e-3,
) -> TransferMatrix:
    """Ulam discretization: entry (i,j) = fraction of cell-i lattice points
    mapped into cell j.

    ``seed`` is recorded in the metadata but unused: the subsample lattice is
    deterministic by design.  Image points leaving a non-periodic domain are
    sink mass; more than ``max_sink_fraction`` of it fails loudly.
    """
    if subsamples_per_cell < 16:
        raise ValueError("need subsamples_per_cell >= 16")
    centers = grid.centers()
    lows = centers - grid.widths / 2.0
    offsets = _cell_lattice(grid, subsamples_per_cell)
    m = len(offsets)
    n = grid.n_cells

    parts = []
    sink_counts = np.zeros(n)
    chunk = max(1, 2_000_000 // m)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        pts = (lows[start:stop, None, :] + offsets[None, :, :]).reshape(-1, grid.dim)
        img = system.apply_array(pts)
        tgt = grid.locate(img)
        rows = np.repeat(np.arange(start, stop), m)
        good = tgt >= 0
        sink_counts += np.bincount(rows[~good], minlength=n)
        parts.append((rows[good], tgt[good]))
    total_sink = float(np.sum(sink_counts)) / (n * m)
    if total_sink > max_sink_fraction:
        raise SinkMassError(f"sink mass fraction {total_sink:.3g} exceeds {max_sink_fraction}")
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    row_norm = 1.0 / (m - sink_counts)  # fraction of the surviving lattice points
    mat = sp.csr_matrix((row_norm[rows], (rows, cols)), shape=(n, n))  # duplicates sum
    meta = {
        "builder": "ulam", "subsamples_per_cell": subsamples_per_cell,
        "seed": seed, "epsilon": 0.0, "sink_mass": total_sink,
        "system": system.to_json(),
    }
    return TransferMatrix(grid, [mat], "ulam", meta)


# -- noise kernels -------------------------------------------------------------


def _uniform_sum_cdf(v: np.ndarray, h: float, eps: float) -> np.ndarray:
    """CDF of y + t, y ~ U(0,h), t ~ U(-eps,eps): exact piecewise quadratic."""
    def prim(w):
        # integral of clamp(z, 0, 2*eps) dz from 0 to w
        w = np.asarray(w, dtype=float)
        out = np.where(w <= 0, 0.0, np.where(w < 2 * eps, 0.5 * w * w, 2 * eps * w - 2 * eps * eps))
        return out
    return (prim(v + eps) - prim(v + eps - h)) / (2.0 * eps * h)


def _convolution_1d(grid: Grid, eps: float, max_sink_fraction: float = 1e-3) -> sp.csr_matrix:
    """Exact convolution matrix of the uniform interval kernel on a 1-d grid."""
    n = grid.n_cells
    h = float(grid.widths[0])
    lo_off = int(math.floor(-eps / h)) - 1
    hi_off = int(math.ceil((h + eps) / h)) + 1
    offs = np.arange(lo_off, hi_off + 1)
    cdf = _uniform_sum_cdf(offs.astype(float) * h, h, eps)
    w = np.diff(cdf)
    offs = offs[:-1]
    keep = w > 1e-16
    w, offs = w[keep], offs[keep]

    rows = np.repeat(np.arange(n), len(offs))
    cols = (np.arange(n)[:, None] + offs[None, :]).ravel()
    vals = np.tile(w, n)
    if grid.periodic[0]:
        cols = np.mod(cols, n)
    else:
        good = (cols >= 0) & (cols < n)
        leaked = 1.0 - vals[good].sum() / vals.sum()
        if leaked > max_sink_fraction:
            raise SinkMassError(
                f"noise kernel leaks {leaked:.3g} outside the domain: "
                "absorbing-region inflation violated"
            )
        rows, cols, vals = rows[good], cols[good], vals[good]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    # renormalize away the tolerated leak and the CDF tail cutoff
    s = np.asarray(mat.sum(axis=1)).ravel()
    mat = sp.diags(1.0 / s) @ mat
    return sp.csr_matrix(mat)


def _disk_lattice(m: int) -> np.ndarray:
    """Deterministic Fibonacci lattice on the unit disk, shape (m, 2)."""
    k = np.arange(m) + 0.5
    r = np.sqrt(k / m)
    golden_angle = math.pi * (3.0 - math.sqrt(5.0))
    th = k * golden_angle
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


def _convolution_2d(
    grid: Grid, eps: float, max_sink_fraction: float = 1e-3,
    cell_quad: int = 5, disk_points: int = 1024,
) -> sp.csr_matrix:
    """Uniform-disk kernel on a 2-d grid by deterministic lattice quadrature.

    The 1-d kernel is exact; in two dimensions the disk/cell overlap is
    quadratured on a fixed lattice (cell_quad^2 positions x disk_points
    jumps), which keeps the matrix reproducible and row-stochastic.
    """
    ws = grid.widths
    a = (np.arange(cell_quad) + 0.5) / cell_quad
    U, V = np.meshgrid(a, a, indexing="ij")
    y = np.stack([U.ravel(), V.ravel()], axis=-1) * ws
    t = _disk_lattice(disk_points) * eps
    pts = y[:, None, :] + t[None, :, :]            # relative to the cell low corner
    off = np.floor(pts / ws).astype(np.int64).reshape(-1, 2)
    uniq, counts = np.unique(off, axis=0, return_counts=True)
    w = counts / counts.sum()

    n0, n1 = grid.cells
    n = grid.n_cells
    i0, i1 = np.divmod(np.arange(n), n1)
    rows_all, cols_all, vals_all = [], [], []
    for (d0, d1), wv in zip(uniq, w):
        j0 = i0 + d0
        j1 = i1 + d1
        if grid.periodic[0]:
            j0 = np.mod(j0, n0)
        if grid.periodic[1]:
            j1 = np.mod(j1, n1)
        good = (j0 >= 0) & (j0 < n0) & (j1 >= 0) & (j1 < n1)
        rows_all.append(np.arange(n)[good])
        cols_all.append(j0[good] * n1 + j1[good])
        vals_all.append(np.full(int(good.sum()), wv))
    mat = sp.csr_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n, n),
    )
    s = np.asarray(mat.sum(axis=1)).ravel()
    leaked = float(np.max(1.0 - s))
    if leaked > max_sink_fraction:
        raise SinkMassError(
            f"noise kernel leaks up to {leaked:.3g} per row: absorbing region too tight"
        )
    mat = sp.diags(1.0 / s) @ mat
    return sp.csr_matrix(mat)


def noisy_ulam(
    system: MapSystem,
    model,
    grid: Grid,
    subsamples_per_cell: int = 32,
) -> TransferMatrix:
    """Ulam matrix composed with the exact uniform-kernel convolution.

    Realizes the Markov chain x -> f(x) + t on the grid.  Kept factored
    (deterministic factor, then convolution) so large grids never materialize
    the product.
    """
    eps = model.epsilon
    if eps <= 0:
        raise ValueError("noisy_ulam needs epsilon > 0; use ulam_matrix for the map alone")
    if float(np.max(grid.widths)) > eps:
        warnings.warn(
            f"grid cell size {float(np.max(grid.widths)):.3g} exceeds noise level {eps:.3g}; "
            "the kernel is under-resolved", stacklevel=2,
        )
    base = ulam_matrix(system, grid, subsamples_per_cell)
    conv = _convolution_1d(grid, eps) if grid.dim == 1 else _convolution_2d(grid, eps)
    meta = dict(base.meta)
    meta.update({"builder": "noisy_ulam", "epsilon": eps})
    return TransferMatrix(grid, [base.factors[0], conv], "ulam", meta)


# -- stationary densities ---------------------------------------------------------


def _recurrent_class_count(mat: sp.csr_matrix) -> int:
    n_comp, labels = connected_components(mat, directed=True, connection="strong")
    if n_comp == 1:
        return 1
    coo = mat.tocoo()
    has_exit = np.zeros(n_comp, dtype=bool)
    diff = labels[coo.row] != labels[coo.col]
    np.logical_or.at(has_exit, labels[coo.row[diff]], True)
    return int(np.sum(~has_exit))


def stationary_density(
    tm: TransferMatrix,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> EmpiricalMeasure:
    """Left Perron vector of a row-stochastic matrix by plain power iteration.

    Iterates until the successive L1 difference drops below ``tol``.
    Non-convergence, or several recurrent classes in a deterministic matrix,
    raises with the residual: that is the numerical signature of multiple
    physical measures, not a bug to hide.
    """
    if tm.kind != "ulam":
        raise ValueError("stationary_density expects an ulam-kind matrix")
    if len(tm.factors) == 1 and tm.meta.get("epsilon", 0.0) == 0.0:
        rc = _recurrent_class_count(tm.factors[0])
        if rc > 1:
            raise StationaryDensityError(
                f"{rc} recurrent classes: stationary density is not unique", math.inf, rc
            )
    n = tm.n
    v = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        w = tm.apply_left(v)
        s = w.sum()
        if s <= 0:
            raise StationaryDensityError("mass vanished during iteration", math.inf)
        w /= s
        res = float(np.abs(w - v).sum())
        v = w
        if res < tol:
            return EmpiricalMeasure(tm.grid, np.maximum(v, 0.0) / np.maximum(v, 0.0).sum(),
                                    "eigenvector")
    raise StationaryDensityError(f"no convergence after {max_iter} iterations", res)


# -- Ruelle operators ---------------------------------------------------------------


def _as_potential(potential, grid: Grid) -> Callable[[np.ndarray], np.ndarray]:
    if callable(potential):
        return lambda x: np.asarray(potential(x), dtype=float)
    vals = np.asarray(potential, dtype=float)
    if vals.shape != (grid.n_cells,):
        raise ValueError("grid-sampled potential must have one value per cell")
    lo, w, n = grid.lows[0], float(grid.widths[0]), grid.n_cells

    def interp(x):
        pos = (np.asarray(x, dtype=float) - lo) / w - 0.5
        j0 = np.floor(pos).astype(np.int64)
        frac = pos - j0
        j1 = j0 + 1
        if grid.periodic[0]:
            j0, j1 = np.mod(j0, n), np.mod(j1, n)
        else:
            j0, j1 = np.clip(j0, 0, n - 1), np.clip(j1, 0, n - 1)
        return (1 - frac) * vals[j0] + frac * vals[j1]

    return interp


def _ruelle_matrix(system: MapSystem, potential, grid: Grid) -> sp.csr_matrix:
    """Discretized weighted transfer operator with linear interpolation."""
    if grid.dim != 1 or not grid.periodic[0]:
        raise UnsupportedSystemError("ruelle kind is restricted to circle grids")
    try:
        d = system.n_branches()
    except UnsupportedSystemError as exc:
        raise UnsupportedSystemError(
            f"{system.family}: not a full-branched expanding map ({exc})"
        ) from exc
    # defensive monotonicity probe of the lift
    xs = np.linspace(0.0, 1.0, 257)
    if np.any(np.diff(system.lift(xs)) <= 0):
        raise UnsupportedSystemError("non-monotone branch detected")

    n = grid.n_cells
    centers = grid.axis_centers(0)
    phi = _as_potential(potential, grid)
    pre = system.inverse_branches(centers)          # (d, n)
    rows = np.tile(np.arange(n), d)
    pos = (pre - grid.lows[0]) / float(grid.widths[0]) - 0.5
    j0 = np.floor(pos).astype(np.int64)
    frac = pos - j0
    weight = np.exp(phi(pre.ravel())).reshape(d, n)
    cols0 = np.mod(j0, n).ravel()
    cols1 = np.mod(j0 + 1, n).ravel()
    v0 = (weight * (1.0 - frac)).ravel()
    v1 = (weight * frac).ravel()
    mat = sp.csr_matrix(
        (np.concatenate([v0, v1]), (np.concatenate([rows, rows]), np.concatenate([cols0, cols1]))),
        shape=(n, n),
    )
    return mat


def _power_leading(mat: sp.csr_matrix, tol: float = 1e-13, max_iter: int = 200_000):
    """Leading eigenvalue and positive eigenvector of a nonnegative matrix."""
    n = mat.shape[0]
    v = np.full(n, 1.0 / n)
    lam = 1.0
    for _ in range(max_iter):
        w = mat @ v
        lam_new = float(w.sum())
        w /= lam_new
        res = float(np.abs(w - v).sum())
        dl = abs(lam_new - lam)
        v, lam = w, lam_new
        if res < 1e-12 and dl < tol * max(1.0, lam):
            return lam, v
    raise StationaryDensityError("power iteration on transfer operator stalled", res)


@dataclass(frozen=True)
class PressureResult:
    pressure: float
    right: np.ndarray   # eigenfunction values at cell centers, sum 1
    left: np.ndarray    # dual density, sum 1
    matrix: TransferMatrix


def ruelle_pressure(system: MapSystem, potential, grid: Grid) -> PressureResult:
    """Topological pressure of a potential: log of the leading eigenvalue.

    Checks irreducibility of the assembled sparsity pattern, then runs power
    iteration for both leading eigenvectors.
    """
    mat = _ruelle_matrix(system, potential, grid)
    ncomp, _ = connected_components(mat, directed=True, connection="strong")
    if ncomp != 1:
        raise StationaryDensityError("ruelle matrix pattern is reducible", math.inf, ncomp)
    lam, right = _power_leading(mat)
    lam_l, left = _power_leading(sp.csr_matrix(mat.T))
    tm = TransferMatrix(grid, [mat], "ruelle", {"builder": "ruelle", "system": system.to_json()})
    return PressureResult(math.log(lam), right / right.sum(), left / left.sum(), tm)


@dataclass(frozen=True)
class EquilibriumState:
    measure: EmpiricalMeasure
    pressure: float
    entropy_est: float        # pressure - int phi dmu (the defining identity)
    entropy_jacobian: float   # Rokhlin route through the measure Jacobian
    potential_integral: float


def equilibrium_state(system: MapSystem, potential, grid: Grid) -> EquilibriumState:
    """Equilibrium state from the eigen-data: density proportional to
    (left eigenvector) x (right eigenfunction).

    ``entropy_est`` uses the defining identity h = P - int phi dmu, which the
    eigen-data satisfies by construction; ``entropy_jacobian`` recomputes the
    entropy through the measure Jacobian lambda e^{-phi} h(f x)/h(x)
    (Rokhlin's formula), an independent numerical path whose gap from
    entropy_est measures discretization quality.
    """
    res = ruelle_pressure(system, potential, grid)
    n = grid.n_cells
    mu = EmpiricalMeasure.normalized(grid, res.left * res.right, "eigenvector")
    phi = _as_potential(potential, grid)
    centers = grid.axis_centers(0)
    phi_c = phi(centers)
    e_phi = float(np.dot(mu.masses, phi_c))
    lam = math.exp(res.pressure)

    h_fun = np.maximum(res.right, 1e-300)
    interp_h = _as_potential(h_fun * n, grid)  # scale-free: ratios only
    fx = system.apply_array(centers.reshape(-1, 1))[:, 0]
    jac = lam * np.exp(-phi_c) * interp_h(fx) / (h_fun * n)
    ent_rok = float(np.dot(mu.masses, np.log(np.maximum(jac, 1e-300))))
    return EquilibriumState(mu, res.pressure, res.pressure - e_phi, ent_rok, e_phi)


def topological_entropy(system: MapSystem, grid: Grid) -> float:
    """Pressure of the zero potential."""
    return ruelle_pressure(system, lambda x: np.zeros_like(x), grid).pressure


# -- serialization -----------------------------------------------------------------


def save_matrix(tm: TransferMatrix, path_prefix: str) -> None:
    """Write factors as triplet arrays (.npz) plus a JSON header.

    Header: grid, kind, metadata, factor count.  Factor k stores arrays
    rows_k, cols_k, vals_k (int64/int64/float64 little-endian inside npz).
    """
    arrays = {}
    for k, f in enumerate(tm.factors):
        coo = sp.coo_matrix(f)
        arrays[f"rows_{k}"] = coo.row.astype(np.int64)
        arrays[f"cols_{k}"] = coo.col.astype(np.int64)
        arrays[f"vals_{k}"] = coo.data.astype(np.float64)
    np.savez_compressed(path_prefix + ".npz", **arrays)
    header = {
        "grid": tm.grid.to_json(), "kind": tm.kind,
        "meta": tm.meta, "n_factors": len(tm.factors),
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)


def load_matrix(path_prefix: str) -> TransferMatrix:
    with open(path_prefix + ".json") as fh:
        header = json.load(fh)
    grid = Grid.from_json(header["grid"])
    data = np.load(path_prefix + ".npz")
    factors = []
    n = grid.n_cells
    for k in range(header["n_factors"]):
        factors.append(sp.csr_matrix(
            (data[f"vals_{k}"], (data[f"rows_{k}"], data[f"cols_{k}"])), shape=(n, n)
        ))
    return TransferMatrix(grid, factors, header["kind"], header["meta"])
