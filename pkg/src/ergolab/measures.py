"""Empirical measures on grids: histograms, Cesaro pushforward averages,
Wasserstein-type distances, and basin sampling.

Weak* convergence statements are operationalized as W1 distances on a fixed
grid: exact in one dimension (periodic or not), and via a documented proxy
(marginal + sliced averages) on the cylinder, where exact transport is out
of scope.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grid import Grid
from .maps import MapSystem
from .noise import EscapedOrbit, NoiseModel, RandomOrbit, make_rng

MASS_TOL = 1e-9


@dataclass(frozen=True)
class EmpiricalMeasure:
    grid: Grid
    masses: np.ndarray
    provenance: str = "unknown"

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.shape != (self.grid.n_cells,):
            raise ValueError("masses must be flat over grid cells")
        if np.any(m < 0):
            raise ValueError("negative mass")
        s = m.sum()
        if abs(s - 1.0) > MASS_TOL:
            raise ValueError(f"masses sum to {s}, not 1")
        object.__setattr__(self, "masses", m)

    @staticmethod
    def normalized(grid: Grid, weights: np.ndarray, provenance: str) -> "EmpiricalMeasure":
        w = np.asarray(weights, dtype=float)
        s = w.sum()
        if s <= 0:
            raise ValueError("cannot normalize zero mass")
        return EmpiricalMeasure(grid, w / s, provenance)

    @staticmethod
    def uniform(grid: Grid, provenance: str = "analytic") -> "EmpiricalMeasure":
        return EmpiricalMeasure(grid, np.full(grid.n_cells, 1.0 / grid.n_cells), provenance)

    def integrate(self, values_on_cells: np.ndarray) -> float:
        return float(np.dot(self.masses, values_on_cells))

    def moments(self, max_order: int = 2) -> dict:
        centers = self.grid.centers()
        out = {}
        for a in range(self.grid.dim):
            for k in range(1, max_order + 1):
                out[f"m{k}_axis{a}"] = self.integrate(centers[:, a] ** k)
        return out

    def sample_points(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n points: cells drawn by mass, positions uniform within the cell."""
        idx = rng.choice(self.grid.n_cells, size=n, p=self.masses)
        pts = self.grid.centers()[idx]
        for a in range(self.grid.dim):
            w = self.grid.widths[a]
            pts[:, a] += rng.uniform(-w / 2, w / 2, n)
        return pts

    def refine_to(self, fine: Grid) -> "EmpiricalMeasure":
        """Piecewise-constant refinement onto an integer-factor finer grid."""
        factors = [fc // c for fc, c in zip(fine.cells, self.grid.cells)]
        if any(f * c != fc for f, c, fc in zip(factors, self.grid.cells, fine.cells)):
            raise ValueError("fine grid must be an integer refinement")
        m = self.masses.reshape(self.grid.cells)
        for a, f in enumerate(factors):
            m = np.repeat(m, f, axis=a) / f
        return EmpiricalMeasure(fine, m.ravel(), self.provenance)

    def to_csv(self, path) -> None:
        centers = self.grid.centers()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"center_{a}" for a in range(self.grid.dim)] + ["mass"])
            for c, m in zip(centers, self.masses):
                w.writerow([repr(v) for v in c] + [repr(m)])

    def summary(self, oracle: Optional["EmpiricalMeasure"] = None) -> dict:
        out = {"provenance": self.provenance, "moments": self.moments()}
        if oracle is not None:
            out["w1_to_oracle"] = w1_distance(self, oracle)
        return out


def measure_from_orbit(orbit: RandomOrbit, grid: Grid, burn_in: int = 0) -> EmpiricalMeasure:
    """Normalized histogram of the orbit points after burn-in."""
    if orbit.escaped:
        raise EscapedOrbit("orbit escaped; histogram would be biased")
    if burn_in >= len(orbit.points):
        raise ValueError("burn_in leaves no samples")
    idx = grid.locate(orbit.points[burn_in:])
    if np.any(idx < 0):
        raise ValueError("orbit leaves the measure grid")
    w = np.bincount(idx, minlength=grid.n_cells).astype(float)
    return EmpiricalMeasure.normalized(grid, w, "orbit-histogram")


def cesaro_pushforward(
    system: MapSystem,
    model: NoiseModel,
    initial: EmpiricalMeasure,
    n: int,
    samples: int,
    seed: int = 0,
    max_escape_fraction: float = 0.0,
) -> EmpiricalMeasure:
    """Monte Carlo Cesaro average of the first n noisy pushforwards.

    Draws ``samples`` (point, noise-sequence) pairs from the initial measure
    and averages the histograms of steps 1..n.  Escaping mass is an error
    (reported with its fraction) unless a tolerance is given.
    """
    if n < 1 or samples < 1:
        raise ValueError("need n >= 1 and samples >= 1")
    rng = make_rng(seed, 0xCE5A)
    pts = initial.sample_points(rng, samples)
    grid = initial.grid
    acc = np.zeros(grid.n_cells)
    alive = np.ones(samples, dtype=bool)
    dom = system.domain.inflate(model.epsilon)
    for _ in range(n):
        pts = system.apply_array(pts)
        if model.epsilon > 0:
            pts = pts + model.sample(rng, samples)
        for a in range(grid.dim):
            if dom.periodic[a]:
                pts[:, a] %= 1.0
            else:
                alive &= (pts[:, a] >= dom.lows[a]) & (pts[:, a] <= dom.highs[a])
        idx = grid.locate(pts[alive])
        ok = idx >= 0
        acc += np.bincount(idx[ok], minlength=grid.n_cells)
    escape_frac = 1.0 - float(alive.sum()) / samples
    if escape_frac > max_escape_fraction:
        raise EscapedOrbit(f"escape fraction {escape_frac:.3g} during pushforward")
    return EmpiricalMeasure.normalized(grid, acc, "cesaro")


# -- Wasserstein distances ------------------------------------------------------


def _w1_line(masses_a: np.ndarray, masses_b: np.ndarray, width: float) -> float:
    d = np.cumsum(masses_a - masses_b)  # d[-1] ~ 0: both normalized
    return float(np.sum(np.abs(d[:-1])) * width)


def _w1_circle(masses_a: np.ndarray, masses_b: np.ndarray, width: float) -> float:
    # optimal cut: |cumdiff - t| is minimized by the weighted median t
    d = np.cumsum(masses_a - masses_b)
    t = np.median(d)
    return float(np.sum(np.abs(d - t)) * width)


def _w1_weighted_samples(x: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> float:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    d = np.cumsum(wa[order] - wb[order])
    return float(np.sum(np.abs(d[:-1]) * np.diff(xs)))


def w1_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure, n_directions: int = 16) -> float:
    """Wasserstein-1 distance between two measures on the same grid.

    Dimension one: exact (integrated CDF difference; on the circle the cut
    point is optimized exactly via the weighted median).  Dimension two: the
    repo's weak* proxy, the average of (a) the mean of the two marginal W1
    distances and (b) sliced W1 over ``n_directions`` directions computed on
    the fundamental domain (periodicity ignored in the slices).
    """
    if mu.grid != nu.grid:
        raise ValueError("measures live on different grids")
    g = mu.grid
    if g.dim == 1:
        w = float(g.widths[0])
        if g.periodic[0]:
            return _w1_circle(mu.masses, nu.masses, w)
        return _w1_line(mu.masses, nu.masses, w)

    # marginals
    ma = mu.masses.reshape(g.cells)
    mb = nu.masses.reshape(g.cells)
    marg = []
    for a in range(2):
        pa, pb = ma.sum(axis=1 - a), mb.sum(axis=1 - a)
        w = float(g.widths[a])
        marg.append(_w1_circle(pa, pb, w) if g.periodic[a] else _w1_line(pa, pb, w))
    marginal_part = 0.5 * (marg[0] + marg[1])

    centers = g.centers()
    sliced = []
    for k in range(n_directions):
        th = math.pi * k / n_directions
        proj = centers @ np.array([math.cos(th), math.sin(th)])
        sliced.append(_w1_weighted_samples(proj, mu.masses, nu.masses))
    sliced_part = float(np.mean(sliced))
    return 0.5 * (marginal_part + sliced_part)


def hull_distance(mu: EmpiricalMeasure, reps: Sequence[EmpiricalMeasure], steps: int = 101) -> float:
    """W1 distance from mu to the convex hull of representative measures.

    Exact for one representative; for two, a line search over the mixture
    weight; more representatives use a dense simplex grid (small p only).
    """
    if not reps:
        raise ValueError("need at least one representative")
    if len(reps) == 1:
        return w1_distance(mu, reps[0])
    if len(reps) == 2:
        best = math.inf
        for w in np.linspace(0.0, 1.0, steps):
            mix = EmpiricalMeasure(mu.grid, w * reps[0].masses + (1 - w) * reps[1].masses, "analytic")
            best = min(best, w1_distance(mu, mix))
        return best
    rng = make_rng(1234, 0x4011)
    best = math.inf
    for _ in range(steps * 10):
        w = rng.dirichlet(np.ones(len(reps)))
        mix = EmpiricalMeasure(mu.grid, sum(wi * r.masses for wi, r in zip(w, reps)), "analytic")
        best = min(best, w1_distance(mu, mix))
    return best


# -- basin sampling -----------------------------------------------------------


def default_probes(system: MapSystem) -> list[Callable[[np.ndarray], np.ndarray]]:
    """Coordinate monomials up to degree 3; 4 Fourier modes per circle axis."""
    probes = []
    for a in range(system.dim):
        if system.domain.periodic[a]:
            for freq in (1, 2):
                probes.append(lambda p, a=a, f=freq: np.cos(2 * math.pi * f * p[:, a]))
                probes.append(lambda p, a=a, f=freq: np.sin(2 * math.pi * f * p[:, a]))
        else:
            span = system.domain.highs[a] - system.domain.lows[a]
            for deg in (1, 2, 3):
                probes.append(
                    lambda p, a=a, d=deg, s=span: ((p[:, a] - system.domain.lows[a]) / s) ** d
                )
    return probes


@dataclass(frozen=True)
class BasinReport:
    cluster_count: int
    fractions: tuple[float, ...]
    representatives: np.ndarray      # one probe-average vector per cluster
    representative_points: np.ndarray
    escaped: int
    probe_averages: np.ndarray       # (n_initials_kept, n_probes)

    def to_json(self) -> dict:
        return {
            "cluster_count": self.cluster_count,
            "fractions": list(self.fractions),
            "representatives": self.representatives.tolist(),
            "representative_points": self.representative_points.tolist(),
            "escaped": self.escaped,
        }


def basin_sample(
    system: MapSystem,
    initials,
    n: int,
    probes: Optional[list] = None,
    cluster_tol: float = 0.05,
    burn_in_frac: float = 0.1,
) -> BasinReport:
    """Time-average probe vectors over a grid of initial points, then cluster.

    Clusters of the probe vectors estimate the number of distinct physical
    measures seen by Lebesgue-typical points; fractions estimate basin sizes.
    Escaping initials are flagged and excluded.
    """
    if probes is None:
        probes = default_probes(system)
    if isinstance(initials, int):
        if system.dim == 1:
            lo, hi = system.domain.lows[0], system.domain.highs[0]
            pts = np.linspace(lo, hi, initials, endpoint=not system.domain.periodic[0])
            if not system.domain.periodic[0]:
                pts = lo + (np.arange(initials) + 0.5) / initials * (hi - lo)
            pts = pts.reshape(-1, 1)
        else:
            k = int(math.sqrt(initials))
            s = (np.arange(k) + 0.5) / k
            lo, hi = system.domain.lows[1], system.domain.highs[1]
            x = lo + (np.arange(k) + 0.5) / k * (hi - lo)
            S, X = np.meshgrid(s, x, indexing="ij")
            pts = np.stack([S.ravel(), X.ravel()], axis=-1)
    else:
        pts = np.atleast_2d(np.asarray(initials, dtype=float))

    burn = int(n * burn_in_frac)
    cur = pts.copy()
    alive = np.ones(len(cur), dtype=bool)
    acc = np.zeros((len(cur), len(probes)))
    dom = system.domain
    for step_i in range(n):
        cur = system.apply_array(cur)
        for a in range(dom.dim):
            if dom.periodic[a]:
                cur[:, a] %= 1.0
            else:
                alive &= (cur[:, a] >= dom.lows[a]) & (cur[:, a] <= dom.highs[a])
        cur[~alive] = 0.0  # parked; excluded at the end
        if step_i >= burn:
            for q, probe in enumerate(probes):
                acc[:, q] += probe(cur)
    acc /= max(n - burn, 1)
    kept = acc[alive]
    kept_pts = pts[alive]

    # greedy clustering by sup-norm distance of probe vectors
    reps: list[np.ndarray] = []
    rep_pts: list[np.ndarray] = []
    counts: list[int] = []
    for row, p0 in zip(kept, kept_pts):
        for ci, r in enumerate(reps):
            if np.max(np.abs(row - r)) <= cluster_tol:
                counts[ci] += 1
                break
        else:
            reps.append(row)
            rep_pts.append(p0)
            counts.append(1)
    total = sum(counts)
    fracs = tuple(c / total for c in counts)
    return BasinReport(
        len(reps), fracs, np.array(reps), np.array(rep_pts),
        int(len(pts) - alive.sum()), kept,
    )
