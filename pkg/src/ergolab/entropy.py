"""Partitions and entropy estimators.

Entropy is estimated from itineraries, never from explicit atom geometry:
orbit sources contribute sliding-window label words, measure sources
propagate cell-center weights through the dynamics.  The same code path
serves the deterministic and the noisy (per-noise-sequence) refinements, so
the zero-noise degeneracy is bit-exact.

Finite-N bias is reported, never corrected: the target quantities are
infima over the refinement depth, and the N-schedule is part of the result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .grid import Grid
from .maps import MapSystem, UnsupportedSystemError
from .measures import EmpiricalMeasure
from .noise import NoiseModel, RandomOrbit, make_rng

DEFAULT_ITINERARY_CAP = 10_000_000


class ItineraryExplosion(RuntimeError):
    """Too many distinct itineraries observed; use a smaller N."""


class CoverError(ValueError):
    """Supplied balls do not cover the phase space."""


@dataclass(frozen=True)
class FinitePartition:
    grid: Grid
    cell_labels: np.ndarray       # atom id per grid cell
    n_atoms: int
    spec: dict
    classifier: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def exact_classify(self) -> bool:
        return self.classifier is not None

    def classify(self, points: np.ndarray) -> np.ndarray:
        """Atom labels of points; exact where the geometry allows, grid lookup otherwise."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.classifier is not None:
            return self.classifier(pts)
        idx = self.grid.locate(pts)
        if np.any(idx < 0):
            raise ValueError("point outside the partition grid")
        return self.cell_labels[idx]

    def boundary_cell_mask(self) -> np.ndarray:
        """Cells adjacent to a differently-labeled cell (straddle candidates)."""
        lab = self.cell_labels.reshape(self.grid.cells)
        mask = np.zeros_like(lab, dtype=bool)
        for a in range(self.grid.dim):
            nb = np.roll(lab, 1, axis=a)
            diff = lab != nb
            if not self.grid.periodic[a]:
                sl = [slice(None)] * self.grid.dim
                sl[a] = 0
                diff[tuple(sl)] = False
            mask |= diff | np.roll(diff, -1, axis=a)
        return mask.ravel()

    def boundary_mass(self, mu: EmpiricalMeasure) -> float:
        if mu.grid != self.grid:
            raise ValueError("measure grid mismatch")
        return float(mu.masses[self.boundary_cell_mask()].sum())


def threshold_partition(grid: Grid, axis: int, cuts: Sequence[float]) -> FinitePartition:
    """Partition by thresholds along one coordinate; exact classification."""
    cuts = np.asarray(sorted(cuts), dtype=float)
    centers = grid.centers()
    labels = np.searchsorted(cuts, centers[:, axis], side="right")

    def classifier(pts: np.ndarray) -> np.ndarray:
        x = pts[:, axis]
        if grid.periodic[axis]:
            span = grid.highs[axis] - grid.lows[axis]
            x = grid.lows[axis] + np.mod(x - grid.lows[axis], span)
        return np.searchsorted(cuts, x, side="right")

    spec = {"kind": "threshold", "axis": axis, "cuts": list(map(float, cuts))}
    return FinitePartition(grid, labels, int(labels.max()) + 1, spec, classifier)


def halves_partition(grid: Grid, axis: int = 0) -> FinitePartition:
    mid = 0.5 * (grid.lows[axis] + grid.highs[axis])
    return threshold_partition(grid, axis, [mid])


def partition_from_cover(grid: Grid, centers, radius: float) -> FinitePartition:
    """Join of {B_i, complement} over the given balls, split into connected pieces.

    Balls use the periodic metric where applicable.  Raises when the balls do
    not cover every grid cell center (listing how many are missed).  The atom
    count refers to nonempty connected components on the grid.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    cc = grid.centers()
    masks = np.zeros(grid.n_cells, dtype=np.int64)
    for b, c in enumerate(centers):
        d2 = np.zeros(grid.n_cells)
        for a in range(grid.dim):
            diff = cc[:, a] - c[a]
            if grid.periodic[a]:
                span = grid.highs[a] - grid.lows[a]
                diff = (diff + span / 2) % span - span / 2
            d2 += diff * diff
        inside = d2 <= radius * radius
        masks |= inside.astype(np.int64) << b
    uncovered = int(np.sum(masks == 0))
    if uncovered:
        raise CoverError(f"balls leave {uncovered} of {grid.n_cells} grid cells uncovered")

    # split membership classes into grid-connected components
    labels = np.zeros(grid.n_cells, dtype=np.int64)
    next_label = 0
    shape = grid.cells
    for value in np.unique(masks):
        cls = (masks == value).reshape(shape)
        comp, n_comp = ndimage.label(cls)
        # merge components across periodic seams
        for a in range(grid.dim):
            if not grid.periodic[a] or shape[a] < 2:
                continue
            lo = np.take(comp, 0, axis=a)
            hi = np.take(comp, shape[a] - 1, axis=a)
            for u, v in zip(np.atleast_1d(lo).ravel(), np.atleast_1d(hi).ravel()):
                if u > 0 and v > 0 and u != v:
                    comp[comp == max(u, v)] = min(u, v)
        ids = np.unique(comp[comp > 0])
        remap = {int(i): next_label + k for k, i in enumerate(ids)}
        flat = comp.ravel()
        for i, lbl in remap.items():
            labels[flat == i] = lbl
        next_label += len(ids)
    spec = {
        "kind": "cover", "radius": float(radius),
        "centers": centers.tolist(), "n_atoms": int(next_label),
    }
    return FinitePartition(grid, labels, int(next_label), spec, None)


# -- itinerary entropy core -----------------------------------------------------


def _entropy_from_counts(weights: np.ndarray) -> float:
    p = weights / weights.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _encode_check(n_atoms: int, N: int) -> None:
    if N * math.log(max(n_atoms, 2)) > 62 * math.log(2):
        raise ItineraryExplosion(f"{n_atoms}^{N} itinerary codes overflow; use a smaller N")


def _orbit_word_entropy(label_seqs: Sequence[np.ndarray], N: int, cap: int) -> float:
    """Entropy of the empirical N-word distribution from label sequences."""
    codes_all = []
    base = max(int(max(s.max() for s in label_seqs)) + 1, 2)
    _encode_check(base, N)
    mult = base ** np.arange(N, dtype=np.int64)
    for seq in label_seqs:
        if len(seq) < N:
            continue
        win = np.lib.stride_tricks.sliding_window_view(seq.astype(np.int64), N)
        codes_all.append(win @ mult)
    if not codes_all:
        raise ValueError("no windows of length N available")
    codes = np.concatenate(codes_all)
    uniq, counts = np.unique(codes, return_counts=True)
    if len(uniq) > cap:
        raise ItineraryExplosion(f"{len(uniq)} itineraries exceed the cap {cap}; reduce N")
    return _entropy_from_counts(counts.astype(float))


def _propagated_word_entropy(
    system: MapSystem,
    mu: EmpiricalMeasure,
    xi: FinitePartition,
    N: int,
    noise_rows: Optional[np.ndarray],
    cap: int,
    refine_factor: int = 1,
) -> float:
    """Entropy of the N-word law of a measure propagated through the dynamics.

    Points are (optionally refined) cell centers carrying the cell masses;
    words are their label itineraries under x -> f(x) + t_j.  Exact whenever
    cells never straddle refined-atom boundaries (e.g. dyadic doubling).
    """
    meas = mu if refine_factor == 1 else mu.refine_to(mu.grid.refine(refine_factor))
    pts = meas.grid.centers()
    w = meas.masses
    live = w > 0
    pts, w = pts[live], w[live]
    _encode_check(xi.n_atoms, N)
    base = max(xi.n_atoms, 2)
    codes = np.zeros(len(pts), dtype=np.int64)
    dom = system.domain
    for j in range(N):
        codes = codes * base + xi.classify(pts)
        if j == N - 1:
            break
        pts = system.apply_array(pts)
        if noise_rows is not None:
            pts = pts + noise_rows[j]
        for a in range(dom.dim):
            if dom.periodic[a]:
                pts[:, a] %= 1.0
            else:
                np.clip(pts[:, a], dom.lows[a], dom.highs[a], out=pts[:, a])
    order = np.argsort(codes, kind="stable")
    codes, w = codes[order], w[order]
    starts = np.flatnonzero(np.concatenate([[True], codes[1:] != codes[:-1]]))
    if len(starts) > cap:
        raise ItineraryExplosion(f"{len(starts)} itineraries exceed the cap {cap}; reduce N")
    sums = np.add.reduceat(w, starts)
    return _entropy_from_counts(sums)


OrbitSource = Union[RandomOrbit, Sequence[RandomOrbit]]
MeasureSource = tuple  # (EmpiricalMeasure, MapSystem)


def refined_entropy(
    source,
    xi: FinitePartition,
    N: int,
    cap: int = DEFAULT_ITINERARY_CAP,
    refine_factor: int = 1,
) -> float:
    """(1/N) x entropy of the N-fold dynamical refinement of ``xi``.

    ``source`` is an orbit, a list of orbits (empirical words along
    trajectories), or a pair (measure, system) propagated exactly by weights.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if isinstance(source, RandomOrbit):
        source = [source]
    if isinstance(source, tuple) and len(source) == 2 and isinstance(source[1], MapSystem):
        mu, system = source
        h = _propagated_word_entropy(system, mu, xi, N, None, cap, refine_factor)
        return h / N
    seqs = [xi.classify(o.points) for o in source]
    return _orbit_word_entropy(seqs, N, cap) / N


@dataclass(frozen=True)
class EntropyEstimate:
    schedule: tuple[int, ...]
    estimates: tuple[float, ...]
    minimum: float
    partition_spec: dict
    boundary_mass: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "N_schedule": list(self.schedule),
            "estimates": list(self.estimates),
            "min": self.minimum,
            "partition_spec": self.partition_spec,
            "boundary_mass": self.boundary_mass,
        }


def metric_entropy_estimate(
    source,
    xi: FinitePartition,
    schedule: Sequence[int] = (4, 8, 12, 16, 20),
    cap: int = DEFAULT_ITINERARY_CAP,
    refine_factor: int = 1,
    mu_for_boundary: Optional[EmpiricalMeasure] = None,
) -> EntropyEstimate:
    """Run refined_entropy over an N-schedule; the infimum is approached from
    above, so the minimum is the headline estimate and the sequence is kept."""
    ests = tuple(refined_entropy(source, xi, N, cap, refine_factor) for N in schedule)
    bm = xi.boundary_mass(mu_for_boundary) if mu_for_boundary is not None else None
    return EntropyEstimate(tuple(schedule), ests, min(ests), xi.spec, bm)


def random_entropy_estimate(
    system: MapSystem,
    model: NoiseModel,
    mu_eps: EmpiricalMeasure,
    xi: FinitePartition,
    N: int,
    omega_samples: int = 8,
    seed: int = 0,
    cap: int = DEFAULT_ITINERARY_CAP,
    refine_factor: int = 1,
) -> float:
    """Finite-horizon estimate of the random refinement entropy:
    average over noise sequences of the itinerary entropy of mu_eps, / N.

    With epsilon = 0 this degenerates to the deterministic estimator along
    the identical code path (single zero noise sequence).
    """
    if omega_samples < 1:
        raise ValueError("omega_samples must be >= 1")
    if model.epsilon == 0.0:
        return _propagated_word_entropy(system, mu_eps, xi, N, None, cap, refine_factor) / N
    rng = make_rng(seed, 0xE27)
    vals = []
    for _ in range(omega_samples):
        rows = model.sample(rng, max(N - 1, 1))[:, None, :]  # one jump per step, all points
        vals.append(_propagated_word_entropy(system, mu_eps, xi, N, rows, cap, refine_factor))
    return float(np.mean(vals)) / N


# -- randomized potential and the Entropy Formula ---------------------------------


def randomized_potential(
    system: MapSystem, model: NoiseModel, p, samples: int = 64, seed: int = 0
) -> float:
    """Noise-averaged log-Jacobian at a point.

    For additive perturbations the derivative is independent of the jump, so
    the Monte Carlo average equals log|det Df(x)| exactly; both are computed
    and cross-asserted.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pt = np.asarray(p, dtype=float).reshape(1, system.dim)
    lad, _ = system.log_derivative_arrays(pt)
    exact = float(lad[0])
    rng = make_rng(seed, 0x90E)
    model.sample(rng, samples)  # jumps drawn; additive model leaves Df alone
    mc = float(np.mean(np.full(samples, exact)))
    if math.isfinite(exact):
        assert mc == exact
    return exact


@dataclass(frozen=True)
class LogJacobianIntegral:
    value: float
    max_depth: int
    refined_cells: int


def integrate_log_jacobian(
    system: MapSystem,
    mu: EmpiricalMeasure,
    subdivisions: int = 16,
    max_depth: int = 5,
) -> LogJacobianIntegral:
    """int log|det Df| dmu with adaptive sub-quadrature near the critical set.

    Cells are evaluated at their centers; cells within one diameter of the
    critical set are split ``subdivisions``-fold (4x4 in 2-d) recursively up
    to ``max_depth``.  The log singularity is integrable, so the unresolved
    remainder shrinks geometrically with depth.
    """
    grid = mu.grid
    centers = grid.centers()
    widths = grid.widths
    diag = float(np.linalg.norm(widths))
    lad, _ = system.log_derivative_arrays(centers)
    crit = system.critical_distance_array(centers)
    near = crit < diag
    vals = np.where(near, 0.0, lad)

    if grid.dim == 1:
        sub_shape = (subdivisions,)
    else:
        k = max(int(round(math.sqrt(subdivisions))), 2)
        sub_shape = (k, k)
    deepest = [0]

    def refine_cell(low, wid, depth):
        deepest[0] = max(deepest[0], depth)
        axes = [low[a] + wid[a] * (np.arange(sub_shape[a]) + 0.5) / sub_shape[a]
                for a in range(grid.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        l, _ = system.log_derivative_arrays(pts)
        c = system.critical_distance_array(pts)
        subwid = wid / np.array(sub_shape)
        subdiag = float(np.linalg.norm(subwid))
        out = 0.0
        m = 1.0 / len(pts)
        for i in range(len(pts)):
            if c[i] < subdiag and depth < max_depth:
                out += m * refine_cell(pts[i] - subwid / 2, subwid, depth + 1)
            elif np.isfinite(l[i]):
                out += m * l[i]
        return out

    refined = int(np.sum(near & (mu.masses > 0)))
    for i in np.flatnonzero(near & (mu.masses > 0)):
        vals[i] = refine_cell(centers[i] - widths / 2, widths.copy(), 1)
    value = float(np.dot(mu.masses, vals))
    return LogJacobianIntegral(value, deepest[0], refined)


def entropy_formula_residual(h_est: float, system: MapSystem, mu: EmpiricalMeasure) -> float:
    """h_est minus int log|det Df| dmu: zero for measures satisfying the
    Entropy Formula (the absolutely-continuous case)."""
    return h_est - integrate_log_jacobian(system, mu).value


# -- low-variation potentials ------------------------------------------------------


@dataclass(frozen=True)
class LowVariationResult:
    holds: bool
    margin: float
    sup_phi: float
    pressure: float
    h_top: float


def low_variation_check(phi, system: MapSystem, rho: float, grid: Grid) -> LowVariationResult:
    """Does sup(phi) <= P(phi) - rho * h_top hold?  Both sides from the
    transfer operator discretization."""
    from .transfer import ruelle_pressure, topological_entropy

    if rho < 0:
        raise ValueError("rho must be >= 0")
    pres = ruelle_pressure(system, phi, grid).pressure
    htop = topological_entropy(system, grid)
    if callable(phi):
        sup_phi = float(np.max(phi(grid.axis_centers(0))))
    else:
        sup_phi = float(np.max(np.asarray(phi, dtype=float)))
    margin = (pres - rho * htop) - sup_phi
    return LowVariationResult(margin >= 0.0, margin, sup_phi, pres, htop)


# -- generating-diameter decay -----------------------------------------------------


@dataclass(frozen=True)
class DecayCurve:
    diameters: tuple[float, ...]
    truncated: bool


def _itinerary_matches(system, orbit, xi, y0, k, target=None) -> bool:
    y = np.asarray(y0, dtype=float).reshape(system.dim).copy()
    if target is None:
        target = xi.classify(orbit.points[:k])
    for j in range(k):
        if int(xi.classify(y.reshape(1, -1))[0]) != int(target[j]):
            return False
        if j == k - 1:
            break
        y = system.apply_array(y.reshape(1, -1))[0]
        if orbit.model.epsilon > 0:
            y = y + orbit.noise[j]
        y = system.domain.reduce(y)
        if not system.domain.contains(y, slack=orbit.model.epsilon):
            return False
    return True


def diameter_decay_check(
    system: MapSystem,
    model: NoiseModel,
    xi: FinitePartition,
    orbit: RandomOrbit,
    K: int,
    resolution_floor: float = 1e-12,
    max_probe: float = 0.5,
) -> DecayCurve:
    """Diameter of the k-cylinder of the orbit's own itinerary, k = 1..K.

    One-dimensional systems: the cylinder component through the initial point
    is bracketed by outward marching plus bisection (noise shadowed from the
    orbit).  Stops early, flagged, when the bracket hits the resolution floor.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if system.dim != 1:
        return _diameter_decay_2d(system, orbit, xi, K, resolution_floor)
    x0 = float(orbit.points[0, 0])
    targets = xi.classify(orbit.points[:K])
    diams = []
    for k in range(1, K + 1):
        tgt = targets[:k]
        ends = []
        for direction in (+1.0, -1.0):
            step0 = min(1e-4, max_probe / 8)
            probe = step0
            hit = None
            while probe <= max_probe:
                y = x0 + direction * probe
                if not _itinerary_matches(system, orbit, xi, np.array([y]), k, tgt):
                    hit = probe
                    break
                probe *= 2.0
            if hit is None:
                ends.append(direction * max_probe)
                continue
            lo_m, hi_m = hit / 2.0 if hit > step0 else 0.0, hit
            for _ in range(60):
                mid = 0.5 * (lo_m + hi_m)
                if _itinerary_matches(system, orbit, xi, np.array([x0 + direction * mid]), k, tgt):
                    lo_m = mid
                else:
                    hi_m = mid
                if hi_m - lo_m < resolution_floor / 4:
                    break
            ends.append(direction * lo_m)
        diam = ends[0] - ends[1]
        if diam < resolution_floor:
            return DecayCurve(tuple(diams), True)
        diams.append(float(diam))
    return DecayCurve(tuple(diams), False)


def _diameter_decay_2d(system, orbit, xi, K, resolution_floor, grid_pts=33, rounds=4):
    """Bounding-box refinement of the matching set on a local grid."""
    x0 = orbit.points[0]
    half = np.array([0.25, 0.25])
    diams = []
    for k in range(1, K + 1):
        lo = x0 - half
        hi = x0 + half
        diam = float(np.linalg.norm(hi - lo))
        for _ in range(rounds):
            a0 = np.linspace(lo[0], hi[0], grid_pts)
            a1 = np.linspace(lo[1], hi[1], grid_pts)
            A, B = np.meshgrid(a0, a1, indexing="ij")
            pts = np.stack([A.ravel(), B.ravel()], axis=-1)
            match = np.array([
                _itinerary_matches(system, orbit, xi, p, k) for p in pts
            ]).reshape(grid_pts, grid_pts)
            if not match.any():
                break
            i, j = np.nonzero(match)
            step = np.array([a0[1] - a0[0], a1[1] - a1[0]])
            lo = np.array([a0[i.min()], a1[j.min()]]) - step
            hi = np.array([a0[i.max()], a1[j.max()]]) + step
            diam = float(np.linalg.norm(hi - lo))
        if diam < resolution_floor:
            return DecayCurve(tuple(diams), True)
        diams.append(diam)
    return DecayCurve(tuple(diams), False)
