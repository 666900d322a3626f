"""Asymptotic orbit diagnostics: expansion averages, slow-approach sums,
hyperbolic times with backward-contraction probes, exponent bounds, and the
tail integrability probe near the critical set.

Almost-sure limsup conditions are unobservable at finite horizon; throughout
we report windowed tail maxima of running averages and aggregate ensembles by
percentile.  Window and percentile are exposed, not baked in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .maps import MapSystem
from .noise import NoiseModel, RandomOrbit, make_rng


def truncated_distance(dist: float, delta: float) -> float:
    """Distance to the critical set capped at 1 outside the delta-neighborhood."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if dist < 0:
        raise ValueError("dist must be >= 0")
    return 1.0 if dist >= delta else dist


def truncated_distance_array(dist: np.ndarray, delta: float) -> np.ndarray:
    if delta <= 0:
        raise ValueError("delta must be > 0")
    d = np.asarray(dist, dtype=float)
    return np.where(d >= delta, 1.0, d)


@dataclass(frozen=True)
class ExpansionReport:
    n: int
    expansion_avg: float
    tail_max: float              # max of running averages over the tail window
    tail_window: tuple[int, int]
    skipped_singular: int
    slow_approach: dict = field(default_factory=dict)  # delta -> average

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "expansion_avg": self.expansion_avg,
            "tail_max": self.tail_max,
            "tail_window": list(self.tail_window),
            "skipped_singular": self.skipped_singular,
            "slow_approach": {repr(k): v for k, v in sorted(self.slow_approach.items())},
        }


def expansion_average(orbit: RandomOrbit, tail_start_frac: float = 0.5) -> ExpansionReport:
    """Birkhoff average of log||Df^-1|| along the orbit, with tail maxima.

    Negative values witness non-uniform expansion.  Singular cache entries
    (orbit met the critical set exactly) are skipped and counted.
    """
    n = orbit.n_steps
    if n < 1:
        raise ValueError("orbit has no steps")
    vals = orbit.log_inv_norm[:n]
    finite = np.isfinite(vals)
    skipped = int(n - finite.sum())
    v = np.where(finite, vals, 0.0)
    cums = np.cumsum(v)
    counts = np.cumsum(finite)
    with np.errstate(invalid="ignore", divide="ignore"):
        running = cums / np.maximum(counts, 1)
    avg = float(running[-1])
    lo = max(int(math.floor(n * tail_start_frac)), 1)
    tail = running[lo - 1:]
    return ExpansionReport(n, avg, float(np.max(tail)), (lo, n), skipped)


def slow_approach_average(orbit: RandomOrbit, delta: float) -> float:
    """(1/n) sum of -log dist_delta(orbit point, critical set).

    Exact zero distances (the orbit landed on the critical set, a
    measure-zero coincidence) are skipped, matching the singular policy of
    the derivative cache.
    """
    n = orbit.n_steps
    d = truncated_distance_array(orbit.crit_dist[:n], delta)
    ok = d > 0.0
    return float(np.sum(-np.log(d[ok])) / n)


@dataclass(frozen=True)
class HyperbolicTimeRecord:
    times: np.ndarray
    alpha: float
    delta: float
    b: float
    n: int

    @property
    def density(self) -> float:
        return len(self.times) / self.n if self.n else 0.0

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha, "delta": self.delta, "b": self.b,
            "count": int(len(self.times)), "density": self.density,
        }


def hyperbolic_times(
    orbit: RandomOrbit, alpha: float, delta: float, b: float = 1.0
) -> HyperbolicTimeRecord:
    """Detect all n such that, for every 1 <= k <= n,

        prod_{j=n-k}^{n-1} ||Df(x_j)^-1||  <=  alpha^k      and
        dist_delta(x_{n-k}, crit)          >=  alpha^{b k}.

    Exact O(n) scan: with prefix sums S of (log||Df^-1|| - log alpha) the
    first condition is S_n <= min_{m<n} S_m; with c = -b log alpha the second
    is n >= max_{m<n} (m - log dist_delta(x_m)/c).  Both reduce to running
    extrema.  The constant b is inherited from the definition but never fixed
    by it, hence a parameter.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0,1)")
    if delta <= 0 or b <= 0:
        raise ValueError("delta and b must be > 0")
    n = orbit.n_steps
    if n == 0:
        return HyperbolicTimeRecord(np.empty(0, dtype=np.int64), alpha, delta, b, 0)
    la = math.log(alpha)
    a = orbit.log_inv_norm[:n] - la
    S = np.concatenate([[0.0], np.cumsum(a)])          # S_0..S_n
    prefmin = np.minimum.accumulate(S)                  # min over 0..m

    dd = truncated_distance_array(orbit.crit_dist[:n], delta)
    with np.errstate(divide="ignore"):
        L = np.log(dd)
    c = -b * la
    t = np.arange(n) - L / c
    runmax = np.maximum.accumulate(t)                   # max over 0..m

    ns = np.arange(1, n + 1)
    cond1 = S[1:] <= prefmin[:-1]
    cond2 = ns >= runmax
    return HyperbolicTimeRecord(ns[cond1 & cond2].astype(np.int64), alpha, delta, b, n)


def recheck_hyperbolic_times(orbit: RandomOrbit, record: HyperbolicTimeRecord) -> int:
    """Re-verify every reported time directly from the definition (O(sum n)).

    Returns the number of discrepancies; the fast scan must produce zero.
    """
    la = math.log(record.alpha)
    n = orbit.n_steps
    a = orbit.log_inv_norm[:n]
    dd = truncated_distance_array(orbit.crit_dist[:n], record.delta)
    bad = 0
    for m in record.times:
        ks = np.arange(1, m + 1)
        prods = np.cumsum(a[m - 1::-1])[: m]            # sum over j=m-k..m-1
        ok1 = np.all(prods <= ks * la + 1e-12 * np.abs(ks * la))
        with np.errstate(divide="ignore"):
            ok2 = np.all(np.log(dd[m - ks]) >= record.b * ks * la)
        if not (ok1 and ok2):
            bad += 1
    return bad


@dataclass(frozen=True)
class ContractionReport:
    checked: int
    violations: int
    skipped: int

    @property
    def violation_fraction(self) -> float:
        return self.violations / self.checked if self.checked else 0.0


def contraction_check(
    orbit: RandomOrbit,
    record: HyperbolicTimeRecord,
    probe_radius: float = 1e-4,
    max_times: int = 24,
    max_k_per_time: int = 12,
) -> ContractionReport:
    """Verify backward contraction at detected hyperbolic times.

    For a sample of times n and backward depths k, two probe points straddling
    the orbit point at time n are pulled back through the same noise sequence
    (branches shadowing the base orbit) and the inequality

        dist(y_{n-k}, z_{n-k}) <= alpha^{k/2} dist(y_n, z_n)

    is checked.  Probes whose pull-back leaves the phase space are skipped and
    counted.  Finite precision makes this a soft check at tiny radii.
    """
    if len(record.times) == 0:
        return ContractionReport(0, 0, 0)
    system, model = orbit.system, orbit.model
    times = record.times
    if len(times) > max_times:
        times = times[np.linspace(0, len(times) - 1, max_times).astype(int)]
    checked = violations = skipped = 0
    sqrt_alpha = math.sqrt(record.alpha)
    for m in times:
        base = orbit.points[m]
        offs = np.zeros(system.dim)
        offs[-1] = probe_radius / 2.0
        y = system.domain.reduce(base + offs)
        z = system.domain.reduce(base - offs)
        d_end = system.metric(y, z)
        if d_end == 0.0:
            skipped += 1
            continue
        ks = np.unique(np.geomspace(1, m, min(max_k_per_time, m)).astype(int))
        y_cur, z_cur = y, z
        k_done = 0
        fail = False
        for k_target in ks:
            while k_done < k_target and not fail:
                step_idx = m - k_done - 1  # invert the step x_{step_idx} -> x_{step_idx+1}
                t = orbit.noise[step_idx] if orbit.model.epsilon > 0 else np.zeros(system.dim)
                anchor = orbit.points[step_idx]
                y_cur = system.pullback_toward(y_cur, anchor, t)
                z_cur = system.pullback_toward(z_cur, anchor, t)
                if y_cur is None or z_cur is None:
                    fail = True
                    break
                k_done += 1
            if fail:
                skipped += 1
                break
            checked += 1
            if system.metric(y_cur, z_cur) > sqrt_alpha ** k_target * d_end * (1 + 1e-9):
                violations += 1
    return ContractionReport(checked, violations, skipped)


def estimate_exponent_bound(reports: Sequence[ExpansionReport], percentile: float = 95.0) -> float:
    """Ensemble exponent bound: minus the given percentile of tail maxima.

    A positive value is the numerical proxy for non-uniform expansion with a
    common exponent bound across the ensemble.  The percentile (default 95)
    is this repo's aggregation convention, surfaced in reports.
    """
    if not reports:
        raise ValueError("empty ensemble")
    tails = np.array([r.tail_max for r in reports])
    return float(-np.percentile(tails, percentile))


@dataclass(frozen=True)
class TailIntegralEstimate:
    value: float          # estimate of the integral restricted to B(crit, delta)
    std_error: float
    restricted_mass: float
    samples: int


def uniform_integrability_probe(
    system: MapSystem,
    model: NoiseModel,
    mu_eps,
    delta: float,
    samples: int = 20000,
    seed: int = 0,
) -> TailIntegralEstimate:
    """Monte Carlo estimate of  int_{B(crit,delta)} int -log|det Df_t(x)| dtheta dmu.

    Samples x from mu restricted to the delta-neighborhood of the critical set
    (exact cell-overlap weighting on the grid), t from the noise law, and
    returns the unnormalized tail integral with its standard error.  Additive
    noise leaves Df unchanged, so t only exercises the interface.  Returns 0
    exactly when the restricted mass vanishes.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    grid = mu_eps.grid
    if system.critical_set == "empty":
        return TailIntegralEstimate(0.0, 0.0, 0.0, 0)
    axis = 0 if system.critical_set == "point_zero" else 1
    centers = grid.centers()
    w = grid.widths[axis]
    lo = centers[:, axis] - w / 2.0
    hi = centers[:, axis] + w / 2.0
    overlap = np.clip(np.minimum(hi, delta) - np.maximum(lo, -delta), 0.0, None) / w
    weights = mu_eps.masses * overlap
    mass = float(weights.sum())
    if mass == 0.0:
        return TailIntegralEstimate(0.0, 0.0, 0.0, 0)

    rng = make_rng(seed, 0x7A11)
    idx = rng.choice(len(weights), size=samples, p=weights / mass)
    pts = centers[idx].copy()
    # uniform within cell-x-slab overlap; other coordinates uniform in cell
    o_lo = np.maximum(lo[idx], -delta)
    o_hi = np.minimum(hi[idx], delta)
    pts[:, axis] = rng.uniform(o_lo, o_hi)
    for a in range(grid.dim):
        if a != axis:
            wa = grid.widths[a]
            pts[:, a] += rng.uniform(-wa / 2, wa / 2, samples)
    model.sample(rng, samples)  # additive noise: derivative unaffected, draw anyway
    lad, _ = system.log_derivative_arrays(pts)
    vals = -lad
    ok = np.isfinite(vals)
    vals = vals[ok]
    est = float(np.mean(vals)) * mass
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) * mass
    return TailIntegralEstimate(est, se, mass, int(ok.sum()))


def diagnostics_report(
    orbit: RandomOrbit,
    slow_deltas: Sequence[float] = (),
    ht_params: Optional[dict] = None,
) -> dict:
    """Bundle the per-orbit diagnostics into one JSON-ready record."""
    rep = expansion_average(orbit)
    out = rep.to_json()
    out["slow_approach"] = {repr(d): slow_approach_average(orbit, d) for d in slow_deltas}
    if ht_params is not None:
        rec = hyperbolic_times(orbit, **ht_params)
        out["hyp_times"] = rec.to_json()
    return out
