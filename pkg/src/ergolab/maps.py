"""Map families: evaluation, exact differentials, critical-set geometry.

Families
--------
expanding_circle   f(x) = d*x mod 1 on the circle, d >= 2, no critical set.
torus_class_u      f(x) = d*x + amp*sin(2*pi*x) + shift mod 1, an expanding
                   deformation of the linear circle map (local diffeo).
quadratic          f(x) = a - x^2 on [-a, a] (default), critical set {0}.
viana              skew product on S^1 x I:
                   (s, x) -> (d*s mod 1, a0 + alpha*sin(2*pi*s) - x^2),
                   critical set = the fiber {x = 0}.
rotation           f(x) = x + theta mod 1 (zero-exponent control).
two_sink           f(x) = x - amp*sin(2*pi*modes*x) mod 1 (control with
                   several attracting fixed points when modes >= 2).
beta_map           f(x) = beta*x mod 1 on [0,1], non-integer slope control
                   (piecewise linear, entropy log beta).

Points are 1-d float arrays of length ``dim``.  Circle coordinates are kept
reduced to [0, 1).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

TWO_PI = 2.0 * math.pi

FAMILIES = (
    "expanding_circle",
    "torus_class_u",
    "quadratic",
    "viana",
    "rotation",
    "two_sink",
    "beta_map",
)


class DomainError(ValueError):
    """Point outside the system's phase domain."""


class UnsupportedSystemError(ValueError):
    """Operation not defined for this map family."""


@dataclass(frozen=True)
class PhaseDomain:
    lows: tuple[float, ...]
    highs: tuple[float, ...]
    periodic: tuple[bool, ...]

    @property
    def dim(self) -> int:
        return len(self.lows)

    def contains(self, p: np.ndarray, slack: float = 0.0) -> bool:
        for a in range(self.dim):
            if self.periodic[a]:
                continue
            if not (self.lows[a] - slack <= p[a] <= self.highs[a] + slack):
                return False
        return True

    def reduce(self, p: np.ndarray) -> np.ndarray:
        """Wrap periodic coordinates into [low, high)."""
        q = np.array(p, dtype=float)
        for a in range(self.dim):
            if self.periodic[a]:
                span = self.highs[a] - self.lows[a]
                q[a] = self.lows[a] + (q[a] - self.lows[a]) % span
        return q

    def inflate(self, eps: float) -> "PhaseDomain":
        lows = tuple(l if per else l - eps for l, per in zip(self.lows, self.periodic))
        highs = tuple(h if per else h + eps for h, per in zip(self.highs, self.periodic))
        return PhaseDomain(lows, highs, self.periodic)


@dataclass(frozen=True)
class DifferentialData:
    jacobian: np.ndarray
    log_abs_det: float      # -inf on the critical set
    log_inv_norm: float     # log of operator norm of the inverse; +inf when singular
    singular: bool


@dataclass(frozen=True)
class MapSystem:
    family: str
    params: tuple[tuple[str, float], ...]
    domain: PhaseDomain

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        p = self.p
        if self.family == "expanding_circle" and int(p["d"]) < 2:
            raise ValueError("expanding_circle needs degree d >= 2")
        if self.family == "torus_class_u":
            if int(p["d"]) < 2:
                raise ValueError("torus_class_u needs degree d >= 2")
            if p["d"] - TWO_PI * abs(p["amp"]) <= 1.0:
                raise ValueError("deformation too large: map must stay expanding")
        if self.family == "quadratic" and not (0.0 <= p["a"] <= 2.0):
            raise ValueError("quadratic parameter a must lie in [0, 2]")
        if self.family == "viana":
            if int(p["d"]) < 16:
                raise ValueError("viana base degree must be >= 16")
            if not (1.0 < p["a0"] < 2.0):
                raise ValueError("viana a0 must lie in (1, 2)")
            if p["alpha"] < 0.0:
                raise ValueError("viana alpha must be >= 0")
        if self.family == "beta_map" and not (1.0 < p["beta"] <= 2.0):
            raise ValueError("beta_map slope must lie in (1, 2]")

    # -- basic accessors ------------------------------------------------------

    @property
    def p(self) -> dict:
        return dict(self.params)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def critical_set(self) -> str:
        """Symbolic tag: 'empty', 'point_zero' (x=0), or 'fiber_zero' (S^1 x {0})."""
        if self.family == "quadratic":
            return "point_zero"
        if self.family == "viana":
            return "fiber_zero"
        return "empty"

    # -- evaluation -----------------------------------------------------------

    def apply(self, p) -> np.ndarray:
        """One step of the deterministic map; circle coordinates reduced mod 1."""
        q = np.asarray(p, dtype=float).reshape(self.dim)
        if not self.domain.contains(self.domain.reduce(q)):
            raise DomainError(f"point {q} outside phase domain")
        return self.apply_array(q.reshape(1, self.dim))[0]

    def apply_array(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized map evaluation on an (n, dim) array (no domain check)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        par = self.p
        fam = self.family
        if fam == "expanding_circle":
            return np.mod(par["d"] * pts, 1.0)
        if fam == "torus_class_u":
            x = pts[:, 0]
            out = par["d"] * x + par.get("shift", 0.0) + par["amp"] * np.sin(TWO_PI * x)
            return np.mod(out, 1.0)[:, None]
        if fam == "rotation":
            return np.mod(pts + par["theta"], 1.0)
        if fam == "two_sink":
            m = par.get("modes", 2.0)
            x = pts[:, 0]
            return np.mod(x - par["amp"] * np.sin(TWO_PI * m * x), 1.0)[:, None]
        if fam == "beta_map":
            return np.mod(par["beta"] * pts, 1.0)
        if fam == "quadratic":
            return par["a"] - pts ** 2
        if fam == "viana":
            s, x = pts[:, 0], pts[:, 1]
            s2 = np.mod(par["d"] * s, 1.0)
            x2 = par["a0"] + par["alpha"] * np.sin(TWO_PI * s) - x ** 2
            return np.stack([s2, x2], axis=-1)
        raise UnsupportedSystemError(fam)

    # -- differential data ------------------------------------------------------

    def jacobian_array(self, pts: np.ndarray) -> np.ndarray:
        """Jacobians at each point, shape (n, dim, dim)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        par = self.p
        fam = self.family
        n = len(pts)
        if fam in ("expanding_circle", "beta_map"):
            v = par["d"] if fam == "expanding_circle" else par["beta"]
            return np.full((n, 1, 1), float(v))
        if fam == "rotation":
            return np.ones((n, 1, 1))
        if fam == "torus_class_u":
            der = par["d"] + par["amp"] * TWO_PI * np.cos(TWO_PI * pts[:, 0])
            return der.reshape(n, 1, 1)
        if fam == "two_sink":
            m = par.get("modes", 2.0)
            der = 1.0 - par["amp"] * TWO_PI * m * np.cos(TWO_PI * m * pts[:, 0])
            return der.reshape(n, 1, 1)
        if fam == "quadratic":
            return (-2.0 * pts[:, 0]).reshape(n, 1, 1)
        if fam == "viana":
            jac = np.zeros((n, 2, 2))
            jac[:, 0, 0] = par["d"]
            jac[:, 1, 0] = par["alpha"] * TWO_PI * np.cos(TWO_PI * pts[:, 0])
            jac[:, 1, 1] = -2.0 * pts[:, 1]
            return jac
        raise UnsupportedSystemError(fam)

    def differential(self, p) -> DifferentialData:
        """Exact derivative data at a point.

        On the critical set the log-determinant is the -inf sentinel and the
        record is flagged singular; callers decide how to treat the hit.
        """
        q = np.asarray(p, dtype=float).reshape(self.dim)
        jac = self.jacobian_array(q.reshape(1, -1))[0]
        if self.dim == 1:
            der = float(jac[0, 0])
            if der == 0.0:
                return DifferentialData(jac, -math.inf, math.inf, True)
            lad = math.log(abs(der))
            return DifferentialData(jac, lad, -lad, False)
        det = float(jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0])
        if det == 0.0:
            return DifferentialData(jac, -math.inf, math.inf, True)
        # closed-form singular values of a 2x2 matrix; smallest one via
        # det/s_max to avoid cancellation near the critical set
        g = jac.T @ jac
        tr = float(g[0, 0] + g[1, 1])
        disc = max(tr * tr - 4.0 * det * det, 0.0)
        lam_max = 0.5 * (tr + math.sqrt(disc))
        s_max = math.sqrt(lam_max)
        s_min = abs(det) / s_max
        return DifferentialData(jac, math.log(abs(det)), -math.log(s_min), False)

    def log_derivative_arrays(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(log|det Df|, log||Df^-1||) vectorized; -inf/+inf on singular points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        jac = self.jacobian_array(pts)
        if self.dim == 1:
            der = np.abs(jac[:, 0, 0])
            with np.errstate(divide="ignore"):
                lad = np.log(der)
            return lad, -lad
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        tr = np.einsum("nij,nij->n", jac, jac)
        disc = np.maximum(tr * tr - 4.0 * det * det, 0.0)
        s_max = np.sqrt(0.5 * (tr + np.sqrt(disc)))
        with np.errstate(divide="ignore"):
            lad = np.log(np.abs(det))
            lin = np.where(det == 0.0, np.inf, np.log(s_max) - lad)
        return lad, lin

    # -- critical set -----------------------------------------------------------

    def critical_distance(self, p) -> float:
        q = np.asarray(p, dtype=float).reshape(self.dim)
        return float(self.critical_distance_array(q.reshape(1, -1))[0])

    def critical_distance_array(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tag = self.critical_set
        if tag == "empty":
            return np.full(len(pts), np.inf)
        if tag == "point_zero":
            return np.abs(pts[:, 0])
        return np.abs(pts[:, 1])  # fiber x = 0

    # -- scalar stepper for tight orbit loops ------------------------------------

    def stepper(self) -> Callable:
        """Return step(coords, t) -> (coords', log_inv_norm, log_abs_det, crit_dist).

        ``coords`` is a tuple of floats, ``t`` a tuple of noise offsets added to
        the image (circle coordinates wrapped).  Derivative data refer to the
        input point.  Built per family so orbit loops stay allocation-free.
        """
        par = self.p
        fam = self.family
        log, sin, cos, sqrt = math.log, math.sin, math.cos, math.sqrt
        if fam in ("expanding_circle", "beta_map"):
            d = float(par["d"] if fam == "expanding_circle" else par["beta"])
            ld = log(d)

            def step(c, t):
                return (((d * c[0] + t[0]) % 1.0,), -ld, ld, math.inf)

            return step
        if fam == "rotation":
            th = float(par["theta"])

            def step(c, t):
                return (((c[0] + th + t[0]) % 1.0,), 0.0, 0.0, math.inf)

            return step
        if fam == "torus_class_u":
            d, amp = float(par["d"]), float(par["amp"])
            shift = float(par.get("shift", 0.0))

            def step(c, t):
                x = c[0]
                der = d + amp * TWO_PI * cos(TWO_PI * x)
                ld = log(der)
                return (((d * x + shift + amp * sin(TWO_PI * x) + t[0]) % 1.0,), -ld, ld, math.inf)

            return step
        if fam == "two_sink":
            amp = float(par["amp"])
            m = float(par.get("modes", 2.0))

            def step(c, t):
                x = c[0]
                der = abs(1.0 - amp * TWO_PI * m * cos(TWO_PI * m * x))
                ld = log(der)
                return (((x - amp * sin(TWO_PI * m * x) + t[0]) % 1.0,), -ld, ld, math.inf)

            return step
        if fam == "quadratic":
            a = float(par["a"])

            def step(c, t):
                x = c[0]
                ax = abs(x)
                if ax == 0.0:
                    lad, lin = -math.inf, math.inf
                else:
                    lad = log(2.0 * ax)
                    lin = -lad
                return ((a - x * x + t[0],), lin, lad, ax)

            return step
        if fam == "viana":
            d, a0, al = float(par["d"]), float(par["a0"]), float(par["alpha"])

            def step(c, t):
                s, x = c
                b = al * TWO_PI * cos(TWO_PI * s)
                det = -2.0 * x * d
                ax = abs(x)
                if det == 0.0:
                    lad, lin = -math.inf, math.inf
                else:
                    tr = d * d + b * b + 4.0 * x * x
                    s_max = sqrt(0.5 * (tr + sqrt(max(tr * tr - 4.0 * det * det, 0.0))))
                    lad = log(abs(det))
                    lin = log(s_max) - lad
                s2 = (d * s + t[0]) % 1.0
                x2 = a0 + al * sin(TWO_PI * s) - x * x + t[1]
                return ((s2, x2), lin, lad, ax)

            return step
        raise UnsupportedSystemError(fam)

    # -- inverse branches (1-d full-branch expanding families) --------------------

    def n_branches(self) -> int:
        if self.family in ("expanding_circle", "torus_class_u"):
            return int(self.p["d"])
        raise UnsupportedSystemError(
            f"{self.family}: inverse branches need a full-branched expanding circle map"
        )

    def lift(self, x: np.ndarray) -> np.ndarray:
        """Monotone lift F: [0,1] -> R with F(y) mod 1 = f(y)."""
        par = self.p
        if self.family == "expanding_circle":
            return par["d"] * x
        if self.family == "torus_class_u":
            return par["d"] * x + par.get("shift", 0.0) + par["amp"] * np.sin(TWO_PI * x)
        raise UnsupportedSystemError(self.family)

    def inverse_branches(self, targets: np.ndarray, tol: float = 1e-13) -> np.ndarray:
        """Preimages of circle points under each branch, shape (d, n).

        Solved by monotone bisection of the lift on [0,1]; branch m solves
        F(y) = F(0) + frac(target - F(0)) + m.
        """
        d = self.n_branches()
        t = np.mod(np.asarray(targets, dtype=float), 1.0)
        f0 = float(self.lift(np.zeros(1))[0])
        rhs0 = f0 + np.mod(t - f0, 1.0)
        out = np.empty((d, len(t)))
        for m in range(d):
            rhs = rhs0 + m
            lo = np.zeros_like(rhs)
            hi = np.ones_like(rhs)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                below = self.lift(mid) < rhs
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
                if np.max(hi - lo) < tol:
                    break
            out[m] = 0.5 * (lo + hi)
        return out

    def pullback_toward(self, target, anchor, t) -> Optional[np.ndarray]:
        """Preimage of ``target`` under x -> f(x) + t closest to ``anchor``.

        Returns None when no real preimage exists (probe left the range).
        Used by the hyperbolic-time contraction probes, which shadow a fixed
        noise sequence backwards.
        """
        target = np.asarray(target, dtype=float).reshape(self.dim)
        anchor = np.asarray(anchor, dtype=float).reshape(self.dim)
        t = np.asarray(t, dtype=float).reshape(self.dim)
        fam = self.family
        par = self.p
        if fam in ("expanding_circle", "torus_class_u"):
            pre = self.inverse_branches(np.array([target[0] - t[0]]))[:, 0]
            k = np.argmin(np.abs(np.mod(pre - anchor[0] + 0.5, 1.0) - 0.5))
            return np.array([pre[k]])
        if fam == "quadratic":
            r = par["a"] - (target[0] - t[0])
            if r < 0:
                return None
            root = math.sqrt(r)
            return np.array([root if anchor[0] >= 0 else -root])
        if fam == "viana":
            d = int(par["d"])
            s_img = (target[0] - t[0]) % 1.0
            cands = (np.arange(d) + s_img) / d
            k = np.argmin(np.abs(np.mod(cands - anchor[0] + 0.5, 1.0) - 0.5))
            s_pre = float(cands[k])
            r = par["a0"] + par["alpha"] * math.sin(TWO_PI * s_pre) - (target[1] - t[1])
            if r < 0:
                return None
            root = math.sqrt(r)
            return np.array([s_pre, root if anchor[1] >= 0 else -root])
        raise UnsupportedSystemError(fam)

    def metric(self, p, q) -> float:
        """Distance honoring periodic coordinates."""
        p = np.asarray(p, dtype=float).reshape(self.dim)
        q = np.asarray(q, dtype=float).reshape(self.dim)
        acc = 0.0
        for a in range(self.dim):
            d = p[a] - q[a]
            if self.domain.periodic[a]:
                span = self.domain.highs[a] - self.domain.lows[a]
                d = (d + 0.5 * span) % span - 0.5 * span
            acc += d * d
        return math.sqrt(acc)

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {"family": self.family, "params": {k: v for k, v in self.params}}

    @staticmethod
    def from_json(obj: dict) -> "MapSystem":
        fam = obj["family"]
        par = obj["params"]
        ctor = {
            "expanding_circle": lambda: expanding_circle(int(par["d"])),
            "torus_class_u": lambda: circle_deformation(
                int(par["d"]), float(par["amp"]), float(par.get("shift", 0.0))
            ),
            "quadratic": lambda: quadratic(float(par["a"]), domain=par.get("domain")),
            "viana": lambda: viana(
                int(par.get("d", 16)),
                float(par.get("a0", 1.9)),
                float(par.get("alpha", 0.01)),
                interval=par.get("interval"),
            ),
            "rotation": lambda: rotation(float(par["theta"])),
            "two_sink": lambda: two_sink(float(par["amp"]), float(par.get("modes", 2.0))),
            "beta_map": lambda: beta_map(float(par["beta"])),
        }
        if fam not in ctor:
            raise ValueError(f"unknown family {fam!r}")
        return ctor[fam]()


# -- constructors ----------------------------------------------------------------

CIRCLE = PhaseDomain((0.0,), (1.0,), (True,))


def expanding_circle(d: int) -> MapSystem:
    return MapSystem("expanding_circle", (("d", float(d)),), CIRCLE)


def circle_deformation(d: int, amp: float, shift: float = 0.0) -> MapSystem:
    params = (("d", float(d)), ("amp", float(amp)), ("shift", float(shift)))
    return MapSystem("torus_class_u", params, CIRCLE)


def rotation(theta: float) -> MapSystem:
    return MapSystem("rotation", (("theta", float(theta)),), CIRCLE)


def two_sink(amp: float, modes: float = 2.0) -> MapSystem:
    return MapSystem("two_sink", (("amp", float(amp)), ("modes", float(modes))), CIRCLE)


def beta_map(beta: float) -> MapSystem:
    dom = PhaseDomain((0.0,), (1.0,), (False,))
    return MapSystem("beta_map", (("beta", float(beta)),), dom)


def quadratic(a: float, domain=None) -> MapSystem:
    """Quadratic family a - x^2; default domain [-a, a] is forward invariant."""
    if domain is None:
        domain = (-a, a) if a > 0 else (-2.0, 2.0)
    dom = PhaseDomain((float(domain[0]),), (float(domain[1]),), (False,))
    return MapSystem("quadratic", (("a", float(a)),), dom)


def viana(d: int = 16, a0: float = 1.9, alpha: float = 0.01, interval=None) -> MapSystem:
    """Cylinder skew product; ``interval`` is the invariant x-range (default found
    by detect_invariant_region on [-2, 2] callers may refine)."""
    if interval is None:
        interval = (-2.0, 2.0)
    dom = PhaseDomain((0.0, float(interval[0])), (1.0, float(interval[1])), (True, False))
    params = (("d", float(d)), ("a0", float(a0)), ("alpha", float(alpha)))
    return MapSystem("viana", params, dom)


# -- invariant region detection ---------------------------------------------------


@dataclass(frozen=True)
class InvariantRegion:
    found: bool
    lows: tuple[float, ...]
    highs: tuple[float, ...]
    margins: tuple[float, ...]   # (lower, upper) per non-periodic axis, flattened
    worst_violation: float

    @property
    def min_margin(self) -> float:
        return min(self.margins) if self.margins else math.inf


def detect_invariant_region(
    system: MapSystem,
    candidate_bounds,
    grid_n: int = 128,
    strict: bool = False,
    strict_margin: float = 1e-9,
) -> InvariantRegion:
    """Search for a forward-invariant sub-box of the candidate bounds.

    Scans pairs of grid levels of the non-periodic axis for a sub-interval
    whose image (evaluated on a ``grid_n``-per-axis grid) stays inside, and
    returns the one maximizing the worst boundary margin.  Non-strict mode
    accepts boundary-touching regions (margin >= 0 up to grid tolerance);
    strict mode demands a positive margin.
    """
    if grid_n < 64:
        raise ValueError("grid_n must be >= 64")
    if system.dim == 1 and system.domain.periodic[0]:
        return InvariantRegion(True, system.domain.lows, system.domain.highs, (), 0.0)

    lo_c, hi_c = float(candidate_bounds[0]), float(candidate_bounds[1])
    levels = np.linspace(lo_c, hi_c, grid_n)
    if lo_c < 0.0 < hi_c:
        # fiber maps of the supported families attain their image extremes at
        # x = 0; include it so boundary-touching regions are detected exactly
        levels = np.unique(np.concatenate([levels, [0.0]]))
    axis = system.dim - 1  # the non-periodic coordinate
    n_lv = len(levels)

    if system.dim == 1:
        pts = levels.reshape(-1, 1)
        img = system.apply_array(pts)[:, 0]
        g_min = g_max = img
    else:
        s_vals = np.unique(np.concatenate([
            np.linspace(0.0, 1.0, grid_n, endpoint=False), [0.25, 0.75]]))
        S, X = np.meshgrid(s_vals, levels, indexing="ij")
        pts = np.stack([S.ravel(), X.ravel()], axis=-1)
        img = system.apply_array(pts)[:, 1].reshape(len(s_vals), n_lv)
        g_min = img.min(axis=0)   # over s, per x-level
        g_max = img.max(axis=0)

    # image extent over the level range [i, j]: prefix scans give O(n^2) pairs
    best = None
    run_min = np.minimum.accumulate
    run_max = np.maximum.accumulate
    for i in range(n_lv - 1):
        mins = run_min(g_min[i:])
        maxs = run_max(g_max[i:])
        js = np.arange(i + 1, n_lv)
        m_lo = mins[1:] - levels[i]
        m_hi = levels[js] - maxs[1:]
        margin = np.minimum(m_lo, m_hi)
        k = int(np.argmax(margin))
        if best is None or margin[k] > best[0]:
            best = (float(margin[k]), i, int(js[k]), float(m_lo[k]), float(m_hi[k]))

    worst, i, j, m_lo, m_hi = best
    tol = 1e-12
    ok = worst > strict_margin if strict else worst >= -tol
    lo, hi = float(levels[i]), float(levels[j])
    lows = list(system.domain.lows)
    highs = list(system.domain.highs)
    lows[axis], highs[axis] = lo, hi
    return InvariantRegion(
        bool(ok), tuple(lows), tuple(highs), (m_lo, m_hi), min(worst, 0.0) * -1.0
    )


def invariant_subsystem(system: MapSystem, region: InvariantRegion) -> MapSystem:
    """Copy of the system restricted to a detected invariant region."""
    dom = PhaseDomain(region.lows, region.highs, system.domain.periodic)
    return MapSystem(system.family, system.params, dom)


# -- structural condition checks ---------------------------------------------------


@dataclass(frozen=True)
class NonflatReport:
    applicable: bool
    samples: int
    violation_fraction: dict
    tightest_B: dict
    overall_tightest_B: float


def verify_nonflat(
    system: MapSystem,
    beta: float,
    B: float,
    sample_count: int = 2000,
    rng_seed: int = 0,
    min_dist: float = 1e-3,
    max_dist: float | None = None,
) -> NonflatReport:
    """Monte Carlo falsifier for the non-flatness bounds near the critical set.

    Checks, on sampled pairs (x, y) with dist(x,y) < dist(x, crit)/2 and random
    unit tangent vectors v:

      (1)  (1/B) dist^beta <= |Df(x)v|/|v| <= B dist^beta
      (2)  |log|Df(x)^-1| - log|Df(y)^-1|| <= B dist(x,y)/dist^beta
      (3)  |log|det Df(x)^-1| - log|det Df(y)^-1|| <= B dist(x,y)/dist^beta

    Sampling is stratified over log-spaced distance shells [min_dist, max_dist]
    so the reported tightest constants are stable across seeds.  This samples,
    it does not prove.
    """
    if B <= 1.0 or beta <= 0.0:
        raise ValueError("need B > 1 and beta > 0")
    if system.critical_set == "empty":
        return NonflatReport(False, 0, {}, {}, math.nan)

    rng = np.random.Generator(np.random.Philox(key=np.array([rng_seed, 0x6E66], dtype=np.uint64)))
    if max_dist is None:
        if system.critical_set == "point_zero":
            max_dist = 0.9 * min(abs(system.domain.lows[0]), abs(system.domain.highs[0]))
        else:
            max_dist = 0.9 * min(abs(system.domain.lows[1]), abs(system.domain.highs[1]))
    # deterministic log-spaced shells keep the tightest constants seed-stable;
    # randomness enters through the companion offset, tangent and fiber draws
    dists = np.geomspace(min_dist, max_dist, sample_count)
    signs = rng.choice([-1.0, 1.0], sample_count)

    viol = {"S1": 0, "S2": 0, "S3": 0}
    tight = {"S1": 1.0, "S2": 1.0, "S3": 1.0}
    used = 0
    for dist, sign in zip(dists, signs):
        if system.dim == 1:
            x = np.array([sign * dist])
        else:
            x = np.array([rng.uniform(0.0, 1.0), sign * dist])
        # companion point in the half-distance ball, same side conventions
        delta = rng.uniform(-0.49, 0.49) * dist
        y = x.copy()
        y[-1] += delta
        if not system.domain.contains(x) or not system.domain.contains(y) or y[-1] == 0.0:
            continue
        used += 1
        dxy = abs(delta)
        dpow = dist ** beta

        # (S1): directional stretch against dist^beta
        theta = rng.uniform(0.0, TWO_PI)
        v = np.array([math.cos(theta), math.sin(theta)])[: system.dim]
        v /= np.linalg.norm(v)
        jac = system.jacobian_array(x.reshape(1, -1))[0]
        stretch = float(np.linalg.norm(jac @ v))
        need = max(stretch / dpow, dpow / stretch) if stretch > 0 else math.inf
        tight["S1"] = max(tight["S1"], need)
        if not (dpow / B <= stretch <= B * dpow):
            viol["S1"] += 1

        # (S2)/(S3): log-Lipschitz constants relative to dist(x,y)/dist^beta
        if dxy > 0:
            scale = dpow / dxy
            dx = system.differential(x)
            dy = system.differential(y)
            gap2 = abs(dx.log_inv_norm - dy.log_inv_norm)
            gap3 = abs(dx.log_abs_det - dy.log_abs_det)
            tight["S2"] = max(tight["S2"], gap2 * scale)
            tight["S3"] = max(tight["S3"], gap3 * scale)
            if gap2 > B * dxy / dpow:
                viol["S2"] += 1
            if gap3 > B * dxy / dpow:
                viol["S3"] += 1

    frac = {k: v / used if used else math.nan for k, v in viol.items()}
    return NonflatReport(True, used, frac, tight, max(tight.values()))


@dataclass(frozen=True)
class ClassUReport:
    passed: bool
    conditions: dict
    constants_consistent: bool
    notes: tuple[str, ...]


def class_u_check(
    system: MapSystem,
    covering: list,
    constants: dict,
    grid_n: int = 4096,
    injectivity_pairs: int = 256,
    rng_seed: int = 0,
) -> ClassUReport:
    """Grid check of the expanding-deformation conditions on a covered circle.

    ``covering`` is a list of (center, radius) balls; the first ``p`` are the
    uniformly-expanding region, the last ``q`` may host the bad set W.
    Conditions evaluated with worst margins:

      1. |Df^-1| <= (1+delta1)^-1 on B_1..B_p
      2. |Df^-1| <= 1 + delta0 everywhere
      3. |det Df| >= sigma1 everywhere (the constants constraint sigma1 > p is
         reported separately, not gated: it is unsatisfiable for circle
         coverings by injectivity domains)
      4. V = {|Df^-1| >= (1+delta1)^-1} inside W = union of the last q balls,
         and inf log|Df| off W strictly above sup log|Df| on V
      5. oscillation of log|Df| on V below beta

    Injectivity of f restricted to each ball is probed on sampled pairs.
    """
    if system.dim != 1 or not system.domain.periodic[0]:
        raise UnsupportedSystemError("class-U check implemented for circle systems")
    p_cnt = int(constants["p"])
    q_cnt = int(constants["q"])
    if p_cnt + q_cnt != len(covering):
        raise ValueError("p + q must equal the number of covering balls")

    xs = (np.arange(grid_n) + 0.5) / grid_n
    lad, lin = system.log_derivative_arrays(xs.reshape(-1, 1))
    inv_norm = np.exp(-lad) if system.dim == 1 else np.exp(lin)
    norm_df = np.exp(lad)  # dim 1: |Df| = |det Df|

    def in_ball(c, r):
        return np.abs(np.mod(xs - c + 0.5, 1.0) - 0.5) <= r

    members = [in_ball(c, r) for (c, r) in covering]
    covered = np.any(members, axis=0)
    if not np.all(covered):
        raise ValueError(
            f"covering misses {int(np.sum(~covered))} of {grid_n} grid points"
        )

    good = np.any(members[:p_cnt], axis=0) if p_cnt else np.zeros(grid_n, bool)
    bad_union = np.any(members[p_cnt:], axis=0) if q_cnt else np.zeros(grid_n, bool)

    d1 = float(constants["delta1"])
    d0 = float(constants["delta0"])
    s1 = float(constants["sigma1"])
    beta = float(constants["beta"])

    conds = {}
    thr = 1.0 / (1.0 + d1)
    conds["1_uniform_expansion"] = {
        "pass": bool(np.all(inv_norm[good] <= thr)) if good.any() else False,
        "worst_margin": float(thr - np.max(inv_norm[good])) if good.any() else -math.inf,
    }
    conds["2_never_contracts"] = {
        "pass": bool(np.all(inv_norm <= 1.0 + d0)),
        "worst_margin": float(1.0 + d0 - np.max(inv_norm)),
    }
    conds["3_volume_expanding"] = {
        "pass": bool(np.all(np.exp(lad) >= s1)),
        "worst_margin": float(np.min(np.exp(lad)) - s1),
    }
    V = inv_norm >= thr
    v_in_w = bool(np.all(bad_union[V])) if V.any() else True
    if V.any() and (~V).any():
        sep = float(np.min(np.log(norm_df[~bad_union])) - np.max(np.log(norm_df[V]))) \
            if (~bad_union).any() else -math.inf
    else:
        sep = math.inf
    conds["4_bad_set_contained"] = {
        "pass": v_in_w and (sep > 0 or not V.any()),
        "worst_margin": sep if V.any() else math.inf,
        "V_empty": not bool(V.any()),
    }
    osc = float(np.max(np.log(norm_df[V])) - np.min(np.log(norm_df[V]))) if V.any() else 0.0
    conds["5_low_oscillation"] = {"pass": osc < beta, "worst_margin": float(beta - osc)}

    notes = []
    rng = np.random.Generator(np.random.Philox(key=np.array([rng_seed, 0xC1A5], dtype=np.uint64)))
    for k, (c, r) in enumerate(covering):
        a = np.mod(c - r + rng.uniform(0, 2 * r, injectivity_pairs), 1.0)
        b = np.mod(c - r + rng.uniform(0, 2 * r, injectivity_pairs), 1.0)
        fa = system.apply_array(a.reshape(-1, 1))[:, 0]
        fb = system.apply_array(b.reshape(-1, 1))[:, 0]
        clash = (np.abs(np.mod(fa - fb + 0.5, 1.0) - 0.5) < 1e-12) & (
            np.abs(np.mod(a - b + 0.5, 1.0) - 0.5) > 1e-9
        )
        if clash.any():
            notes.append(f"ball {k}: injectivity violated on sampled pair")

    consistent = s1 > p_cnt
    passed = all(c["pass"] for c in conds.values()) and not notes
    return ClassUReport(passed, conds, consistent, tuple(notes))
