"""Additive random perturbations: noise law, sequences, random orbits.

The perturbed step is x -> f(x) + t with t drawn uniformly from the closed
ball of radius epsilon (an interval in dimension one, a disk on the
cylinder); circle coordinates are wrapped after the jump.

Randomness comes from numpy's Philox counter-based generator keyed through
SeedSequence(seed, spawn_key) so that named streams are independent and
bit-reproducible; the same seed always yields the same sequence.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .maps import MapSystem


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for the given (seed, stream...) key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoiseModel:
    epsilon: float
    dim: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("noise level must be >= 0")
        if self.dim not in (1, 2):
            raise ValueError("supported dimensions: 1, 2")

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """n draws, uniform on the closed ball of radius epsilon, shape (n, dim)."""
        if self.epsilon == 0.0:
            return np.zeros((n, self.dim))
        if self.dim == 1:
            return rng.uniform(-self.epsilon, self.epsilon, (n, 1))
        r = self.epsilon * np.sqrt(rng.uniform(0.0, 1.0, n))
        th = rng.uniform(0.0, 2.0 * math.pi, n)
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


def sample_noise(model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Single noise vector."""
    return model.sample(rng, 1)[0]


NOISE_STREAM = 0x01


class NoiseSequence:
    """Lazily realized i.i.d. noise sequence t_1, t_2, ... for a fixed seed.

    ``shifted()`` views the same realization starting one step later, which is
    the shift map on sequence space.
    """

    def __init__(self, model: NoiseModel, seed: int, offset: int = 0, _shared=None):
        self.model = model
        self.seed = int(seed)
        self.offset = int(offset)
        if _shared is None:
            _shared = {"rng": make_rng(seed, NOISE_STREAM), "buf": np.empty((0, model.dim))}
        self._shared = _shared

    def prefix(self, n: int) -> np.ndarray:
        """First n vectors (after the offset), extending the realization on demand."""
        need = self.offset + n
        buf = self._shared["buf"]
        if len(buf) < need:
            extra = self.model.sample(self._shared["rng"], need - len(buf))
            buf = np.concatenate([buf, extra], axis=0)
            self._shared["buf"] = buf
        return buf[self.offset:need]

    def vector(self, i: int) -> np.ndarray:
        """t_{i+1}, zero-based."""
        return self.prefix(i + 1)[i]

    def shifted(self) -> "NoiseSequence":
        return NoiseSequence(self.model, self.seed, self.offset + 1, self._shared)

    @classmethod
    def from_values(cls, model: NoiseModel, values, seed: int = 0) -> "NoiseSequence":
        """Sequence with a prescribed finite prefix (draws resume past it)."""
        buf = np.asarray(values, dtype=float).reshape(-1, model.dim)
        shared = {"rng": make_rng(seed, NOISE_STREAM), "buf": buf.copy()}
        return cls(model, seed, 0, shared)


class EscapedOrbit(RuntimeError):
    """Raised by consumers that need a complete orbit."""


@dataclass
class RandomOrbit:
    """A random orbit with its per-step derivative cache.

    points[j+1] = f(points[j]) + noise[j]  (circle coordinates mod 1).
    The cache rows (log||Df^-1||, log|det Df|, dist to critical set) are
    evaluated at every visited point.  ``escaped`` marks truncation after a
    point left the inflated domain, which signals the noise level violates
    the absorbing-region assumption.
    """
    system: MapSystem
    model: NoiseModel
    seed: int
    points: np.ndarray        # (n+1, dim)
    noise: np.ndarray         # (n, dim)
    log_inv_norm: np.ndarray  # (n+1,)
    log_abs_det: np.ndarray   # (n+1,)
    crit_dist: np.ndarray     # (n+1,)
    escaped: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.points) - 1

    def segment(self, start: int, stop: int) -> "RandomOrbit":
        """View of steps [start, stop): points start..stop inclusive."""
        return RandomOrbit(
            self.system, self.model, self.seed,
            self.points[start:stop + 1], self.noise[start:stop],
            self.log_inv_norm[start:stop + 1],
            self.log_abs_det[start:stop + 1],
            self.crit_dist[start:stop + 1],
            self.escaped,
        )

    def to_csv(self, path) -> None:
        dim = self.points.shape[1]
        cols = ["step"] + [f"coord_{a}" for a in range(dim)] + \
            ["log_inv_norm", "log_abs_det", "crit_dist"] + [f"noise_{a}" for a in range(dim)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for j in range(len(self.points)):
                t = self.noise[j - 1] if j >= 1 else np.zeros(dim)
                w.writerow(
                    [j] + [repr(v) for v in self.points[j]]
                    + [repr(self.log_inv_norm[j]), repr(self.log_abs_det[j]),
                       repr(self.crit_dist[j])]
                    + [repr(v) for v in t]
                )


def random_orbit(
    system: MapSystem,
    model: NoiseModel,
    x0,
    seed: int,
    n: int,
) -> RandomOrbit:
    """Iterate x -> f(x) + t for n steps from x0 with the seeded noise stream.

    Escape from the epsilon-inflated domain aborts with a truncated, flagged
    orbit rather than clipping: the theory assumes an absorbing region, so
    escape is a diagnostic, not a case to patch silently.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    x = np.asarray(x0, dtype=float).reshape(system.dim)
    x = system.domain.reduce(x)
    if not system.domain.contains(x):
        raise ValueError(f"x0 {x} outside phase domain")

    dim = system.dim
    if model.epsilon > 0.0:
        noise = NoiseSequence(model, seed).prefix(n) if n else np.zeros((0, dim))
    else:
        noise = np.zeros((n, dim))
    pts = np.empty((n + 1, dim))
    lin = np.empty(n + 1)
    lad = np.empty(n + 1)
    cd = np.empty(n + 1)
    pts[0] = x

    step = system.stepper()
    inflated = system.domain.inflate(model.epsilon)
    zeros = (0.0,) * dim
    c = tuple(float(v) for v in x)
    escaped = False
    j = 0
    while j < n:
        t = tuple(noise[j]) if model.epsilon > 0.0 else zeros
        c2, li, la, dc = step(c, t)
        lin[j], lad[j], cd[j] = li, la, dc
        ok = True
        for a in range(dim):
            if not inflated.periodic[a] and not (inflated.lows[a] <= c2[a] <= inflated.highs[a]):
                ok = False
                break
        j += 1
        if not ok:
            pts[j] = c2
            escaped = True
            break
        pts[j] = c2
        c = c2
    # cache at the final point; NaN when it already left the domain
    last = j
    if escaped:
        lin[last] = lad[last] = cd[last] = math.nan
    else:
        _, li, la, dc = step(tuple(float(v) for v in pts[last]), zeros)
        lin[last], lad[last], cd[last] = li, la, dc
    stop = last + 1
    return RandomOrbit(
        system, model, seed,
        pts[:stop], noise[:last], lin[:stop], lad[:stop], cd[:stop], escaped,
    )


def skew_step(system: MapSystem, model: NoiseModel, state: tuple):
    """One step of the skew product: (omega, x) -> (shift(omega), f_{omega_1}(x))."""
    seq, x = state
    x = np.asarray(x, dtype=float).reshape(system.dim)
    t = seq.vector(0)  # head of the sequence
    y = system.apply_array(x.reshape(1, -1))[0] + t
    y = system.domain.reduce(y)
    if not system.domain.contains(y, slack=model.epsilon):
        raise EscapedOrbit(f"skew step left the inflated domain at {y}")
    return seq.shifted(), y


def absorbing_interval_check(system: MapSystem, epsilon: float, grid_n: int = 4096) -> bool:
    """Is the epsilon-inflated domain mapped into itself with the jump included?

    Needed before running noisy orbits on interval systems: the quadratic
    family has f(0) = a on the boundary of [-a, a], so absorption must be
    verified numerically for each (a, epsilon).
    """
    dom = system.domain.inflate(epsilon)
    ok = True
    for a in range(system.dim):
        if dom.periodic[a]:
            continue
        if system.dim == 1:
            xs = np.linspace(dom.lows[0], dom.highs[0], grid_n).reshape(-1, 1)
            img = system.apply_array(xs)[:, 0]
        else:
            s = np.linspace(0.0, 1.0, 64, endpoint=False)
            x = np.linspace(dom.lows[1], dom.highs[1], grid_n)
            x = np.unique(np.concatenate([x, [0.0]])) if dom.lows[1] < 0 < dom.highs[1] else x
            S, X = np.meshgrid(s, x, indexing="ij")
            img = system.apply_array(np.stack([S.ravel(), X.ravel()], -1))[:, 1]
        if img.min() - epsilon < dom.lows[a] or img.max() + epsilon > dom.highs[a]:
            ok = False
    return ok
