"""Euler-Maruyama simulation of discretely observed diffusions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .errors import PreconditionError, SimulationExplosionError
from .models import DiffusionModel, TrueParameter

__all__ = [
    "PathConfig",
    "ObservationSet",
    "derive_seed",
    "gaussian_increments",
    "simulate_observations",
    "simulate_long_path",
    "write_csv",
    "read_csv",
]


@dataclass(frozen=True)
class PathConfig:
    n: int
    h: float
    substeps: int = 10
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise PreconditionError(f"n must be a positive integer, got {self.n}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise PreconditionError(f"h must be positive, got {self.h}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise PreconditionError(f"substeps must be an integer >= 1, got {self.substeps}")
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError("seed must fit in 64 unsigned bits")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "substeps", int(self.substeps))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_gamma(cls, n: int, gamma: float, substeps: int = 10, seed: int = 0) -> "PathConfig":
        """Step h = n^(-gamma); gamma in (1/2, 1) gives h -> 0, nh -> inf, nh^2 -> 0."""
        if not 0.5 < gamma < 1.0:
            raise PreconditionError("gamma must be in (0.5, 1)")
        if int(n) != n or n < 1:
            raise PreconditionError(f"n must be a positive integer, got {n}")
        return cls(n=n, h=float(n) ** (-gamma), substeps=substeps, seed=seed)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    values: np.ndarray  # (n + 1, m)
    h: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 2:
            raise PreconditionError("an observation set needs at least two states")
        if not np.all(np.isfinite(v)):
            raise PreconditionError("observations must be finite")
        if not self.h > 0:
            raise PreconditionError("h must be positive")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "h", float(self.h))

    @property
    def n(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n + 1)

    def split(self, index: int):
        """Two observation sets sharing the state at ``index``."""
        if not 0 < index < self.n:
            raise PreconditionError("split index must be strictly inside the record")
        return ObservationSet(self.values[: index + 1], self.h), ObservationSet(self.values[index:], self.h)

    def __eq__(self, other):
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return self.h == other.h and np.array_equal(self.values, other.values)

    __hash__ = None


def derive_seed(base_seed: int, *keys: int) -> int:
    """64-bit stream key from a base seed and integer coordinates (e.g. n, replicate)."""
    ss = np.random.SeedSequence([int(base_seed) & (2**64 - 1), *[int(k) for k in keys]])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def gaussian_increments(seed: int, count: int, dim: int = 1) -> np.ndarray:
    """Standard normal draws from a Philox stream keyed by ``seed``.

    Philox is counter based: draw ``k`` depends only on (seed, k).
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return rng.standard_normal((count, dim)) if dim > 1 else rng.standard_normal(count)


def _euler_generic(model, th1, th2, x0, delta, substeps, dw):
    n = dw.shape[0] // substeps
    out = np.empty((n + 1, model.state_dim))
    x = np.array(x0, dtype=float)
    out[0] = x
    step = 0
    for i in range(n):
        for _ in range(substeps):
            x = x + delta * model.a(x, th2) + model.b(x, th1) @ dw[step]
            step += 1
            if not np.all(np.isfinite(x)):
                raise SimulationExplosionError(step)
        out[i + 1] = x
    return out


def _run(model, truth, steps, delta, substeps, seed, zero_noise, x0=None):
    x0 = truth.x0 if x0 is None else np.atleast_1d(np.asarray(x0, float))
    th1, th2 = truth.theta1_star, truth.theta2_star
    if zero_noise:
        dw = np.zeros((steps, model.noise_dim)) if model.noise_dim > 1 else np.zeros(steps)
    else:
        dw = gaussian_increments(seed, steps, model.noise_dim) * math.sqrt(delta)
    pt = model.poly_trig
    if pt is not None:
        states, bad = _backend.euler_polytrig(
            float(x0[0]), float(th1[0]), float(th2[0]), np.asarray(pt.drift, dtype=np.float64),
            pt.diff[0], pt.diff[1], float(delta), int(substeps), np.ascontiguousarray(dw, dtype=np.float64),
        )
        if bad >= 0:
            raise SimulationExplosionError(bad)
        return states[:, None]
    if dw.ndim == 1:
        dw = dw[:, None]
    return _euler_generic(model, th1, th2, x0, delta, substeps, dw)


def simulate_observations(model: DiffusionModel, truth: TrueParameter, cfg: PathConfig,
                          zero_noise: bool = False) -> ObservationSet:
    """Observations X_{ih}, i = 0..n, from Euler steps of size h / substeps.

    ``zero_noise`` drops the Brownian term (debugging aid).
    """
    truth.validate(model)
    delta = cfg.h / cfg.substeps
    states = _run(model, truth, cfg.n * cfg.substeps, delta, cfg.substeps, cfg.seed, zero_noise)
    return ObservationSet(states, cfg.h)


def simulate_long_path(model: DiffusionModel, truth: TrueParameter, total_time: float, step: float,
                       seed: int, burn_in: float = 0.1) -> ObservationSet:
    """One long trajectory sampled every ``step`` after discarding a burn-in fraction."""
    if not (total_time > 0 and step > 0):
        raise PreconditionError("total_time and step must be positive")
    if not 0.0 <= burn_in < 1.0:
        raise PreconditionError("burn_in must be in [0, 1)")
    truth.validate(model)
    steps = int(round(total_time / step))
    if steps < 2:
        raise PreconditionError("total_time / step must be at least 2")
    burn = int(round(burn_in * steps))
    states = _run(model, truth, steps + burn, step, 1, seed, False)
    return ObservationSet(states[burn:], step)


def write_csv(obs: ObservationSet, path) -> None:
    """CSV with header ``t,x_1..x_m``; floats written with ``repr`` (shortest round-trip)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x_{j + 1}" for j in range(obs.dim)])
    for i, row in enumerate(obs.values):
        w.writerow([repr(obs.h * i)] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> ObservationSet:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "t":
        raise PreconditionError(f"{path}: expected a header row starting with 't'")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    if data.shape[0] < 2:
        raise PreconditionError(f"{path}: need at least two observations")
    h = data[1, 0] - data[0, 0]
    return ObservationSet(data[:, 1:], h)
