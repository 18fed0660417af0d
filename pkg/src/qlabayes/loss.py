"""Loss functions of the class W_p and numerical probes of their properties.

A loss ``w: R^d -> [0, inf)`` belongs to W_p when

1. ``w(0) = 0``, ``w`` is continuous at 0 and not identically zero;
2. ``w(u) = w(-u)``;
3. the sublevel sets ``{w < c}`` are convex, and bounded for small ``c``;
4. ``w(u) <= C (1 + |u|^p)``.

The built-in kinds are ``power`` (``|u|^p``) and ``indicator`` of a centred
box or ellipsoid.  Custom losses are black-box callbacks, so every property
is checked by random probing rather than symbolically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import A5NotSatisfiedError, LossClassError, PreconditionError

__all__ = [
    "LossFunction",
    "power_loss",
    "indicator_loss",
    "custom_loss",
    "eval_loss",
    "parse_loss",
    "CUSTOM_LOSSES",
    "ValidationReport",
    "validate_loss_class",
    "C1Result",
    "check_C1",
    "check_A5",
]


@dataclass(frozen=True, eq=False)
class LossFunction:
    kind: str
    dim: Optional[int] = None
    p: float = 2.0
    radius: Optional[np.ndarray] = None  # indicator: box half-widths (d,) or ellipsoid matrix (d, d)
    callback: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("power", "indicator", "custom"):
            raise PreconditionError(f"unknown loss kind {self.kind!r}")
        if self.kind == "power" and not self.p > 0:
            raise PreconditionError("power loss needs p > 0")
        if self.kind == "indicator":
            r = np.asarray(self.radius, dtype=float)
            if r.ndim == 0:
                r = r.reshape(1)
            if r.ndim == 1:
                if not np.all(r > 0):
                    raise PreconditionError("indicator radii must be positive")
            elif r.ndim == 2 and r.shape[0] == r.shape[1]:
                sym = 0.5 * (r + r.T)
                if not np.all(np.linalg.eigvalsh(sym) > 0):
                    raise PreconditionError("ellipsoid radius matrix must be positive definite")
                r = sym
            else:
                raise PreconditionError("indicator radius must be a vector or square matrix")
            object.__setattr__(self, "radius", r)
            object.__setattr__(self, "dim", r.shape[0])
        if self.kind == "custom" and self.callback is None:
            raise PreconditionError("custom loss needs a callback")
        if not self.name:
            object.__setattr__(self, "name", self._default_name())

    def _default_name(self) -> str:
        if self.kind == "power":
            return f"power:{self.p:g}"
        if self.kind == "indicator":
            if self.radius.ndim == 1:
                return "indicator:" + ",".join(f"{v:g}" for v in self.radius)
            return "indicator:ellipsoid"
        return "custom"

    def __call__(self, u) -> np.ndarray:
        """Vectorised evaluation over the last axis of ``u``."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            u = u.reshape(1)
        if self.dim is not None and u.shape[-1] != self.dim:
            raise PreconditionError(f"loss {self.name} has dimension {self.dim}, got vectors of length {u.shape[-1]}")
        if self.kind == "power":
            if u.shape[-1] == 1:
                norm = np.abs(u[..., 0])
            else:
                norm = np.sqrt(np.sum(u * u, axis=-1))
            if self.p == 2.0:
                return norm * norm
            if self.p == 1.0:
                return norm
            return norm**self.p
        if self.kind == "indicator":
            if self.radius.ndim == 1:
                inside = np.all(np.abs(u) <= self.radius, axis=-1)
            else:
                y = np.linalg.solve(self.radius, u.reshape(-1, u.shape[-1]).T).T.reshape(u.shape)
                inside = np.sum(y * y, axis=-1) <= 1.0
            return np.where(inside, 0.0, 1.0)
        flat = u.reshape(-1, u.shape[-1])
        vals = np.array([float(self.callback(row)) for row in flat])
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            bad = flat[np.flatnonzero(~(vals >= 0))[0]]
            raise LossClassError(f"loss {self.name} returned an invalid value at u={bad.tolist()}")
        return vals.reshape(u.shape[:-1])


def power_loss(p: float = 2.0, dim: Optional[int] = None) -> LossFunction:
    return LossFunction("power", dim=dim, p=float(p))


def indicator_loss(radius) -> LossFunction:
    return LossFunction("indicator", radius=radius)


def custom_loss(callback: Callable, p: float, dim: Optional[int] = None, name: str = "custom") -> LossFunction:
    return LossFunction("custom", dim=dim, p=float(p), callback=callback, name=name)


def eval_loss(w: LossFunction, u) -> float:
    return float(w(np.atleast_1d(np.asarray(u, dtype=float))))


def _norm(u):
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(np.sum(u * u)))


CUSTOM_LOSSES = {
    "zero": lambda: custom_loss(lambda u: 0.0, p=1.0, name="custom:zero"),
    "asymmetric": lambda: custom_loss(lambda u: min(_norm(u), _norm(np.asarray(u) - 3.0)), p=1.0, name="custom:asymmetric"),
    "truncated": lambda: custom_loss(lambda u: _norm(u) ** 2 if _norm(u) <= 5.0 else 0.0, p=2.0, name="custom:truncated"),
    "bounded": lambda: custom_loss(lambda u: 1.0 - math.exp(-_norm(u) ** 2), p=2.0, name="custom:bounded"),
    "abs": lambda: custom_loss(lambda u: _norm(u), p=1.0, name="custom:abs"),
}


def parse_loss(spec: str, dim: Optional[int] = None) -> LossFunction:
    """Parse ``power:2``, ``indicator:1.0,1.0`` or ``custom:<name>``."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "power":
            w = power_loss(float(arg) if arg else 2.0, dim=dim)
        elif kind == "indicator":
            radius = [float(v) for v in arg.split(",")] if arg else [1.0]
            if dim is not None and len(radius) == 1 and dim > 1:
                radius = radius * dim
            w = indicator_loss(radius)
        elif kind == "custom":
            if arg not in CUSTOM_LOSSES:
                raise PreconditionError(f"unknown custom loss {arg!r}; known: {', '.join(sorted(CUSTOM_LOSSES))}")
            w = CUSTOM_LOSSES[arg]()
        else:
            raise PreconditionError(f"cannot parse loss spec {spec!r}")
    except ValueError as exc:
        if isinstance(exc, PreconditionError):
            raise
        raise PreconditionError(f"cannot parse loss spec {spec!r}: {exc}") from None
    object.__setattr__(w, "name", spec if w.kind != "custom" else w.name)
    return w


# -- property probes -----------------------------------------------------------


@dataclass
class ValidationReport:
    loss: str
    p: float
    checks: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)
    growth_constant: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "p": self.p,
            "passed": self.passed,
            "checks": dict(self.checks),
            "witnesses": {k: v for k, v in self.witnesses.items()},
            "growth_constant": self.growth_constant,
        }


def _probe_dim(w: LossFunction, dim: Optional[int]) -> int:
    if w.dim is not None:
        return w.dim
    return 1 if dim is None else dim


def _random_probes(rng, count, dim, lo=-3.0, hi=3.0):
    """Points with log-uniform radii 10^lo..10^hi and uniform directions."""
    dirs = rng.standard_normal((count, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 10.0 ** rng.uniform(lo, hi, size=count)
    return dirs * radii[:, None]


def _lattice_probes(dim, extent=10, step=0.5):
    axis = np.arange(-extent, extent + step / 2, step)
    if dim == 1:
        return axis[:, None]
    pts = [np.zeros(dim)]
    for j in range(dim):
        e = np.zeros((axis.size, dim))
        e[:, j] = axis
        pts.append(e)
    return np.vstack(pts)


def validate_loss_class(w: LossFunction, p: float, probe_count: int = 4000, seed: int = 0,
                        dim: Optional[int] = None) -> ValidationReport:
    """Monte Carlo checks of the four defining properties of W_p."""
    if probe_count < 1000:
        raise PreconditionError("probe_count must be at least 1000")
    d = _probe_dim(w, dim)
    rng = np.random.default_rng(seed)
    probes = np.vstack([_random_probes(rng, probe_count, d), _lattice_probes(d)])
    vals = w(probes)
    rep = ValidationReport(loss=w.name, p=float(p))
    scale = max(1.0, float(np.max(vals)))
    tol = 1e-12 * scale

    # 1. zero at the origin, continuous there, not identically zero
    w0 = float(w(np.zeros(d)))
    near = w(_random_probes(rng, 64, d, lo=-12.0, hi=-9.0))
    nonzero = bool(np.any(vals > 0))
    rep.checks["property1"] = w0 == 0.0 and nonzero and float(np.max(near)) <= 1e-6 * scale
    if w0 != 0.0:
        rep.witnesses["property1"] = {"u": [0.0] * d, "reason": f"w(0) = {w0}"}
    elif not nonzero:
        rep.witnesses["property1"] = {"reason": "not identically 0 violated: every probe returned 0"}
    elif not rep.checks["property1"]:
        rep.witnesses["property1"] = {"reason": "discontinuous at 0", "max_near_zero": float(np.max(near))}

    # 2. symmetry
    asym = np.abs(vals - w(-probes))
    rep.checks["property2"] = bool(np.all(asym <= tol))
    if not rep.checks["property2"]:
        i = int(np.argmax(asym))
        rep.witnesses["property2"] = {"u": probes[i].tolist(), "w(u)": float(vals[i]), "w(-u)": float(w(-probes[i]))}

    # 3. convex sublevel sets via midpoints, bounded for small c
    j = rng.permutation(len(probes))
    mids = 0.5 * (probes + probes[j])
    excess = w(mids) - np.maximum(vals, vals[j])
    convex = bool(np.all(excess <= tol))
    pos = vals[vals > 0]
    bounded = False
    c_small = None
    if pos.size:
        c_small = 0.5 * float(np.min(pos))
        far = _random_probes(rng, 512, d, lo=4.0, hi=6.0)
        bounded = bool(np.all(w(far) >= c_small))
    rep.checks["property3"] = convex and bounded
    if not convex:
        i = int(np.argmax(excess))
        rep.witnesses["property3"] = {"u": probes[i].tolist(), "v": probes[j[i]].tolist(), "midpoint_excess": float(excess[i])}
    elif not bounded:
        rep.witnesses["property3"] = {"reason": "sublevel set unbounded", "c": c_small}

    # 4. polynomial growth of order p
    norms = np.linalg.norm(probes, axis=1)
    ratio = vals / (1.0 + norms**p)
    rep.growth_constant = float(np.max(ratio))
    outer = _random_probes(rng, 256, d, lo=6.0, hi=8.0)
    outer_ratio = float(np.max(w(outer) / (1.0 + np.linalg.norm(outer, axis=1) ** p)))
    rep.checks["property4"] = bool(np.isfinite(rep.growth_constant)) and outer_ratio <= max(1.0, 2.0 * rep.growth_constant)
    if not rep.checks["property4"]:
        rep.witnesses["property4"] = {"outer_ratio": outer_ratio, "inner_ratio": rep.growth_constant}
    return rep


@dataclass
class C1Result:
    holds: bool
    margin: float
    witness: Optional[dict] = None

    def __bool__(self):
        return self.holds

    def to_dict(self) -> dict:
        return {"holds": self.holds, "margin": self.margin, "witness": self.witness}


def _directions(rng, count, d):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    axes = np.vstack([np.eye(d), -np.eye(d)])
    rnd = rng.standard_normal((count, d))
    rnd /= np.linalg.norm(rnd, axis=1, keepdims=True)
    return np.vstack([axes, rnd])


def check_C1(w: LossFunction, eta: float, r0: float, r_max: Optional[float] = None, r_points: int = 60,
             u_radii: int = 9, directions: int = 16, seed: int = 0, dim: Optional[int] = None) -> C1Result:
    """Probe ``inf_{r >= r0} inf_{|u| <= r^eta, |z| >= r} w(u - z) - w(u) >= 0``.

    ``z`` is probed on the spheres of radius ``r`` and ``2r`` only; for the
    supported radial losses the infimum over ``|z| >= r`` sits at ``|z| = r``.
    """
    if not 0.0 < eta < 1.0:
        raise PreconditionError("eta must lie in (0, 1)")
    if not r0 > 1.0:
        raise PreconditionError("r0 must exceed 1")
    d = _probe_dim(w, dim)
    rng = np.random.default_rng(seed)
    r_max = 100.0 * r0 if r_max is None else r_max
    dirs = _directions(rng, directions, d)
    worst = math.inf
    witness = None
    for r in np.geomspace(r0, r_max, r_points):
        reta = r**eta
        radii = np.linspace(0.0, reta, u_radii)
        us = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)
        zs = np.vstack([r * dirs, 2.0 * r * dirs])
        wu = w(us)
        diff = w(us[:, None, :] - zs[None, :, :]) - wu[:, None]
        k = np.unravel_index(int(np.argmin(diff)), diff.shape)
        m = float(diff[k])
        if m < worst:
            worst = m
            witness = {"r": float(r), "u": us[k[0]].tolist(), "z": zs[k[1]].tolist(),
                       "w(u-z)": float(w(us[k[0]] - zs[k[1]])), "w(u)": float(wu[k[0]])}
    scale = max(1.0, abs(witness["w(u)"]))
    holds = worst >= -1e-12 * scale
    return C1Result(holds, worst, None if holds and worst > 0 else witness)


def check_A5(w: LossFunction, M: float, cap: Optional[float] = None, per_octave: int = 8,
             directions: int = 16, seed: int = 0, dim: Optional[int] = None) -> float:
    """Smallest probed M' with ``sup_{|u|<=M} w - inf_{|u|>=M'} w <= 0``.

    M' runs over the geometric grid ``M * 2^(k / per_octave)``, k >= -8 * per_octave.
    """
    if not M > 0:
        raise PreconditionError("M must be positive")
    d = _probe_dim(w, dim)
    cap = 1e4 * M if cap is None else cap
    rng = np.random.default_rng(seed)
    dirs = _directions(rng, directions, d)
    inner = (np.linspace(0.0, M, 257)[:, None, None] * dirs[None]).reshape(-1, d)
    sup_inner = float(np.max(w(inner)))
    k = -8 * per_octave
    while True:
        mp = M * 2.0 ** (k / per_octave)
        if mp > cap:
            raise A5NotSatisfiedError(f"no M' <= {cap:g} found for {w.name} with M = {M:g}")
        shell = (np.geomspace(mp, mp * 1e4, 257)[:, None, None] * dirs[None]).reshape(-1, d)
        if sup_inner - float(np.min(w(shell))) <= 0.0:
            return float(mp)
        k += 1
