"""Diffusion model family and built-in models.

A model is the SDE ``dX_t = a(X_t, theta2) dt + b(X_t, theta1) dW_t`` on
R^m driven by an r-dimensional Brownian motion, with parameters ranging over
axis-aligned boxes.  Callbacks take and return numpy arrays:

* ``drift(x, theta2) -> (m,)``
* ``diffusion(x, theta1) -> (m, r)``
* ``drift_jac(x, theta2) -> (m, d2)``  (optional, d a / d theta2)
* ``diffusion_jac(x, theta1) -> (d1, m, r)``  (optional, d b / d theta1)

Scalar models of the form ``a = -theta2 * sum_k c_k x^k`` and
``b = theta1 * (d0 + d1 cos x)`` carry a :class:`PolyTrig` coefficient record;
the compiled kernels and closed-form contrast derivatives key off it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EllipticityError, ModelEvaluationError, PreconditionError, UnknownModelError

__all__ = [
    "ParameterBox",
    "DiffusionModel",
    "TrueParameter",
    "PolyTrig",
    "RegularityReport",
    "poly_trig_model",
    "eval_B",
    "builtin_models",
    "get_model",
    "check_regularity",
    "default_probe_grid",
]


@dataclass(frozen=True)
class ParameterBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise PreconditionError("box bounds must be 1-D arrays of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise PreconditionError("box must be bounded")
        if not np.all(lo < hi):
            raise PreconditionError(f"box requires lower < upper, got {lo} / {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.width))

    def contains(self, theta, closed: bool = True) -> bool:
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        if t.shape != self.lower.shape:
            return False
        if closed:
            return bool(np.all(t >= self.lower) and np.all(t <= self.upper))
        return bool(np.all(t > self.lower) and np.all(t < self.upper))

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)


@dataclass(frozen=True)
class PolyTrig:
    """Coefficients of a = -theta2 * sum_k drift[k] x^k, b = theta1 * (diff[0] + diff[1] cos x)."""

    drift: tuple
    diff: tuple

    def __post_init__(self):
        drift = tuple(float(c) for c in self.drift)
        diff = tuple(float(c) for c in self.diff)
        if not drift:
            raise PreconditionError("drift coefficient table is empty")
        if len(diff) == 1:
            diff = (diff[0], 0.0)
        if len(diff) != 2:
            raise PreconditionError("diff table must be [d0] or [d0, d1]")
        if not abs(diff[0]) > abs(diff[1]):
            # d0 + d1 cos x vanishes somewhere otherwise
            raise EllipticityError(f"diff = {list(diff)} is not uniformly elliptic; need |d0| > |d1|")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "diff", diff)

    def poly(self, x):
        # Horner, highest degree first; the compiled kernel uses the same order
        p = 0.0 * x + self.drift[-1]
        for c in reversed(self.drift[:-1]):
            p = p * x + c
        return p

    def poly_dx(self, x):
        p = 0.0 * x
        deg = len(self.drift) - 1
        for k in range(deg, 0, -1):
            p = p * x + k * self.drift[k]
        return p

    def shape(self, x):
        return self.diff[0] + self.diff[1] * np.cos(x)


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    name: str
    state_dim: int
    noise_dim: int
    theta1_box: ParameterBox
    theta2_box: ParameterBox
    drift: Callable
    diffusion: Callable
    drift_jac: Optional[Callable] = None
    diffusion_jac: Optional[Callable] = None
    invariant_density_1d: Optional[Callable] = None
    poly_trig: Optional[PolyTrig] = None

    @property
    def d1(self) -> int:
        return self.theta1_box.dim

    @property
    def d2(self) -> int:
        return self.theta2_box.dim

    @property
    def has_analytic_derivatives(self) -> bool:
        return self.drift_jac is not None and self.diffusion_jac is not None

    def a(self, x, theta2) -> np.ndarray:
        out = np.asarray(self.drift(np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(theta2, float))), float)
        out = out.reshape(self.state_dim)
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError(f"{self.name}: drift not finite at x={x}, theta2={theta2}")
        return out

    def b(self, x, theta1) -> np.ndarray:
        out = np.asarray(self.diffusion(np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(theta1, float))), float)
        out = out.reshape(self.state_dim, self.noise_dim)
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError(f"{self.name}: diffusion not finite at x={x}, theta1={theta1}")
        return out

    def da(self, x, theta2) -> np.ndarray:
        """d a / d theta2 as an (m, d2) array; central differences when no analytic form."""
        theta2 = np.atleast_1d(np.asarray(theta2, float))
        if self.drift_jac is not None:
            return np.asarray(self.drift_jac(np.atleast_1d(np.asarray(x, float)), theta2), float).reshape(self.state_dim, self.d2)
        cols = []
        for j in range(self.d2):
            step = 1e-5 * (1.0 + abs(theta2[j]))
            e = np.zeros_like(theta2)
            e[j] = step
            cols.append((self.a(x, theta2 + e) - self.a(x, theta2 - e)) / (2 * step))
        return np.stack(cols, axis=1)

    def db(self, x, theta1) -> np.ndarray:
        """d b / d theta1 as a (d1, m, r) array."""
        theta1 = np.atleast_1d(np.asarray(theta1, float))
        if self.diffusion_jac is not None:
            return np.asarray(self.diffusion_jac(np.atleast_1d(np.asarray(x, float)), theta1), float).reshape(
                self.d1, self.state_dim, self.noise_dim
            )
        out = []
        for j in range(self.d1):
            step = 1e-5 * (1.0 + abs(theta1[j]))
            e = np.zeros_like(theta1)
            e[j] = step
            out.append((self.b(x, theta1 + e) - self.b(x, theta1 - e)) / (2 * step))
        return np.stack(out, axis=0)

    def dB(self, x, theta1) -> np.ndarray:
        """d B / d theta1 as a (d1, m, m) array."""
        b = self.b(x, theta1)
        db = self.db(x, theta1)
        prod = db @ b.T
        return prod + np.transpose(prod, (0, 2, 1))


@dataclass(frozen=True)
class TrueParameter:
    theta1_star: np.ndarray
    theta2_star: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        for name in ("theta1_star", "theta2_star", "x0"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def validate(self, model: DiffusionModel) -> None:
        if not model.theta1_box.contains(self.theta1_star, closed=False):
            raise PreconditionError(f"theta1* = {self.theta1_star} not interior to theta1 box")
        if not model.theta2_box.contains(self.theta2_star, closed=False):
            raise PreconditionError(f"theta2* = {self.theta2_star} not interior to theta2 box")
        if self.x0.size != model.state_dim:
            raise PreconditionError(f"x0 has dimension {self.x0.size}, model state_dim is {model.state_dim}")


def eval_B(model: DiffusionModel, x, theta1) -> np.ndarray:
    """B(x, theta1) = b b^T, checked for positive definiteness."""
    if not model.theta1_box.contains(theta1, closed=True):
        raise PreconditionError(f"theta1 = {theta1} outside the closed box")
    b = model.b(x, theta1)
    B = b @ b.T
    B = 0.5 * (B + B.T)
    try:
        np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise EllipticityError(f"B(x={x}, theta1={theta1}) is not positive definite") from None
    if np.min(np.linalg.eigvalsh(B)) <= 0.0:
        raise EllipticityError(f"B(x={x}, theta1={theta1}) is not positive definite")
    return B


def _ou_density(x, theta1, theta2):
    var = float(np.ravel(theta1)[0]) ** 2 / (2.0 * float(np.ravel(theta2)[0]))
    x = np.asarray(x, float)
    return np.exp(-0.5 * x * x / var) / math.sqrt(2.0 * math.pi * var)


def poly_trig_model(
    name: str,
    drift: Sequence[float],
    diff: Sequence[float],
    theta1_box: tuple = (0.2, 5.0),
    theta2_box: tuple = (0.2, 5.0),
    invariant_density_1d: Optional[Callable] = None,
) -> DiffusionModel:
    """Scalar model a = -theta2 * sum_k drift[k] x^k, b = theta1 * (diff[0] + diff[1] cos x)."""
    pt = PolyTrig(tuple(drift), tuple(diff))

    def a(x, th2):
        return -th2[0] * pt.poly(x)

    def b(x, th1):
        return (th1[0] * pt.shape(x)).reshape(1, 1)

    def da(x, th2):
        return (-pt.poly(x)).reshape(1, 1)

    def db(x, th1):
        return np.asarray(pt.shape(x), float).reshape(1, 1, 1)

    return DiffusionModel(
        name=name,
        state_dim=1,
        noise_dim=1,
        theta1_box=ParameterBox([theta1_box[0]], [theta1_box[1]]),
        theta2_box=ParameterBox([theta2_box[0]], [theta2_box[1]]),
        drift=a,
        diffusion=b,
        drift_jac=da,
        diffusion_jac=db,
        invariant_density_1d=invariant_density_1d,
        poly_trig=pt,
    )


def builtin_models():
    """List of ``(name, model, default truth)``."""
    truth = TrueParameter([1.0], [1.0], [0.0])
    ou = poly_trig_model("OU", drift=[0.0, 1.0], diff=[1.0, 0.0], invariant_density_1d=_ou_density)
    # theta1 (2 + cos x) / 2
    bou = poly_trig_model("BOU", drift=[0.0, 1.0], diff=[1.0, 0.5])
    return [("OU", ou, truth), ("BOU", bou, truth)]


def get_model(name: str):
    """Return ``(model, default truth)`` for a built-in model name."""
    for key, model, truth in builtin_models():
        if key == name:
            return model, truth
    known = ", ".join(k for k, _, _ in builtin_models())
    raise UnknownModelError(f"unknown model {name!r}; known models: {known}")


@dataclass
class RegularityReport:
    min_eig_B: float
    argmin_eig_B: tuple
    lipschitz_a: float
    lipschitz_b: float
    growth_ratio: float
    growth_exponent: float = 3.0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "min_eig_B": self.min_eig_B,
            "argmin_eig_B": [list(map(float, np.atleast_1d(v))) for v in self.argmin_eig_B],
            "lipschitz_a": self.lipschitz_a,
            "lipschitz_b": self.lipschitz_b,
            "growth_ratio": self.growth_ratio,
            "growth_exponent": self.growth_exponent,
            "violations": list(self.violations),
        }


def default_probe_grid(model: DiffusionModel, x_range=(-5.0, 5.0), points: int = 21, theta_points: int = 5):
    """Tensor grid of (x, theta1, theta2) probes over a cube of states and the closed boxes."""
    xs = np.linspace(x_range[0], x_range[1], points)
    t1 = [np.linspace(lo, hi, theta_points) for lo, hi in zip(model.theta1_box.lower, model.theta1_box.upper)]
    t2 = [np.linspace(lo, hi, theta_points) for lo, hi in zip(model.theta2_box.lower, model.theta2_box.upper)]
    xgrid = list(itertools.product(*([xs] * model.state_dim)))
    grid = []
    for th1 in itertools.product(*t1):
        for th2 in itertools.product(*t2):
            for x in xgrid:
                grid.append((np.array(x), np.array(th1), np.array(th2)))
    return grid


def check_regularity(model: DiffusionModel, probe_grid=None, growth_exponent: float = 3.0,
                     eig_floor: float = 1e-12, lipschitz_cap: float = 1e6, growth_cap: float = 1e6) -> RegularityReport:
    """Probe ellipticity, Lipschitz continuity in x and polynomial growth of d_x a.

    Report only; never raises for a violation.
    """
    if probe_grid is None:
        probe_grid = default_probe_grid(model)
    if len(probe_grid) == 0:
        raise PreconditionError("probe grid is empty")
    violations = []
    min_eig = math.inf
    where = ()
    by_theta: dict = {}
    growth = 0.0
    for x, th1, th2 in probe_grid:
        x = np.atleast_1d(np.asarray(x, float))
        th1 = np.atleast_1d(np.asarray(th1, float))
        th2 = np.atleast_1d(np.asarray(th2, float))
        b = model.b(x, th1)
        B = b @ b.T
        eig = float(np.min(np.linalg.eigvalsh(0.5 * (B + B.T))))
        if eig < min_eig:
            min_eig, where = eig, (x, th1)
        a = model.a(x, th2)
        by_theta.setdefault((tuple(th1), tuple(th2)), []).append((x, a, b))
        # growth of the x-derivative of the drift
        jac = np.empty((model.state_dim, model.state_dim))
        for j in range(model.state_dim):
            step = 1e-5 * (1.0 + abs(x[j]))
            e = np.zeros_like(x)
            e[j] = step
            jac[:, j] = (model.a(x + e, th2) - model.a(x - e, th2)) / (2 * step)
        growth = max(growth, float(np.linalg.norm(jac, 2)) / (1.0 + float(np.linalg.norm(x))) ** growth_exponent)

    lip_a = lip_b = 0.0
    for pts in by_theta.values():
        for (x1, a1, b1), (x2, a2, b2) in itertools.combinations(pts, 2):
            dx = float(np.linalg.norm(x1 - x2))
            if dx == 0.0:
                continue
            lip_a = max(lip_a, float(np.linalg.norm(a1 - a2)) / dx)
            lip_b = max(lip_b, float(np.linalg.norm(b1 - b2)) / dx)

    if not min_eig > eig_floor:
        violations.append(f"ellipticity: min eigenvalue of B = {min_eig:.3g} at x={where[0].tolist()}, theta1={where[1].tolist()}")
    if lip_a > lipschitz_cap:
        violations.append(f"lipschitz: drift quotient {lip_a:.3g} exceeds {lipschitz_cap:.3g}")
    if lip_b > lipschitz_cap:
        violations.append(f"lipschitz: diffusion quotient {lip_b:.3g} exceeds {lipschitz_cap:.3g}")
    if growth > growth_cap:
        violations.append(f"growth: |d_x a| / (1+|x|)^{growth_exponent:g} reaches {growth:.3g}")
    return RegularityReport(min_eig, where, lip_a, lip_b, growth, growth_exponent, violations)
