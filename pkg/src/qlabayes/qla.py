"""Gaussian quasi-likelihood of a discretely observed diffusion.

    H_n(theta) = -1/2 sum_i { h^-1 B(X_{i-1}, theta1)^-1 [(dX_i - h a(X_{i-1}, theta2))^{x2}]
                              + log det B(X_{i-1}, theta1) }

For scalar models ``a = -theta2 p(x)``, ``b = theta1 c(x)`` the sum collapses
to four data statistics (see ``_kernels.polytrig_stats``) and every value and
derivative below is closed form.  Other models are evaluated per observation
with a Cholesky factorisation of B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import DomainError, EllipticityError, EvaluationError, PreconditionError
from .models import DiffusionModel
from .simulator import ObservationSet

__all__ = [
    "Scaling",
    "ContrastEvaluation",
    "QuasiLikelihood",
    "contrast",
    "contrast_with_derivatives",
    "log_ratio_field",
    "observed_information",
]


@dataclass(frozen=True)
class Scaling:
    """Rates sqrt(n) for theta1 and sqrt(n h) for theta2."""

    n: int
    h: float

    @classmethod
    def for_observations(cls, obs: ObservationSet) -> "Scaling":
        return cls(obs.n, obs.h)

    @property
    def rate1(self) -> float:
        return math.sqrt(self.n)

    @property
    def rate2(self) -> float:
        return math.sqrt(self.n * self.h)

    def rate(self, stage: int) -> float:
        if stage == 1:
            return self.rate1
        if stage == 2:
            return self.rate2
        raise PreconditionError("stage must be 1 or 2")

    def inverse(self, stage: int) -> float:
        """Diagonal entry of a_n^k."""
        return 1.0 / self.rate(stage)


@dataclass(frozen=True)
class ContrastEvaluation:
    value: float
    grad1: np.ndarray
    grad2: np.ndarray
    hess11: np.ndarray
    hess22: np.ndarray
    hess12: np.ndarray


def _fd_step(t):
    return 1e-5 * (1.0 + abs(t))


class QuasiLikelihood:
    """H_n for one model and one observation record."""

    def __init__(self, model: DiffusionModel, obs: ObservationSet):
        if obs.dim != model.state_dim:
            raise PreconditionError(f"observations have dimension {obs.dim}, model expects {model.state_dim}")
        if obs.n < 1:
            raise PreconditionError("need at least one observation interval")
        self.model = model
        self.obs = obs
        self.n = obs.n
        self.h = obs.h
        self.closed_form = model.poly_trig is not None
        if self.closed_form:
            pt = model.poly_trig
            self.stats = _backend.polytrig_stats(
                np.ascontiguousarray(obs.values[:, 0]), np.asarray(pt.drift, dtype=np.float64), pt.diff[0], pt.diff[1]
            )
        else:
            self.x_prev = obs.values[:-1]
            self.dx = np.diff(obs.values, axis=0)

    # -- scalar closed form -----------------------------------------------------

    def _q(self, t):
        s0, s1, s2, _ = self.stats
        h = self.h
        return s0 + 2.0 * h * t * s1 + h * h * t * t * s2

    def _value_cf(self, s, t):
        lc = self.stats[3]
        if s <= 0.0:
            raise EllipticityError(f"theta1 = {s} makes B singular")
        return -0.5 * (self._q(t) / (self.h * s * s) + self.n * math.log(s * s) + lc)

    # -- generic ----------------------------------------------------------------

    def _coefficients(self, th1, th2):
        m = self.model
        a = np.array([m.a(x, th2) for x in self.x_prev])
        b = np.array([m.b(x, th1) for x in self.x_prev])
        return a, b

    def _chol(self, B):
        try:
            L = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            raise EllipticityError("B is not positive definite at some observation") from None
        if not np.all(np.diagonal(L, axis1=1, axis2=2) > 0):
            raise EllipticityError("B is singular at some observation")
        return L

    def _value_generic(self, th1, th2):
        a, b = self._coefficients(th1, th2)
        B = b @ np.transpose(b, (0, 2, 1))
        L = self._chol(B)
        r = self.dx - self.h * a
        y = np.linalg.solve(L, r[..., None])[..., 0]
        quad = np.sum(y * y)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)))
        return -0.5 * (quad / self.h + logdet)

    def _grad_generic_analytic(self, th1, th2):
        m = self.model
        g1 = np.zeros(m.d1)
        g2 = np.zeros(m.d2)
        for x, dx in zip(self.x_prev, self.dx):
            b = m.b(x, th1)
            B = b @ b.T
            r = dx - self.h * m.a(x, th2)
            try:
                c = np.linalg.cholesky(B)
            except np.linalg.LinAlgError:
                raise EllipticityError(f"B is not positive definite at x={x}") from None
            Binv_r = np.linalg.solve(c.T, np.linalg.solve(c, r))
            g2 += m.da(x, th2).T @ Binv_r
            dB = m.dB(x, th1)
            for j in range(m.d1):
                Binv_dB = np.linalg.solve(c.T, np.linalg.solve(c, dB[j]))
                g1[j] += -0.5 * (np.trace(Binv_dB) - Binv_r @ dB[j] @ Binv_r / self.h)
        return g1, g2

    # -- public -----------------------------------------------------------------

    def _split(self, theta1, theta2):
        th1 = np.atleast_1d(np.asarray(theta1, dtype=float))
        th2 = np.atleast_1d(np.asarray(theta2, dtype=float))
        if th1.size != self.model.d1 or th2.size != self.model.d2:
            raise PreconditionError("parameter dimensions do not match the model")
        return th1, th2

    def value(self, theta1, theta2) -> float:
        th1, th2 = self._split(theta1, theta2)
        if self.closed_form:
            v = self._value_cf(float(th1[0]), float(th2[0]))
        else:
            v = float(self._value_generic(th1, th2))
        if not math.isfinite(v):
            raise EvaluationError(f"contrast is not finite at theta1={th1}, theta2={th2}")
        return v

    def values_theta1(self, nodes, theta2) -> np.ndarray:
        """H at each row of ``nodes`` (theta1 values) with theta2 fixed."""
        nodes = np.asarray(nodes, dtype=float).reshape(-1, self.model.d1)
        if self.closed_form:
            s = nodes[:, 0]
            if np.any(s <= 0):
                raise EllipticityError("theta1 must be positive")
            t = float(np.atleast_1d(theta2)[0])
            return -0.5 * (self._q(t) / (self.h * s * s) + self.n * np.log(s * s) + self.stats[3])
        return np.array([self.value(s, theta2) for s in nodes])

    def values_theta2(self, theta1, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=float).reshape(-1, self.model.d2)
        if self.closed_form:
            s = float(np.atleast_1d(theta1)[0])
            if s <= 0:
                raise EllipticityError("theta1 must be positive")
            t = nodes[:, 0]
            return -0.5 * (self._q(t) / (self.h * s * s) + self.n * math.log(s * s) + self.stats[3])
        return np.array([self.value(theta1, t) for t in nodes])

    def gradient(self, theta1, theta2):
        th1, th2 = self._split(theta1, theta2)
        if self.closed_form:
            s, t = float(th1[0]), float(th2[0])
            _, s1, s2, _ = self.stats
            g1 = self._q(t) / (self.h * s**3) - self.n / s
            g2 = -(s1 + self.h * t * s2) / (s * s)
            return np.array([g1]), np.array([g2])
        if self.model.has_analytic_derivatives:
            return self._grad_generic_analytic(th1, th2)
        g1 = np.empty(th1.size)
        g2 = np.empty(th2.size)
        for j in range(th1.size):
            e = np.zeros_like(th1)
            e[j] = _fd_step(th1[j])
            g1[j] = (self.value(th1 + e, th2) - self.value(th1 - e, th2)) / (2 * e[j])
        for j in range(th2.size):
            e = np.zeros_like(th2)
            e[j] = _fd_step(th2[j])
            g2[j] = (self.value(th1, th2 + e) - self.value(th1, th2 - e)) / (2 * e[j])
        return g1, g2

    def evaluate(self, theta1, theta2) -> ContrastEvaluation:
        th1, th2 = self._split(theta1, theta2)
        value = self.value(th1, th2)
        g1, g2 = self.gradient(th1, th2)
        if self.closed_form:
            s, t = float(th1[0]), float(th2[0])
            _, s1, s2, _ = self.stats
            h11 = -3.0 * self._q(t) / (self.h * s**4) + self.n / (s * s)
            h22 = -self.h * s2 / (s * s)
            h12 = 2.0 * (s1 + self.h * t * s2) / s**3
            H11, H22, H12 = np.array([[h11]]), np.array([[h22]]), np.array([[h12]])
        elif self.model.has_analytic_derivatives:
            H11, H22, H12 = self._hessian_from_gradient(th1, th2)
        else:
            H11, H22, H12 = self._hessian_from_values(th1, th2)
        out = ContrastEvaluation(value, g1, g2, H11, H22, H12)
        for arr in (g1, g2, H11, H22, H12):
            if not np.all(np.isfinite(arr)):
                raise EvaluationError("non-finite contrast derivative")
        return out

    def _hessian_from_gradient(self, th1, th2):
        d1, d2 = th1.size, th2.size
        H11 = np.empty((d1, d1))
        H12 = np.empty((d1, d2))
        H22 = np.empty((d2, d2))
        for j in range(d1):
            e = np.zeros(d1)
            e[j] = _fd_step(th1[j])
            gp1, gp2 = self.gradient(th1 + e, th2)
            gm1, gm2 = self.gradient(th1 - e, th2)
            H11[:, j] = (gp1 - gm1) / (2 * e[j])
            H12[j, :] = (gp2 - gm2) / (2 * e[j])
        for j in range(d2):
            e = np.zeros(d2)
            e[j] = _fd_step(th2[j])
            H22[:, j] = (self.gradient(th1, th2 + e)[1] - self.gradient(th1, th2 - e)[1]) / (2 * e[j])
        return 0.5 * (H11 + H11.T), 0.5 * (H22 + H22.T), H12

    def _hessian_from_values(self, th1, th2):
        theta = np.concatenate([th1, th2])
        d1 = th1.size
        k = theta.size
        steps = 1e-4 * (1.0 + np.abs(theta))

        def f(v):
            return self.value(v[:d1], v[d1:])

        H = np.empty((k, k))
        f0 = f(theta)
        for i in range(k):
            ei = np.zeros(k)
            ei[i] = steps[i]
            H[i, i] = (f(theta + ei) - 2 * f0 + f(theta - ei)) / steps[i] ** 2
            for j in range(i + 1, k):
                ej = np.zeros(k)
                ej[j] = steps[j]
                H[i, j] = H[j, i] = (
                    f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)
                ) / (4 * steps[i] * steps[j])
        return H[:d1, :d1].copy(), H[d1:, d1:].copy(), H[:d1, d1:].copy()


def contrast(model: DiffusionModel, obs: ObservationSet, theta) -> float:
    """H_n(theta) for ``theta = (theta1, theta2)``."""
    return QuasiLikelihood(model, obs).value(*theta)


def contrast_with_derivatives(model: DiffusionModel, obs: ObservationSet, theta) -> ContrastEvaluation:
    return QuasiLikelihood(model, obs).evaluate(*theta)


def log_ratio_field(model, obs, stage: int, anchor, u, scaling: Scaling = None, ql: QuasiLikelihood = None) -> float:
    """H_n(anchor with theta_k shifted by a_n^k u) - H_n(anchor)."""
    ql = ql or QuasiLikelihood(model, obs)
    scaling = scaling or Scaling.for_observations(obs)
    th1 = np.atleast_1d(np.asarray(anchor[0], float))
    th2 = np.atleast_1d(np.asarray(anchor[1], float))
    u = np.atleast_1d(np.asarray(u, float))
    if stage == 1:
        shifted = th1 + scaling.inverse(1) * u
        if not model.theta1_box.contains(shifted):
            raise DomainError(f"theta1 + a_n u = {shifted} leaves the box")
        return ql.value(shifted, th2) - ql.value(th1, th2)
    if stage == 2:
        shifted = th2 + scaling.inverse(2) * u
        if not model.theta2_box.contains(shifted):
            raise DomainError(f"theta2 + a_n u = {shifted} leaves the box")
        return ql.value(th1, shifted) - ql.value(th1, th2)
    raise PreconditionError("stage must be 1 or 2")


def observed_information(model, obs, theta, ql: QuasiLikelihood = None):
    """(Gamma_n^1, Gamma_n^2) = (-hess11 / n, -hess22 / (n h))."""
    ql = ql or QuasiLikelihood(model, obs)
    ev = ql.evaluate(*theta)
    g1 = -ev.hess11 / obs.n
    g2 = -ev.hess22 / (obs.n * obs.h)
    return 0.5 * (g1 + g1.T), 0.5 * (g2 + g2.T)
