"""Limit quantities: invariant measure, information matrices, identifiability.

For a scalar ergodic diffusion the stationary density is

    nu(x) ∝ B(x)^-1 exp( int_0^x 2 a(s) / B(s) ds ),

which turns ergodic limits into one-dimensional quadrature.  Multivariate
models only get the empirical measure of a long simulated path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import IdentifiabilityError, NotErgodicError, PreconditionError
from .models import DiffusionModel, TrueParameter, eval_B
from .simulator import ObservationSet

__all__ = [
    "InvariantMeasure",
    "InformationMatrices",
    "IdentifiabilityReport",
    "invariant_density_1d",
    "empirical_measure",
    "expect",
    "gamma_matrices",
    "identifiability_scan",
    "limit_covariance",
]

_PANEL_NODES, _PANEL_WEIGHTS = np.polynomial.legendre.leggauss(10)


@dataclass(frozen=True, eq=False)
class InvariantMeasure:
    kind: str  # "analytic" | "empirical"
    density: Optional[Callable] = None
    support: Optional[tuple] = None
    nodes: Optional[np.ndarray] = None  # analytic: quadrature nodes; empirical: path states (N, m)
    weights: Optional[np.ndarray] = None  # analytic: quadrature weight * density at the nodes

    def __post_init__(self):
        if self.kind == "analytic":
            total = float(np.sum(self.weights))
            if abs(total - 1.0) > 1e-6:
                raise PreconditionError(f"analytic invariant density integrates to {total}, not 1")
        elif self.kind != "empirical":
            raise PreconditionError(f"unknown measure kind {self.kind!r}")


@dataclass(frozen=True)
class InformationMatrices:
    gamma1: np.ndarray
    gamma2: np.ndarray


def _composite_gauss(lo, hi, panels):
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * _PANEL_NODES[None, :]).ravel()
    w = (half[:, None] * _PANEL_WEIGHTS[None, :]).ravel()
    return x, w


def _scale_guess(model, th1, th2):
    step = 1e-4
    slope = (model.a([step], th2)[0] - model.a([-step], th2)[0]) / (2 * step)
    b00 = float(model.b([0.0], th1)[0, 0]) ** 2
    if slope < 0 and b00 > 0:
        return math.sqrt(b00 / (2.0 * -slope))
    return 1.0


def invariant_density_1d(model: DiffusionModel, truth: TrueParameter, panels: int = 40,
                         tail_tol: float = 1e-8, max_doublings: int = 8) -> InvariantMeasure:
    """Normalised stationary density of a scalar diffusion, from the speed-measure formula.

    The support starts at [-4 s, 4 s] (s from the linearised drift at 0) and
    doubles until the added mass is below ``tail_tol`` relative to the total.
    """
    if model.state_dim != 1 or model.noise_dim != 1:
        raise PreconditionError("the analytic invariant density needs a scalar model")
    th1, th2 = truth.theta1_star, truth.theta2_star

    pt = model.poly_trig
    if pt is not None:
        t1, t2 = float(th1[0]), float(th2[0])
        coefs = pt.drift
        d0, dc = pt.diff

        def ratio(s):
            p = coefs[-1]
            for c in coefs[-2::-1]:
                p = p * s + c
            sh = t1 * (d0 + dc * math.cos(s))
            return -2.0 * t2 * p / (sh * sh)

        def diffusion_sq(s):
            sh = t1 * (d0 + dc * math.cos(s))
            return sh * sh
    else:
        def ratio(s):
            return 2.0 * model.a([s], th2)[0] / float(model.b([s], th1)[0, 0]) ** 2

        def diffusion_sq(s):
            return float(model.b([s], th1)[0, 0]) ** 2

    def log_unnorm_on(x):
        # cumulative int_0^x 2a/B ds, panel by panel outward from 0 (x sorted)
        out = np.empty_like(x)
        order = np.argsort(np.abs(x), kind="stable")
        acc_pos = acc_neg = 0.0
        last_pos = last_neg = 0.0
        for i in order:
            xi = x[i]
            if xi >= 0:
                acc_pos += integrate.quad(ratio, last_pos, xi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
                last_pos = xi
                out[i] = acc_pos
            else:
                acc_neg += integrate.quad(ratio, last_neg, xi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
                last_neg = xi
                out[i] = acc_neg
        B = np.array([diffusion_sq(xi) for xi in x])
        return out - np.log(B)

    half = 4.0 * _scale_guess(model, th1, th2)
    prev_mass = None
    shift = None
    for k in range(max_doublings + 1):
        # panel count doubles with the support so the resolution near 0 is kept
        x, w = _composite_gauss(-half, half, panels * 2**k)
        logd = log_unnorm_on(x)
        if shift is None:
            shift = float(np.max(logd))
        mass = float(np.sum(w * np.exp(logd - shift)))
        if not math.isfinite(mass):
            raise NotErgodicError(f"{model.name}: invariant density not integrable")
        if prev_mass is not None and abs(mass - prev_mass) <= tail_tol * mass:
            break
        prev_mass = mass
        half *= 2.0
    else:
        raise NotErgodicError(f"{model.name}: stationary density mass keeps growing with the support (not ergodic)")
    weights = w * np.exp(logd - shift) / mass
    log_norm = shift + math.log(mass)

    def density(xq):
        xq = np.atleast_1d(np.asarray(xq, float))
        vals = np.empty_like(xq)
        for i, xi in enumerate(xq):
            integral = integrate.quad(ratio, 0.0, xi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
            vals[i] = math.exp(integral - math.log(diffusion_sq(xi)) - log_norm)
        return vals if vals.size > 1 else float(vals[0])

    return InvariantMeasure("analytic", density=density, support=(-half, half), nodes=x, weights=weights)


def empirical_measure(path: ObservationSet) -> InvariantMeasure:
    return InvariantMeasure("empirical", nodes=np.asarray(path.values))


def expect(measure: InvariantMeasure, g: Callable, vectorized: bool = False):
    """Integral of ``g`` against the measure (quadrature or path average).

    With ``vectorized`` the callback receives every node at once, as an
    (N,) array for analytic measures or (N, m) for empirical ones, and
    returns values stacked along axis 0.
    """
    if vectorized:
        vals = np.asarray(g(measure.nodes), float)
        if measure.kind == "analytic":
            return np.tensordot(measure.weights, vals, axes=(0, 0))
        return np.mean(vals, axis=0)
    if measure.kind == "analytic":
        vals = [np.asarray(g(np.array([xi])), float) for xi in measure.nodes]
        return np.tensordot(measure.weights, np.array(vals), axes=(0, 0))
    vals = [np.asarray(g(xi), float) for xi in measure.nodes]
    return np.mean(np.array(vals), axis=0)


def _inverse_and_parts(model, x, th1):
    B = eval_B(model, x, th1)
    c = np.linalg.cholesky(B)
    return B, c


def gamma_matrices(model: DiffusionModel, truth: TrueParameter, measure: InvariantMeasure) -> InformationMatrices:
    """Gamma^1_jk = 1/2 E tr(B^-1 dB_j B^-1 dB_k), Gamma^2 = E (da)^T B^-1 da, at the truth."""
    th1, th2 = truth.theta1_star, truth.theta2_star
    d1, d2 = model.d1, model.d2

    if model.poly_trig is not None:
        pt = model.poly_trig
        t1 = float(th1[0])

        def vec(x):
            x = np.asarray(x, float).reshape(-1)
            # B = t1^2 c^2, dB/B = 2/t1 for every x
            g1 = np.full(x.shape, 2.0 / (t1 * t1))
            g2 = pt.poly(x) ** 2 / (t1 * pt.shape(x)) ** 2
            return np.stack([g1, g2], axis=1)

        flat = np.asarray(expect(measure, vec, vectorized=True), float)
        return _checked_info(flat[:1].reshape(1, 1), flat[1:].reshape(1, 1))

    def integrand(x):
        B, c = _inverse_and_parts(model, x, th1)
        dB = model.dB(x, th1)
        M = [np.linalg.solve(c.T, np.linalg.solve(c, dB[j])) for j in range(d1)]
        g1 = np.array([[0.5 * np.trace(M[j] @ M[k]) for k in range(d1)] for j in range(d1)])
        da = model.da(x, th2)
        g2 = da.T @ np.linalg.solve(c.T, np.linalg.solve(c, da))
        return np.concatenate([g1.ravel(), g2.ravel()])

    flat = np.asarray(expect(measure, integrand), float)
    return _checked_info(flat[: d1 * d1].reshape(d1, d1), flat[d1 * d1:].reshape(d2, d2))


def _checked_info(G1, G2):
    G1 = 0.5 * (G1 + G1.T)
    G2 = 0.5 * (G2 + G2.T)
    for name, G in (("Gamma^1", G1), ("Gamma^2", G2)):
        if not np.min(np.linalg.eigvalsh(G)) > 0:
            raise IdentifiabilityError(f"{name} is not positive definite: {G.tolist()}")
    return InformationMatrices(G1, G2)


def limit_covariance(info: InformationMatrices) -> np.ndarray:
    """Block-diagonal diag(Gamma1^-1, Gamma2^-1)."""
    blocks = []
    for name, G in (("Gamma^1", info.gamma1), ("Gamma^2", info.gamma2)):
        G = np.atleast_2d(np.asarray(G, float))
        try:
            np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise IdentifiabilityError(f"{name} is singular or indefinite") from None
        blocks.append(np.linalg.inv(G))
    d1, d2 = blocks[0].shape[0], blocks[1].shape[0]
    out = np.zeros((d1 + d2, d1 + d2))
    out[:d1, :d1] = blocks[0]
    out[d1:, d1:] = blocks[1]
    return out


@dataclass
class IdentifiabilityReport:
    theta1_grid: np.ndarray
    y1: np.ndarray
    theta2_grid: np.ndarray
    y2: np.ndarray
    max_y1_off_truth: float
    max_y2_off_truth: float
    chi1: float
    chi2: float
    zeros1: list = field(default_factory=list)
    zeros2: list = field(default_factory=list)

    def to_dict(self):
        return {
            "max_y1": float(np.max(self.y1)),
            "max_y2": float(np.max(self.y2)),
            "max_y1_off_truth": self.max_y1_off_truth,
            "max_y2_off_truth": self.max_y2_off_truth,
            "chi1": self.chi1,
            "chi2": self.chi2,
            "zeros1": self.zeros1,
            "zeros2": self.zeros2,
        }


def _y_values(model, truth, measure, th1_grid, th2_grid):
    th1s, th2s = truth.theta1_star, truth.theta2_star
    m = model.state_dim
    k1, k2 = len(th1_grid), len(th2_grid)

    if model.poly_trig is not None:
        pt = model.poly_trig
        s1 = float(th1s[0])
        r = (s1 / th1_grid[:, 0]) ** 2
        # the x-dependent shape cancels in Y^1
        y1 = -0.5 * (r - 1.0 - np.log(r))
        e2 = float(expect(measure, lambda x: pt.poly(np.asarray(x, float).reshape(-1)) ** 2
                          / (s1 * pt.shape(np.asarray(x, float).reshape(-1))) ** 2, vectorized=True))
        y2 = -0.5 * (th2_grid[:, 0] - float(th2s[0])) ** 2 * e2
        return y1, y2

    def integrand(x):
        Bs = eval_B(model, x, th1s)
        cs = np.linalg.cholesky(Bs)
        logdet_s = 2.0 * np.sum(np.log(np.diag(cs)))
        out = np.empty(k1 + k2)
        for i, t1 in enumerate(th1_grid):
            B = eval_B(model, x, t1)
            c = np.linalg.cholesky(B)
            tr = np.trace(np.linalg.solve(c.T, np.linalg.solve(c, Bs))) - m
            out[i] = tr + 2.0 * np.sum(np.log(np.diag(c))) - logdet_s
        a_s = model.a(x, th2s)
        for i, t2 in enumerate(th2_grid):
            diff = model.a(x, t2) - a_s
            y = np.linalg.solve(cs, diff)
            out[k1 + i] = y @ y
        return out

    vals = -0.5 * np.asarray(expect(measure, integrand), float)
    return vals[:k1], vals[k1:]


def identifiability_scan(model: DiffusionModel, truth: TrueParameter, measure: InvariantMeasure,
                         points: int = 97, tol: float = 1e-8) -> IdentifiabilityReport:
    """Y^1, Y^2 on per-block grids over the boxes (d_k = 1 blocks use a line, d_k = 2 a tensor grid)."""

    def grid(box, star):
        axes = [np.linspace(lo, hi, points if box.dim == 1 else max(9, int(round(points ** 0.5))))
                for lo, hi in zip(box.lower, box.upper)]
        g = np.array(np.meshgrid(*axes, indexing="ij")).reshape(box.dim, -1).T
        return np.vstack([g, star[None, :]])

    g1 = grid(model.theta1_box, truth.theta1_star)
    g2 = grid(model.theta2_box, truth.theta2_star)
    y1, y2 = _y_values(model, truth, measure, g1, g2)
    if np.max(y1) > tol or np.max(y2) > tol:
        raise IdentifiabilityError(f"Y is positive somewhere (max Y1 = {np.max(y1):.3g}, max Y2 = {np.max(y2):.3g})")

    def summarise(g, y, star, box):
        dist2 = np.sum((g - star) ** 2, axis=1)
        cell = float(np.max(box.width)) / (points - 1)
        off = dist2 > cell**2
        far = dist2 > 0
        chi = float(np.min(-y[far] / dist2[far])) if np.any(far) else math.nan
        zeros = []
        for i in np.flatnonzero(np.abs(y) <= tol):
            pt = g[i].tolist()
            if pt not in zeros:
                zeros.append(pt)
        return float(np.max(y[off])) if np.any(off) else -math.inf, chi, zeros

    m1, chi1, z1 = summarise(g1, y1, truth.theta1_star, model.theta1_box)
    m2, chi2, z2 = summarise(g2, y2, truth.theta2_star, model.theta2_box)
    return IdentifiabilityReport(g1, y1, g2, y2, m1, m2, chi1, chi2, z1, z2)
