"""Quasi-maximum likelihood and adaptive Bayes-type estimators.

The Bayes-type estimator of stage k minimises over z

    psi(z) = int w_k(rate_k (z - theta_k)) exp(H_n(...theta_k...)) pi_k(theta_k) dtheta_k

where stage 1 integrates theta1 with theta2 held at a pilot value and stage 2
integrates theta2 with theta1 held at the stage-1 estimate.  The integral is a
tensor midpoint rule; by default the rule covers only the part of the box
where the log posterior is within ``WINDOW_DROP`` of its maximum, so that the
node spacing resolves a posterior of width O(1/rate).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import OptimizationError, PreconditionError
from .loss import LossFunction, power_loss
from .models import DiffusionModel, ParameterBox, TrueParameter
from .qla import QuasiLikelihood, Scaling
from .simulator import ObservationSet

__all__ = [
    "GridWarning",
    "PriorDensity",
    "QuadratureGrid",
    "QmleResult",
    "BayesResult",
    "StagePosterior",
    "qmle",
    "stage_posterior",
    "posterior_weights",
    "objective_from_weights",
    "bayes_objective",
    "bayes_adaptive",
    "posterior_mean",
]

WINDOW_DROP = 40.0  # exp(-40) ~ 4e-18 relative mass is dropped outside the window


class GridWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PriorDensity:
    box: ParameterBox
    kind: str = "uniform"
    center: Optional[np.ndarray] = None
    sd: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise PreconditionError(f"unknown prior kind {self.kind!r}")
        if self.kind == "gaussian":
            c = np.broadcast_to(np.asarray(self.center, float), (self.box.dim,)).copy()
            s = np.broadcast_to(np.asarray(self.sd, float), (self.box.dim,)).copy()
            if not np.all(s > 0):
                raise PreconditionError("prior sd must be positive")
            object.__setattr__(self, "center", c)
            object.__setattr__(self, "sd", s)

    @classmethod
    def uniform(cls, box: ParameterBox) -> "PriorDensity":
        return cls(box)

    @classmethod
    def truncated_gaussian(cls, box: ParameterBox, center, sd) -> "PriorDensity":
        return cls(box, "gaussian", center, sd)

    def log_density(self, theta) -> np.ndarray:
        theta = np.asarray(theta, float).reshape(-1, self.box.dim)
        if self.kind == "uniform":
            return np.full(theta.shape[0], -math.log(self.box.volume))
        lo = (self.box.lower - self.center) / self.sd
        hi = (self.box.upper - self.center) / self.sd
        log_norm = float(np.sum(np.log(self.sd * math.sqrt(2 * math.pi) * (ndtr(hi) - ndtr(lo)))))
        zz = (theta - self.center) / self.sd
        return -0.5 * np.sum(zz * zz, axis=1) - log_norm

    def density(self, theta) -> np.ndarray:
        return np.exp(self.log_density(theta))

    def scaled(self, factor: float) -> "ScaledPrior":
        return ScaledPrior(self, float(factor))


@dataclass(frozen=True, eq=False)
class ScaledPrior:
    """``factor * prior``; used to check that the estimator ignores prior normalisation."""

    base: PriorDensity
    factor: float

    @property
    def box(self):
        return self.base.box

    def density(self, theta):
        return self.factor * self.base.density(theta)

    def log_density(self, theta):
        return np.log(self.density(theta))


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    lower: np.ndarray
    upper: np.ndarray
    counts: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        counts = tuple(int(c) for c in np.broadcast_to(np.asarray(self.counts), lo.shape))
        if not np.all(hi > lo) or min(counts) < 1:
            raise PreconditionError("quadrature grid needs upper > lower and positive node counts")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def over(cls, box: ParameterBox, counts) -> "QuadratureGrid":
        return cls(box.lower, box.upper, counts)

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.counts)

    @property
    def axes(self):
        return [lo + (np.arange(c) + 0.5) * s for lo, c, s in zip(self.lower, self.counts, self.spacing)]

    @property
    def nodes(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.axes)), dtype=float).reshape(-1, self.lower.size)

    @property
    def weights(self) -> np.ndarray:
        return np.full(int(np.prod(self.counts)), float(np.prod(self.spacing)))


def default_nodes(dim: int) -> int:
    if dim == 1:
        return 401
    if dim == 2:
        return 101
    raise PreconditionError("quadrature supports parameter blocks of dimension 1 or 2")


# -- QMLE -----------------------------------------------------------------------


@dataclass
class QmleResult:
    theta_hat: tuple
    contrast_at_max: float
    converged: bool
    scaled_error: Optional[np.ndarray] = None
    grad_norm: float = math.nan
    starts: int = 0

    def to_dict(self):
        return {
            "theta1": self.theta_hat[0].tolist(),
            "theta2": self.theta_hat[1].tolist(),
            "contrast": self.contrast_at_max,
            "converged": self.converged,
            "scaled_error": None if self.scaled_error is None else self.scaled_error.tolist(),
            "grad_norm": self.grad_norm,
        }


def _start_points(box: ParameterBox, count: int) -> np.ndarray:
    pts = [box.center]
    if count > 1:
        # unscrambled Halton starts at the corner 0; drop it
        halton = qmc.Halton(d=box.dim, scramble=False).random(count)[1:]
        inner = box.lower + box.width * (0.02 + 0.96 * halton)
        pts.extend(inner)
    return np.array(pts[:count])


def _projected_scaled_grad(g, theta, lower, upper, rates):
    g = np.array(g, dtype=float)
    at_lo = theta <= lower
    at_hi = theta >= upper
    g[at_lo & (g < 0)] = 0.0
    g[at_hi & (g > 0)] = 0.0
    return float(np.linalg.norm(g / rates))


def qmle(model: DiffusionModel, obs: ObservationSet, truth: Optional[TrueParameter] = None,
         starts: int = 8, gtol: float = 1e-6) -> QmleResult:
    """Box-constrained maximiser of H_n (multi-start L-BFGS-B, then projected Newton polish)."""
    if obs.n < model.d1 + model.d2:
        raise PreconditionError("need at least d1 + d2 observation intervals")
    ql = QuasiLikelihood(model, obs)
    sc = Scaling.for_observations(obs)
    d1 = model.d1
    lower = np.concatenate([model.theta1_box.lower, model.theta2_box.lower])
    upper = np.concatenate([model.theta1_box.upper, model.theta2_box.upper])
    rates = np.concatenate([np.full(d1, sc.rate1), np.full(model.d2, sc.rate2)])
    full_box = ParameterBox(lower, upper)

    # optimise in u = rate * theta so that curvature is O(1) in every coordinate
    def neg(v):
        th = v / rates
        return -ql.value(th[:d1], th[d1:])

    def neg_grad(v):
        th = v / rates
        g1, g2 = ql.gradient(th[:d1], th[d1:])
        return -np.concatenate([g1, g2]) / rates

    bounds = list(zip(lower * rates, upper * rates))
    best = None
    for x0 in _start_points(full_box, starts):
        try:
            res = optimize.minimize(neg, x0 * rates, jac=neg_grad, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-10})
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            continue
        theta = np.clip(res.x / rates, lower, upper)
        theta = _newton_polish(ql, theta, lower, upper, rates, d1)
        val = ql.value(theta[:d1], theta[d1:])
        g = np.concatenate(ql.gradient(theta[:d1], theta[d1:]))
        gn = _projected_scaled_grad(g, theta, lower, upper, rates)
        cand = (val, theta, gn)
        if best is None or val > best[0]:
            best = cand
    if best is None:
        raise OptimizationError("every start failed")
    val, theta, gn = best
    th1, th2 = theta[:d1].copy(), theta[d1:].copy()
    converged = gn < gtol
    err = None
    if truth is not None:
        err = np.concatenate([sc.rate1 * (th1 - truth.theta1_star), sc.rate2 * (th2 - truth.theta2_star)])
    result = QmleResult((th1, th2), float(val), converged, err, gn, starts)
    if not converged:
        raise OptimizationError(f"QMLE did not converge (scaled gradient norm {gn:.3g})", best=result)
    return result


def _newton_polish(ql, theta, lower, upper, rates, d1, iters: int = 30):
    """Projected Newton steps on the free coordinates; each step must not decrease H."""
    theta = theta.copy()
    val = ql.value(theta[:d1], theta[d1:])
    for _ in range(iters):
        ev = ql.evaluate(theta[:d1], theta[d1:])
        g = np.concatenate([ev.grad1, ev.grad2])
        H = np.block([[ev.hess11, ev.hess12], [ev.hess12.T, ev.hess22]])
        free = ~(((theta <= lower) & (g < 0)) | ((theta >= upper) & (g > 0)))
        if not np.any(free) or np.linalg.norm(g[free] / rates[free]) < 1e-13:
            break
        Hf = H[np.ix_(free, free)]
        try:
            if np.max(np.linalg.eigvalsh(Hf)) >= 0:
                break
            step = -np.linalg.solve(Hf, g[free])
        except np.linalg.LinAlgError:
            break
        improved = False
        gnorm = np.linalg.norm(g[free] / rates[free])
        # near the maximum H changes by less than its rounding error; then accept on gradient decrease
        slack = 64 * np.finfo(float).eps * (1.0 + abs(val))
        for scale in (1.0, 0.5, 0.25, 0.125):
            trial = theta.copy()
            trial[free] = theta[free] + scale * step
            trial = np.clip(trial, lower, upper)
            tv = ql.value(trial[:d1], trial[d1:])
            if tv > val or (tv >= val - slack and np.linalg.norm(
                    np.concatenate(ql.gradient(trial[:d1], trial[d1:]))[free] / rates[free]) < gnorm):
                theta, val, improved = trial, max(tv, val), True
                break
        if not improved:
            break
    return theta


# -- Bayes ----------------------------------------------------------------------


def posterior_weights(log_h, prior_values, weights) -> np.ndarray:
    """exp(H - max H) * pi * quadrature weight at every node."""
    log_h = np.asarray(log_h, float)
    return np.exp(log_h - np.max(log_h)) * np.asarray(prior_values, float) * np.asarray(weights, float)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


def _cell_offsets(half_cell):
    """Gauss-Legendre offsets and weights (summing to 1) over a cell centred at 0."""
    axes = [_GL_NODES * hc for hc in half_cell]
    wts = [_GL_WEIGHTS / 2.0 for _ in half_cell]
    offs = np.array(list(itertools.product(*axes)))
    ws = np.array([math.prod(c) for c in itertools.product(*wts)])
    return offs, ws


def _cell_averaged_loss(zz, nodes, w: LossFunction, rate, half_cell):
    """Mean of w(rate (z - theta)) over theta uniform in each cell, shape (len(zz), len(nodes))."""
    diff = zz[:, None, :] - nodes[None, :, :]
    if w.kind == "indicator" and w.radius.ndim == 1:
        reach = w.radius / rate
        lo = np.maximum(-half_cell, diff - reach)
        hi = np.minimum(half_cell, diff + reach)
        inside = np.prod(np.clip(hi - lo, 0.0, None) / (2.0 * half_cell), axis=2)
        return 1.0 - inside
    if w.kind == "power" and w.p == 1.0 and nodes.shape[1] == 1:
        dist = np.abs(diff[..., 0])
        a = half_cell[0]
        return rate * np.where(dist >= a, dist, (dist * dist + a * a) / (2.0 * a))
    offs, ws = _cell_offsets(half_cell)
    u = rate * (diff[:, :, None, :] - offs[None, None, :, :])
    return w(u) @ ws


def objective_from_weights(z, nodes, q, w: LossFunction, rate: float, cell=None, chunk: int = 128) -> np.ndarray:
    """sum_j w(rate (z_i - node_j)) q_j for each row z_i.

    With ``cell`` (the grid spacing) the loss is averaged over each quadrature
    cell instead of sampled at its node, i.e. the posterior is treated as
    piecewise constant on the cells.  Losses that are discontinuous or kinked
    then still give an objective that is continuous in z, so the minimiser is
    not pinned to the node lattice.
    """
    nodes = np.asarray(nodes, float).reshape(len(q), -1)
    z = np.asarray(z, float)
    single = z.ndim == 0 or (z.ndim == 1 and z.size == nodes.shape[1])
    z = z.reshape(-1, nodes.shape[1])
    half_cell = None if cell is None else 0.5 * np.asarray(cell, float).reshape(nodes.shape[1])
    out = np.empty(z.shape[0])
    for start in range(0, z.shape[0], chunk):
        zz = z[start:start + chunk]
        if half_cell is None:
            vals = w(rate * (zz[:, None, :] - nodes[None, :, :]))
        else:
            vals = _cell_averaged_loss(zz, nodes, w, rate, half_cell)
        out[start:start + chunk] = vals @ q
    return out[0] if single else out


@dataclass
class StagePosterior:
    stage: int
    nodes: np.ndarray
    q: np.ndarray
    log_h: np.ndarray
    grid: QuadratureGrid
    rate: float
    fixed: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return (self.q @ self.nodes) / np.sum(self.q)

    @property
    def sd(self) -> np.ndarray:
        mu = self.mean
        return np.sqrt((self.q @ (self.nodes - mu) ** 2) / np.sum(self.q))

    def objective(self, z, w: LossFunction, cell_average: bool = True) -> np.ndarray:
        cell = self.grid.spacing if cell_average else None
        return objective_from_weights(z, self.nodes, self.q, w, self.rate, cell=cell)


def _stage_log_h(ql: QuasiLikelihood, stage: int, nodes, fixed):
    if stage == 1:
        return ql.values_theta1(nodes, fixed)
    return ql.values_theta2(fixed, nodes)


def _auto_grid(ql, stage, box, prior, fixed, nodes_per_axis):
    """Sub-box of ``box`` holding every coarse node within WINDOW_DROP of the max log posterior."""
    d = box.dim
    coarse = 2001 if (ql.closed_form and d == 1) else (201 if d == 1 else 41)
    cg = QuadratureGrid.over(box, coarse)
    pts = cg.nodes
    lp = _stage_log_h(ql, stage, pts, fixed) + np.log(prior.density(pts))
    keep = pts[lp >= np.max(lp) - WINDOW_DROP]
    pad = cg.spacing
    lo = np.maximum(keep.min(axis=0) - pad, box.lower)
    hi = np.minimum(keep.max(axis=0) + pad, box.upper)
    return QuadratureGrid(lo, hi, nodes_per_axis)


def stage_posterior(model, obs, stage: int, prior, fixed, grid: Optional[QuadratureGrid] = None,
                    scaling: Optional[Scaling] = None, nodes_per_axis: Optional[int] = None,
                    ql: Optional[QuasiLikelihood] = None) -> StagePosterior:
    """Posterior node weights for one stage (computed once, shared by every z)."""
    if stage not in (1, 2):
        raise PreconditionError("stage must be 1 or 2")
    ql = ql or QuasiLikelihood(model, obs)
    scaling = scaling or Scaling.for_observations(obs)
    box = model.theta1_box if stage == 1 else model.theta2_box
    fixed = np.atleast_1d(np.asarray(fixed, float))
    other = model.theta2_box if stage == 1 else model.theta1_box
    if not other.contains(fixed):
        raise PreconditionError(f"fixed parameter {fixed} outside its box")
    if grid is None:
        grid = _auto_grid(ql, stage, box, prior, fixed, nodes_per_axis or default_nodes(box.dim))
    nodes = grid.nodes
    log_h = _stage_log_h(ql, stage, nodes, fixed)
    q = posterior_weights(log_h, prior.density(nodes), grid.weights)
    post = StagePosterior(stage, nodes, q, log_h, grid, scaling.rate(stage), fixed)
    _check_resolution(post)
    return post


def _check_resolution(post: StagePosterior):
    sd = post.sd
    mu = post.mean
    within = np.all(np.abs(post.nodes - mu) <= 3.0 * np.maximum(sd, 1e-300), axis=1)
    alive = int(np.sum(post.q > 0))
    if alive <= 1 or int(np.sum(within)) < 5:
        msg = (f"stage {post.stage}: quadrature grid too coarse ({int(np.sum(within))} nodes within 3 posterior sd, "
               f"spacing {post.grid.spacing.tolist()})")
        post.warnings.append(msg)
        warnings.warn(msg, GridWarning, stacklevel=3)


def bayes_objective(model, obs, stage: int, z, w: LossFunction, prior, fixed, grid: Optional[QuadratureGrid] = None,
                    scaling: Optional[Scaling] = None, cell_average: bool = False) -> float:
    """psi(z) up to the common factor exp(max H), sampling the loss at the nodes.

    ``cell_average=True`` gives the cell-averaged objective that
    :func:`bayes_adaptive` minimises.
    """
    post = stage_posterior(model, obs, stage, prior, fixed, grid, scaling)
    return float(post.objective(np.atleast_1d(np.asarray(z, float)), w, cell_average))


def posterior_mean(model, obs, stage: int, prior, fixed, grid: Optional[QuadratureGrid] = None,
                   scaling: Optional[Scaling] = None) -> np.ndarray:
    return stage_posterior(model, obs, stage, prior, fixed, grid, scaling).mean


def _golden(f, a, b, tol):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def minimize_objective(post: StagePosterior, w: LossFunction, box: ParameterBox):
    """Scan z over the quadrature nodes, then refine coordinate-wise by golden section.

    Returns ``(z, value, tie)``; ``tie`` flags a non-unique scan minimum, resolved
    toward the smallest distance from the box centre.
    """
    zs = post.nodes
    vals = post.objective(zs, w)
    vmin = float(np.min(vals))
    ties = np.flatnonzero(vals <= vmin)
    tie = ties.size > 1
    if tie:
        dist = np.linalg.norm(zs[ties] - box.center, axis=1)
        best = int(ties[int(np.argmin(dist))])
    else:
        best = int(ties[0])
    z = zs[best].copy()
    value = float(vals[best])
    tol = 1e-3 / post.rate
    spacing = post.grid.spacing
    for _sweep in range(3 if z.size > 1 else 1):
        moved = False
        for j in range(z.size):
            lo = max(z[j] - spacing[j], box.lower[j])
            hi = min(z[j] + spacing[j], box.upper[j])

            def f(t, j=j):
                zz = z.copy()
                zz[j] = t
                return float(post.objective(zz[None, :], w)[0])

            t, ft = _golden(f, lo, hi, tol)
            if ft < value:
                z[j] = t
                value = ft
                moved = True
        if not moved:
            break
    return box.clip(z), value, tie


@dataclass
class BayesResult:
    theta_tilde: tuple
    loss_ids: tuple
    objective_values: tuple
    scaled_error: Optional[np.ndarray] = None
    pilot: Optional[np.ndarray] = None
    ties: tuple = (False, False)
    warnings: list = field(default_factory=list)
    windows: tuple = ()

    def to_dict(self):
        return {
            "theta1": self.theta_tilde[0].tolist(),
            "theta2": self.theta_tilde[1].tolist(),
            "losses": list(self.loss_ids),
            "objective": list(self.objective_values),
            "scaled_error": None if self.scaled_error is None else self.scaled_error.tolist(),
            "pilot": None if self.pilot is None else self.pilot.tolist(),
            "ties": list(self.ties),
            "warnings": list(self.warnings),
            "windows": [[w.lower.tolist(), w.upper.tolist()] for w in self.windows],
        }


def bayes_adaptive(model: DiffusionModel, obs: ObservationSet, losses: Sequence[LossFunction] = None,
                   priors: Sequence = None, pilot=None, truth: Optional[TrueParameter] = None,
                   oracle_pilot: bool = False, grids: Sequence = (None, None),
                   nodes_per_axis: Optional[int] = None, scaling: Optional[Scaling] = None) -> BayesResult:
    """Two-stage adaptive Bayes-type estimator.

    Stage 1 integrates theta1 with theta2 at the pilot (box centre by default,
    theta2* when ``oracle_pilot``); stage 2 integrates theta2 with theta1 at the
    stage-1 estimate.
    """
    losses = losses or (power_loss(2.0), power_loss(2.0))
    priors = priors or (PriorDensity.uniform(model.theta1_box), PriorDensity.uniform(model.theta2_box))
    scaling = scaling or Scaling.for_observations(obs)
    if oracle_pilot:
        if truth is None:
            raise PreconditionError("oracle pilot needs the true parameter")
        pilot = truth.theta2_star
    pilot = model.theta2_box.center if pilot is None else np.atleast_1d(np.asarray(pilot, float))
    if not model.theta2_box.contains(pilot):
        raise PreconditionError(f"pilot {pilot} outside the theta2 box")
    ql = QuasiLikelihood(model, obs)

    post1 = stage_posterior(model, obs, 1, priors[0], pilot, grids[0], scaling, nodes_per_axis, ql)
    z1, v1, tie1 = minimize_objective(post1, losses[0], model.theta1_box)
    post2 = stage_posterior(model, obs, 2, priors[1], z1, grids[1], scaling, nodes_per_axis, ql)
    z2, v2, tie2 = minimize_objective(post2, losses[1], model.theta2_box)

    err = None
    if truth is not None:
        err = np.concatenate([scaling.rate1 * (z1 - truth.theta1_star), scaling.rate2 * (z2 - truth.theta2_star)])
    return BayesResult(
        theta_tilde=(z1, z2),
        loss_ids=(losses[0].name, losses[1].name),
        objective_values=(v1, v2),
        scaled_error=err,
        pilot=pilot,
        ties=(tie1, tie2),
        warnings=post1.warnings + post2.warnings,
        windows=(post1.grid, post2.grid),
    )
