"""Sliding Frank-Wolfe for the nonnegative sparse-group Beurling lasso.

Each outer iteration inserts the parameter that most violates the dual
constraint, re-fits the weights of all current spikes by FISTA, then slides
locations and weights jointly with a bounded quasi-Newton method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .bloch import FingerprintModel, log_grid
from .errors import DivergenceError
from .measure import MERGE_TOL, SpikeMeasure, forward, group_norm, merge_close_spikes
from .proxsolver import FistaConfig, fista_sglasso
from .surrogate import DEFAULT_T1_RANGE, DEFAULT_T2_RANGE

log = logging.getLogger(__name__)

GAP = 1e-6  # minimum log T1 - log T2 kept by the feasibility clamp
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class SgbConfig:
    alpha: float
    beta: float
    coarse_grid: int = 10
    eval_grid: int = 60
    max_outer_iters: int = 30
    lbfgs_max_iters: int = 200
    lbfgs_tol: float = 1e-14
    lbfgs_memory: int = 10
    stop_slack: float = 1e-6
    t1_range: tuple = DEFAULT_T1_RANGE
    t2_range: tuple = DEFAULT_T2_RANGE
    prune_tol: float = 1e-10
    merge_tol: float = MERGE_TOL
    fista: FistaConfig = field(default_factory=lambda: FistaConfig(max_iters=3000, tol=1e-12, xtol=1e-12))

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.max_outer_iters < 1 or self.coarse_grid < 2 or self.eval_grid < 2:
            raise ValueError("grid sizes must be >= 2 and max_outer_iters >= 1")

    @property
    def log_bounds(self):
        return [tuple(np.log(self.t1_range)), tuple(np.log(self.t2_range))]


@dataclass
class SgbResult:
    measure: SpikeMeasure
    objective_trace: list
    stop_reason: str  # "certified" or "max_iters"
    residual: np.ndarray
    iterations: int = 0
    dual_max: float = np.nan


def objective(model: FingerprintModel, x, m: SpikeMeasure, alpha, beta):
    r = x - forward(model, m)
    return 0.5 * float(np.sum(r * r)) + alpha * group_norm(m.weights.T, beta, x.shape[1])


def insertion_score(model: FingerprintModel, residual_eta, theta, beta, v=None) -> float:
    """``|(eta(theta) + beta - 1)_+|_2^2`` for a callable ``eta``."""
    eta = np.asarray(residual_eta(theta), dtype=float)
    return float(np.sum(np.maximum(eta + beta - 1.0, 0.0) ** 2))


def _scores(model, r_over_alpha, thetas, beta):
    eta = model.atoms(thetas).T @ r_over_alpha
    return np.sum(np.maximum(eta + beta - 1.0, 0.0) ** 2, axis=1)


def _clamp(logt):
    """Project log-parameters onto ``log T2 <= log T1 - GAP``; returns (point, clamped mask)."""
    logt = np.array(logt, dtype=float).reshape(-1, 2)
    hit = logt[:, 1] > logt[:, 0] - GAP
    logt[hit, 1] = logt[hit, 0] - GAP
    return logt, hit


def _box(logt, cfg):
    lo = np.array([b[0] for b in cfg.log_bounds])
    hi = np.array([b[1] for b in cfg.log_bounds])
    return np.clip(logt, lo, hi)


def _score_ascent(model, r_over_alpha, theta0, cfg):
    """Local maximisation of the insertion score in log-theta from ``theta0``."""
    beta = cfg.beta

    def neg(z):
        lt, hit = _clamp(z)
        th = np.exp(lt)
        phi = model.atoms(th)[:, 0]
        jac = model.jacobians(th)[0] * th[0]  # d phi / d log theta
        eta = r_over_alpha.T @ phi
        p = np.maximum(eta + beta - 1.0, 0.0)
        grad = 2.0 * (p @ (r_over_alpha.T @ jac))
        if hit[0]:
            grad = np.array([grad[0] + grad[1], 0.0])
        return -float(p @ p), -grad

    z0 = np.log(np.asarray(theta0, dtype=float))
    s0 = max(-neg(z0)[0], np.finfo(float).tiny)

    def scaled(z):
        f, g = neg(z)
        return f / s0, g / s0

    res = minimize(scaled, z0, jac=True, method="L-BFGS-B", bounds=cfg.log_bounds,
                   options={"maxiter": cfg.lbfgs_max_iters, "maxcor": cfg.lbfgs_memory,
                            "ftol": cfg.lbfgs_tol, "gtol": 1e-12})
    z = _clamp(res.x)[0][0]
    best = -neg(z)[0]
    start = -neg(z0)[0]
    if best < start:
        return np.exp(z0), start
    return np.exp(z), best


def insert_spike(model: FingerprintModel, x, m: SpikeMeasure, cfg: SgbConfig, extra=None):
    """Most violating parameter for the current residual, or ``None``.

    The coarse grid picks the starting point for a local ascent. ``extra``
    may hold additional candidate ``(T1, T2)`` starts (for example the
    argmax of a denser grid); the best refined candidate wins. ``None`` is
    returned when every candidate scores zero, meaning there is nothing left
    to insert.
    """
    x = np.asarray(x, dtype=float)
    r = (x - forward(model, m)) / cfg.alpha
    grid = log_grid(cfg.coarse_grid, cfg.t1_range, cfg.t2_range)
    scores = _scores(model, r, grid, cfg.beta)
    starts = [grid[int(np.argmax(scores))]] if scores.max() > 0 else []
    if extra is not None:
        extra = np.asarray(extra, dtype=float).reshape(-1, 2)
        starts.extend(extra[_scores(model, r, extra, cfg.beta) > 0])
    if not starts:
        return None
    best_theta, best = None, -np.inf
    for th in starts:
        theta, val = _score_ascent(model, r, th, cfg)
        if val > best:
            best_theta, best = theta, val
    return best_theta


def dual_max(model: FingerprintModel, x, m: SpikeMeasure, cfg: SgbConfig):
    """Estimated ``sup_theta |(eta + beta - 1)_+|^2`` and where it is reached.

    Evaluated on the dense grid plus the spike locations, then refined by a
    local ascent from the best node.
    """
    r = (np.asarray(x, dtype=float) - forward(model, m)) / cfg.alpha
    pts = log_grid(cfg.eval_grid, cfg.t1_range, cfg.t2_range)
    if m.k:
        pts = np.vstack([pts, m.thetas])
    scores = _scores(model, r, pts, cfg.beta)
    i = int(np.argmax(scores))
    if scores[i] <= 0:
        return 0.0, pts[i]
    theta, val = _score_ascent(model, r, pts[i], cfg)
    return max(val, float(scores[i])), theta


def _prune(m: SpikeMeasure, tol) -> SpikeMeasure:
    keep = np.linalg.norm(m.weights, axis=1) > tol
    return SpikeMeasure(m.thetas[keep], m.weights[keep])


def fit_weights(model, x, thetas, cfg: SgbConfig, w0=None):
    """FISTA weight update on a fixed set of locations; returns ``(k, v)`` weights."""
    d = model.atoms(thetas)
    res = fista_sglasso(d, x, cfg.alpha, cfg.beta, cfg.fista, c0=None if w0 is None else w0.T)
    return res.weights.T


def _refit(model, x, m, cfg):
    """Re-fit weights so they are optimal for the current locations."""
    if m.k == 0:
        return m
    w = fit_weights(model, x, m.thetas, cfg, np.array(m.weights))
    return _prune(SpikeMeasure(m.thetas, w), cfg.prune_tol)


def sliding_refine(model: FingerprintModel, x, m: SpikeMeasure, cfg: SgbConfig):
    """Joint local descent on locations and nonzero weights.

    The zero pattern of the weights is frozen, so the l1 term is linear and
    the group term smooth (column norms floored at 1e-12). Returns
    ``(measure, improved)``; the input is returned unchanged if the descent
    does not lower the objective.
    """
    x = np.asarray(x, dtype=float)
    if m.k == 0:
        return m, False
    k, v = m.weights.shape
    alpha, beta = cfg.alpha, cfg.beta
    mask = m.weights > 0
    nnz = int(mask.sum())
    gw = beta * np.sqrt(v)

    def unpack(z):
        lt, hit = _clamp(z[:2 * k])
        w = np.zeros((k, v))
        w[mask] = z[2 * k:]
        return lt, hit, w

    def fun(z):
        lt, hit, w = unpack(z)
        th = np.exp(lt)
        a = model.atoms(th)
        jac = model.jacobians(th) * th[:, None, :]
        r = x - a @ w
        nrm = np.maximum(np.linalg.norm(w, axis=1), NORM_FLOOR)
        f = 0.5 * float(np.sum(r * r)) + alpha * ((1 - beta) * w.sum() + gw * nrm.sum())
        gwts = -(a.T @ r) + alpha * ((1 - beta) + gw * w / nrm[:, None])
        rw = r @ w.T  # (n, k)
        gth = -np.einsum("knd,nk->kd", jac, rw)
        gth[hit, 0] += gth[hit, 1]
        gth[hit, 1] = 0.0
        return f, np.concatenate([gth.ravel(), gwts[mask]])

    z0 = np.concatenate([np.log(m.thetas).ravel(), m.weights[mask]])
    f0 = fun(z0)[0]
    if f0 <= 0:
        return m, False
    bounds = cfg.log_bounds * k + [(0.0, None)] * nnz

    def scaled(z):
        # L-BFGS-B measures progress against max(|f|, 1), so work at unit scale
        f, g = fun(z)
        return f / f0, g / f0

    try:
        res = minimize(scaled, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.lbfgs_max_iters, "maxcor": cfg.lbfgs_memory,
                                "ftol": cfg.lbfgs_tol, "gtol": 1e-14})
    except (ValueError, FloatingPointError) as exc:
        log.debug("sliding step failed: %s", exc)
        return m, False
    if not np.all(np.isfinite(res.x)):
        return m, False
    lt, _, w = unpack(res.x)
    out = SpikeMeasure(np.exp(lt), w)
    if objective(model, x, out, alpha, beta) > f0:
        return m, False
    return out, True


def solve_sgb(model: FingerprintModel, x, cfg: SgbConfig) -> SgbResult:
    """Sliding Frank-Wolfe for ``min 0.5 |X - Phi m|^2 + alpha |m|_beta`` over ``m >= 0``.

    The data are rescaled to unit Frobenius norm internally (with ``alpha``
    scaled alike), which makes the result exactly covariant under
    ``(X, alpha) -> (lambda X, lambda alpha)``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != model.n_out:
        raise ValueError(f"data have shape {x.shape}, model produces length-{model.n_out} atoms")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contain non-finite entries")
    v = x.shape[1]
    scale = float(np.linalg.norm(x))
    if scale == 0:
        return SgbResult(SpikeMeasure.empty(v), [0.0], "certified", np.zeros_like(x), 0, 0.0)

    xs = x / scale
    c = SgbConfig(**{**cfg.__dict__, "alpha": cfg.alpha / scale})
    threshold = v * c.beta**2 * (1 + c.stop_slack)
    m = SpikeMeasure.empty(v)
    trace = [objective(model, xs, m, c.alpha, c.beta)]
    reason, top, it = "max_iters", np.nan, 0
    for it in range(c.max_outer_iters + 1):
        top, where = dual_max(model, xs, m, c)
        log.debug("iter %d: k=%d objective %.6e dual max %.6e (threshold %.6e)",
                  it, m.k, trace[-1], top, threshold)
        if top <= threshold:
            reason = "certified"
            break
        if it == c.max_outer_iters:
            break
        theta = insert_spike(model, xs, m, c, extra=where)
        if theta is None:
            reason = "certified"
            break
        thetas = np.vstack([m.thetas, theta])
        w0 = np.vstack([m.weights, np.zeros((1, v))])
        w = fit_weights(model, xs, thetas, c, w0)
        m = _prune(SpikeMeasure(thetas, w), c.prune_tol)
        m, _ = sliding_refine(model, xs, m, c)
        m = _refit(model, xs, _prune(m, c.prune_tol), c)
        f = objective(model, xs, m, c.alpha, c.beta)
        merged = merge_close_spikes(m, c.merge_tol)
        if merged.k < m.k:
            merged = _refit(model, xs, merged, c)
            f_merged = objective(model, xs, merged, c.alpha, c.beta)
            if f_merged <= f:
                m, f = merged, f_merged
        if not np.isfinite(f):
            raise DivergenceError(f"objective became non-finite at outer iteration {it}",
                                  dump={"iteration": it, "thetas": m.thetas.tolist()})
        trace.append(f)

    out = m.scaled(scale)
    residual = x - forward(model, out)
    return SgbResult(out, [f * scale**2 for f in trace], reason, residual, it, top)
