"""Sparse-group shrinkage, the epsilon-norm, and restarted FISTA for the
nonnegative sparse group lasso on a fixed dictionary."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DivergenceError
from .measure import group_norm


@dataclass(frozen=True)
class FistaConfig:
    max_iters: int = 5000
    tol: float = 1e-10
    restart: bool = True
    xtol: float = 0.0  # stop when |C_{j+1} - C_j|_F <= xtol * max(1, |C|_F); 0 disables

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("need max_iters >= 1 and tol > 0")


@dataclass
class FistaResult:
    weights: np.ndarray  # (v, k)
    objective: list = field(default_factory=list)
    iterations: int = 0
    restarts: int = 0


def prox_sgtv(c, alpha, beta, v=None):
    """Proximal map of ``alpha * |.|_beta`` restricted to nonnegative matrices.

    ``c`` is ``(v, k)`` with one mixture map per column. Entries are first
    shrunk by ``alpha (1 - beta)`` and clipped at zero, then every column is
    group-shrunk by ``alpha beta sqrt(v)``.
    """
    c = np.asarray(c, dtype=float)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    v = c.shape[0] if v is None else v
    z = np.maximum(c - alpha * (1 - beta), 0.0)
    nrm = np.linalg.norm(z, axis=0)
    lam = alpha * beta * np.sqrt(v)
    scale = np.where(nrm > lam, 1.0 - lam / np.where(nrm > 0, nrm, 1.0), 0.0)
    return z * scale


def eps_norm(xi, eps):
    """The unique ``nu > 0`` with ``sum_i (|xi_i| - (1-eps) nu)_+^2 = (eps nu)^2``.

    Equivalently ``|S_{(1-eps) nu}(xi)|_2 = eps nu`` where ``S`` is soft
    thresholding, so ``nu`` is the dual norm of ``(1-eps)|.|_1 + eps |.|_2``.
    """
    a = np.abs(np.asarray(xi, dtype=float)).ravel()
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    top = a.max(initial=0.0)
    if top == 0:
        return 0.0

    def gap(nu):
        return np.sum(np.maximum(a - (1 - eps) * nu, 0.0) ** 2) - (eps * nu) ** 2

    # gap(0) > 0 and gap(top / (1 - eps)) < 0; gap is decreasing in between
    hi = top / (1 - eps)
    nu = brentq(gap, 0.0, hi, xtol=1e-15 * top, rtol=4 * np.finfo(float).eps, maxiter=500)
    # polish with Newton steps on the piecewise quadratic
    for _ in range(5):
        r = np.maximum(a - (1 - eps) * nu, 0.0)
        g = np.sum(r**2) - (eps * nu) ** 2
        dg = -2 * (1 - eps) * r.sum() - 2 * eps**2 * nu
        if dg == 0:
            break
        step = g / dg
        nu -= step
        if abs(step) <= 1e-16 * nu:
            break
    return float(nu)


def eps_decomposition(xi, eps):
    """Split ``xi`` into a soft-thresholded part and a bounded remainder."""
    xi = np.asarray(xi, dtype=float)
    nu = eps_norm(xi, eps)
    thr = (1 - eps) * nu
    soft = np.sign(xi) * np.maximum(np.abs(xi) - thr, 0.0)
    return nu, soft, xi - soft


def lipschitz(d, iters=50, tol=1e-8, seed=0):
    """Largest eigenvalue of ``D^T D`` by power iteration, times 1.01."""
    d = np.asarray(d, dtype=float)
    if d.shape[1] == 0:
        return 1.0
    x = np.random.Generator(np.random.Philox(seed)).standard_normal(d.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = d.T @ (d @ x)
        new = float(np.linalg.norm(y))
        if new == 0:
            return 1.0
        x = y / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return 1.01 * lam


def sglasso_objective(d, x, c, alpha, beta):
    r = x - d @ c.T
    return 0.5 * float(np.sum(r * r)) + alpha * group_norm(c, beta, x.shape[1])


def fista_sglasso(d, x, alpha, beta, cfg: FistaConfig | None = None, c0=None, lip=None) -> FistaResult:
    """Minimise ``0.5 |X - D C^T|_F^2 + alpha |C|_beta`` over ``C >= 0``.

    ``d`` is ``(n, k)``, ``x`` is ``(n, v)`` and the returned weights are
    ``(v, k)``. With ``restart`` on, momentum is reset and the step redone
    from the last accepted point whenever the objective would increase, so
    the objective sequence is monotone.
    """
    cfg = cfg or FistaConfig()
    d = np.asarray(d, dtype=float)
    x = np.asarray(x, dtype=float)
    if d.shape[0] != x.shape[0]:
        raise ValueError(f"dictionary atoms have length {d.shape[0]}, data has {x.shape[0]} rows")
    v, k = x.shape[1], d.shape[1]
    if k == 0:
        return FistaResult(np.zeros((v, 0)), [0.5 * float(np.sum(x * x))])
    lip = lipschitz(d) if lip is None else lip
    step = 1.0 / lip
    thr1 = alpha * step * (1 - beta)
    thr2 = alpha * step * beta * np.sqrt(v)
    pen1, pen2 = alpha * (1 - beta), alpha * beta * np.sqrt(v)
    dt_step = step * d.T

    # iterates are kept as (k, v) so that every product is a plain D @ W
    def objective(w):
        r = x - d @ w
        nrm = np.sqrt(np.einsum("ij,ij->i", w, w))
        return 0.5 * float(np.einsum("ij,ij->", r, r)) + pen1 * float(w.sum()) + pen2 * float(nrm.sum())

    def prox_step(y):
        z = y + dt_step @ (x - d @ y)
        np.subtract(z, thr1, out=z)
        np.maximum(z, 0.0, out=z)
        nrm = np.sqrt(np.einsum("ij,ij->i", z, z))
        scale = np.maximum(1.0 - thr2 / np.maximum(nrm, np.finfo(float).tiny), 0.0)
        return z * scale[:, None]

    c = np.zeros((k, v)) if c0 is None else np.maximum(np.asarray(c0, dtype=float), 0.0).T.copy()
    f = objective(c)
    trace = [f]
    y, t = c.copy(), 1.0
    restarts = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        c_new = prox_step(y)
        f_new = objective(c_new)
        if not np.isfinite(f_new):
            raise DivergenceError(f"FISTA objective became non-finite at iteration {it}")
        if cfg.restart and f_new > f:
            restarts += 1
            t = 1.0
            c_new = prox_step(c)
            f_new = objective(c_new)
            y = c_new
        else:
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            y = c_new + ((t - 1) / t_new) * (c_new - c)
            t = t_new
        diff = c_new - c
        dc = np.sqrt(np.einsum("ij,ij->", diff, diff))
        rel = abs(f - f_new) / max(abs(f), np.finfo(float).tiny)
        c, f = c_new, f_new
        trace.append(f_new)
        if cfg.xtol > 0:
            if dc <= cfg.xtol * max(1.0, np.sqrt(np.einsum("ij,ij->", c, c))):
                break
        elif rel <= cfg.tol and it > 1:
            break
    c = c.T
    return FistaResult(c, trace, it, restarts)
