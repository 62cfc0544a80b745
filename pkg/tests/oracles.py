"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np


def prox_projected_gradient(c, alpha, beta, v, max_iters=100000, tol=1e-15):
    """Minimiser of ``0.5 |Z - C|^2 + alpha |Z|_beta`` over ``Z >= 0``.

    Uses the dual form: ``a2 |z|_2 = max_{|u| <= a2} u^T z`` turns each
    column into ``max_{|u| <= a2} min_{z >= 0} 0.5 |z - c|^2 + (a1 + u)^T z``,
    whose inner minimiser is ``z(u) = (c - a1 - u)_+``. The concave dual has
    a 1-Lipschitz gradient ``z(u)``, so accelerated projected gradient ascent
    onto the ball ``|u| <= a2`` with unit step converges; the primal point
    is read off at the end.
    """
    c = np.asarray(c, dtype=float)
    a1, a2 = alpha * (1 - beta), alpha * beta * np.sqrt(v)
    u = np.zeros_like(c)
    y, t = u.copy(), 1.0
    for _ in range(max_iters):
        un = y + np.maximum(c - a1 - y, 0.0)
        nrm = np.linalg.norm(un, axis=0)
        un = un * np.minimum(1.0, a2 / np.maximum(nrm, 1e-300))
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = un + (t - 1) / tn * (un - u)
        done = np.max(np.abs(un - u), initial=0.0) <= tol
        u, t = un, tn
        if done:
            break
    return np.maximum(c - a1 - u, 0.0)


def sglasso_subgradient(d, x, alpha, beta, c0, iters=20000):
    """Projected subgradient method with diminishing steps, keeping the best iterate.

    ``d`` is ``(n, k)``, ``x`` ``(n, v)``; returns ``(v, k)`` weights and
    their objective.
    """
    v = x.shape[1]

    def obj(c):
        r = x - d @ c.T
        return 0.5 * np.sum(r * r) + alpha * ((1 - beta) * c.sum() + beta * np.sqrt(v) * np.linalg.norm(c, axis=0).sum())

    c = np.maximum(np.asarray(c0, dtype=float), 0.0)
    best, fbest = c.copy(), obj(c)
    lip = np.linalg.norm(d, 2) ** 2
    for j in range(iters):
        nrm = np.linalg.norm(c, axis=0)
        grp = np.where(nrm > 0, c / np.where(nrm > 0, nrm, 1.0), 0.0)
        g = -(x - d @ c.T).T @ d + alpha * ((1 - beta) + beta * np.sqrt(v) * grp)
        c = np.maximum(c - g / (lip * np.sqrt(1.0 + j / 50.0)), 0.0)
        f = obj(c)
        if f < fbest:
            best, fbest = c.copy(), f
    return best, fbest


def prox_kkt_residual(z, c, alpha, beta, v):
    """Largest violation of the optimality conditions of the nonnegative prox."""
    a1, a2 = alpha * (1 - beta), alpha * beta * np.sqrt(v)
    res = 0.0
    for s in range(z.shape[1]):
        zs, cs = z[:, s], c[:, s]
        nrm = np.linalg.norm(zs)
        if nrm > 0:
            g = zs - cs + a1 + a2 * zs / nrm
            act = zs > 0
            res = max(res, np.abs(g[act]).max(initial=0.0), (-g[~act]).max(initial=0.0))
        else:
            # zero column: (c - a1)_+ must fit inside the ball of radius a2
            res = max(res, np.linalg.norm(np.maximum(cs - a1, 0.0)) - a2)
    return res


def eps_norm_sup(xi, eps, samples):
    """Largest ratio <xi, x> / ((1-eps)|x|_1 + eps |x|_2) over candidate vectors."""
    num = samples @ xi
    den = (1 - eps) * np.abs(samples).sum(axis=1) + eps * np.linalg.norm(samples, axis=1)
    return float(np.max(num / den))
