"""Vanishing-derivative precertificates for the sparse-group Beurling lasso.

For a ground-truth measure ``sum_s C_s delta(theta - theta_s)`` the
precertificate is the least-norm ``Q`` (``tau x v``) whose dual function
``eta = Phi^* Q`` interpolates the subgradient of the sparse-group norm on
every support ``I_s = Supp(C_s)`` and whose squared score has a critical
point at each ``theta_s``. Recovery is stable when

    g(theta) = |(eta(theta) + beta - 1)_+|^2 / (v beta^2)

stays below one away from the spikes and is strictly concave at them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bloch import FingerprintModel, as_thetas, check_thetas, log_grid

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10
HESS_STEP = 1e-3
HESS_TOL = 1e-10
EXCLUSION_CELLS = 3
SPIKE_TOL = 1e-6


@dataclass(frozen=True)
class GroundTruth:
    """Spike locations ``(k, 2)`` in ms and nonnegative weights ``(k, v)``."""

    thetas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        th = check_thetas(np.asarray(self.thetas, dtype=float).reshape(-1, 2)).copy()
        w = np.atleast_2d(np.asarray(self.weights, dtype=float)).copy()
        if w.shape[0] != th.shape[0]:
            raise ValueError(f"{th.shape[0]} locations but {w.shape[0]} weight rows")
        if np.any(w < 0):
            raise ValueError("ground-truth weights must be nonnegative")
        if np.any(np.linalg.norm(w, axis=1) == 0):
            raise ValueError("every compartment needs a nonzero weight map")
        th.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "weights", w)

    @property
    def k(self):
        return self.thetas.shape[0]

    @property
    def v(self):
        return self.weights.shape[1]

    @property
    def supports(self):
        return [np.flatnonzero(c > 0) for c in self.weights]

    def normalized_weights(self):
        return self.weights / np.linalg.norm(self.weights, axis=1, keepdims=True)


def _log_jacobians(model, thetas):
    return model.jacobians(thetas) * thetas[:, None, :]


def assemble_gamma(model: FingerprintModel, gt: GroundTruth, log_theta=False) -> np.ndarray:
    """Dense constraint matrix of shape ``(tau v, sum_s |I_s| + 2k)``.

    Unknowns ``vec(Q)`` are stacked column by column (voxel-major). The first
    block holds one column ``e_i (x) phi(theta_s)`` per support entry, in the
    order ``s = 1..k`` and increasing ``i``; the last ``2k`` columns are
    ``C_s/|C_s| (x) J(theta_s)``. ``log_theta`` differentiates with respect
    to ``log T1, log T2`` instead of milliseconds, which leaves the
    constraint set unchanged but balances the column scales.
    """
    atoms = model.atoms(gt.thetas)
    jac = _log_jacobians(model, gt.thetas) if log_theta else model.jacobians(gt.thetas)
    n, v = atoms.shape[0], gt.v
    ctil = gt.normalized_weights()
    cols = []
    for s, supp in enumerate(gt.supports):
        for i in supp:
            col = np.zeros((v, n))
            col[i] = atoms[:, s]
            cols.append(col.ravel())
    for s in range(gt.k):
        for d in range(jac.shape[2]):
            cols.append(np.outer(ctil[s], jac[s][:, d]).ravel())
    return np.array(cols).T


def interpolation_rhs(gt: GroundTruth, beta) -> np.ndarray:
    """``u_0`` entries ``(1 - beta) + beta sqrt(v) C_si / |C_s|`` followed by ``2k`` zeros."""
    ctil = gt.normalized_weights()
    u = [(1 - beta) + beta * np.sqrt(gt.v) * ctil[s, supp] for s, supp in enumerate(gt.supports)]
    return np.concatenate(u + [np.zeros(2 * gt.k)])


@dataclass
class Certificate:
    """A solved precertificate; ``q`` is ``(tau, v)``."""

    model: FingerprintModel
    gt: GroundTruth
    beta: float
    q: np.ndarray
    gamma_rank: int
    gamma_cols: int
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def full_rank(self):
        return self.gamma_rank == self.gamma_cols

    @property
    def per_voxel(self):
        return self.beta == 0

    def eta(self, thetas):
        return self.model.atoms(as_thetas(thetas)).T @ self.q

    def f(self, thetas):
        """``(eta + beta - 1)_+ / (beta sqrt(v))``, shape ``(n, v)``."""
        if self.per_voxel:
            raise ValueError("f is undefined for the per-voxel (beta = 0) certificate")
        return np.maximum(self.eta(thetas) + self.beta - 1, 0.0) / (self.beta * np.sqrt(self.gt.v))

    def g(self, thetas):
        """Certificate value at each row of ``thetas``.

        For ``beta = 0`` this is the pointwise maximum over voxels of the
        scalar certificates ``q_i^T phi(theta)``.
        """
        if self.per_voxel:
            eta = self.eta(thetas)
            active = np.any(self.gt.weights > 0, axis=0)
            return eta[:, active].max(axis=1) if active.any() else np.zeros(eta.shape[0])
        f = self.f(thetas)
        return np.sum(f * f, axis=1)


def _lstsq_min_norm(gamma, rhs):
    """Least-norm ``q`` with ``gamma^T q = rhs`` via SVD with relative cutoff."""
    u, sv, vt = np.linalg.svd(gamma, full_matrices=False)
    keep = sv > RANK_RTOL * sv[0] if sv.size else np.zeros(0, bool)
    q = u[:, keep] @ ((vt[keep] @ rhs) / sv[keep])
    return q, int(keep.sum()), sv


def _per_voxel_certificate(model, gt: GroundTruth):
    """Independent scalar certificates ``q_i`` for ``beta = 0``."""
    atoms = model.atoms(gt.thetas)
    jac = _log_jacobians(model, gt.thetas)
    n, v = atoms.shape[0], gt.v
    q = np.zeros((n, v))
    ranks, cols = 0, 0
    patterns = {}
    for i in range(v):
        key = tuple(np.flatnonzero(gt.weights[:, i] > 0))
        patterns.setdefault(key, []).append(i)
    sv_all = []
    for key, voxels in patterns.items():
        if not key:
            continue
        blocks = [atoms[:, list(key)]] + [jac[s] for s in key]
        gamma = np.hstack(blocks)
        rhs = np.concatenate([np.ones(len(key)), np.zeros(2 * len(key))])
        qi, rank, sv = _lstsq_min_norm(gamma, rhs)
        q[:, voxels] = qi[:, None]
        ranks += rank * len(voxels)
        cols += gamma.shape[1] * len(voxels)
        sv_all.append(sv)
    return q, ranks, cols, np.concatenate(sv_all) if sv_all else np.zeros(0)


def _structured_certificate(model, gt: GroundTruth, beta):
    """Least-norm solve exploiting the per-voxel block structure of ``Gamma``.

    With ``q_i = q_i^0 + w_i`` where ``q_i^0`` is the least-norm interpolant
    of voxel ``i``, the remaining freedom ``w_i`` lives in the orthogonal
    complement of that voxel's atoms and only has to cancel the aggregated
    gradient constraints, which leaves a ``2k x 2k`` system.
    """
    atoms = model.atoms(gt.thetas)
    jac = _log_jacobians(model, gt.thetas)
    n, v, k = atoms.shape[0], gt.v, gt.k
    ctil = gt.normalized_weights()
    mask = gt.weights > 0
    q0 = np.zeros((n, v))
    # per-voxel gradient directions, (v, n, 2k)
    grad_dirs = np.einsum("si,snd->insd", ctil, jac).reshape(v, n, 2 * k)
    m = np.zeros_like(grad_dirs)
    rank = 0
    patterns = {}
    for i in range(v):
        patterns.setdefault(tuple(np.flatnonzero(mask[:, i])), []).append(i)
    for key, voxels in patterns.items():
        voxels = np.array(voxels)
        if not key:
            m[voxels] = grad_dirs[voxels]
            continue
        b = atoms[:, list(key)]
        ub, sb, _ = np.linalg.svd(b, full_matrices=False)
        keep = sb > RANK_RTOL * sb[0]
        rank += int(keep.sum()) * voxels.size
        rhs = (1 - beta) + beta * np.sqrt(v) * ctil[np.ix_(list(key), voxels)]  # (|key|, nvox)
        coef, *_ = np.linalg.lstsq(b, np.eye(n), rcond=RANK_RTOL)  # pseudo-inverse, (|key|, n)
        q0[:, voxels] = coef.T @ rhs
        proj = ub[:, keep]
        gd = grad_dirs[voxels]
        m[voxels] = gd - np.einsum("nr,mr,vmd->vnd", proj, proj, gd)
    h = np.einsum("ind,ni->d", grad_dirs, q0)
    s_mat = np.einsum("ind,ine->de", m, m)
    ev, evec = np.linalg.eigh(s_mat)
    keep = ev > (RANK_RTOL * np.sqrt(max(ev.max(), 0.0))) ** 2 if ev.size else ev > 0
    lam = -evec[:, keep] @ ((evec[:, keep].T @ h) / ev[keep])
    q = q0 + np.einsum("ind,d->ni", m, lam)
    sv = np.sqrt(np.clip(ev, 0, None))
    return q, rank + int(keep.sum()), sv


def solve_precertificate(model: FingerprintModel, gt: GroundTruth, beta, method="auto") -> Certificate:
    """Least-norm vanishing-derivative precertificate.

    ``method`` is ``"dense"`` (SVD of the assembled ``Gamma``),
    ``"structured"`` (block elimination, for large ``v``) or ``"auto"``.
    With ``beta = 0`` the problem separates over voxels and the per-voxel
    scalar certificates are built instead.
    """
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    n_cols = sum(s.size for s in gt.supports) + 2 * gt.k
    if beta == 0:
        q, rank, cols, sv = _per_voxel_certificate(model, gt)
        return Certificate(model, gt, 0.0, q, rank, cols, sv)
    if method == "auto":
        method = "dense" if model.n_out * gt.v * n_cols <= 2e7 else "structured"
    if method == "dense":
        gamma = assemble_gamma(model, gt, log_theta=True)
        qvec, rank, sv = _lstsq_min_norm(gamma, interpolation_rhs(gt, beta))
        q = qvec.reshape(gt.v, model.n_out).T
    elif method == "structured":
        q, rank, sv = _structured_certificate(model, gt, beta)
    else:
        raise ValueError(f"unknown method {method!r}")
    if rank < n_cols:
        log.info("Gamma is rank deficient: rank %d < %d columns", rank, n_cols)
    return Certificate(model, gt, float(beta), q, rank, n_cols, sv)


@dataclass(frozen=True)
class Raster:
    """Log-spaced ``(T1, T2)`` raster; nodes with ``T1 <= T2`` are masked."""

    t1: np.ndarray
    t2: np.ndarray

    @classmethod
    def log_spaced(cls, per_axis, t1_range=(10.0, 6000.0), t2_range=(4.0, 4000.0)):
        return cls(np.geomspace(*t1_range, per_axis), np.geomspace(*t2_range, per_axis))

    @classmethod
    def around(cls, thetas, half_width, per_axis):
        """Zoomed raster covering the spikes plus ``half_width`` in log units."""
        lt = np.log(as_thetas(thetas))
        lo, hi = lt.min(axis=0) - half_width, lt.max(axis=0) + half_width
        return cls(np.exp(np.linspace(lo[0], hi[0], per_axis)), np.exp(np.linspace(lo[1], hi[1], per_axis)))

    @property
    def shape(self):
        return self.t1.size, self.t2.size

    @property
    def spacing(self):
        """Largest log step along either axis."""
        return max(np.diff(np.log(self.t1)).max(initial=0), np.diff(np.log(self.t2)).max(initial=0))

    def nodes(self):
        g1, g2 = np.meshgrid(self.t1, self.t2, indexing="ij")
        return np.stack([g1.ravel(), g2.ravel()], axis=1)

    def valid(self):
        pts = self.nodes()
        return (pts[:, 0] > pts[:, 1]).reshape(self.shape)


def raster_g(cert: Certificate, raster: Raster, chunk=4096) -> np.ndarray:
    """``g`` on every raster node, shape ``(len(t1), len(t2))``; invalid nodes are NaN."""
    pts = raster.nodes()
    ok = pts[:, 0] > pts[:, 1]
    out = np.full(pts.shape[0], np.nan)
    idx = np.flatnonzero(ok)
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        out[sel] = cert.g(pts[sel])
    return out.reshape(raster.shape)


@dataclass
class NondegeneracyVerdict:
    max_g_off_support: float
    argmax_off_support: tuple
    hessian_eigenvalues: list
    hessian_definite: list
    exclusion_radius: float
    verdict: str  # "nondegenerate", "degenerate" or "gamma-rank-deficient"
    g_at_spikes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "max_g_off_support": self.max_g_off_support,
            "argmax_off_support": list(self.argmax_off_support),
            "hessian_definite": list(self.hessian_definite),
            "hessian_eigenvalues": [list(map(float, e)) for e in self.hessian_eigenvalues],
            "exclusion_radius": self.exclusion_radius,
            "g_at_spikes": list(self.g_at_spikes),
        }


def hessian_log(cert: Certificate, theta, step=HESS_STEP):
    """Central finite-difference Hessian of ``g`` in ``(log T1, log T2)``."""
    z = np.log(np.asarray(theta, dtype=float))
    e = np.eye(2) * step
    pts = [z]
    for a in range(2):
        pts += [z + e[a], z - e[a]]
    pts += [z + e[0] + e[1], z + e[0] - e[1], z - e[0] + e[1], z - e[0] - e[1]]
    vals = cert.g(np.exp(np.array(pts)))
    g0 = vals[0]
    hess = np.empty((2, 2))
    for a in range(2):
        hess[a, a] = (vals[1 + 2 * a] - 2 * g0 + vals[2 + 2 * a]) / step**2
    hess[0, 1] = hess[1, 0] = (vals[5] - vals[6] - vals[7] + vals[8]) / (4 * step**2)
    return hess


def check_nondegeneracy(cert: Certificate, gt: GroundTruth, raster, exclusion_radius=None) -> NondegeneracyVerdict:
    """Non-saturation on the raster outside balls around the spikes plus curvature at them.

    ``raster`` is a :class:`Raster` or a list of rasters whose nodes are
    pooled. ``exclusion_radius`` is in log units and defaults to three cells
    of the finest raster. The value at each spike must also not exceed
    one, which fails when another compartment's voxels saturate there.
    For ``beta = 0`` the curvature test is applied to
    each voxel's own certificate at the spikes active in that voxel.
    """
    rasters = raster if isinstance(raster, (list, tuple)) else [raster]
    if exclusion_radius is None:
        exclusion_radius = EXCLUSION_CELLS * min(r.spacing for r in rasters)
    if exclusion_radius <= min(r.spacing for r in rasters):
        log.warning("exclusion radius %.3g does not exceed the grid spacing", exclusion_radius)
    best, where = -np.inf, (np.nan, np.nan)
    lt_spikes = np.log(gt.thetas)
    for r in rasters:
        vals = raster_g(cert, r).ravel()
        pts = r.nodes()
        dist = np.linalg.norm(np.log(pts)[:, None, :] - lt_spikes[None], axis=-1).min(axis=1)
        off = (dist > exclusion_radius) & np.isfinite(vals)
        if off.any():
            i = np.flatnonzero(off)[np.argmax(vals[off])]
            if vals[i] > best:
                best, where = float(vals[i]), tuple(map(float, pts[i]))

    eigs, definite = [], []
    if cert.per_voxel:
        for s in range(gt.k):
            voxels = np.flatnonzero(gt.weights[s] > 0)
            worst = None
            for key_voxel in _pattern_representatives(gt, voxels):
                ev = np.linalg.eigvalsh(_hessian_eta(cert.model, cert.q[:, key_voxel], gt.thetas[s]))
                if worst is None or ev.max() > worst.max():
                    worst = ev
            eigs.append(worst)
            definite.append(bool(np.all(worst < -HESS_TOL)))
    else:
        for s in range(gt.k):
            ev = np.linalg.eigvalsh(hessian_log(cert, gt.thetas[s]))
            eigs.append(ev)
            definite.append(bool(np.all(ev < -HESS_TOL)))

    g_spikes = [float(x) for x in cert.g(gt.thetas)]
    if not cert.full_rank:
        verdict = "gamma-rank-deficient"
    elif best < 1 and max(g_spikes) <= 1 + SPIKE_TOL and all(definite):
        verdict = "nondegenerate"
    else:
        verdict = "degenerate"
    return NondegeneracyVerdict(best, where, eigs, definite, float(exclusion_radius), verdict, g_spikes)


def _pattern_representatives(gt, voxels):
    """One voxel per distinct support pattern among ``voxels``."""
    seen = {}
    for i in voxels:
        seen.setdefault(tuple(np.flatnonzero(gt.weights[:, i] > 0)), i)
    return list(seen.values())


def _hessian_eta(model, qi, theta, step=HESS_STEP):
    """FD Hessian in log-theta of the scalar certificate ``qi^T phi``."""
    z = np.log(np.asarray(theta, dtype=float))
    e = np.eye(2) * step

    def val(p):
        return float(model.atoms(np.exp(p)[None])[:, 0] @ qi)

    hess = np.empty((2, 2))
    g0 = val(z)
    for a in range(2):
        hess[a, a] = (val(z + e[a]) - 2 * g0 + val(z - e[a])) / step**2
    hess[0, 1] = hess[1, 0] = (val(z + e[0] + e[1]) - val(z + e[0] - e[1])
                               - val(z - e[0] + e[1]) + val(z - e[0] - e[1])) / (4 * step**2)
    return hess


def separation_instance(delta, weights, theta1=(784.0, 77.0), theta2=(1216.0, 96.0)) -> GroundTruth:
    """Two spikes with ``theta_2 = theta_1 + delta (theta2 - theta1)``."""
    t1 = np.asarray(theta1, dtype=float)
    t2 = t1 + delta * (np.asarray(theta2, dtype=float) - t1)
    return GroundTruth(np.array([t1, t2]), weights)


def sparse_normal_weights(v, rho, k=2, seed=0):
    """``k`` maps with ``ceil(rho v)`` nonzeros of absolute standard-normal draws each."""
    rng = np.random.Generator(np.random.Philox(seed))
    nnz = max(1, int(np.ceil(rho * v)))
    w = np.zeros((k, v))
    for s in range(k):
        idx = rng.choice(v, size=nnz, replace=False)
        w[s, idx] = np.abs(rng.standard_normal(nnz))
    return w


def default_rasters(gt: GroundTruth, per_axis=120, zoom_per_axis=81, zoom_half_width=0.3):
    """Whole-domain raster plus a fine zoom around the spikes."""
    return [Raster.log_spaced(per_axis), Raster.around(gt.thetas, zoom_half_width, zoom_per_axis)]


def grid_points(per_axis=60):
    return log_grid(per_axis)
