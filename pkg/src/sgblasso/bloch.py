"""Fingerprint generators: an EPG simulator of the FISP sequence and a
closed-form inversion-recovery model used as a differentiable oracle.

All models expose the same batch interface::

    model.n_out                 # length of one fingerprint
    model.atoms(thetas)         # (n_out, k) unit-norm columns
    model.jacobians(thetas)     # (k, n_out, 2) derivatives w.r.t. (T1, T2) in ms

where ``thetas`` is a ``(k, 2)`` array of ``(T1, T2)`` pairs in milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numba
import numpy as np

from .errors import BoundaryError, DomainError

DEFAULT_STATES = None  # exact: as many orders as repetitions


class Theta(NamedTuple):
    """Relaxation times in milliseconds."""

    t1: float
    t2: float


class FingerprintModel(Protocol):
    n_out: int

    def atoms(self, thetas: np.ndarray) -> np.ndarray: ...

    def jacobians(self, thetas: np.ndarray) -> np.ndarray: ...


def as_thetas(thetas) -> np.ndarray:
    """Coerce a Theta, pair or sequence of pairs to a float ``(k, 2)`` array."""
    arr = np.asarray(thetas, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (k, 2) array of (T1, T2), got shape {arr.shape}")
    return arr


def check_thetas(thetas) -> np.ndarray:
    arr = as_thetas(thetas)
    bad = ~((arr[:, 1] > 0) & (arr[:, 0] > arr[:, 1]) & np.isfinite(arr).all(axis=1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"theta {tuple(arr[i])} violates T1 > T2 > 0")
    return arr


@dataclass(frozen=True)
class FispSequence:
    """FISP acquisition: flip angles in radians and timings in milliseconds."""

    flip_angles: np.ndarray
    tr_ms: float = 10.0
    te_ms: float = 1.9
    ti_ms: float = 18.0

    def __post_init__(self):
        fa = np.atleast_1d(np.asarray(self.flip_angles, dtype=float))
        if fa.size == 0:
            raise ValueError("flip-angle schedule is empty")
        if not (self.tr_ms > self.te_ms > 0):
            raise ValueError("need tr_ms > te_ms > 0")
        if self.ti_ms < 0:
            raise ValueError("ti_ms must be nonnegative")
        object.__setattr__(self, "flip_angles", fa)

    @property
    def length(self) -> int:
        return self.flip_angles.size


def synthetic_flip_schedule(length=1000, low_deg=10.0, high_deg=70.0, period=250):
    """Sinusoidal ramp between ``low_deg`` and ``high_deg`` (returned in radians)."""
    n = np.arange(length)
    mid, amp = 0.5 * (low_deg + high_deg), 0.5 * (high_deg - low_deg)
    return np.deg2rad(mid - amp * np.cos(2 * np.pi * n / period))


def read_flip_schedule(path) -> np.ndarray:
    """Read one angle in degrees per line; ``#`` starts a comment. Returns radians."""
    angles = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            angles.append(float(line))
    if not angles:
        raise ValueError(f"no flip angles found in {path}")
    return np.deg2rad(np.array(angles))


def default_sequence(length=1000) -> FispSequence:
    return FispSequence(synthetic_flip_schedule(length))


@numba.njit(cache=True)
def _epg_kernel(flips, tr, te, ti, t1s, t2s, n_states, out):
    n_rep = flips.size
    c2 = np.cos(flips / 2) ** 2
    s2 = np.sin(flips / 2) ** 2
    sa = np.sin(flips)
    ca = np.cos(flips)
    # RF pulses have zero phase, so F states stay purely imaginary and Z real;
    # fp/fm hold Im(F+_k), Im(F-_k) for k = 0..n_states (last slot is scratch)
    fp = np.zeros(n_states + 1)
    fm = np.zeros(n_states + 1)
    z = np.zeros(n_states + 1)
    for j in range(t1s.size):
        t1, t2 = t1s[j], t2s[j]
        fp[:] = 0.0
        fm[:] = 0.0
        z[:] = 0.0
        e1 = np.exp(-ti / t1)
        z[0] = 1.0 - 2.0 * e1
        e1_te, e2_te = np.exp(-te / t1), np.exp(-te / t2)
        e1_rest, e2_rest = np.exp(-(tr - te) / t1), np.exp(-(tr - te) / t2)
        for n in range(n_rep):
            # orders above n are still empty
            w = min(n + 1, n_states)
            for q in range(w):
                a, b, c = fp[q], fm[q], z[q]
                fp[q] = (c2[n] * a + s2[n] * b - sa[n] * c) * e2_te
                fm[q] = (s2[n] * a + c2[n] * b + sa[n] * c) * e2_te
                z[q] = (0.5 * sa[n] * (a - b) + ca[n] * c) * e1_te
            z[0] += 1.0 - e1_te
            out[j, n] = -fp[0]
            for q in range(w):
                fp[q] *= e2_rest
                fm[q] *= e2_rest
                z[q] *= e1_rest
            z[0] += 1.0 - e1_rest
            # unbalanced gradient: one dephasing order per TR
            for q in range(w, 0, -1):
                fp[q] = fp[q - 1]
            for q in range(w - 1):
                fm[q] = fm[q + 1]
            fm[w - 1] = 0.0
            fm[w] = 0.0
            fp[0] = -fm[0]


def epg_fisp_batch(seq: FispSequence, thetas, n_states=DEFAULT_STATES) -> np.ndarray:
    """Simulate FISP for many tissues at once; returns ``(k, T)`` signals.

    The signal is the transverse magnetisation at TE, expressed as the real
    component left after removing the constant excitation phase (positive for
    an excitation of positive longitudinal magnetisation). ``n_states=None``
    keeps every dephasing order, which makes the simulation exact.
    """
    thetas = check_thetas(thetas)
    if n_states is None:
        n_states = seq.length
    if n_states < 1:
        raise ValueError("n_states must be positive")
    out = np.empty((thetas.shape[0], seq.length))
    _epg_kernel(
        seq.flip_angles, float(seq.tr_ms), float(seq.te_ms), float(seq.ti_ms),
        np.ascontiguousarray(thetas[:, 0]), np.ascontiguousarray(thetas[:, 1]), int(n_states), out,
    )
    return out


def epg_fisp(seq: FispSequence, theta, n_states=DEFAULT_STATES, normalize=False) -> np.ndarray:
    """FISP fingerprint of a single tissue, length ``seq.length``."""
    sig = epg_fisp_batch(seq, as_thetas(theta)[:1], n_states)[0]
    return _unit(sig[:, None])[:, 0] if normalize else sig


def _unit(d):
    """Normalise columns; all-zero columns are left at zero."""
    norms = np.linalg.norm(d, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return d / safe


def _fd_steps(thetas, rel_step):
    h = rel_step * thetas
    # the T1-step moves T1 down and the T2-step moves T2 up; both must stay in T1 > T2
    if np.any(thetas[:, 0] - h[:, 0] <= thetas[:, 1]) or np.any(thetas[:, 1] + h[:, 1] >= thetas[:, 0]):
        raise BoundaryError("finite-difference step would cross the T1 = T2 boundary")
    return h


def epg_fisp_jacobian(seq: FispSequence, theta, rel_step=1e-4, n_states=DEFAULT_STATES, normalize=False):
    """Central finite-difference Jacobian ``(T, 2)`` of :func:`epg_fisp`."""
    thetas = check_thetas(as_thetas(theta)[:1])
    return _fd_jacobians(
        lambda th: _maybe_unit(epg_fisp_batch(seq, th, n_states).T, normalize), thetas, rel_step
    )[0]


def _maybe_unit(d, normalize):
    return _unit(d) if normalize else d


def _fd_jacobians(fun, thetas, rel_step):
    """Central differences of a batch map ``(k, 2) -> (n_out, k)``; returns ``(k, n_out, 2)``."""
    h = _fd_steps(thetas, rel_step)
    k = thetas.shape[0]
    shifted = []
    for j in range(2):
        step = np.zeros_like(thetas)
        step[:, j] = h[:, j]
        shifted += [thetas + step, thetas - step]
    vals = fun(np.concatenate(shifted))
    jac = np.empty((k, vals.shape[0], 2))
    for j in range(2):
        plus = vals[:, (2 * j) * k:(2 * j + 1) * k]
        minus = vals[:, (2 * j + 1) * k:(2 * j + 2) * k]
        jac[:, :, j] = ((plus - minus) / (2 * h[:, j])).T
    return jac


def analytic_expo(theta, t_grid):
    """Inversion-recovery decay ``(1 - 2 exp(-t/T1)) exp(-t/T2)`` and its Jacobian.

    Returns ``(phi, jac)`` with shapes ``(n,)`` and ``(n, 2)``; unnormalised.
    """
    t1, t2 = check_thetas(theta)[0]
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0 or np.any(t < 0):
        raise ValueError("t_grid must be nonempty and nonnegative")
    a = np.exp(-t / t1)
    b = np.exp(-t / t2)
    phi = (1.0 - 2.0 * a) * b
    d_t1 = -2.0 * a * (t / t1**2) * b
    d_t2 = (1.0 - 2.0 * a) * b * (t / t2**2)
    return phi, np.stack([d_t1, d_t2], axis=1)


def normalized_jacobian(phi, jac):
    """Jacobian of ``phi/|phi|`` given the raw ``phi`` ``(n,)`` and ``jac`` ``(n, 2)``."""
    nrm = np.linalg.norm(phi)
    if nrm == 0:
        return np.zeros_like(jac)
    u = phi / nrm
    return (jac - np.outer(u, u @ jac)) / nrm


class AnalyticModel:
    """Unit-normalised :func:`analytic_expo` atoms on a fixed time grid."""

    def __init__(self, t_grid):
        self.t_grid = np.asarray(t_grid, dtype=float)
        if self.t_grid.size == 0 or np.any(self.t_grid < 0):
            raise ValueError("t_grid must be nonempty and nonnegative")
        self.n_out = self.t_grid.size

    def _raw(self, thetas):
        thetas = check_thetas(thetas)
        t = self.t_grid[:, None]
        a = np.exp(-t / thetas[:, 0])
        b = np.exp(-t / thetas[:, 1])
        phi = (1.0 - 2.0 * a) * b
        d_t1 = -2.0 * a * (t / thetas[:, 0] ** 2) * b
        d_t2 = phi * (t / thetas[:, 1] ** 2)
        return phi, np.stack([d_t1, d_t2], axis=-1)

    def atoms(self, thetas):
        return _unit(self._raw(thetas)[0])

    def jacobians(self, thetas):
        phi, jac = self._raw(thetas)
        nrm = np.linalg.norm(phi, axis=0)
        u = phi / nrm
        proj = np.einsum("nk,nkd->kd", u, jac)
        out = (jac - u[:, :, None] * proj[None]) / nrm[None, :, None]
        return np.transpose(out, (1, 0, 2))


class EpgModel:
    """Unit-normalised EPG-FISP atoms with finite-difference Jacobians."""

    def __init__(self, seq: FispSequence | None = None, n_states=DEFAULT_STATES, rel_step=1e-4):
        self.seq = seq if seq is not None else default_sequence()
        self.n_states = n_states
        self.rel_step = rel_step
        self.n_out = self.seq.length

    def raw(self, thetas):
        return epg_fisp_batch(self.seq, thetas, self.n_states).T

    def atoms(self, thetas):
        return _unit(self.raw(thetas))

    def jacobians(self, thetas):
        thetas = check_thetas(thetas)
        return _fd_jacobians(self.atoms, thetas, self.rel_step)


class ProjectedModel:
    """A model composed with a subspace: atoms ``V^T phi(theta)``."""

    def __init__(self, base: FingerprintModel, basis: np.ndarray):
        self.base = base
        self.basis = np.asarray(basis)
        self.n_out = self.basis.shape[1]

    def atoms(self, thetas):
        return self.basis.T @ self.base.atoms(thetas)

    def jacobians(self, thetas):
        return np.einsum("tr,ktd->krd", self.basis, self.base.jacobians(thetas))


def log_grid(per_axis, t1_range=(10.0, 6000.0), t2_range=(4.0, 4000.0)):
    """Log-spaced ``(T1, T2)`` grid restricted to ``T1 > T2``; returns ``(n, 2)``."""
    t1 = np.geomspace(*t1_range, per_axis)
    t2 = np.geomspace(*t2_range, per_axis)
    g1, g2 = np.meshgrid(t1, t2, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
    return pts[pts[:, 0] > pts[:, 1]]
