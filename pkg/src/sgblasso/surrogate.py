"""Subspace compression of fingerprints and a one-hidden-layer ReLU network
that maps ``(T1, T2)`` to compressed, unit-norm fingerprints."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bloch import as_thetas
from .errors import TrainingDiverged

log = logging.getLogger(__name__)

DEFAULT_T1_RANGE = (10.0, 6000.0)
DEFAULT_T2_RANGE = (4.0, 4000.0)
_MAGIC = "sgblasso-mlp"


@dataclass(frozen=True)
class Subspace:
    """Orthonormal temporal basis ``V`` of shape ``(T, tau)``."""

    basis: np.ndarray

    @property
    def tau(self):
        return self.basis.shape[1]

    def compress(self, x):
        return self.basis.T @ x

    def project(self, x):
        return self.basis @ (self.basis.T @ x)


def fit_subspace(dictionary, tau) -> Subspace:
    """Top-``tau`` left singular vectors of a ``(T, n)`` dictionary.

    Each basis vector is signed so that the dictionary's coefficients on it
    sum to a positive number, which makes the basis deterministic.
    """
    d = np.asarray(dictionary, dtype=float)
    if tau < 1 or tau > min(d.shape):
        raise ValueError(f"tau={tau} must lie in [1, {min(d.shape)}]")
    u, _, _ = np.linalg.svd(d, full_matrices=False)
    basis = u[:, :tau].copy()
    signs = np.sign(basis.T @ d.sum(axis=1))
    signs[signs == 0] = 1.0
    return Subspace(basis * signs)


@dataclass
class MlpSurrogate:
    """Dense ReLU network on log-scaled inputs with unit-normalised outputs.

    Inputs ``(log T1, log T2)`` are mapped affinely from ``[log_lo, log_hi]``
    to ``[0, 1]^2`` before the first layer.
    """

    w1: np.ndarray  # (2, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, tau)
    b2: np.ndarray  # (tau,)
    log_lo: np.ndarray = field(default_factory=lambda: np.log([DEFAULT_T1_RANGE[0], DEFAULT_T2_RANGE[0]]))
    log_hi: np.ndarray = field(default_factory=lambda: np.log([DEFAULT_T1_RANGE[1], DEFAULT_T2_RANGE[1]]))
    seed: int | None = None
    nrmse: dict = field(default_factory=dict)
    basis: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "log_lo", "log_hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def hidden(self):
        return self.w1.shape[1]

    @property
    def n_out(self):
        return self.w2.shape[1]

    def _scale(self, thetas):
        thetas = as_thetas(thetas)
        if np.any(thetas <= 0):
            raise ValueError("relaxation times must be positive")
        logs = np.log(thetas)
        if np.any(logs < self.log_lo - 1e-12) or np.any(logs > self.log_hi + 1e-12):
            warnings.warn("theta outside the surrogate training box; extrapolating", stacklevel=3)
        return (logs - self.log_lo) / (self.log_hi - self.log_lo), thetas

    def raw(self, thetas):
        """Unnormalised network output, ``(k, tau)``."""
        z, _ = self._scale(thetas)
        return np.maximum(z @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2

    def atoms(self, thetas):
        y = self.raw(thetas)
        return (y / np.linalg.norm(y, axis=1, keepdims=True)).T

    def jacobians(self, thetas):
        z, thetas = self._scale(thetas)
        pre = z @ self.w1 + self.b1
        y = np.maximum(pre, 0.0) @ self.w2 + self.b2
        # ReLU derivative taken as 0 at the kink
        active = (pre > 0).astype(float)
        dz = np.einsum("hr,kh,dh->krd", self.w2, active, self.w1)
        dy = dz / ((self.log_hi - self.log_lo) * thetas)[:, None, :]
        nrm = np.linalg.norm(y, axis=1)
        u = y / nrm[:, None]
        radial = np.einsum("kr,krd->kd", u, dy)
        return (dy - u[:, :, None] * radial[:, None, :]) / nrm[:, None, None]

    def save(self, path):
        header = {
            "format": _MAGIC,
            "version": 1,
            "hidden": int(self.hidden),
            "tau": int(self.n_out),
            "log_lo": self.log_lo.tolist(),
            "log_hi": self.log_hi.tolist(),
            "seed": self.seed,
            "nrmse": self.nrmse,
            "dtype": "f64le",
            "blocks": ["w1", "b1", "w2", "b2"] + (["basis"] if self.basis is not None else []),
            "basis_rows": None if self.basis is None else int(self.basis.shape[0]),
        }
        blocks = [self.w1, self.b1, self.w2, self.b2] + ([self.basis] if self.basis is not None else [])
        blob = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
        Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        line, blob = raw.split(b"\n", 1)
        header = json.loads(line)
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path} is not a surrogate weight file")
        h, tau = header["hidden"], header["tau"]
        shapes = {"w1": (2, h), "b1": (h,), "w2": (h, tau), "b2": (tau,)}
        if header.get("basis_rows"):
            shapes["basis"] = (header["basis_rows"], tau)
        data = np.frombuffer(blob, dtype="<f8")
        expected = sum(int(np.prod(shapes[b])) for b in header["blocks"])
        if data.size != expected:
            raise ValueError(f"weight blob has {data.size} values, expected {expected}")
        arrays, pos = {}, 0
        for name in header["blocks"]:
            n = int(np.prod(shapes[name]))
            arrays[name] = data[pos:pos + n].reshape(shapes[name]).copy()
            pos += n
        return cls(
            log_lo=np.array(header["log_lo"]), log_hi=np.array(header["log_hi"]),
            seed=header["seed"], nrmse=header["nrmse"], **arrays,
        )


def surrogate_eval(s: MlpSurrogate, theta) -> np.ndarray:
    """Unit-norm compressed fingerprint at one ``theta``, shape ``(tau,)``."""
    return s.atoms(as_thetas(theta)[:1])[:, 0]


def surrogate_jacobian(s: MlpSurrogate, theta) -> np.ndarray:
    """Exact Jacobian ``(tau, 2)`` of :func:`surrogate_eval` w.r.t. ``(T1, T2)``."""
    return s.jacobians(as_thetas(theta)[:1])[0]


def nrmse(pred, target):
    return float(np.linalg.norm(pred - target) / np.linalg.norm(target))


def split_indices(n, seed, fractions=(0.8, 0.1, 0.1)):
    """Seeded shuffle into train/validation/test index arrays."""
    perm = np.random.Generator(np.random.Philox(seed)).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def train_surrogate(
    thetas,
    targets,
    hidden=500,
    epochs=100,
    lr=0.005,
    batch=100,
    lr_decay=0.95,
    beta1=0.95,
    beta2=0.999,
    seed=0,
    t1_range=DEFAULT_T1_RANGE,
    t2_range=DEFAULT_T2_RANGE,
    init: MlpSurrogate | None = None,
) -> MlpSurrogate:
    """Fit the network to ``targets`` ``(n, tau)`` by Adam on the MSE loss.

    The samples are split 80/10/10 by a seeded shuffle; NRMSE on every split
    is stored on the returned surrogate. The learning rate is multiplied by
    ``lr_decay`` after each epoch and ``beta1`` is the gradient decay factor.
    """
    thetas = as_thetas(thetas)
    targets = np.asarray(targets, dtype=float)
    n, tau = targets.shape
    if n < 2 or thetas.shape[0] != n:
        raise ValueError("need at least two (theta, target) samples")
    rng = np.random.Generator(np.random.Philox(seed))
    log_lo = np.log([t1_range[0], t2_range[0]])
    log_hi = np.log([t1_range[1], t2_range[1]])
    z = (np.log(thetas) - log_lo) / (log_hi - log_lo)

    train, val, test = split_indices(n, seed)
    if train.size == 0:
        train = np.arange(n)

    if init is not None:
        params = [init.w1.copy(), init.b1.copy(), init.w2.copy(), init.b2.copy()]
    else:
        params = [
            rng.normal(0.0, np.sqrt(2.0 / 2), (2, hidden)),
            rng.uniform(-1.0, 1.0, hidden),
            rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, tau)),
            targets[train].mean(axis=0),
        ]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    rate = lr
    for epoch in range(epochs):
        order = train[rng.permutation(train.size)]
        for start in range(0, order.size, batch):
            idx = order[start:start + batch]
            zb, yb = z[idx], targets[idx]
            w1, b1, w2, b2 = params
            pre = zb @ w1 + b1
            h = np.maximum(pre, 0.0)
            err = h @ w2 + b2 - yb
            loss = np.mean(err**2)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            g = 2.0 * err / err.size
            gh = (g @ w2.T) * (pre > 0)
            grads = [zb.T @ gh, gh.sum(axis=0), h.T @ g, g.sum(axis=0)]
            step += 1
            for p, gr, mi, vi in zip(params, grads, m, v):
                mi *= beta1
                mi += (1 - beta1) * gr
                vi *= beta2
                vi += (1 - beta2) * gr**2
                p -= rate * (mi / (1 - beta1**step)) / (np.sqrt(vi / (1 - beta2**step)) + 1e-8)
        rate *= lr_decay
        if epoch % 10 == 9 or epoch == epochs - 1:
            log.debug("epoch %d lr %.2e train loss %.3e", epoch + 1, rate, loss)

    s = MlpSurrogate(*params, log_lo=log_lo, log_hi=log_hi, seed=seed)
    for name, idx in (("train", train), ("val", val), ("test", test)):
        if idx.size:
            s.nrmse[name] = nrmse(s.raw(thetas[idx]), targets[idx])
    if any(not np.isfinite(x) for x in s.nrmse.values()):
        raise TrainingDiverged(epochs)
    return s


def epg_training_set(model, subspace=None, per_axis=130, tau=10,
                     t1_range=DEFAULT_T1_RANGE, t2_range=DEFAULT_T2_RANGE):
    """Simulate a log-spaced dictionary and compress it.

    Returns ``(thetas, targets, subspace)`` where ``targets`` holds ``V^T phi``
    for unit-norm atoms ``phi``.
    """
    from .bloch import log_grid

    thetas = log_grid(per_axis, t1_range, t2_range)
    d = model.atoms(thetas)
    if subspace is None:
        subspace = fit_subspace(d, tau)
    return thetas, subspace.compress(d).T, subspace
