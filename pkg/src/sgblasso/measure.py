"""Vector-valued spike measures, the forward map and its adjoint, and the
sparse-group total-variation norm."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bloch import FingerprintModel, as_thetas, check_thetas

MERGE_TOL = 1e-3


@dataclass(frozen=True)
class SpikeMeasure:
    """``sum_s C_s delta(theta - theta_s)`` with nonnegative weights.

    ``thetas`` has shape ``(k, 2)`` (T1, T2 in ms) and ``weights`` shape
    ``(k, v)``: row ``s`` is the mixture map of spike ``s``.
    """

    thetas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        th = np.asarray(self.thetas, dtype=float).reshape(-1, 2)
        if th.shape[0] != w.shape[0]:
            raise ValueError(f"{th.shape[0]} locations but {w.shape[0]} weight rows")
        if th.shape[0]:
            check_thetas(th)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("spike weights must be finite and nonnegative")
        th.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls, v):
        return cls(np.zeros((0, 2)), np.zeros((0, v)))

    @property
    def k(self):
        return self.thetas.shape[0]

    @property
    def v(self):
        return self.weights.shape[1]

    def __len__(self):
        return self.k

    def union(self, other: SpikeMeasure) -> SpikeMeasure:
        return SpikeMeasure(np.vstack([self.thetas, other.thetas]), np.vstack([self.weights, other.weights]))

    def scaled(self, factor) -> SpikeMeasure:
        return SpikeMeasure(self.thetas, self.weights * factor)

    def to_dict(self, weights_ref=None):
        spikes = []
        for s in range(self.k):
            entry = {"t1_ms": float(self.thetas[s, 0]), "t2_ms": float(self.thetas[s, 1])}
            if weights_ref is None:
                entry["weights"] = self.weights[s].tolist()
            spikes.append(entry)
        out = {"v": self.v, "spikes": spikes}
        if weights_ref is not None:
            out["weights_ref"] = str(weights_ref)
        return out

    @classmethod
    def from_dict(cls, data, base_dir=None):
        spikes = data["spikes"]
        thetas = np.array([[s["t1_ms"], s["t2_ms"]] for s in spikes]).reshape(-1, 2)
        if "weights_ref" in data:
            from .mapfile import read_map

            ref = Path(data["weights_ref"])
            if base_dir is not None and not ref.is_absolute():
                ref = Path(base_dir) / ref
            arr, _ = read_map(ref)
            weights = arr.reshape(-1, arr.shape[-1]).T
        else:
            weights = np.array([s["weights"] for s in spikes]).reshape(len(spikes), data["v"])
        return cls(thetas, weights)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()), base_dir=Path(path).parent)


def forward(model: FingerprintModel, m: SpikeMeasure) -> np.ndarray:
    """``sum_s phi(theta_s) C_s^T``, shape ``(n_out, v)``."""
    if m.k == 0:
        return np.zeros((model.n_out, m.v))
    return model.atoms(m.thetas) @ m.weights


def adjoint_eval(model: FingerprintModel, x, theta) -> np.ndarray:
    """``eta(theta) = x^T phi(theta)``.

    For a single ``theta`` returns a length-``v`` vector; for a ``(n, 2)``
    batch returns ``(n, v)``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != model.n_out:
        raise ValueError(f"x has shape {x.shape}, model produces length-{model.n_out} atoms")
    single = np.ndim(theta) == 1
    out = model.atoms(as_thetas(theta)).T @ x
    return out[0] if single else out


def sgtv_norm(m: SpikeMeasure, beta, v=None) -> float:
    """``sum_s (1 - beta) |C_s|_1 + beta sqrt(v) |C_s|_2``."""
    return group_norm(m.weights.T, beta, v)


def group_norm(c, beta, v=None) -> float:
    """The same norm for a ``(v, k)`` matrix whose columns are mixture maps."""
    c = np.asarray(c, dtype=float)
    v = c.shape[0] if v is None else v
    if c.size == 0:
        return 0.0
    return float((1 - beta) * np.abs(c).sum() + beta * np.sqrt(v) * np.linalg.norm(c, axis=0).sum())


def log_distance(a, b):
    return np.linalg.norm(np.log(as_thetas(a))[:, None, :] - np.log(as_thetas(b))[None, :, :], axis=-1)


def merge_close_spikes(m: SpikeMeasure, tol=MERGE_TOL) -> SpikeMeasure:
    """Merge spikes closer than ``tol`` in log-(T1, T2).

    Merged weights are summed; the location is the mass-weighted mean of the
    log-locations. Clusters are formed transitively, so the result has no
    pair closer than ``tol`` and a second pass leaves it unchanged.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    thetas, weights = np.array(m.thetas), np.array(m.weights)
    while thetas.shape[0] > 1:
        dist = log_distance(thetas, thetas)
        np.fill_diagonal(dist, np.inf)
        close = dist <= tol
        if not close.any():
            break
        # connected components of the closeness graph
        labels = np.arange(thetas.shape[0])
        changed = True
        while changed:
            new = labels.copy()
            for i, j in zip(*np.nonzero(close)):
                new[i] = min(new[i], labels[j])
            changed = not np.array_equal(new, labels)
            labels = new
        groups = [np.flatnonzero(labels == g) for g in np.unique(labels)]
        logs = np.log(thetas)
        mass = weights.sum(axis=1)
        new_th, new_w = [], []
        for g in groups:
            w = mass[g]
            wts = w / w.sum() if w.sum() > 0 else np.full(g.size, 1.0 / g.size)
            new_th.append(np.exp(wts @ logs[g]))
            new_w.append(weights[g].sum(axis=0))
        thetas, weights = np.array(new_th), np.array(new_w)
    return SpikeMeasure(thetas, weights)
