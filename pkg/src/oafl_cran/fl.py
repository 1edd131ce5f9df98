"""Federated-learning core: tasks, local updates and their normalization, the
global model step, non-i.i.d. partitioning and the convergence bound."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ParameterError

# Updates with variance below this are treated as constant vectors.
ZERO_VARIANCE = 1e-24


@dataclass(frozen=True)
class GlobalModel:
    theta: np.ndarray
    eta: float
    round: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError("learning rate must be positive")
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], self.targets[idx], labels)


@dataclass(frozen=True)
class LocalUpdate:
    """A device update ``g`` together with its zero-mean, unit-variance normalization."""

    g: np.ndarray
    v: float
    gbar: float
    g_norm: np.ndarray

    @classmethod
    def from_gradient(cls, g) -> "LocalUpdate":
        g = np.asarray(g, dtype=float)
        gbar = float(g.mean())
        centered = g - gbar
        v = float(centered @ centered / g.size)
        if v < ZERO_VARIANCE:
            return cls(g, 0.0, gbar, np.zeros_like(g))
        return cls(g, v, gbar, centered / np.sqrt(v))

    def denormalize(self) -> np.ndarray:
        return np.sqrt(self.v) * self.g_norm + self.gbar


# --- tasks -------------------------------------------------------------------

class RidgeTask:
    """Least squares with an l2 penalty spread evenly over the samples.

    The total loss over all ``n_total`` samples is
    ``0.5 * ||X theta - y||^2 + 0.5 * reg * ||theta||^2``.
    """

    name = "ridge"

    def __init__(self, reg: float, n_total: int):
        self.reg = float(reg)
        self.n_total = int(n_total)

    def loss(self, theta, data: Dataset) -> float:
        r = data.features @ theta - data.targets
        share = len(data) / self.n_total
        return float(0.5 * r @ r + 0.5 * self.reg * share * theta @ theta)

    def gradient(self, theta, data: Dataset) -> np.ndarray:
        r = data.features @ theta - data.targets
        share = len(data) / self.n_total
        return data.features.T @ r + self.reg * share * theta

    def hessian(self, data: Dataset) -> np.ndarray:
        x = data.features
        share = len(data) / self.n_total
        return x.T @ x + self.reg * share * np.eye(x.shape[1])

    def constants(self, data: Dataset) -> tuple[float, float]:
        """Exact ``(mu, L)`` of the total loss over ``data``."""
        eig = np.linalg.eigvalsh(self.hessian(data))
        return float(eig[0]), float(eig[-1])

    def optimum(self, data: Dataset) -> np.ndarray:
        x = data.features
        share = len(data) / self.n_total
        a = x.T @ x + self.reg * share * np.eye(x.shape[1])
        return np.linalg.solve(a, x.T @ data.targets)

    def metric(self, theta, data: Dataset) -> float:
        r = data.features @ theta - data.targets
        return float(r @ r / len(data))


class LogisticTask:
    """Multinomial logistic regression, parameters ``[W.ravel(), b]``."""

    name = "logistic"

    def __init__(self, n_features: int, n_classes: int, reg: float, n_total: int):
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.reg = float(reg)
        self.n_total = int(n_total)

    @property
    def n_params(self) -> int:
        return self.n_features * self.n_classes + self.n_classes

    def _unpack(self, theta):
        w = theta[: self.n_features * self.n_classes].reshape(self.n_features, self.n_classes)
        return w, theta[self.n_features * self.n_classes:]

    def _probs(self, theta, x):
        w, b = self._unpack(theta)
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True), logits

    def loss(self, theta, data: Dataset) -> float:
        p, logits = self._probs(theta, data.features)
        y = data.targets.astype(int)
        logz = np.log(np.exp(logits).sum(axis=1))
        nll = float(np.sum(logz - logits[np.arange(len(y)), y]))
        share = len(data) / self.n_total
        return nll + 0.5 * self.reg * share * float(theta @ theta)

    def gradient(self, theta, data: Dataset) -> np.ndarray:
        p, _ = self._probs(theta, data.features)
        y = data.targets.astype(int)
        p[np.arange(len(y)), y] -= 1.0
        gw = data.features.T @ p
        gb = p.sum(axis=0)
        share = len(data) / self.n_total
        return np.concatenate([gw.ravel(), gb]) + self.reg * share * theta

    def constants(self, data: Dataset) -> tuple[float, float]:
        """``mu`` from the l2 term; ``L`` from the bound ``0.5 * ||[X 1]||_2^2 + reg``."""
        xa = np.hstack([data.features, np.ones((len(data), 1))])
        smax = np.linalg.norm(xa, 2)
        share = len(data) / self.n_total
        return self.reg * share, 0.5 * smax ** 2 + self.reg * share

    def metric(self, theta, data: Dataset) -> float:
        p, _ = self._probs(theta, data.features)
        return float(np.mean(p.argmax(axis=1) == data.targets.astype(int)))


# --- local and global steps --------------------------------------------------

def pad_even(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    return vec if vec.size % 2 == 0 else np.append(vec, 0.0)


def local_gradient(model: GlobalModel, shard: Dataset, task, local_steps: int = 1,
                   local_lr: float = 0.01) -> LocalUpdate:
    """Gradient of the shard loss at ``model.theta``.

    With ``local_steps > 1`` the device runs that many local gradient steps
    with ``local_lr`` and reports the accumulated model delta divided by
    ``local_lr``.
    """
    if len(shard) == 0:
        raise DataError("empty shard")
    if local_steps <= 1:
        return LocalUpdate.from_gradient(task.gradient(model.theta, shard))
    theta = model.theta.copy()
    for _ in range(local_steps):
        theta -= local_lr * task.gradient(theta, shard)
    return LocalUpdate.from_gradient((model.theta - theta) / local_lr)


def apply_global_update(model: GlobalModel, z_hat, gbar_all, eta: float | None = None) -> GlobalModel:
    """``theta <- theta - eta * (z_hat + sum_k gbar_k * 1)``."""
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.shape != model.theta.shape:
        raise DimensionError(f"z_hat has shape {z_hat.shape}, model has {model.theta.shape}")
    g_hat = z_hat + float(np.sum(gbar_all))
    step = model.eta if eta is None else eta
    return replace(model, theta=model.theta - step * g_hat, round=model.round + 1)


def decaying_lr_schedule(t: int) -> float:
    """The experimental CS learning rate ``1.5 / (1 + t/10)``."""
    return 1.5 / (1.0 + t / 10.0)


# --- data --------------------------------------------------------------------

def partition_dataset(data: Dataset, n_dev: int, q: int, seed, per_device: int | None = None):
    """Split ``data`` across devices, each drawing from ``q`` random classes.

    Samples are drawn without repetition from a shared pool, so shards are
    disjoint.  Returns a list of index arrays.
    """
    if data.labels is None:
        raise DataError("partitioning by class needs labels")
    classes = np.unique(data.labels)
    if not 1 <= q <= len(classes):
        raise ConfigError(f"Q={q} outside [1, {len(classes)}]")
    rng = np.random.default_rng(seed)
    if per_device is None:
        per_device = len(data) // n_dev
    pools = {c: list(rng.permutation(np.flatnonzero(data.labels == c))) for c in classes}
    shards = []
    for _ in range(n_dev):
        chosen = rng.choice(classes, size=q, replace=False)
        counts = np.full(q, per_device // q)
        counts[: per_device % q] += 1
        idx = []
        for c, n in zip(chosen, counts):
            pool = pools[c]
            if len(pool) < n:
                raise DataError(f"class {c} exhausted; lower samples per device")
            idx.extend(pool[:n])
            del pool[:n]
        shards.append(np.sort(np.asarray(idx, dtype=int)))
    return shards


def synthetic_ridge(n_samples: int, dim: int, seed, n_clusters: int = 10,
                    noise: float = 0.1, cluster_spread: float = 1.0) -> Dataset:
    """Linear-Gaussian regression data with cluster labels for heterogeneity."""
    rng = np.random.default_rng(seed)
    centers = cluster_spread * rng.standard_normal((n_clusters, dim))
    labels = rng.integers(n_clusters, size=n_samples)
    x = (centers[labels] + rng.standard_normal((n_samples, dim))) / np.sqrt(dim)
    w = rng.standard_normal(dim)
    y = x @ w + noise * rng.standard_normal(n_samples)
    return Dataset(x, y, labels)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped); big-endian header."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    magic, = struct.unpack(">I", raw[:4])
    if magic not in (0x00000801, 0x00000803):
        raise DataError(f"unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    shape = struct.unpack(">" + "I" * ndim, raw[4: 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise DataError("IDX payload size does not match header")
    return data.reshape(shape)


def load_mnist(directory, n_train: int | None = None, n_test: int | None = None, seed=0):
    """Load MNIST from IDX files in ``directory`` as flattened [0, 1] features."""
    directory = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise DataError(f"missing {stem} in {directory}")

    out = []
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        x = read_idx(find(f"{prefix}-images-idx3-ubyte")).reshape(-1, 28 * 28) / 255.0
        y = read_idx(find(f"{prefix}-labels-idx1-ubyte")).astype(int)
        if n is not None and n < len(y):
            idx = np.sort(np.random.default_rng(seed).choice(len(y), n, replace=False))
            x, y = x[idx], y[idx]
        out.append(Dataset(x, y.astype(float), y))
    return tuple(out)


# --- convergence bound -------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceParams:
    mu: float
    lipschitz: float
    initial_gap: float

    def __post_init__(self):
        if not 0 < self.mu <= self.lipschitz:
            raise ParameterError(f"need 0 < mu <= L, got mu={self.mu}, L={self.lipschitz}")


def convergence_bound(params: ConvergenceParams, d_system_history, n_params: int) -> np.ndarray:
    """Right-hand side of the optimality-gap bound after each round.

    Entry ``t-1`` bounds ``E[L(theta^{t+1})] - L*`` given the per-round system
    distortions ``D^{(1)}, ..., D^{(t)}``.
    """
    d = np.asarray(d_system_history, dtype=float)
    rho = 1.0 - params.mu / params.lipschitz
    out = np.empty(d.size)
    acc = 0.0
    for t in range(d.size):
        # acc_t = rho * acc_{t-1} + (N/L) D_t; 0**0 == 1 handles mu == L
        acc = rho * acc + n_params / params.lipschitz * d[t]
        out[t] = rho ** (t + 1) * params.initial_gap + acc
    return out


def convergence_limit(params: ConvergenceParams, d_const: float, n_params: int) -> float:
    """Limit of the bound for a constant per-round distortion."""
    return n_params / params.lipschitz * d_const / (params.mu / params.lipschitz)
