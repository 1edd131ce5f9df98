"""Over-the-air edge aggregation: real/complex packing, rank-1 transmit
signals under a per-channel-use power budget, and receive combining."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ChannelRealization, uplink_transmit
from .errors import ConstraintError, DimensionError

POWER_TOL = 1e-12


@dataclass
class BeamformerSet:
    """Transmit vectors ``alpha (n_dev, n_tx)``, receive vectors
    ``beta (n_ap, n_rx)``, fusion weights ``c (n_ap,)`` and power budgets."""

    alpha: np.ndarray
    beta: np.ndarray
    c: np.ndarray
    power_budget: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=complex)
        self.beta = np.asarray(self.beta, dtype=complex)
        self.c = np.asarray(self.c, dtype=float)
        self.power_budget = np.broadcast_to(
            np.asarray(self.power_budget, dtype=float), (self.alpha.shape[0],)).copy()

    def copy(self) -> "BeamformerSet":
        return BeamformerSet(self.alpha.copy(), self.beta.copy(), self.c.copy(),
                             self.power_budget.copy())

    def check_power(self):
        used = 2.0 * np.sum(np.abs(self.alpha) ** 2, axis=1)
        bad = np.flatnonzero(used > self.power_budget + POWER_TOL)
        if bad.size:
            raise ConstraintError(f"devices {bad.tolist()} exceed their power budget")

    def gains(self, ch: ChannelRealization) -> np.ndarray:
        """Effective scalar gain ``beta_i^H H_ik alpha_k`` of each device at its AP."""
        owner = ch.owner
        k = np.arange(self.alpha.shape[0])
        h = ch.h[owner, k]
        return np.einsum("kr,krt,kt->k", self.beta[owner].conj(), h, self.alpha)

    def to_dict(self) -> dict:
        pair = lambda z: np.stack([z.real, z.imag], axis=-1).tolist()
        return {"alpha": pair(self.alpha), "beta": pair(self.beta), "c": self.c.tolist(),
                "power_budget": self.power_budget.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BeamformerSet":
        cx = lambda a: np.asarray(a)[..., 0] + 1j * np.asarray(a)[..., 1]
        return cls(cx(d["alpha"]), cx(d["beta"]), np.asarray(d["c"]), np.asarray(d["power_budget"]))


@dataclass(frozen=True)
class EdgeUpdate:
    s: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"s": np.asarray(self.s).tolist()})

    @classmethod
    def from_json(cls, text) -> "EdgeUpdate":
        return cls(np.asarray(json.loads(text)["s"], dtype=float))


def to_complex(x) -> np.ndarray:
    """First half -> real part, second half -> imaginary part."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise DimensionError("length must be even")
    half = x.shape[-1] // 2
    out = np.empty(x.shape[:-1] + (half,), dtype=complex)
    out.real, out.imag = x[..., :half], x[..., half:]
    return out


def from_complex(r) -> np.ndarray:
    r = np.asarray(r)
    return np.concatenate([r.real, r.imag], axis=-1).astype(float)


def form_transmit_signal(r_k, alpha_k, power_budget: float | None = None) -> np.ndarray:
    """Rank-1 transmit matrix ``alpha_k r_k^T`` of shape ``(n_tx, C)``."""
    alpha_k = np.asarray(alpha_k, dtype=complex)
    if power_budget is not None and 2.0 * np.vdot(alpha_k, alpha_k).real > power_budget + POWER_TOL:
        raise ConstraintError("2 ||alpha||^2 exceeds the power budget")
    return np.outer(alpha_k, np.asarray(r_k))


def receive_combine(y_i, beta_i) -> np.ndarray:
    """``(beta_i^H Y_i)^T``: one complex sample per channel use."""
    y_i = np.asarray(y_i)
    beta_i = np.asarray(beta_i)
    if y_i.ndim != 2 or beta_i.shape != (y_i.shape[0],):
        raise DimensionError(f"cannot combine Y {y_i.shape} with beta {beta_i.shape}")
    return beta_i.conj() @ y_i


def edge_aggregate_round(g_norms: Sequence[np.ndarray], ch: ChannelRealization,
                         bf: BeamformerSet, seed) -> list[EdgeUpdate]:
    """Stage 1 end to end: pack, transmit, add noise, combine, unpack.

    ``g_norms[k]`` is the normalized update of device ``k`` (even length).
    """
    bf.check_power()
    r = to_complex(np.asarray(g_norms, dtype=float))
    x = bf.alpha[:, :, None] * r[:, None, :]
    y = uplink_transmit(ch, x, seed)
    return [EdgeUpdate(from_complex(receive_combine(y[i], bf.beta[i]))) for i in range(y.shape[0])]
