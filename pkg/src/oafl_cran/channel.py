"""MIMO Cloud-RAN uplink channel: pathloss model, block-fading realizations and
the noisy multiple-access transmission seen by each AP.

All dB quantities are converted to linear scale once, when a
:class:`PathlossParams` is built; everything downstream is linear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError, TopologyError

Topology = tuple[tuple[int, ...], ...]


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def complex_normal(rng: np.random.Generator, shape, variance=1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with the given variance."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Dims:
    n_ap: int
    n_dev: int
    n_rx: int
    n_tx: int

    def __post_init__(self):
        for name in ("n_ap", "n_dev", "n_rx", "n_tx"):
            if int(getattr(self, name)) < 1:
                raise DimensionError(f"{name} must be positive")


def validate_topology(topology: Sequence[Sequence[int]], n_ap: int, n_dev: int) -> Topology:
    """Check that ``topology`` partitions ``range(n_dev)`` into ``n_ap`` cells."""
    cells = tuple(tuple(int(k) for k in cell) for cell in topology)
    if len(cells) != n_ap:
        raise TopologyError(f"expected {n_ap} cells, got {len(cells)}")
    flat = [k for cell in cells for k in cell]
    if len(flat) != len(set(flat)):
        raise TopologyError("cells are not pairwise disjoint")
    if sorted(flat) != list(range(n_dev)):
        raise TopologyError(f"cells do not cover devices 0..{n_dev - 1}")
    return cells


def contiguous_topology(sizes: Sequence[int]) -> Topology:
    """Consecutive device blocks, e.g. ``(5, 8, 7)`` gives three cells serving 20 devices."""
    cells, start = [], 0
    for s in sizes:
        cells.append(tuple(range(start, start + int(s))))
        start += int(s)
    return tuple(cells)


def serving_ap(topology: Topology, n_dev: int) -> np.ndarray:
    owner = np.empty(n_dev, dtype=int)
    for i, cell in enumerate(topology):
        owner[list(cell)] = i
    return owner


@dataclass(frozen=True)
class PathlossParams:
    """Large-scale gain ``G_R,i * G_T,k * nu * delta_ik^-alpha``.

    Gains and reference loss are given in dB and stored linearly in
    ``gain`` (shape ``(n_ap, n_dev)``, power gain per AP/device pair).
    """

    antenna_gain_ap: np.ndarray
    antenna_gain_dev: np.ndarray
    exponent: float
    reference_loss: float
    distance: np.ndarray
    gain: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dist = np.atleast_2d(np.asarray(self.distance, dtype=float))
        n_ap, n_dev = dist.shape
        g_ap = np.broadcast_to(np.asarray(self.antenna_gain_ap, dtype=float), (n_ap,))
        g_dev = np.broadcast_to(np.asarray(self.antenna_gain_dev, dtype=float), (n_dev,))
        if not self.exponent > 0:
            raise ParameterError("pathloss exponent must be positive")
        if np.any(dist <= 0):
            raise ParameterError("distances must be positive")
        gain = (
            db_to_linear(g_ap)[:, None]
            * db_to_linear(g_dev)[None, :]
            * db_to_linear(self.reference_loss)
            * dist ** (-float(self.exponent))
        )
        object.__setattr__(self, "distance", dist)
        object.__setattr__(self, "antenna_gain_ap", np.array(g_ap))
        object.__setattr__(self, "antenna_gain_dev", np.array(g_dev))
        object.__setattr__(self, "gain", gain)

    @classmethod
    def uniform(cls, n_ap, n_dev, *, gain_ap_db=10.0, gain_dev_db=5.0, exponent=3.8,
                reference_loss_db=-60.0, distance_m=30.0):
        """Same geometry for every pair; defaults give 30 m links with exponent 3.8."""
        return cls(
            antenna_gain_ap=np.full(n_ap, gain_ap_db),
            antenna_gain_dev=np.full(n_dev, gain_dev_db),
            exponent=exponent,
            reference_loss=reference_loss_db,
            distance=np.full((n_ap, n_dev), distance_m),
        )

    @classmethod
    def unit(cls, n_ap, n_dev):
        """Unit large-scale gain (raw Rayleigh fading)."""
        return cls.uniform(n_ap, n_dev, gain_ap_db=0.0, gain_dev_db=0.0,
                           reference_loss_db=0.0, distance_m=1.0)


@dataclass(frozen=True)
class ChannelRealization:
    """One block-fading realization.

    ``h[i, k]`` is the ``n_rx x n_tx`` matrix from device ``k`` to AP ``i``.
    ``noise_variance[i]`` is the per-entry variance of the AWGN at AP ``i``.
    """

    h: np.ndarray
    noise_variance: np.ndarray
    topology: Topology

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.ndim != 4:
            raise DimensionError("h must have shape (n_ap, n_dev, n_rx, n_tx)")
        n_ap, n_dev = h.shape[:2]
        nv = np.broadcast_to(np.asarray(self.noise_variance, dtype=float), (n_ap,)).copy()
        if np.any(nv < 0):
            raise ParameterError("noise variance must be non-negative")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "noise_variance", nv)
        object.__setattr__(self, "topology", validate_topology(self.topology, n_ap, n_dev))

    @property
    def dims(self) -> Dims:
        n_ap, n_dev, n_rx, n_tx = self.h.shape
        return Dims(n_ap, n_dev, n_rx, n_tx)

    @property
    def owner(self) -> np.ndarray:
        return serving_ap(self.topology, self.h.shape[1])

    def served_channel(self, k: int) -> np.ndarray:
        """Channel from device ``k`` to its serving AP."""
        return self.h[self.owner[k], k]

    def aggregate_noise_power(self, n_params: int) -> np.ndarray:
        """``eps_i = E||Z_i||_F^2 / N`` for ``C = N/2`` channel uses."""
        n_rx = self.h.shape[2]
        channel_uses = n_params / 2
        return n_rx * self.noise_variance * channel_uses / n_params

    def to_json(self) -> str:
        return json.dumps({
            "h": np.stack([self.h.real, self.h.imag], axis=-1).tolist(),
            "noise_variance": self.noise_variance.tolist(),
            "topology": [list(c) for c in self.topology],
        })

    @classmethod
    def from_json(cls, text: str) -> "ChannelRealization":
        d = json.loads(text)
        pairs = np.asarray(d["h"], dtype=float)
        return cls(pairs[..., 0] + 1j * pairs[..., 1], np.asarray(d["noise_variance"]),
                   tuple(tuple(c) for c in d["topology"]))


def sample_channel(pathloss: PathlossParams, dims: Dims, topology, seed,
                   noise_variance=0.0) -> ChannelRealization:
    """Draw ``H_ik = sqrt(gain_ik) * H~_ik`` with i.i.d. CN(0, 1) entries of ``H~``."""
    topo = validate_topology(topology, dims.n_ap, dims.n_dev)
    if pathloss.gain.shape != (dims.n_ap, dims.n_dev):
        raise DimensionError("pathloss geometry does not match dims")
    rng = as_rng(seed)
    h_tilde = complex_normal(rng, (dims.n_ap, dims.n_dev, dims.n_rx, dims.n_tx))
    h = np.sqrt(pathloss.gain)[:, :, None, None] * h_tilde
    return ChannelRealization(h, noise_variance, topo)


def uplink_transmit(ch: ChannelRealization, signals, seed) -> np.ndarray:
    """Received matrices ``Y_i = sum_{k in cell i} H_ik X_k + Z_i``.

    ``signals`` has shape ``(n_dev, n_tx, C)``; the result ``(n_ap, n_rx, C)``.
    Noise depends only on ``seed`` and the shapes, so two calls with the same
    seed add identical noise.
    """
    x = np.asarray(signals)
    n_ap, n_dev, n_rx, n_tx = ch.h.shape
    if x.ndim != 3 or x.shape[0] != n_dev or x.shape[1] != n_tx:
        raise DimensionError(f"signals must have shape ({n_dev}, {n_tx}, C), got {x.shape}")
    c = x.shape[2]
    rng = as_rng(seed)
    z = complex_normal(rng, (n_ap, n_rx, c)) * np.sqrt(ch.noise_variance)[:, None, None]
    y = z.astype(complex)
    for i, cell in enumerate(ch.topology):
        if cell:
            idx = list(cell)
            y[i] += np.einsum("krt,ktc->rc", ch.h[i, idx], x[idx])
    return y
