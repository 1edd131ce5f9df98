"""Rate-distortion analytics for the fronthaul modeled as lossy distributed
source coding of jointly Gaussian edge updates.

Rates are in bits (``log2``).  The determinant of an empty principal
submatrix is taken to be 1.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import ChannelRealization, as_rng
from .edge import BeamformerSet, EdgeUpdate
from .errors import DimensionError, DomainError, EstimationError, FeasibilityError, NumericError

MAX_APS = 16
SIGMA_V_FLOOR = 1e-9
PSD_TOL = 1e-10


@dataclass
class SourceStats:
    """Edge-update covariance, L-DSC parameter and per-AP fronthaul rates.

    ``device_corr`` optionally holds the ``n_dev x n_dev`` Gram matrix
    ``g_k^T g_l / N`` of the normalized device updates used by the wireless
    term of the system distortion; when ``None`` every device pair takes the
    edge covariance entry of its two serving APs.
    """

    sigma_s: np.ndarray
    sigma_v: np.ndarray
    rates: np.ndarray
    device_corr: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.sigma_s, dtype=float)
        v = np.asarray(self.sigma_v, dtype=float)
        if v.ndim == 1:
            v = np.diag(v)
        n = s.shape[0]
        if s.shape != (n, n) or v.shape != (n, n):
            raise DimensionError("sigma_s and sigma_v must be square and equal-sized")
        if not np.allclose(v, np.diag(np.diag(v))):
            raise DomainError("sigma_v must be diagonal")
        self.sigma_s = 0.5 * (s + s.T)
        self.sigma_v = v
        self.rates = np.broadcast_to(np.asarray(self.rates, dtype=float), (n,)).copy()
        if np.any(self.rates < 0):
            raise DomainError("rates must be non-negative")
        if self.device_corr is not None:
            self.device_corr = np.asarray(self.device_corr, dtype=float)

    @property
    def n_ap(self) -> int:
        return self.sigma_s.shape[0]

    @property
    def v_diag(self) -> np.ndarray:
        return np.diag(self.sigma_v).copy()

    def wireless_gram(self, owner) -> np.ndarray:
        """Device-level correlation of the wireless term for serving APs ``owner``."""
        owner = np.asarray(owner)
        if self.device_corr is None:
            return self.sigma_s[np.ix_(owner, owner)]
        if self.device_corr.shape != (len(owner), len(owner)):
            raise DimensionError("device_corr must be n_dev x n_dev")
        return self.device_corr

    def with_sigma_v(self, v_diag) -> "SourceStats":
        return SourceStats(self.sigma_s, np.diag(np.asarray(v_diag, dtype=float)),
                           self.rates, self.device_corr)

    def to_dict(self) -> dict:
        d = {"sigma_s": self.sigma_s.tolist(), "sigma_v": self.v_diag.tolist(),
             "rates": self.rates.tolist()}
        if self.device_corr is not None:
            d["device_corr"] = self.device_corr.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "SourceStats":
        return cls(np.asarray(d["sigma_s"]), np.asarray(d["sigma_v"]), np.asarray(d["rates"]),
                   None if d.get("device_corr") is None else np.asarray(d["device_corr"]))


@dataclass
class DistortionReport:
    d_agg: float
    d_system: float
    wireless_term: float
    noise_term: float
    wired_term: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeasibilityReport:
    feasible: bool
    slack: dict = field(default_factory=dict)

    @property
    def tightest(self) -> tuple:
        return min(self.slack, key=self.slack.get)

    def to_dict(self) -> dict:
        return {"feasible": self.feasible,
                "slack": {",".join(map(str, k)): v for k, v in self.slack.items()}}


def check_psd(m, name="matrix"):
    m = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.max(np.abs(np.diag(m))))) if m.size else 1.0
    if np.linalg.eigvalsh(0.5 * (m + m.T))[0] < -PSD_TOL * scale:
        raise DomainError(f"{name} is not positive semidefinite")


def project_psd(m) -> np.ndarray:
    m = 0.5 * (np.asarray(m, dtype=float) + np.asarray(m, dtype=float).T)
    w, u = np.linalg.eigh(m)
    if w[0] >= 0:
        return m
    out = (u * np.clip(w, 0.0, None)) @ u.T
    return 0.5 * (out + out.T)


def estimate_sigma_s(subvectors) -> np.ndarray:
    """Sample second moment ``(1/m) s_i^T s_j`` of per-AP subvectors, made PSD."""
    s = np.asarray(subvectors, dtype=float)
    if s.ndim != 2 or s.shape[1] == 0:
        raise EstimationError("need a nonempty (n_ap, m) subsample")
    return project_psd(s @ s.T / s.shape[1])


def nonempty_subsets(n: int):
    """All nonempty subsets of ``range(n)``, the full set last."""
    if n > MAX_APS:
        raise DomainError(f"subset enumeration limited to {MAX_APS} APs")
    for size in range(1, n + 1):
        yield from itertools.combinations(range(n), size)


def _logdet(m) -> float:
    if m.size == 0:
        return 0.0
    sign, val = np.linalg.slogdet(m)
    if sign <= 0:
        raise NumericError("matrix is not positive definite")
    return val


def rate_requirements(sigma_s, v_diag) -> dict:
    """Minimum sum-rate (bits) for every nonempty subset of APs."""
    s = np.asarray(sigma_s, dtype=float)
    v = np.asarray(v_diag, dtype=float)
    n = s.shape[0]
    g = s + np.diag(v)
    ld_full = _logdet(g)
    log_v = np.log(v)
    subsets = list(nonempty_subsets(n))
    comp = {k: [j for j in range(n) if j not in k] for k in subsets}
    # batch the complement determinants by size
    ld_comp = {}
    for size in range(n):
        group = [k for k in subsets if len(comp[k]) == size]
        if not group:
            continue
        if size == 0:
            ld_comp.update({k: 0.0 for k in group})
            continue
        idx = np.array([comp[k] for k in group])
        sign, val = np.linalg.slogdet(g[idx[:, :, None], idx[:, None, :]])
        if np.any(sign <= 0):
            raise NumericError("matrix is not positive definite")
        ld_comp.update(zip(group, val.tolist()))
    return {k: 0.5 * (ld_full - ld_comp[k] - float(log_v[list(k)].sum())) / math.log(2.0)
            for k in subsets}


def rd_feasible(stats: SourceStats, tol: float = 1e-9) -> FeasibilityReport:
    check_psd(stats.sigma_s, "sigma_s")
    v = stats.v_diag
    if np.any(v <= 0):
        raise DomainError("sigma_v entries must be positive")
    req = rate_requirements(stats.sigma_s, v)
    slack = {k: float(np.sum(stats.rates[list(k)]) - r) for k, r in req.items()}
    return FeasibilityReport(all(sl >= -tol for sl in slack.values()), slack)


def aggregation_distortion(sigma_s, v_diag, c) -> float:
    """MMSE of ``c^T s`` from the Gaussian test-channel outputs ``s + v``."""
    s = np.asarray(sigma_s, dtype=float)
    c = np.asarray(c, dtype=float)
    g = s + np.diag(np.asarray(v_diag, dtype=float))
    y = s @ c
    try:
        explained = y @ np.linalg.solve(g, y)
    except np.linalg.LinAlgError as exc:
        raise NumericError("sigma_s + sigma_v is singular") from exc
    return float(c @ s @ c - explained)


def device_gains(bf: BeamformerSet, ch: ChannelRealization) -> np.ndarray:
    return bf.gains(ch)


def device_mismatch(bf: BeamformerSet, ch: ChannelRealization, v) -> np.ndarray:
    """``sqrt(v_k) - c_i beta_i^H H_ik alpha_k`` for every device ``k`` served by AP ``i``."""
    return np.sqrt(np.asarray(v, dtype=float)) - bf.c[ch.owner] * bf.gains(ch)


def per_ap_mismatch(bf: BeamformerSet, ch: ChannelRealization, v) -> np.ndarray:
    """``D_i = sum_{k in cell i} (sqrt(v_k) - c_i beta_i^H H_ik alpha_k)``."""
    g = bf.gains(ch)
    sv = np.sqrt(np.asarray(v, dtype=float))
    owner = ch.owner
    out = np.zeros(len(ch.topology), dtype=complex)
    np.add.at(out, owner, sv - bf.c[owner] * g)
    return out


def d_system(stats: SourceStats, bf: BeamformerSet, ch: ChannelRealization, v, eps) -> DistortionReport:
    n_ap = stats.n_ap
    if bf.beta.shape[0] != n_ap or bf.c.shape != (n_ap,) or len(ch.topology) != n_ap:
        raise DimensionError("stats, beamformers and channel disagree on the number of APs")
    if np.shape(v) != (bf.alpha.shape[0],):
        raise DimensionError("need one variance per device")
    d = device_mismatch(bf, ch, v)
    wireless = float(np.real(d.conj() @ stats.wireless_gram(ch.owner) @ d))
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (n_ap,))
    noise = float(np.sum(eps * bf.c ** 2 * np.sum(np.abs(bf.beta) ** 2, axis=1)))
    wired = aggregation_distortion(stats.sigma_s, stats.v_diag, bf.c)
    return DistortionReport(wired, wireless + noise + wired, wireless, noise, wired)


def ldsc_bound_decode(edge, stats: SourceStats, c, seed, check=True) -> np.ndarray:
    """Ideal L-DSC operating point via the Gaussian test channel.

    Each AP's update is observed through ``q_i = s_i + v_i`` with
    ``v_i ~ N(0, [sigma_v]_ii)``; the CS forms the linear MMSE estimate of
    ``sum_i c_i s_i`` coordinate by coordinate.
    """
    if check:
        rep = rd_feasible(stats)
        if not rep.feasible:
            raise FeasibilityError(f"rates infeasible for subset {rep.tightest}", rep.tightest)
    s = np.asarray([e.s if isinstance(e, EdgeUpdate) else e for e in edge], dtype=float)
    c = np.asarray(c, dtype=float)
    v = np.maximum(stats.v_diag, 0.0)
    rng = as_rng(seed)
    q = s + np.sqrt(v)[:, None] * rng.standard_normal(s.shape)
    g = stats.sigma_s + np.diag(v)
    w = np.linalg.solve(g, stats.sigma_s @ c)
    return w @ q
