"""Alternating optimization of transmit/receive beamformers, fusion weights
and the L-DSC parameter, minimizing the per-round system distortion.

Stages, in sweep order:

* ``alpha_k`` -- convex QCQP over a Euclidean ball, solved as a trust-region
  subproblem by safeguarded Newton iteration on the Lagrange multiplier;
* ``beta_i`` -- closed-form regularized least squares;
* ``sigma_v`` -- majorization-minimization, each surrogate solved by a
  log-barrier Newton method over the diagonal entries;
* ``c`` -- closed-form normal equations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelRealization, as_rng, complex_normal
from .edge import BeamformerSet
from .errors import DomainError, FeasibilityError, StageError
from .ldsc import (
    SIGMA_V_FLOOR,
    SourceStats,
    aggregation_distortion,
    d_system,
    device_mismatch,
    nonempty_subsets,
    rd_feasible,
)

log = logging.getLogger(__name__)

LOG2E = 1.0 / math.log(2.0)
BETA_STATIONARITY_TOL = 1e-9
C_STATIONARITY_TOL = 1e-4


# --- trust-region subproblem -------------------------------------------------

@dataclass
class TRSResult:
    x: np.ndarray
    multiplier: float
    kkt_residual: float
    interior: bool
    regularized: bool = False


def solve_trs(q, b, radius_sq: float) -> TRSResult:
    """Minimize ``x^H Q x - 2 Re(b^H x)`` subject to ``||x||^2 <= radius_sq``.

    ``Q`` is Hermitian and expected PSD; slightly indefinite input is
    eigenvalue-clipped and reported as ``regularized``.
    """
    q = 0.5 * (np.asarray(q) + np.asarray(q).conj().T)
    b = np.asarray(b)
    # the minimizer is invariant to a common scaling of q and b
    sc = max(float(np.max(np.abs(q), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    if 0.0 < sc < np.inf and not 1e-100 < sc < 1e100:
        res = solve_trs(q / sc, b / sc, radius_sq)
        return replace(res, multiplier=res.multiplier * sc)
    w, u = np.linalg.eigh(q)
    scale = max(float(np.max(np.abs(w))), 1e-300)
    regularized = bool(w[0] < -1e-10 * scale)
    w = np.where(np.abs(w) <= 1e-13 * scale, 0.0, w)
    w = np.clip(w, 0.0, None)
    bp = u.conj().T @ b
    radius = math.sqrt(max(radius_sq, 0.0))
    bnorm = float(np.linalg.norm(b))

    def x_of(lam):
        return u @ (bp / (w + lam))

    if radius == 0.0 or bnorm == 0.0:
        x = np.zeros_like(b, dtype=complex)
        lam = 0.0 if bnorm == 0.0 else bnorm / max(radius, 1e-300)
        return TRSResult(x, 0.0 if radius == 0.0 and bnorm == 0.0 else lam,
                         _kkt(q, b, x, lam, radius_sq), bnorm == 0.0, regularized)

    null = w == 0.0
    null_energy = float(np.sum(np.abs(bp[null]) ** 2))
    if null_energy <= (1e-14 * bnorm) ** 2:
        coeff = np.where(null, 0.0, bp / np.where(null, 1.0, w))
        x0 = u @ coeff
        # strictly inside: accept the unconstrained minimizer; a violation of
        # more than 1e-12 relative sends us to the boundary
        if np.vdot(x0, x0).real <= radius_sq * (1 + 1e-12):
            return TRSResult(x0, 0.0, _kkt(q, b, x0, 0.0, radius_sq), True, regularized)

    # boundary: ||x(lam)|| = radius.  phi(lam) = 1/||x(lam)|| - 1/radius is
    # concave and increasing, so Newton from the left converges monotonically;
    # bisection on [0, ||b||/radius] guards the degenerate cases
    e2 = np.abs(bp) ** 2
    inv_r = 1.0 / radius

    def phi(lam):
        den = w + lam
        if np.any((den == 0.0) & (e2 > 0)):
            return -inv_r, np.inf
        nz = den > 0
        n2 = float(np.sum(e2[nz] / den[nz] ** 2))
        nrm = math.sqrt(n2)
        return 1.0 / nrm - inv_r, float(np.sum(e2[nz] / den[nz] ** 3)) / (nrm * n2)

    lo, hi = 0.0, bnorm / radius
    val, _ = phi(hi)
    if val <= 0.0:
        lam = hi
    else:
        lam = 0.0
        for _ in range(200):
            val, slope = phi(lam)
            if val >= 0.0:
                hi = lam
            else:
                lo = lam
            if abs(val) <= 8 * np.finfo(float).eps * inv_r or hi - lo <= 4 * np.finfo(float).eps * hi:
                break
            nxt = lam - val / slope if np.isfinite(slope) and slope > 0 else -1.0
            lam = nxt if lo < nxt < hi else 0.5 * (lo + hi)
    x = x_of(lam)
    x *= radius / np.linalg.norm(x)
    return TRSResult(x, lam, _kkt(q, b, x, lam, radius_sq), False, regularized)


def _kkt(q, b, x, lam, radius_sq) -> float:
    """Relative residual of stationarity plus complementary slackness."""
    stat = np.linalg.norm(q @ x + lam * x - b)
    scale = np.linalg.norm(b) + np.linalg.norm(q @ x) + lam * np.linalg.norm(x)
    comp = lam * abs(radius_sq - np.vdot(x, x).real)
    cscale = lam * radius_sq
    res = stat / scale if scale > 0 else stat
    if cscale > 0:
        res = max(res, comp / cscale)
    return float(res)


# --- helpers shared by the block solvers -------------------------------------

def _cell_sums(ch: ChannelRealization, v) -> np.ndarray:
    out = np.zeros(len(ch.topology))
    np.add.at(out, ch.owner, np.sqrt(np.asarray(v, dtype=float)))
    return out


def _ap_gains(bf: BeamformerSet, ch: ChannelRealization) -> np.ndarray:
    out = np.zeros(len(ch.topology), dtype=complex)
    np.add.at(out, ch.owner, bf.gains(ch))
    return out


def _cell_corr(stats: SourceStats, ch: ChannelRealization) -> np.ndarray:
    """AP-level correlation: ``sigma_s``, or the cell-block means of the device Gram."""
    if stats.device_corr is None:
        return stats.sigma_s
    r = stats.wireless_gram(ch.owner)
    owner = ch.owner
    n_ap = len(ch.topology)
    out = np.zeros((n_ap, n_ap))
    for i in range(n_ap):
        for j in range(n_ap):
            blk = r[np.ix_(owner == i, owner == j)]
            out[i, j] = blk.mean() if blk.size else 0.0
    return out


def _received(i, bf, ch) -> np.ndarray:
    """Rows ``H_ik alpha_k`` for the devices ``k`` of cell ``i``."""
    cell = list(ch.topology[i])
    if not cell:
        return np.zeros((0, ch.h.shape[2]), dtype=complex)
    return np.einsum("krt,kt->kr", ch.h[i, cell], bf.alpha[cell])


def system_objective(bf, stats, ch, v, eps) -> float:
    return d_system(stats, bf, ch, v, eps).d_system


def _wireless_grad_beta(i, bf, stats, ch, v, eps) -> np.ndarray:
    """d objective / d conj(beta_i) (Wirtinger), zero at a stationary point."""
    r = stats.wireless_gram(ch.owner)
    d = device_mismatch(bf, ch, v)
    cell = list(ch.topology[i])
    m = _received(i, bf, ch)
    eps_i = float(np.broadcast_to(eps, (len(ch.topology),))[i])
    # d_l = sqrt(v_l) - c_i beta_i^H m_l
    return -bf.c[i] * (np.conj(r[cell] @ d) @ m) + eps_i * bf.c[i] ** 2 * bf.beta[i]


# --- block solvers -----------------------------------------------------------

def alpha_subproblem(k, bf: BeamformerSet, stats: SourceStats, ch: ChannelRealization, v):
    """Quadratic form ``(Q, b)`` of the objective in ``alpha_k``."""
    r = stats.wireless_gram(ch.owner)
    i = int(ch.owner[k])
    u = ch.h[i, k].T @ bf.beta[i].conj()  # gain_k = u^T alpha_k
    d = device_mismatch(bf, ch, v)
    # correlation of device k with every other device's mismatch, plus its own target
    qv = r[k] @ d - r[k, k] * d[k] + r[k, k] * math.sqrt(float(v[k]))
    ci = bf.c[i]
    Q = ci ** 2 * r[k, k] * np.outer(u.conj(), u)
    b = ci * qv * u.conj()
    return Q, b


def solve_alpha_k(k, bf, stats, ch, v, flags=None) -> TRSResult:
    Q, b = alpha_subproblem(k, bf, stats, ch, v)
    res = solve_trs(Q, b, bf.power_budget[k] / 2.0)
    if res.regularized and flags is not None:
        flags.append(f"alpha[{k}]: indefinite quadratic form regularized")
    return res


def beta_closed_form_literal(i, bf, stats, ch, v, eps) -> np.ndarray:
    """The literal closed form for ``beta_i`` (see :func:`solve_beta_i`)."""
    rho = _cell_corr(stats, ch)
    n_ap = len(ch.topology)
    a = _cell_sums(ch, v)
    eps_i = float(np.broadcast_to(eps, (n_ap,))[i])
    m = np.stack([_received(j, bf, ch).sum(axis=0) for j in range(n_ap)])
    lhs = eps_i * bf.c[i] * np.eye(ch.h.shape[2], dtype=complex)
    rhs = np.zeros(ch.h.shape[2], dtype=complex)
    for j in range(n_ap):
        lhs += rho[i, j] * np.outer(m[i].conj(), m[j])
        rhs += rho[i, j] * a[j] * m[i].conj()
    return np.conj(np.linalg.lstsq(lhs, rhs, rcond=None)[0])


def solve_beta_i(i, bf, stats, ch, v, eps, flags=None) -> np.ndarray:
    """Minimizer of the objective over ``beta_i``.

    The literal closed form is tried first and kept when it is
    stationary; otherwise the normal equations assembled from the objective
    are solved and the substitution is flagged.
    """
    n_ap = len(ch.topology)
    if bf.c[i] == 0.0:
        return bf.beta[i].copy()
    scale = _beta_scale(i, bf, stats, ch, v, eps)
    try:
        cand = beta_closed_form_literal(i, bf, stats, ch, v, eps)
        trial = bf.copy()
        trial.beta[i] = cand
        resid = np.linalg.norm(_wireless_grad_beta(i, trial, stats, ch, v, eps))
        if np.all(np.isfinite(cand)) and resid <= BETA_STATIONARITY_TOL * scale:
            return cand
    except np.linalg.LinAlgError:
        pass
    if flags is not None:
        flags.append(f"beta[{i}]: literal closed form not stationary, used normal equations")

    r = stats.wireless_gram(ch.owner)
    cell = list(ch.topology[i])
    m = _received(i, bf, ch)
    d_out = device_mismatch(bf, ch, v)
    d_out[cell] = 0.0
    eps_i = float(np.broadcast_to(eps, (n_ap,))[i])
    ci = bf.c[i]
    r_cc = r[np.ix_(cell, cell)]
    sv = np.sqrt(np.asarray(v, dtype=float))[cell]
    # with w = conj(beta_i): (eps c I + c M^H R_CC M) w = M^H (R_CC sqrt(v_C) + R_C. d_out)
    lhs = eps_i * ci * np.eye(m.shape[1]) + ci * (m.conj().T @ r_cc @ m)
    rhs = m.conj().T @ (r_cc @ sv + r[cell] @ d_out)
    w = None
    if eps_i > 0:
        try:
            w = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            pass
    if w is None:
        if flags is not None:
            flags.append(f"beta[{i}]: singular normal equations, least-squares solve")
        w = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return np.conj(w)


def _beta_scale(i, bf, stats, ch, v, eps) -> float:
    """Magnitude of the individual gradient contributions, for relative tests."""
    r = stats.wireless_gram(ch.owner)
    cell = list(ch.topology[i])
    m = _received(i, bf, ch)
    sv = np.sqrt(np.asarray(v, dtype=float))
    eps_i = float(np.broadcast_to(eps, (len(ch.topology),))[i])
    return float(abs(bf.c[i]) * np.linalg.norm(m) * np.linalg.norm(np.abs(r[cell]) @ sv)
                 + eps_i * bf.c[i] ** 2 * np.linalg.norm(bf.beta[i])) + 1e-300


def c_system(bf, stats, ch, v, eps):
    """Matrices of the quadratic in ``c``: objective = c^T K c - 2 c^T y + const."""
    r = stats.wireless_gram(ch.owner)
    n_ap = len(ch.topology)
    owner = ch.owner
    p = np.zeros((len(owner), n_ap), dtype=complex)
    p[np.arange(len(owner)), owner] = bf.gains(ch)
    sv = np.sqrt(np.asarray(v, dtype=float))
    T = np.real(p.conj().T @ r @ p)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (n_ap,))
    omega = np.diag(eps * np.sum(np.abs(bf.beta) ** 2, axis=1))
    s = stats.sigma_s
    m = s - s @ np.linalg.solve(s + stats.sigma_v, s.T)
    k = T + omega + 0.5 * (m + m.T)
    y = np.real(p.conj().T @ r @ sv)
    literal_y = _cell_corr(stats, ch) @ (np.real(_ap_gains(bf, ch)) * _cell_sums(ch, v))
    return k, y, literal_y


def solve_c(bf, stats, ch, v, eps, flags=None) -> np.ndarray:
    """Fusion weights minimizing the objective for fixed beamformers and sigma_v.

    The literal closed form is evaluated first; if its stationarity
    residual exceeds ``1e-4`` of the gradient scale, the normal equations
    assembled from the objective are solved instead and the discrepancy is
    flagged.
    """
    k, y, literal_y = c_system(bf, stats, ch, v, eps)

    def solve(rhs):
        try:
            return np.linalg.solve(k, rhs)
        except np.linalg.LinAlgError:
            if flags is not None:
                flags.append("c: singular system, regularized solve")
            reg = 1e-12 * max(np.trace(k), 1e-300)
            return np.linalg.solve(k + reg * np.eye(len(rhs)), rhs)

    c_lit = solve(literal_y)
    scale = np.linalg.norm(k @ c_lit) + np.linalg.norm(y) + 1e-300
    if np.linalg.norm(k @ c_lit - y) <= C_STATIONARITY_TOL * scale:
        return c_lit
    if flags is not None:
        flags.append("c: literal closed form not stationary, used normal equations")
    log.debug("c closed form residual %.3e, re-solving normal equations",
              np.linalg.norm(k @ c_lit - y) / scale)
    return solve(y)


# --- sigma_v by majorization-minimization ------------------------------------

@dataclass
class SurrogateContext:
    """Linearization data of the rate constraints at the current point."""

    b: np.ndarray
    g_mat: np.ndarray
    e: dict
    f: dict
    lin: np.ndarray      # (n_subsets, n_ap) coefficients of diag(sigma_v)
    const: np.ndarray    # xi_K for every subset
    subsets: list

    def constraint_values(self, x, rates) -> np.ndarray:
        logs = np.log2(x)
        out = self.lin @ x + self.const
        for j, k in enumerate(self.subsets):
            out[j] -= 0.5 * logs[list(k)].sum() + np.sum(rates[list(k)])
        return out


def build_surrogate(sigma_s, x_hat, c) -> SurrogateContext:
    s = np.asarray(sigma_s, dtype=float)
    n = s.shape[0]
    g = s + np.diag(x_hat)
    b = np.linalg.solve(g, s @ c)
    subsets = list(nonempty_subsets(n))
    lin = np.zeros((len(subsets), n))
    const = np.zeros(len(subsets))
    e_all, f_all = {}, {}
    for j, k in enumerate(subsets):
        kk = list(k)
        kc = [i for i in range(n) if i not in k]
        if kc:
            e = s[np.ix_(kk, kc)] @ np.linalg.inv(g[np.ix_(kc, kc)])
            f = g[np.ix_(kk, kk)] - e @ s[np.ix_(kc, kk)]
        else:
            e = np.zeros((len(kk), 0))
            f = g
        f = 0.5 * (f + f.T)
        finv = np.linalg.inv(f)
        lin[j, kk] = 0.5 * LOG2E * np.diag(finv)
        if kc:
            lin[j, kc] = 0.5 * LOG2E * np.diag(e.T @ finv @ e)
            inner = (s[np.ix_(kk, kk)] + e @ s[np.ix_(kc, kc)] @ e.T
                     - e @ s[np.ix_(kc, kk)] - s[np.ix_(kk, kc)] @ e.T)
        else:
            inner = s
        sign, logdet = np.linalg.slogdet(f)
        const[j] = (0.5 * LOG2E * np.trace(finv @ inner) + 0.5 * logdet * LOG2E
                    - 0.5 * len(kk) * LOG2E)
        e_all[k], f_all[k] = e, f
    return SurrogateContext(b, g, e_all, f_all, lin, const, subsets)


def sigma_v_objective(sigma_s, x, c) -> float:
    """``c^T S (S + diag(x))^-1 S c`` (maximized by the sigma_v stage)."""
    s = np.asarray(sigma_s, dtype=float)
    y = s @ c
    return float(y @ np.linalg.solve(s + np.diag(x), y))


def _barrier_solve(weights, constraints, z0, *, rel_gap, mu=50.0, stop=None, max_newton=50,
                   max_outer=40):
    """Minimize ``weights @ z`` subject to ``constraints(z) < 0``.

    ``constraints(z, derivs)`` returns ``(values, gradients, hessian_diagonals)``
    (derivatives only when ``derivs``); every constraint Hessian is diagonal.
    Stops once the duality-gap bound ``m / t`` falls below ``rel_gap`` times
    the current objective magnitude.
    """
    z = np.asarray(z0, dtype=float).copy()
    vals, _, _ = constraints(z, False)
    if not (vals < 0).all():
        raise ValueError("barrier start is not strictly feasible")
    w = np.asarray(weights, dtype=float)
    w = w / max(float(np.abs(w).sum()), 1e-300)
    m = len(vals)
    # start at the t for which z is closest to the central path
    _, grads, hdiag = constraints(z, True)
    inv = 1.0 / (-vals)
    g_bar = grads.T @ inv
    h_bar = (grads.T * inv ** 2) @ grads + np.diag(hdiag.T @ inv)
    t = 1.0 / max(abs(float(w @ z)), 1e-12)
    try:
        hw = np.linalg.solve(h_bar, w)
        t_fit = -float(g_bar @ hw) / float(w @ hw)
        if np.isfinite(t_fit) and t_fit > t:
            t = t_fit
    except np.linalg.LinAlgError:
        pass

    def phi(zz):
        vv, _, _ = constraints(zz, False)
        if not (vv < 0).all():
            return np.inf
        return t * (w @ zz) - np.log(-vv).sum()

    for _ in range(max_outer):
        for _ in range(max_newton):
            vals, grads, hdiag = constraints(z, True)
            inv = 1.0 / (-vals)
            grad = t * w + grads.T @ inv
            hess = (grads.T * inv ** 2) @ grads + np.diag(hdiag.T @ inv)
            try:
                dz = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                dz = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec = -grad @ dz
            if dec <= 1e-8:
                break
            # convexity makes the linearized boundary an upper bound on the step
            slope = grads @ dz
            pos = slope > 0
            step = 1.0
            if pos.any():
                step = min(1.0, 0.99 * float(np.min(-vals[pos] / slope[pos])))
            f0 = t * (w @ z) - np.log(-vals).sum()
            while step > 1e-12:
                if phi(z + step * dz) <= f0 - 0.25 * step * dec:
                    break
                step *= 0.5
            else:
                break
            z = z + step * dz
        if stop is not None and stop(z):
            return z
        if m / t <= rel_gap * max(abs(float(w @ z)), 1e-300):
            return z
        t *= mu
    return z


def _surrogate_constraints(ctx: SurrogateContext, rates, floor):
    """Surrogate rate constraints followed by the lower bounds ``floor - x < 0``."""
    ns, n = ctx.lin.shape
    masks = np.zeros((ns, n))
    for j, k in enumerate(ctx.subsets):
        masks[j, list(k)] = 1.0
    half = 0.5 * LOG2E * masks
    shift = ctx.const - masks @ rates
    grads = np.zeros((ns + n, n))
    grads[ns:] = -np.eye(n)
    hd = np.zeros((ns + n, n))

    def cons(x, derivs=True):
        vals = np.empty(ns + n)
        vals[ns:] = floor - x
        if (x <= floor).any():
            vals[:ns] = np.inf
            return vals, None, None
        vals[:ns] = ctx.lin @ x + shift - half @ np.log(x)
        if not derivs:
            return vals, None, None
        inv = 1.0 / x
        grads[:ns] = ctx.lin - half * inv
        hd[:ns] = half * inv * inv
        return vals, grads, hd

    return cons


def _phase_one(cons, x0):
    """Find a strictly feasible point of ``cons`` near ``x0`` (or ``None``)."""
    n = len(x0)
    vals, _, _ = cons(x0, False)
    if not np.all(np.isfinite(vals)):
        return None
    s0 = float(np.max(vals)) + 1.0

    def cons1(z, derivs=True):
        x, s = z[:n], z[n]
        v, g, h = cons(x, derivs)
        if g is None:
            return v - s, None, None
        return v - s, np.hstack([g, -np.ones((len(v), 1))]), np.hstack([h, np.zeros((len(v), 1))])

    w = np.zeros(n + 1)
    w[n] = 1.0
    stop = lambda z: z[n] < -1e-10
    z = _barrier_solve(w, cons1, np.append(x0, s0), rel_gap=1e-9, stop=stop)
    if z[n] >= -1e-12:
        return None
    return z[:n]


@dataclass
class MMResult:
    v_diag: np.ndarray
    objective_trace: list
    feasible_trace: list
    iterations: int


def _diag_scale(s) -> np.ndarray:
    """Per-AP standard deviations; rate constraints and the objective are
    invariant under this diagonal rescaling, which equalizes conditioning."""
    d = np.sqrt(np.clip(np.diag(s), 0.0, None))
    return np.where(d > 0, d, 1.0)


def feasible_start(sigma_s, rates, max_doublings=200) -> np.ndarray:
    """Smallest ``tau * diag(sigma_s)`` on a doubling ladder meeting every rate constraint."""
    s = np.asarray(sigma_s, dtype=float)
    var = _diag_scale(s) ** 2
    tau = SIGMA_V_FLOOR
    last = None
    for _ in range(max_doublings):
        tau *= 2.0
        rep = rd_feasible(SourceStats(s, tau * var, rates))
        if rep.feasible:
            return tau * var
        last = rep
    raise FeasibilityError(
        f"no feasible sigma_v; tightest subset {last.tightest} short by "
        f"{-last.slack[last.tightest]:.3g} bits", last.tightest)


def mm_sigma_v(stats: SourceStats, c, max_iters: int = 100, tol: float = 1e-10) -> MMResult:
    """Maximize ``c^T S (S + V)^-1 S c`` over diagonal ``V`` under the rate region.

    Works in per-AP normalized units (unit diagonal of ``S``); ``V`` never
    drops below ``SIGMA_V_FLOOR`` times the AP's variance.
    """
    d = _diag_scale(stats.sigma_s)
    s = stats.sigma_s / np.outer(d, d)
    c = np.asarray(c, dtype=float) * d
    rates = stats.rates
    floor = SIGMA_V_FLOOR

    x = np.maximum(stats.v_diag / d ** 2, 2 * floor)
    # warm start: inflate the given point until it is feasible again
    for _ in range(60):
        if rd_feasible(SourceStats(s, x, rates)).feasible:
            break
        x = 2.0 * x
    else:
        x = feasible_start(s, rates)
    f = sigma_v_objective(s, x, c)
    obj_trace, feas_trace = [f], [True]
    it = 0
    for it in range(1, max_iters + 1):
        ctx = build_surrogate(s, x, c)
        weights = ctx.b ** 2
        if not np.any(weights > 1e-300):
            break
        cons = _surrogate_constraints(ctx, rates, floor)
        vals, _, _ = cons(x, False)
        start = x if np.all(vals < 0) else _phase_one(cons, x)
        if start is None:
            break
        x_new = _barrier_solve(weights, cons, start, rel_gap=1e-9)
        f_new = sigma_v_objective(s, x_new, c)
        feasible = rd_feasible(SourceStats(s, x_new, rates)).feasible
        if not feasible or f_new < f - 1e-12 * abs(f):
            break
        improvement = f_new - f
        x, f = x_new, f_new
        obj_trace.append(f)
        feas_trace.append(feasible)
        if improvement <= tol * max(abs(f), 1e-300):
            break
    return MMResult(x * d ** 2, obj_trace, feas_trace, it)


# --- alternating optimization ------------------------------------------------

@dataclass
class AOState:
    bf: BeamformerSet
    stats: SourceStats
    objective_trace: list = field(default_factory=list)
    sweeps: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def trace_dict(self) -> dict:
        return {"objective": list(self.objective_trace), "sweeps": self.sweeps,
                "flags": sorted(set(self.flags))}


def initial_beamformers(ch: ChannelRealization, power_budget, seed) -> BeamformerSet:
    """alpha_k on the power boundary along the dominant right singular vector of
    the serving channel; random unit beta; c = 1."""
    rng = as_rng(seed)
    n_ap, n_dev, n_rx, n_tx = ch.h.shape
    p = np.broadcast_to(np.asarray(power_budget, dtype=float), (n_dev,))
    alpha = np.zeros((n_dev, n_tx), dtype=complex)
    for k in range(n_dev):
        _, _, vh = np.linalg.svd(ch.served_channel(k))
        alpha[k] = np.sqrt(p[k] / 2.0) * vh[0].conj()
    beta = complex_normal(rng, (n_ap, n_rx))
    beta /= np.linalg.norm(beta, axis=1, keepdims=True)
    return BeamformerSet(alpha, beta, np.ones(n_ap), p)


def initial_state(ch, stats: SourceStats, power_budget, seed) -> AOState:
    bf = initial_beamformers(ch, power_budget, seed)
    v0 = feasible_start(stats.sigma_s, stats.rates)
    return AOState(bf, stats.with_sigma_v(v0))


def _sweep_record(state, ch, v, eps) -> dict:
    rep = d_system(state.stats, state.bf, ch, v, eps)
    slack = rd_feasible(state.stats).slack
    return {**rep.to_dict(),
            "rate_slack": {",".join(map(str, k)): val for k, val in slack.items()}}


def alternating_optimize(init: AOState, ch: ChannelRealization, v, eps, sweeps: int = 10,
                         tol: float = 1e-6, optimize_sigma_v: bool = True,
                         mm_iters: int = 50, mm_tol: float = 1e-10) -> AOState:
    """Cycle alpha -> beta -> sigma_v -> c until the relative improvement of
    the system distortion drops below ``tol`` or ``sweeps`` run out."""
    state = AOState(init.bf.copy(), init.stats, list(init.objective_trace), list(init.sweeps),
                    list(init.flags))
    flags = state.flags
    if not state.objective_trace:
        state.objective_trace.append(system_objective(state.bf, state.stats, ch, v, eps))
    n_dev = state.bf.alpha.shape[0]
    n_ap = state.bf.beta.shape[0]
    for _ in range(sweeps):
        prev = state.objective_trace[-1]
        bf = state.bf
        stage = "alpha"
        try:
            for k in range(n_dev):
                bf.alpha[k] = solve_alpha_k(k, bf, state.stats, ch, v, flags).x
            stage = "beta"
            for i in range(n_ap):
                bf.beta[i] = solve_beta_i(i, bf, state.stats, ch, v, eps, flags)
            if optimize_sigma_v:
                stage = "sigma_v"
                mm = mm_sigma_v(state.stats, bf.c, max_iters=mm_iters, tol=mm_tol)
                state.stats = state.stats.with_sigma_v(mm.v_diag)
            stage = "c"
            bf.c = solve_c(bf, state.stats, ch, v, eps, flags)
        except (np.linalg.LinAlgError, FeasibilityError, DomainError, ValueError) as exc:
            raise StageError(f"{stage} stage failed: {exc}", stage) from exc
        obj = system_objective(bf, state.stats, ch, v, eps)
        state.objective_trace.append(obj)
        state.sweeps.append(_sweep_record(state, ch, v, eps))
        if prev - obj <= tol * abs(prev):
            break
    return state


def normalize_gauge(state: AOState, ch: ChannelRealization) -> AOState:
    """Rescale to unit-norm ``beta_i`` without changing the system distortion.

    ``(beta_i, c_i, S_ij, V_ii) -> (beta_i / g_i, c_i g_i, S_ij / (g_i g_j), V_ii / g_i^2)``
    leaves every term of ``D_system`` unchanged, while the objective alone
    does not pin the scale: repeated sweeps can shrink ``c`` and grow
    ``beta`` without bound.  The device-level wireless correlation is
    frozen at its current value so the wireless term is unaffected.
    """
    bf = state.bf.copy()
    g = np.linalg.norm(bf.beta, axis=1)
    g = np.where(g > 0, g, 1.0)
    bf.beta /= g[:, None]
    bf.c = bf.c * g
    st = state.stats
    corr = st.wireless_gram(ch.owner).copy()
    stats = SourceStats(st.sigma_s / np.outer(g, g), st.v_diag / g ** 2, st.rates, corr)
    return AOState(bf, stats, list(state.objective_trace), list(state.sweeps), list(state.flags))

