import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import grid_best_sigma_v, random_psd
from oafl_cran.channel import ChannelRealization, complex_normal, contiguous_topology
from oafl_cran.edge import BeamformerSet
from oafl_cran.errors import FeasibilityError
from oafl_cran.ldsc import SourceStats, d_system, rate_requirements, rd_feasible
from oafl_cran.optimizer import (AOState, alternating_optimize, build_surrogate, feasible_start,
                                 initial_state, mm_sigma_v, normalize_gauge, sigma_v_objective,
                                 solve_alpha_k, solve_beta_i, solve_c, solve_trs,
                                 system_objective)

seeds = st.integers(0, 2 ** 32 - 1)


def make_instance(seed, sizes=(2, 3), n_rx=3, n_tx=2, noise=0.05, gram=False):
    rng = np.random.default_rng(seed)
    topo = contiguous_topology(sizes)
    n_ap, n_dev = len(sizes), sum(sizes)
    h = complex_normal(rng, (n_ap, n_dev, n_rx, n_tx))
    ch = ChannelRealization(h, noise, topo)
    s = random_psd(rng, n_ap)
    rates = rng.uniform(0.5, 2.0, n_ap)
    corr = None
    if gram:
        g = rng.standard_normal((n_dev, 40))
        corr = g @ g.T / 40
    stats = SourceStats(s, feasible_start(s, rates), rates, corr)
    v = rng.uniform(0.2, 2.0, n_dev)
    eps = rng.uniform(0.01, 0.1, n_ap)
    state = initial_state(ch, stats, 1.0, rng)
    state.bf.c = rng.uniform(0.5, 1.5, n_ap)
    return ch, state.stats, state.bf, v, eps


def fd_grad(f, x, h):
    g = np.zeros(x.size)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# --- trust region ------------------------------------------------------------

@pytest.mark.parametrize("q,b,r2,expected", [
    (2.0, 1.0, 1.0, 0.5),          # interior: b / q
    (1.0, 3.0, 4.0, 2.0),          # boundary: sqrt(r2) along b
    (0.0, -1.0, 0.25, -0.5),       # flat form, boundary
])
def test_trs_scalar_oracle(q, b, r2, expected):
    res = solve_trs(np.array([[q]]), np.array([b], dtype=complex), r2)
    assert res.x[0] == pytest.approx(expected, abs=1e-12)
    assert res.kkt_residual <= 1e-8


def test_trs_zero_radius_gives_zero():
    res = solve_trs(np.eye(2), np.array([1.0, 2.0j]), 0.0)
    assert np.all(res.x == 0)


@given(seeds, st.integers(1, 4))
def test_trs_kkt_and_random_probes(seed, n):
    rng = np.random.default_rng(seed)
    a = complex_normal(rng, (n, n))
    q = a @ a.conj().T * rng.uniform(0, 1)
    b = complex_normal(rng, n)
    r2 = rng.uniform(0.01, 4.0)
    res = solve_trs(q, b, r2)
    assert res.kkt_residual <= 1e-8
    assert np.vdot(res.x, res.x).real <= r2 * (1 + 1e-10)

    def f(x):
        return np.einsum("...i,ij,...j->...", x.conj(), q, x).real - 2 * (x @ b.conj()).real

    probes = complex_normal(rng, (1000, n))
    probes *= (np.sqrt(r2) * rng.uniform(0, 1, 1000) / np.linalg.norm(probes, axis=1))[:, None]
    assert f(probes).min() >= f(res.x) - 1e-9 * max(1.0, abs(f(res.x)))


def test_trs_rescales_tiny_inputs():
    res = solve_trs(1e-150 * np.eye(2), 1e-150 * np.array([1.0, 0.0]), 4.0)
    np.testing.assert_allclose(res.x, [1.0, 0.0], atol=1e-12)


def test_alpha_power_to_zero_gives_zero():
    ch, stats, bf, v, eps = make_instance(1)
    bf.power_budget[:] = 0.0
    assert np.all(solve_alpha_k(0, bf, stats, ch, v).x == 0)


@given(seeds, st.booleans())
def test_alpha_update_never_increases_objective(seed, gram):
    ch, stats, bf, v, eps = make_instance(seed, gram=gram)
    before = system_objective(bf, stats, ch, v, eps)
    for k in range(bf.alpha.shape[0]):
        res = solve_alpha_k(k, bf, stats, ch, v)
        assert res.kkt_residual <= 1e-8
        bf.alpha[k] = res.x
    bf.check_power()
    assert system_objective(bf, stats, ch, v, eps) <= before * (1 + 1e-12)


# --- beta ------------------------------------------------------------------

def test_beta_scalar_oracle():
    h = np.full((1, 1, 1, 1), 0.8 - 0.6j)
    ch = ChannelRealization(h, 0.1, ((0,),))
    bf = BeamformerSet([[0.5 + 0.2j]], [[1.0]], [1.3], 1.0)
    stats = SourceStats([[2.0]], [[0.5]], 1.0)
    v, eps = np.array([0.7]), 0.04
    # minimize rho |a - c conj(beta) m|^2 + eps c^2 |beta|^2 with m = h alpha
    m = h[0, 0, 0, 0] * bf.alpha[0, 0]
    rho, a, c = 2.0, math.sqrt(0.7), 1.3
    w = rho * c * np.conj(m) * a / (rho * c ** 2 * abs(m) ** 2 + eps * c ** 2)
    beta = solve_beta_i(0, bf, stats, ch, v, eps)
    assert beta[0] == pytest.approx(np.conj(w), abs=1e-12)


def test_beta_vanishes_with_huge_noise():
    ch, stats, bf, v, _ = make_instance(2)
    beta = solve_beta_i(0, bf, stats, ch, v, np.array([1e12, 1e12]))
    assert np.linalg.norm(beta) < 1e-9


@pytest.mark.parametrize("gram", [False, True])
@pytest.mark.parametrize("seed", range(20))
def test_beta_is_stationary(seed, gram):
    ch, stats, bf, v, eps = make_instance(seed, gram=gram)
    for i in range(2):
        bf.beta[i] = solve_beta_i(i, bf, stats, ch, v, eps)
        x0 = np.concatenate([bf.beta[i].real, bf.beta[i].imag])
        n = len(x0) // 2

        def f(x):
            trial = bf.copy()
            trial.beta[i] = x[:n] + 1j * x[n:]
            return system_objective(trial, stats, ch, v, eps)

        obj = f(x0)
        g = fd_grad(f, x0, 1e-5 * max(1.0, np.linalg.norm(x0)))
        assert np.linalg.norm(g) <= 1e-6 * obj / max(np.linalg.norm(x0), 1e-12) + 1e-9


# --- c -----------------------------------------------------------------------

def golden_min(f, lo, hi, iters=200):
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    for _ in range(iters):
        c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
        if f(c) < f(d):
            b = d
        else:
            a = c
    return 0.5 * (a + b)


def test_c_one_ap_matches_golden_section():
    ch, stats, bf, v, eps = make_instance(3, sizes=(4,))

    def f(x):
        trial = bf.copy()
        trial.c = np.array([x])
        return system_objective(trial, stats, ch, v, eps)

    ref = golden_min(f, -10.0, 10.0)
    assert solve_c(bf, stats, ch, v, eps)[0] == pytest.approx(ref, rel=1e-6, abs=1e-8)


def test_c_vanishes_with_huge_noise():
    ch, stats, bf, v, _ = make_instance(4)
    c = solve_c(bf, stats, ch, v, np.array([1e14, 1e14]))
    assert np.max(np.abs(c)) < 1e-6


def test_c_symmetric_aps_get_equal_weights():
    rng = np.random.default_rng(5)
    h1 = complex_normal(rng, (1, 2, 2, 2))
    h = np.zeros((2, 4, 2, 2), dtype=complex)
    h[0, :2], h[1, 2:] = h1[0], h1[0]
    h[0, 2:], h[1, :2] = h1[0], h1[0]
    ch = ChannelRealization(h, 0.05, ((0, 1), (2, 3)))
    alpha = complex_normal(rng, (2, 2)) * 0.5
    beta = complex_normal(rng, (1, 2))
    bf = BeamformerSet(np.vstack([alpha, alpha]), np.vstack([beta, beta]), [1.0, 1.0], 1.0)
    stats = SourceStats([[1.0, 0.4], [0.4, 1.0]], [0.3, 0.3], 1.0)
    v = np.array([0.5, 1.0, 0.5, 1.0])
    c = solve_c(bf, stats, ch, v, 0.05)
    assert c[0] == pytest.approx(c[1], rel=1e-10)


@pytest.mark.parametrize("gram", [False, True])
@pytest.mark.parametrize("seed", range(20))
def test_c_is_stationary(seed, gram):
    ch, stats, bf, v, eps = make_instance(seed, gram=gram)
    bf.c = solve_c(bf, stats, ch, v, eps)

    def f(x):
        trial = bf.copy()
        trial.c = x
        return system_objective(trial, stats, ch, v, eps)

    obj = f(bf.c)
    g = fd_grad(f, bf.c, 1e-5 * max(1.0, np.linalg.norm(bf.c)))
    assert np.linalg.norm(g) <= 1e-6 * obj / max(np.linalg.norm(bf.c), 1e-12) + 1e-9


# --- sigma_v -----------------------------------------------------------------

@pytest.mark.parametrize("rate", [0.5, 1.0, 2.0, 4.0])
def test_mm_scalar_rate_distortion(rate):
    s = 2.5
    res = mm_sigma_v(SourceStats([[s]], [[10.0]], rate), [1.0])
    assert res.v_diag[0] == pytest.approx(s / (2 ** (2 * rate) - 1), rel=1e-6)


def test_mm_high_rate_reaches_floor():
    s = np.array([[1.0, 0.3], [0.3, 2.0]])
    res = mm_sigma_v(SourceStats(s, feasible_start(s, 40.0), 40.0), [1.0, 1.0])
    assert np.all(res.v_diag <= 1e-8 * np.diag(s))


@pytest.mark.parametrize("seed", range(4))
def test_mm_two_aps_matches_grid(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_psd(rng, 2)
    c = rng.standard_normal(2)
    r = rng.uniform(0.5, 2.0, 2)
    res = mm_sigma_v(SourceStats(s, feasible_start(s, r), r), c)
    ref, _ = grid_best_sigma_v(s, c, r, 200)
    assert abs(res.objective_trace[-1] / ref - 1) <= 5e-3
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(res.objective_trace, res.objective_trace[1:]))
    assert all(res.feasible_trace)
    assert rd_feasible(SourceStats(s, res.v_diag, r)).feasible


@given(seeds, st.integers(2, 3))
def test_mm_ascent_and_feasibility(seed, n):
    rng = np.random.default_rng(seed)
    s = random_psd(rng, n)
    c = rng.standard_normal(n)
    r = rng.uniform(0.3, 3.0, n)
    start = feasible_start(s, r)
    res = mm_sigma_v(SourceStats(s, start, r), c, max_iters=10)
    tr = res.objective_trace
    assert tr[0] == pytest.approx(sigma_v_objective(s, start, c), rel=1e-12)
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(tr, tr[1:]))
    assert rd_feasible(SourceStats(s, res.v_diag, r)).feasible


@given(seeds, st.integers(2, 3))
def test_surrogate_tangent_and_majorizes(seed, n):
    rng = np.random.default_rng(seed)
    s = random_psd(rng, n)
    c = rng.standard_normal(n)
    r = rng.uniform(0.3, 3.0, n)
    x_hat = rng.uniform(0.1, 2.0, n)
    ctx = build_surrogate(s, x_hat, c)

    def exact(x):
        req = rate_requirements(s, x)
        return np.array([req[k] - r[list(k)].sum() for k in ctx.subsets])

    np.testing.assert_allclose(ctx.constraint_values(x_hat, r), exact(x_hat), atol=1e-9)
    x = rng.uniform(0.05, 4.0, n)
    assert np.all(ctx.constraint_values(x, r) >= exact(x) - 1e-9)


def test_feasible_start_reports_tightest_subset():
    # AP 0 has no rate; once sigma_v is large only its own constraint is short
    with pytest.raises(FeasibilityError) as info:
        feasible_start(np.eye(2), [0.0, 5.0], max_doublings=45)
    assert info.value.subset == (0,)


def test_feasible_start_is_feasible(rng):
    s = random_psd(rng, 3)
    r = np.array([0.2, 1.0, 3.0])
    assert rd_feasible(SourceStats(s, feasible_start(s, r), r)).feasible


# --- alternating optimization ------------------------------------------------

@pytest.mark.parametrize("gram", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_ao_descends(seed, gram):
    ch, stats, bf, v, eps = make_instance(seed, gram=gram)
    out = alternating_optimize(AOState(bf, stats), ch, v, eps, sweeps=8, tol=0.0, mm_iters=5)
    tr = out.objective_trace
    assert all(b <= a * (1 + 1e-9) for a, b in zip(tr, tr[1:]))
    assert tr[-1] < tr[0]
    out.bf.check_power()
    assert rd_feasible(out.stats).feasible


def test_ao_infinite_tolerance_runs_one_sweep():
    ch, stats, bf, v, eps = make_instance(7)
    out = alternating_optimize(AOState(bf, stats), ch, v, eps, sweeps=10, tol=np.inf, mm_iters=3)
    assert len(out.sweeps) == 1


def test_ao_resumes_where_it_stopped():
    ch, stats, bf, v, eps = make_instance(8)
    whole = alternating_optimize(AOState(bf, stats), ch, v, eps, sweeps=6, tol=0.0, mm_iters=10)
    half = alternating_optimize(AOState(bf, stats), ch, v, eps, sweeps=3, tol=0.0, mm_iters=10)
    rest = alternating_optimize(half, ch, v, eps, sweeps=3, tol=0.0, mm_iters=10)
    np.testing.assert_allclose(rest.objective_trace, whole.objective_trace, rtol=1e-12)
    gains = -np.diff(whole.objective_trace)
    assert gains[-1] < gains[0]


def test_ao_leaves_input_untouched():
    ch, stats, bf, v, eps = make_instance(9)
    before = bf.copy()
    alternating_optimize(AOState(bf, stats), ch, v, eps, sweeps=1, mm_iters=2)
    np.testing.assert_array_equal(bf.alpha, before.alpha)
    np.testing.assert_array_equal(bf.c, before.c)


@given(seeds, st.booleans())
def test_gauge_normalization_keeps_distortion(seed, gram):
    ch, stats, bf, v, eps = make_instance(seed, gram=gram)
    rng = np.random.default_rng(seed)
    bf.beta *= rng.uniform(0.1, 10.0, (2, 1))
    st0 = AOState(bf, stats)
    st1 = normalize_gauge(st0, ch)
    d0 = d_system(st0.stats, st0.bf, ch, v, eps).d_system
    d1 = d_system(st1.stats, st1.bf, ch, v, eps).d_system
    assert d1 == pytest.approx(d0, rel=1e-10)
    np.testing.assert_allclose(np.linalg.norm(st1.bf.beta, axis=1), 1.0, rtol=1e-12)
    # rate requirements are scale free
    assert rd_feasible(st1.stats).feasible == rd_feasible(st0.stats).feasible
