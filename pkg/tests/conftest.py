import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0, np.log(cond), n))
    return (q * w) @ q.T


def grid_best_sigma_v(sigma_s, c, rates, points: int, lo=1e-2, hi=10.0, zooms=2):
    """Dense log-grid search of ``c^T S (S + V)^-1 S c`` over diagonal ``V``
    inside the Berger-Tung region, with conditional covariances built from
    Schur complements.  Each zoom re-grids the two-cell box around the best
    point.  Returns ``(best value, best diag)``."""
    s = np.asarray(sigma_s, dtype=float)
    lo_v, hi_v = np.diag(s) * lo, np.diag(s) * hi
    ratio = (hi / lo) ** (1.0 / (points - 1))
    for _ in range(zooms + 1):
        val, x = _grid_pass(s, c, rates, points, lo_v, hi_v)
        lo_v, hi_v = x / ratio, x * ratio
        ratio = ratio ** (2.0 / (points - 1))
    return val, x


def _grid_pass(s, c, rates, points, lo_v, hi_v):
    import itertools

    n = s.shape[0]
    axes = [np.geomspace(lo_v[i], hi_v[i], points) for i in range(n)]
    x = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
    g = s[None] + x[:, :, None] * np.eye(n)[None]
    ok = np.ones(len(x), dtype=bool)
    for size in range(1, n + 1):
        for k in itertools.combinations(range(n), size):
            kk = list(k)
            kc = [i for i in range(n) if i not in k]
            cond = g[:, kk][:, :, kk]
            if kc:
                cross = g[:, kk][:, :, kc]
                cond = cond - cross @ np.linalg.solve(g[:, kc][:, :, kc], np.swapaxes(cross, 1, 2))
            bits = 0.5 * (np.linalg.slogdet(cond)[1] - np.log(x[:, kk]).sum(1)) / np.log(2.0)
            ok &= bits <= np.sum(np.asarray(rates)[kk]) + 1e-12
    y = s @ np.asarray(c, dtype=float)
    vals = np.einsum("j,pj->p", y, np.linalg.solve(g, np.broadcast_to(y, (len(x), n))[..., None])[..., 0])
    vals = np.where(ok, vals, -np.inf)
    best = int(np.argmax(vals))
    return float(vals[best]), x[best]


# --- acceptance summary ------------------------------------------------------

ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str):
    """Store and print one acceptance line; the terminal summary repeats them."""
    line = f"ACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
