import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oafl_cran.channel import ChannelRealization
from oafl_cran.edge import (BeamformerSet, EdgeUpdate, edge_aggregate_round, form_transmit_signal,
                            from_complex, receive_combine, to_complex)
from oafl_cran.errors import ConstraintError, DimensionError
from oafl_cran.fl import LocalUpdate

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_to_complex_definition():
    np.testing.assert_array_equal(to_complex([1, 2, 3, 4]), [1 + 3j, 2 + 4j])
    np.testing.assert_array_equal(to_complex(np.zeros(6)), np.zeros(3))


def test_from_complex_definition():
    np.testing.assert_array_equal(from_complex([1 + 3j, 2 + 4j]), [1, 2, 3, 4])
    np.testing.assert_array_equal(from_complex(np.array([1.0, 2.0]) + 0j)[2:], [0, 0])


def test_odd_length_rejected():
    with pytest.raises(DimensionError):
        to_complex(np.ones(3))


@given(arrays(float, st.integers(1, 20).map(lambda n: 2 * n), elements=finite))
def test_real_complex_roundtrip_exact(x):
    assert from_complex(to_complex(x)).tobytes() == x.tobytes()


def test_unit_transmit_beamformer():
    x = form_transmit_signal(np.array([1 + 1j]), np.array([1, 0, 0]))
    np.testing.assert_array_equal(x[0], [1 + 1j])
    np.testing.assert_array_equal(x[1:], 0)


def test_power_boundary_accepted_and_violation_rejected():
    alpha = np.array([0.5, 0.5j])  # 2 * ||alpha||^2 = 1
    form_transmit_signal(np.ones(2), alpha, 1.0)
    with pytest.raises(ConstraintError):
        form_transmit_signal(np.ones(2), 1.01 * alpha, 1.0)


def test_transmit_power_monte_carlo(rng):
    alpha = np.array([0.3 + 0.1j, -0.2j, 0.4])
    r = to_complex(rng.standard_normal(200_000))
    x = form_transmit_signal(r, alpha)
    power = np.mean(np.sum(np.abs(x) ** 2, axis=0))
    assert abs(power / (2 * np.vdot(alpha, alpha).real) - 1) < 0.01


def test_receive_combine_first_row():
    y = np.array([[1 + 2j, 3j], [5, 6]])
    np.testing.assert_array_equal(receive_combine(y, np.array([1, 0])), [1 + 2j, 3j])
    np.testing.assert_array_equal(receive_combine(y, np.array([1j, 0])), [-1j * (1 + 2j), -1j * 3j])


def test_matched_scalar_gain_recovers_signal(rng):
    h = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    alpha = np.array([0.2, 0.1j])
    beta = h @ alpha
    beta = beta / np.vdot(beta, h @ alpha).conj()   # beta^H H alpha = 1
    r = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    np.testing.assert_allclose(receive_combine(h @ np.outer(alpha, r), beta), r, atol=1e-12)


def test_combined_noise_variance_monte_carlo():
    n = 200_000
    rng = np.random.default_rng(1)
    z = np.sqrt(0.5 / 2) * (rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n)))
    beta = np.array([1.0, 0.5j, -0.2])
    out = receive_combine(z, beta)
    expected = 0.5 * np.sum(np.abs(beta) ** 2)
    assert abs(np.mean(np.abs(out) ** 2) / expected - 1) < 0.02


def test_shape_mismatch_in_combining():
    with pytest.raises(DimensionError):
        receive_combine(np.ones((3, 4)), np.ones(2))


def _scalar_setup(v, noise=0.0):
    h = np.array([[[[2.0 - 1.0j]]]])
    ch = ChannelRealization(h, noise, ((0,),))
    alpha = np.array([[np.sqrt(0.5)]])
    beta = np.array([[np.sqrt(v) / np.conj(h[0, 0, 0, 0] * alpha[0, 0])]])
    return ch, BeamformerSet(alpha, beta, np.ones(1), np.array([1.0]))


def test_single_device_composition_recovers_centered_update():
    g = np.array([0.5, -1.0, 3.0, 2.5, 0.0, 1.0])
    up = LocalUpdate.from_gradient(g)
    ch, bf = _scalar_setup(up.v)
    s = edge_aggregate_round([up.g_norm], ch, bf, 0)[0].s
    np.testing.assert_allclose(s, g - g.mean(), atol=1e-12)


def test_zero_updates_give_pure_combined_noise():
    ch, bf = _scalar_setup(1.0, noise=0.7)
    s = edge_aggregate_round([np.zeros(200_000)], ch, bf, 3)[0].s
    # each real coordinate carries half the complex noise power
    expected = 0.7 * np.abs(bf.beta[0, 0]) ** 2 / 2
    assert abs(np.var(s) / expected - 1) < 0.02


def test_topology_isolation(rng):
    h = rng.standard_normal((2, 2, 3, 2)) + 1j * rng.standard_normal((2, 2, 3, 2))
    ch = ChannelRealization(h, 0.0, ((0,), (1,)))
    bf = BeamformerSet(np.full((2, 2), 0.3 + 0j), rng.standard_normal((2, 3)) + 0j, np.ones(2), 1.0)
    g = rng.standard_normal((2, 8))
    base = edge_aggregate_round(g, ch, bf, 0)
    g2 = g.copy()
    g2[1] = rng.standard_normal(8)
    moved = edge_aggregate_round(g2, ch, bf, 0)
    np.testing.assert_array_equal(base[0].s, moved[0].s)
    assert not np.allclose(base[1].s, moved[1].s)


@given(st.integers(0, 2 ** 32 - 1))
def test_wireless_error_identity(seed):
    rng = np.random.default_rng(seed)
    n_ap, n_dev, n = 2, 4, 10
    h = rng.standard_normal((n_ap, n_dev, 3, 2)) + 1j * rng.standard_normal((n_ap, n_dev, 3, 2))
    ch = ChannelRealization(h, 0.0, ((0, 3), (1, 2)))
    alpha = 0.3 * (rng.standard_normal((n_dev, 2)) + 1j * rng.standard_normal((n_dev, 2)))
    bf = BeamformerSet(alpha, rng.standard_normal((n_ap, 3)) + 1j * rng.standard_normal((n_ap, 3)),
                       rng.uniform(0.5, 2, n_ap), 10.0)
    v = rng.uniform(0.1, 2, n_dev)
    g = rng.standard_normal((n_dev, n))
    s = np.array([e.s for e in edge_aggregate_round(g, ch, bf, 0)])
    lhs = np.sqrt(v) @ g - bf.c @ s
    gains = bf.gains(ch)
    owner = ch.owner
    rhs = sum(from_complex((np.sqrt(v[k]) - bf.c[owner[k]] * gains[k]) * to_complex(g[k]))
              for k in range(n_dev))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_edge_update_json_roundtrip():
    e = EdgeUpdate(np.array([1.5, -2.0]))
    np.testing.assert_array_equal(EdgeUpdate.from_json(e.to_json()).s, e.s)


def test_beamformer_dict_roundtrip(rng):
    bf = BeamformerSet(rng.standard_normal((2, 3)) + 1j, rng.standard_normal((1, 4)) - 2j, np.ones(1), 5.0)
    back = BeamformerSet.from_dict(bf.to_dict())
    np.testing.assert_array_equal(back.alpha, bf.alpha)
    np.testing.assert_array_equal(back.beta, bf.beta)
