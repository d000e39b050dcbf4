import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mtreg.autodiff import ContractError
from mtreg.regnet import ArchConfig, init_params
from mtreg.uncertainty import McSamples, UncertaintyMaps, adaptive_weights, mc_sample, uncertainty_maps
from mtreg.volume import Volume


def oracle_u(stack, eps):
    """Two-pass mean and N-1 deviation, one voxel at a time."""
    n = stack.shape[0]
    flat = stack.reshape(n, -1)
    out = np.empty(flat.shape[1])
    for j in range(flat.shape[1]):
        mu = sum(flat[:, j]) / n
        var = sum((v - mu) ** 2 for v in flat[:, j]) / (n - 1)
        out[j] = math.sqrt(var) / (abs(mu) + eps)
    return out.reshape(stack.shape[1:])


def maps_from(u_phi, u_app):
    z = np.zeros(1)
    return UncertaintyMaps(np.asarray(u_phi, float), np.asarray(u_app, float), z, z, z, z)


def random_samples(seed, n=6, size=4):
    rng = np.random.default_rng(seed)
    return McSamples(rng.normal(size=(n, 3, size, size, size)), rng.random((n, 1, size, size, size)))


def test_hand_case():
    s = McSamples(np.array([2.0, 4.0]).reshape(2, 1, 1, 1, 1).repeat(3, axis=1),
                  np.array([2.0, 4.0]).reshape(2, 1, 1, 1, 1))
    m = uncertainty_maps(s, 0.01, 0.01)
    assert m.sigma_app.item() == math.sqrt(2.0)
    assert m.u_app.item() == math.sqrt(2.0) / 3.01
    assert m.u_app.item() == pytest.approx(0.46984, abs=5e-6)


def test_identical_samples_give_zero():
    one = np.random.default_rng(0).normal(size=(1, 3, 4, 4, 4))
    s = McSamples(np.repeat(one, 6, axis=0), np.repeat(one[:, :1], 6, axis=0))
    m = uncertainty_maps(s)
    assert not m.u_phi.any() and not m.u_app.any()
    assert adaptive_weights(m) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_matches_two_pass_oracle(seed):
    s = random_samples(seed)
    m = uncertainty_maps(s, 0.01, 0.02)
    np.testing.assert_allclose(m.u_phi, oracle_u(s.fields, 0.01), rtol=0, atol=1e-10)
    np.testing.assert_allclose(m.u_app, oracle_u(s.warped, 0.02), rtol=0, atol=1e-10)


def test_weight_examples():
    u = np.zeros(10)
    u[:3] = 1.0
    assert adaptive_weights(maps_from(u, np.zeros(4)), k1=5)[0] == 1.5
    assert adaptive_weights(maps_from(np.ones(6), np.ones(6))) == (5.0, 1.0)
    # strictly greater than tau
    assert adaptive_weights(maps_from(np.full(4, 0.1), np.full(4, 0.01))) == (0.0, 0.0)


def test_weight_argument_validation():
    with pytest.raises(ValueError):
        adaptive_weights(maps_from(np.ones(2), np.ones(2)), k1=-1)
    with pytest.raises(ValueError):
        uncertainty_maps(random_samples(0), eps_phi=0.0)


u_arrays = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(u_arrays, st.floats(0, 1), st.floats(0, 1), st.integers(0, 39), st.floats(0, 1))
def test_weight_properties(u, t1, t2, idx, bump):
    lo, hi = min(t1, t2), max(t1, t2)
    lam = lambda arr, tau: adaptive_weights(maps_from(arr, arr), k1=5, k2=1, tau1=tau, tau2=tau)
    a, c = lam(u, lo)
    assert 0 <= a <= 5 and 0 <= c <= 1
    assert lam(u, hi)[0] <= a
    raised = u.copy()
    raised[idx % u.size] += bump
    assert lam(raised, lo)[0] >= a
    perm = np.random.default_rng(idx).permutation(u.size)
    assert lam(u[perm], lo) == (a, c)


def test_mc_sample_determinism_and_spread():
    rng = np.random.default_rng(1)
    fixed, moving = Volume(rng.random((1, 8, 8, 8))), Volume(rng.random((1, 8, 8, 8)))
    teacher = init_params(ArchConfig(), 0)
    a = mc_sample(teacher, fixed, moving, n=6, base_seed=4)
    b = mc_sample(teacher, fixed, moving, n=6, base_seed=4)
    assert np.array_equal(a.fields, b.fields) and np.array_equal(a.warped, b.warped)
    assert a.fields.shape == (6, 3, 8, 8, 8) and a.warped.shape == (6, 1, 8, 8, 8)
    assert len({f.tobytes() for f in a.fields}) >= 2


def test_no_dropout_chain_collapses():
    rng = np.random.default_rng(2)
    fixed, moving = Volume(rng.random((1, 8, 8, 8))), Volume(rng.random((1, 8, 8, 8)))
    s = mc_sample(init_params(ArchConfig(dropout_rate=0.0), 0), fixed, moving, n=4)
    assert all(np.array_equal(f, s.fields[0]) for f in s.fields)
    assert adaptive_weights(uncertainty_maps(s)) == (0.0, 0.0)


def test_single_pass_rejected():
    rng = np.random.default_rng(2)
    v = Volume(rng.random((1, 8, 8, 8)))
    with pytest.raises(ContractError):
        mc_sample(init_params(ArchConfig(), 0), v, v, n=1)
