import numpy as np
import pytest

from conftest import random_model, small_modeset
from mplc.errors import ConfigurationError, GridMismatchError
from mplc.grid import ComplexField, GridSpec, gaussian_spot
from mplc.model import MPLCModel, apply_layer, backward_trace, forward, forward_trace, overlaps
from mplc.propagation import propagate


def test_model_validation(small_grid):
    with pytest.raises(ConfigurationError):
        MPLCModel(small_grid, [np.zeros(small_grid.shape)], [1e-3])
    with pytest.raises(ConfigurationError):
        MPLCModel(small_grid, [np.zeros(small_grid.shape)], [1e-3, -1e-3])
    with pytest.raises(GridMismatchError):
        MPLCModel(small_grid, [np.zeros((3, 3))], [1e-3, 1e-3])
    m = MPLCModel.zeros(small_grid, 3, 2e-3)
    assert m.trainable_masks == [True] * 3
    assert m.trainable_distances == [False] * 4


def test_copy_is_independent(small_grid):
    m = MPLCModel.zeros(small_grid, 2, 1e-3)
    c = m.copy()
    c.masks[0][0, 0] = 1.0
    c.distances[0] = 5e-3
    assert m.masks[0][0, 0] == 0.0 and m.distances[0] == 1e-3


def test_layer_identity_and_constant(small_grid, rng):
    e = gaussian_spot(small_grid, (0, 0), 40e-6)
    m = MPLCModel.zeros(small_grid, 1, 0.0)
    assert np.allclose(apply_layer(m, 1, e).values, e.values, atol=1e-12)
    m.masks[0][:] = 0.7
    assert np.allclose(apply_layer(m, 1, e).values, np.exp(0.7j) * e.values, atol=1e-12)
    with pytest.raises(IndexError):
        apply_layer(m, 3, e)


def test_layer_preserves_power(small_grid, rng):
    m = random_model(small_grid, 2, rng)
    e = m.propagator.band_limit(gaussian_spot(small_grid, (0, 0), 40e-6).values)
    for i in (1, 2, 3):
        out = apply_layer(m, i, e)
        assert abs(np.vdot(out, out).real - np.vdot(e, e).real) < 1e-10


def test_forward_zero_masks(small_grid, rng):
    e = gaussian_spot(small_grid, (0, 0), 40e-6)
    m = MPLCModel.zeros(small_grid, 3, 0.0)
    assert np.allclose(forward(m, e).values, e.values, atol=1e-12)
    m.distances[:] = [1e-3, 2e-3, 0.5e-3, 3e-3]
    assert np.allclose(forward(m, e).values, propagate(e, 6.5e-3).values, atol=1e-10)


def test_single_mask_phase_conjugation(small_grid, rng):
    z0, z1 = 2e-3, 3e-3
    e0 = gaussian_spot(small_grid, (20e-6, 0), 40e-6)
    m = MPLCModel.zeros(small_grid, 1, [z0, z1])
    eps = m.propagator.propagate(e0.values, z0)
    et_prime = np.abs(eps) * np.exp(1j * rng.uniform(-np.pi, np.pi, small_grid.shape))
    et = m.propagator.propagate(et_prime, z1)
    m.masks[0] = np.angle(np.conj(eps) * et_prime)
    eta = abs(np.vdot(forward(m, e0.values), et)) ** 2 / np.vdot(et, et).real
    assert abs(eta - 1) < 1e-10


def test_forward_trace_structure(small_grid, rng):
    m = random_model(small_grid, 3, rng)
    e0 = gaussian_spot(small_grid, (0, 0), 40e-6).values
    tr = forward_trace(m, e0)
    assert len(tr.fields) == 3
    assert np.allclose(tr.fields[0], m.propagator.propagate(e0, m.distances[0]))
    assert np.allclose(tr.output, forward(m, e0), atol=1e-12)
    for i in range(1, 4):
        cur = tr.fields[i - 1] * m.phasors(i)
        for k in range(i + 1, 5):
            cur = apply_layer(m, k, cur)
        assert np.allclose(cur, tr.output, atol=1e-10)
    one = forward_trace(MPLCModel.zeros(small_grid, 1, 1e-3), e0)
    assert len(one.fields) == 1 and len(one) == 2


def test_backward_trace_consistency(small_grid, rng):
    m = random_model(small_grid, 4, rng)
    ms = small_modeset(small_grid, 3)
    fwd = forward_trace(m, ms.inputs)
    bwd = backward_trace(m, ms.targets)
    ref = np.einsum("mij,mij->m", ms.targets.conj(), fwd.output)
    for i in range(1, 5):
        got = np.einsum("mij,mij->m", bwd.fields[i - 1].conj(), m.phasors(i) * fwd.fields[i - 1])
        assert np.allclose(got, ref, atol=1e-10)


def test_backward_trace_single_mask(small_grid, rng):
    m = random_model(small_grid, 1, rng)
    et = gaussian_spot(small_grid, (0, 0), 40e-6).values
    bwd = backward_trace(m, et)
    assert np.allclose(bwd.fields[0], m.propagator.propagate_adjoint(et, m.distances[1]))
    zero = backward_trace(m, np.zeros(small_grid.shape))
    assert not np.any(zero.fields[0])


def test_unitarity_chain(small_grid, rng):
    m = random_model(small_grid, 3, rng)
    e0 = m.propagator.band_limit(gaussian_spot(small_grid, (0, 0), 40e-6).values)
    e0 /= np.linalg.norm(e0)
    out = forward(m, e0)
    assert abs(np.vdot(out, out).real - 1) < 1e-8


def test_global_phase_gauge(small_grid, rng):
    m = random_model(small_grid, 3, rng)
    ms = small_modeset(small_grid, 2)
    base = overlaps(m, ms.inputs, ms.targets)
    m.masks[1] = m.masks[1] + 0.9
    shifted = overlaps(m, ms.inputs, ms.targets)
    assert np.allclose(shifted, np.exp(-0.9j) * base, atol=1e-12)
    assert np.allclose(np.abs(shifted) ** 2, np.abs(base) ** 2, atol=1e-12)


def test_field_wrapping(small_grid):
    m = MPLCModel.zeros(small_grid, 1, 1e-3)
    e = gaussian_spot(small_grid, (0, 0), 40e-6)
    assert isinstance(forward(m, e), ComplexField)
    with pytest.raises(GridMismatchError):
        forward(m, gaussian_spot(GridSpec(32, 32, 8e-6), (0, 0), 40e-6))
