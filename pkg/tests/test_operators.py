import math

import numpy as np
import pytest

from errors import EmptyMask, SizeError
from models import Dims, SpectrumSpec, Variant
from services.operators import (
    InstanceObjective,
    MeasurementOperator,
    QuadraticObjective,
    adjoint_operator,
    apply_operator,
    generate_instance,
    gradient,
    gradient_correlation_form,
    incoherence,
    loss,
    rip_ratios,
)
from services.rng import RngStream, haar_orthonormal


def _fd_gradient(inst, X, step):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        e = np.zeros_like(X)
        e[idx] = step
        g[idx] = (loss(inst, X + e) - loss(inst, X - e)) / (2 * step)
    return g


def test_gradient_matches_finite_differences(instance, rng):
    """Analytic gradient agrees with central differences at random points."""
    for _ in range(10):
        X = rng.standard_normal((instance.dims.d, instance.dims.k))
        exact = gradient(instance, X)
        approx = _fd_gradient(instance, X, 1e-6)
        assert np.max(np.abs(exact - approx)) < 1e-5 * np.max(np.abs(exact))


def test_adjoint_identity(instance, rng):
    """<A(M), v> = <M, A*(v)>."""
    d = instance.dims.d
    M = rng.standard_normal((d, d))
    v = rng.standard_normal(instance.operator.output_size)
    lhs = apply_operator(instance.operator, M) @ v
    rhs = np.sum(M * adjoint_operator(instance.operator, v))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_shape_mismatch_raises(instance):
    """Wrong matrix or vector shapes raise SizeError."""
    with pytest.raises(SizeError):
        apply_operator(instance.operator, np.zeros((2, 3)))
    with pytest.raises(SizeError):
        adjoint_operator(instance.operator, np.zeros(instance.operator.output_size + 1))
    with pytest.raises(SizeError):
        loss(instance, np.zeros((instance.dims.d + 1, instance.dims.k)))


def test_loss_is_rotation_invariant(instance, rng):
    """f(XU) = f(X) for orthogonal U."""
    X = rng.standard_normal((instance.dims.d, instance.dims.k))
    U = haar_orthonormal(rng, instance.dims.k, instance.dims.k)
    assert loss(instance, X @ U) == pytest.approx(loss(instance, X), rel=1e-12)


def test_noiseless_truth_is_a_zero(instance_factory):
    """Without noise X* has zero loss and zero gradient."""
    for variant in Variant:
        inst = instance_factory(variant, noiseless=True)
        assert loss(inst, inst.x_star) == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(gradient(inst, inst.x_star), 0.0, atol=1e-12)


def test_generation_is_deterministic(instance_factory):
    """Same parameters and seed give identical instances."""
    a = instance_factory(Variant.SENSING, seed=3)
    b = instance_factory(Variant.SENSING, seed=3)
    np.testing.assert_array_equal(a.x_star, b.x_star)
    np.testing.assert_array_equal(a.b, b.b)
    np.testing.assert_array_equal(a.operator.a_matrices, b.operator.a_matrices)


def test_truth_has_requested_spectrum(instance_factory):
    """Singular values of X* are the requested spectrum."""
    inst = instance_factory(Variant.FACTORIZATION, d=8, k=3, spectrum=SpectrumSpec(singular_values=[3.0, 2.0, 0.5]))
    np.testing.assert_allclose(np.linalg.svd(inst.x_star, compute_uv=False), [3.0, 2.0, 0.5], rtol=1e-12)


def test_completion_mask_is_sorted_row_major():
    """Completion observations follow sorted (i, j) order."""
    op = MeasurementOperator.completion(3, [(2, 0), (0, 1), (1, 1), (0, 0)], 0.5)
    assert list(zip(op.rows.tolist(), op.cols.tolist())) == [(0, 0), (0, 1), (1, 1), (2, 0)]
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(apply_operator(op, M), [0.0, 1.0, 4.0, 6.0])


def test_empty_mask_raises():
    """A mask that stays empty raises EmptyMask, with or without redraws."""
    spectrum = SpectrumSpec(singular_values=[1.0])
    for regenerate in (False, True):
        with pytest.raises(EmptyMask):
            generate_instance(
                Dims(d=2, k=1), spectrum, Variant.COMPLETION, 1.0, RngStream(0),
                p=1e-12, regenerate_empty_mask=regenerate,
            )


def test_sensing_rip_ratio_near_one():
    """Dense Gaussian sensing at L = 20000 keeps ||A(M)||^2 / ||M||^2 within 1/20 of 1."""
    rng = RngStream(21)
    L, d = 20_000, 4
    op = MeasurementOperator.sensing(rng.standard_normal((L, d, d)) / math.sqrt(L))
    mats = []
    for _ in range(20):
        g = rng.standard_normal((d, 2))
        mats.append(g @ g.T)
    ratios = rip_ratios(op, mats)
    assert np.all(np.abs(ratios - 1.0) < 0.05)


def test_incoherence_range(instance_factory):
    """Incoherence lies between 1 and d/k."""
    inst = instance_factory(Variant.COMPLETION, d=8, k=2)
    mu = incoherence(inst.x_star)
    assert 1.0 - 1e-12 <= mu <= 4.0 + 1e-12
    assert inst.incoherence_mu == pytest.approx(mu)


def test_gradient_correlation_form_scales_with_beta(instance_factory):
    """The noise term is positive and scales as 1/beta^2."""
    a = instance_factory(Variant.FACTORIZATION, beta=10.0)
    b = instance_factory(Variant.FACTORIZATION, beta=1000.0)
    assert gradient_correlation_form(a) > 0
    assert gradient_correlation_form(a) / gradient_correlation_form(b) == pytest.approx(1e4)


def test_objectives_follow_protocol(factorization_instance, rng):
    """InstanceObjective wraps loss/gradient; QuadraticObjective is scale * |x|^2."""
    X = rng.standard_normal((6, 2))
    obj = InstanceObjective(factorization_instance)
    assert obj.loss(X) == loss(factorization_instance, X)
    q = QuadraticObjective(scale=3.0)
    np.testing.assert_allclose(q.gradient(np.array([1.0, -2.0])), [6.0, -12.0])
    assert q.loss(np.array([1.0, -2.0])) == pytest.approx(15.0)
