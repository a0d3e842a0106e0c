import dataclasses
import math
from unittest.mock import patch

import numpy as np
import pytest

from errors import DivergedChain, InitFailed
from models import RunConfig, SpectrumSpec, Variant
from services.diagnostics import iact
from services.manifold import OrbitSpec, nearest_branch, random_rotation
from services.operators import InstanceObjective, QuadraticObjective
from services.rng import RngStream, haar_orthonormal
from services.sampler import (
    ChainState,
    Trajectory,
    init_gradient_descent,
    langevin_step,
    reference_radii,
    run_chain,
)
import services.sampler as sampler


def test_zero_noise_step_is_gradient_step(factorization_instance, run_config, rng):
    """Without noise the update is X - h beta grad f(X)."""
    obj = InstanceObjective(factorization_instance)
    X = rng.standard_normal((6, 2))
    out = langevin_step(obj, run_config, ChainState(X, 0, rng), noise=False)
    np.testing.assert_allclose(out.x, X - run_config.h * run_config.beta * obj.gradient(X))
    assert out.step_index == 1


def test_zero_noise_step_consumes_no_randomness(factorization_instance, run_config):
    """noise=False leaves the stream position untouched."""
    stream = RngStream(1)
    before = stream.counter
    langevin_step(InstanceObjective(factorization_instance), run_config, ChainState(np.ones((6, 2)), 0, stream), noise=False)
    assert stream.counter == before


def test_step_is_rotation_equivariant(factorization_instance, run_config, rng):
    """step(X U) = step(X) U for the noiseless update."""
    obj = InstanceObjective(factorization_instance)
    X = rng.standard_normal((6, 2))
    U = haar_orthonormal(rng, 2, 2)
    a = langevin_step(obj, run_config, ChainState(X @ U, 0, rng), noise=False).x
    b = langevin_step(obj, run_config, ChainState(X, 0, rng), noise=False).x @ U
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_step_detects_divergence(run_config, rng):
    """Exceeding max_norm raises DivergedChain with the step index."""
    state = ChainState(np.full((2, 2), 10.0), 4, rng)
    with pytest.raises(DivergedChain) as info:
        langevin_step(QuadraticObjective(), run_config, state, max_norm=1.0)
    assert info.value.step == 5


def test_run_chain_records_and_determinism(factorization_instance, run_config):
    """Records land on the thinned post-burn-in grid and reruns are identical."""
    x0 = factorization_instance.x_star
    orbit = OrbitSpec(x0, 1)
    obj = InstanceObjective(factorization_instance)
    first = run_chain(obj, run_config, x0, 0, orbit)
    second = run_chain(obj, run_config, x0, 0, orbit)

    assert len(first) == 90
    assert first.step[0] == 22 and first.step[-1] == 200
    np.testing.assert_array_equal(first.eta, second.eta)
    np.testing.assert_allclose(first.time, first.step * run_config.h)
    assert first.angle is not None and np.all((first.angle >= 0) & (first.angle < 2 * math.pi))
    assert not first.diverged


def test_chains_use_their_own_streams(factorization_instance, run_config):
    """Chain 0 and chain 1 draw different noise."""
    x0 = factorization_instance.x_star
    obj = InstanceObjective(factorization_instance)
    a = run_chain(obj, run_config, x0, 0, OrbitSpec(x0, 1))
    b = run_chain(obj, run_config, x0, 1, OrbitSpec(x0, 1))
    assert not np.array_equal(a.eta, b.eta)


def test_run_chain_truncates_on_divergence(factorization_instance, run_config):
    """A divergence mid-run keeps earlier records and flags the trajectory."""
    x0 = factorization_instance.x_star
    calls = {"n": 0}
    real_step = sampler.langevin_step

    def failing_step(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 100:
            raise DivergedChain(100, math.inf)
        return real_step(*args, **kwargs)

    with patch("services.sampler.langevin_step", side_effect=failing_step):
        traj = run_chain(InstanceObjective(factorization_instance), run_config, x0, 0, OrbitSpec(x0, 1))
    assert traj.diverged
    assert "step 100" in traj.message
    assert traj.step[-1] < 100


def test_run_chain_stops_when_asked(factorization_instance, run_config):
    """should_stop returning True interrupts the chain."""
    x0 = factorization_instance.x_star
    traj = run_chain(
        InstanceObjective(factorization_instance), run_config, x0, 0, OrbitSpec(x0, 1), should_stop=lambda: True,
    )
    assert traj.interrupted and len(traj) == 0


def test_failed_trajectory_shape():
    """Trajectory.failed is empty, diverged and keeps the angle slot for k = 2."""
    traj = Trajectory.failed(3, 0.1, 2, "boom")
    assert len(traj) == 0 and traj.diverged and traj.angle is not None
    assert Trajectory.failed(0, 0.1, 3, "x").angle is None


def test_gradient_descent_reaches_truth(factorization_instance):
    """Perturbed gradient descent from a small random start lands on the orbit of X*."""
    x = init_gradient_descent(factorization_instance, RngStream(2), tol=1e-8, max_iters=50_000)
    assert nearest_branch(factorization_instance.x_star, x).distance < 1e-5


def test_gradient_descent_stops_at_roundoff_floor_on_noisy_instance(instance_factory):
    """On a noisy instance the gradient bottoms out near tol; the stall is treated as convergence."""
    inst = instance_factory(Variant.FACTORIZATION, d=10, k=2, beta=1e4, seed=5, spectrum=SpectrumSpec.geometric(2, 2.0, 1.0))
    x = init_gradient_descent(inst, RngStream(9).child(1 << 20), tol=1e-8, max_iters=100_000)
    assert np.linalg.norm(InstanceObjective(inst).gradient(x)) < 1e-6
    assert nearest_branch(inst.x_star, x).distance ** 2 < 1e-2


def test_gradient_descent_returns_stationary_start(factorization_instance):
    """A start with vanishing gradient is returned unchanged."""
    x_star = factorization_instance.x_star
    out = init_gradient_descent(factorization_instance, RngStream(2), tol=1e-8, max_iters=10, start=x_star)
    np.testing.assert_array_equal(out, x_star)


def test_gradient_descent_failure(factorization_instance):
    """Running out of iterations raises InitFailed with diagnostics attached."""
    with pytest.raises(InitFailed) as info:
        init_gradient_descent(factorization_instance, RngStream(2), tol=1e-12, max_iters=2)
    assert info.value.iterations == 2
    assert info.value.grad_norm > 0


@pytest.mark.slow
def test_quadratic_oracle_stationary_variance():
    """f(x) = x^2, beta = 4: the chain's variance is within 3 standard errors of 1/(2 beta)."""
    beta = 4.0
    cfg = RunConfig(beta=beta, h=1e-3, steps=400_000, seed=17)
    obj = QuadraticObjective(1.0)
    state = ChainState(np.zeros(1), 0, RngStream(cfg.seed))
    xs = np.empty(cfg.steps)
    for i in range(cfg.steps):
        state = langevin_step(obj, cfg, state)
        xs[i] = state.x[0]
    xs = xs[cfg.burnin:]

    sq = xs ** 2
    variance = float(np.mean(sq))
    se = math.sqrt(np.var(sq) * 2.0 * iact(sq).value / sq.size)
    assert abs(variance - 1.0 / (2.0 * beta)) < 3.0 * se


def test_zero_temperature_chain_decreases_f(instance_factory):
    """Without noise and with small h beta, f never increases along the chain."""
    cfg = RunConfig(beta=1.0, h=1e-3, steps=300, seed=0)
    for seed in range(10):
        inst = instance_factory(Variant.FACTORIZATION, seed=seed)
        obj = InstanceObjective(inst)
        start = inst.x_star + 0.3 * RngStream(seed).standard_normal(inst.x_star.shape) / math.sqrt(inst.x_star.size)
        state = ChainState(start, 0, RngStream(seed))
        values = [obj.loss(state.x)]
        for _ in range(cfg.steps):
            state = langevin_step(obj, cfg, state, noise=False)
            values.append(obj.loss(state.x))
        values = np.array(values)
        assert np.all(np.diff(values) <= 1e-12 * values[:-1])


def test_zero_temperature_chain_is_rotation_equivariant(factorization_instance, rng):
    """Noise-free chains from X and X U keep identical eta and f traces."""
    cfg = RunConfig(beta=100.0, h=1e-4, steps=200, seed=0)
    obj = InstanceObjective(factorization_instance)
    spec = OrbitSpec(factorization_instance.x_star, 1)
    U = haar_orthonormal(rng, 2, 2)
    start = factorization_instance.x_star + 0.05 * rng.standard_normal((6, 2))
    a, b = ChainState(start, 0, rng), ChainState(start @ U, 0, rng)
    for _ in range(cfg.steps):
        a = langevin_step(obj, cfg, a, noise=False)
        b = langevin_step(obj, cfg, b, noise=False)
        assert obj.loss(b.x) == pytest.approx(obj.loss(a.x), rel=1e-9)
        assert nearest_branch(spec.x0, b.x).distance == pytest.approx(nearest_branch(spec.x0, a.x).distance, rel=1e-9)


def test_rotated_instance_gives_identical_traces(factorization_instance, run_config, rng):
    """X* -> X* U with the same observations and noise stream leaves the eta and f traces unchanged."""
    U = random_rotation(rng, 2, 1)
    rotated = dataclasses.replace(factorization_instance, x_star=factorization_instance.x_star @ U)
    x0 = factorization_instance.x_star
    base = run_chain(InstanceObjective(factorization_instance), run_config, x0, 0, OrbitSpec(x0, 1))
    turned = run_chain(InstanceObjective(rotated), run_config, x0, 0, OrbitSpec(rotated.x_star, 1))
    np.testing.assert_allclose(turned.f, base.f, rtol=1e-12)
    np.testing.assert_allclose(turned.eta, base.eta, rtol=1e-8, atol=1e-20)


def test_keep_x_stores_retained_iterates(factorization_instance, run_config):
    """keep_x records one d x k iterate per retained step; the default keeps none."""
    x0 = factorization_instance.x_star
    obj = InstanceObjective(factorization_instance)
    kept = run_chain(obj, run_config.model_copy(update={"keep_x": True}), x0, 0, OrbitSpec(x0, 1))
    plain = run_chain(obj, run_config, x0, 0, OrbitSpec(x0, 1))
    assert kept.x.shape == (len(kept), 6, 2)
    assert plain.x is None
    np.testing.assert_array_equal(kept.eta, plain.eta)
    assert obj.loss(kept.x[-1]) == kept.f[-1]


def test_reference_radii_report_init_distance(factorization_instance):
    """The reported initial distance is the distance to the nearest branch of X*."""
    x0 = factorization_instance.x_star + 1e-3
    ref = reference_radii(factorization_instance, x0, beta=1e4, epsilon=0.05)
    assert ref["init_distance"] == pytest.approx(nearest_branch(factorization_instance.x_star, x0).distance)
    assert ref["init_distance_ratio"] == pytest.approx(ref["init_distance"] / ref["initialization_radius"])
    assert ref["theoretical_tube_radius"] > 0
