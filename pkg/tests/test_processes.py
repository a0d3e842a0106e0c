import math

import numpy as np
import pytest

from errors import DomainError
from models import CirParams, RunConfig, Variant
from services.manifold import OrbitSpec
from services.operators import InstanceObjective
from services.processes import (
    cir_envelope,
    cir_envelope_quantile,
    cir_mean,
    cir_simulate,
    cir_variance,
    dominance_compare,
    fit_cir,
    ou_components,
    ou_squares_simulate,
    summarize_paths,
)
from services.rng import RngStream
from services.sampler import run_chain


@pytest.fixture
def params():
    return CirParams(gamma=2.0, n_tilde=4.0, y0=1.0, h=1e-3, horizon=5.0)


def test_cir_mean_matches_closed_form(params):
    """Simulated means at t = 0.1, 1, 5 are within 3 standard errors of the ODE mean."""
    paths = cir_simulate(params, RngStream(1), 4000)
    for t in (0.1, 1.0, 5.0):
        y = paths.at(t)
        se = y.std() / math.sqrt(y.size)
        assert abs(y.mean() - cir_mean(params, t)) < 3 * se


def test_cir_matches_ou_squares(params):
    """First two moments of CIR and the squared-OU sum agree within 3 combined standard errors."""
    cir = cir_simulate(params, RngStream(2), 4000)
    ou = ou_squares_simulate(params, RngStream(3), 4000)
    np.testing.assert_allclose(cir.times, ou.times)
    for t in (1.0, 5.0):
        a, b = cir.at(t), ou.at(t)
        se_mean = math.hypot(a.std() / math.sqrt(a.size), b.std() / math.sqrt(b.size))
        assert abs(a.mean() - b.mean()) < 3 * se_mean
        va, vb = (a - a.mean()) ** 2, (b - b.mean()) ** 2
        se_var = math.hypot(va.std() / math.sqrt(a.size), vb.std() / math.sqrt(b.size))
        assert abs(va.mean() - vb.mean()) < 3 * se_var


def test_ou_squares_variance_closed_form(params):
    """The squared-OU sum reproduces the CIR variance formula."""
    ou = ou_squares_simulate(params, RngStream(4), 8000)
    y = ou.at(5.0)
    v = cir_variance(params, 5.0)
    se = math.sqrt(np.var((y - y.mean()) ** 2) / y.size)
    assert abs(y.var() - v) < 3 * se


def test_ou_component_count():
    """4 n_tilde / sigma^2 components; non-integers are rejected."""
    assert ou_components(CirParams(gamma=1.0, n_tilde=4.0, y0=0.0, h=0.1, horizon=1.0)) == 16
    assert ou_components(CirParams(gamma=1.0, n_tilde=0.25, y0=0.0, h=0.1, horizon=1.0)) == 1
    with pytest.raises(DomainError):
        ou_components(CirParams(gamma=1.0, n_tilde=0.3, y0=0.0, h=0.1, horizon=1.0))


def test_single_component_stationary_variance():
    """One OU component (n_tilde = 1/4) has stationary E[Y] = 1/(4 gamma)."""
    params = CirParams(gamma=1.0, n_tilde=0.25, y0=0.0, h=1e-2, horizon=10.0)
    y = ou_squares_simulate(params, RngStream(5), 20_000).at(10.0)
    assert abs(y.mean() - 0.25) < 3 * y.std() / math.sqrt(y.size)


@pytest.mark.parametrize("gamma, n_tilde, y0", [(2.0, 4.0, 1.0), (1.0, 1.0, 0.0), (5.0, 2.0, 2.0)])
def test_sup_quantile_below_envelope(gamma, n_tilde, y0):
    """The empirical (1 - eps) quantile of the running maximum stays below the analytic envelope."""
    params = CirParams(gamma=gamma, n_tilde=n_tilde, y0=y0, h=1e-3, horizon=2.0)
    result = cir_envelope_quantile(params, 0.05, 2.0, RngStream(6), paths=2000)
    assert result.empirical <= result.analytic


def test_envelope_scaling():
    """Doubling n_tilde scales the envelope by sqrt(2) at y0 = 0 and by less otherwise."""
    base = CirParams(gamma=2.0, n_tilde=1.0, y0=0.0, h=1e-3, horizon=1.0)
    doubled = base.model_copy(update={"n_tilde": 2.0})
    assert cir_envelope(doubled, 0.05) / cir_envelope(base, 0.05) == pytest.approx(math.sqrt(2.0))
    base, doubled = (p.model_copy(update={"y0": 1.0}) for p in (base, doubled))
    assert cir_envelope(doubled, 0.05) / cir_envelope(base, 0.05) < math.sqrt(2.0)


def test_fit_recovers_parameters():
    """Least-squares fit on simulated paths recovers gamma and n_tilde within 10%."""
    params = CirParams(gamma=2.0, n_tilde=4.0, y0=2.0, h=1e-3, horizon=20.0)
    paths = cir_simulate(params, RngStream(7), 200)
    fit = fit_cir(list(paths.values), dt=float(paths.times[1]))
    assert fit.gamma_hat == pytest.approx(2.0, rel=0.1)
    assert fit.n_tilde_hat == pytest.approx(4.0, rel=0.1)
    assert fit.sigma_hat == pytest.approx(1.0, rel=0.1)


def test_fit_needs_data():
    """Series without two finite points cannot be fitted."""
    with pytest.raises(DomainError):
        fit_cir(np.array([1.0]), dt=0.1)


def test_dominance_self_consistency():
    """A CIR sample never exceeds itself; a tenfold copy exceeds it everywhere."""
    params = CirParams(gamma=2.0, n_tilde=4.0, y0=1.0, h=1e-2, horizon=5.0)
    paths = cir_simulate(params, RngStream(8), 500)
    same = dominance_compare(paths.values, params, RngStream(8), observed_dt=float(paths.times[1]), paths=500)
    assert not same.resampled
    assert same.flagged_fraction == 0.0
    scaled = dominance_compare(10 * paths.values, params, RngStream(8), observed_dt=float(paths.times[1]), paths=500)
    assert np.all(scaled.flags)


def test_summary_columns(params):
    """Summary rows have time, three quantiles and the mean, with increasing time."""
    table = summarize_paths(cir_simulate(params, RngStream(9), 100))
    assert table.shape[1] == 5
    assert np.all(np.diff(table[:, 0]) > 0)
    assert np.all(table[:, 1] <= table[:, 2]) and np.all(table[:, 2] <= table[:, 3])


def test_off_grid_time_rejected(params):
    """at() only accepts recorded times."""
    paths = cir_simulate(params, RngStream(10), 10)
    with pytest.raises(DomainError):
        paths.at(0.0012345)


@pytest.mark.slow
def test_factorization_eta_dominated_by_fitted_cir(instance_factory):
    """Stationary eta of a factorization run stays below a CIR with the fitted rate and doubled drift."""
    inst = instance_factory(Variant.FACTORIZATION, d=10, k=2, beta=1e4, noiseless=True)
    cfg = RunConfig(beta=1e4, h=1e-7, steps=44_000, burnin=4_000, thin=10, seed=21)
    x0 = inst.x_star
    obj = InstanceObjective(inst)
    observed = np.stack([run_chain(obj, cfg, x0, c, OrbitSpec(x0, 1)).eta for c in range(8)])
    dt = cfg.h * cfg.thin

    fit = fit_cir(list(observed), dt)
    params = CirParams(
        gamma=fit.gamma_hat,
        n_tilde=2.0 * fit.n_tilde_hat,
        y0=2.0 * float(observed.mean()),
        h=dt,
        horizon=observed.shape[1] * dt,
        sigma=fit.sigma_hat,
    )
    report = dominance_compare(observed, params, RngStream(22), observed_dt=dt, paths=1000)
    assert report.flagged_fraction <= 0.01
