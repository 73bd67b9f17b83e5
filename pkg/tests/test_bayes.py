import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from slt_cbm.bayes import (
    ChainResult,
    DiagnosticError,
    EstimationError,
    McmcConfig,
    PriorSpec,
    effective_sample_size,
    estimate_generalization_error,
    estimate_rlct_volume,
    posterior_predictive_log_density,
    rlct_two_temperature,
    split_rhat,
    tempered_posterior_sample,
    wbic,
)
from slt_cbm.models import (
    Dataset,
    InputSpec,
    Model,
    ModelFamily,
    ParamPoint,
    log_likelihood_batch,
    sample_dataset,
)
from slt_cbm.rlct import ModelDims

CBM111 = ModelFamily(Model.CBM, ModelDims(1, 1, 1))
ONE = ParamPoint(np.ones((1, 1)), np.ones((1, 1)))
X1 = InputSpec(n_in=1)


def empty(family):
    d = family.dims
    return Dataset(np.zeros((0, d.n_in)), np.zeros((0, d.n_concepts)), np.zeros((0, d.n_out)), family)


# --- diagnostics ----------------------------------------------------------------


def test_ess_iid_and_ar1():
    rng = np.random.default_rng(0)
    iid = rng.normal(size=(4, 5000))
    assert effective_sample_size(iid) == pytest.approx(20000, rel=0.1)
    rho = 0.8
    ar = np.zeros((4, 20000))
    for t in range(1, ar.shape[1]):
        ar[:, t] = rho * ar[:, t - 1] + rng.normal(size=4)
    expected = ar.size * (1 - rho) / (1 + rho)
    assert effective_sample_size(ar) == pytest.approx(expected, rel=0.2)


def test_rhat():
    rng = np.random.default_rng(1)
    assert split_rhat(rng.normal(size=(4, 2000))) < 1.01
    shifted = rng.normal(size=(4, 2000)) + np.arange(4)[:, None] * 3.0
    assert split_rhat(shifted) > 1.2


def test_prior_spec():
    p = PriorSpec(2.0)
    assert p.contains(np.array([1.9, -1.9])) and not p.contains(np.array([2.1, 0.0]))
    with pytest.raises(ValueError):
        PriorSpec(0.0)
    with pytest.raises(ValueError):
        p.check_truth(ParamPoint(np.array([[3.0]]), np.ones((1, 1))))
    draws = p.sample(np.random.default_rng(0), 1000, 3)
    assert draws.shape == (1000, 3) and np.all(np.abs(draws) <= 2)


@pytest.mark.parametrize("kw", [{"n_chains": 0}, {"n_keep": 0}, {"thin": 0}, {"n_burn": -1}, {"target_accept": 1.0}, {"beta": 0.0}])
def test_mcmc_config_validation(kw):
    with pytest.raises(ValueError):
        McmcConfig(**kw)


def test_failures_raise():
    chain = ChainResult.from_draws(CBM111, np.zeros((3, 2)))
    chain.failures.append("acceptance: chain 0 rate 0.01 outside [0.05, 0.95]")
    with pytest.raises(DiagnosticError):
        chain.raise_on_failure()


def test_chain_csv(tmp_path):
    chain = ChainResult.from_draws(CBM111, np.arange(6.0).reshape(3, 2))
    chain.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "chain,draw,w0,w1,loglik" and len(lines) == 4


# --- sampler ----------------------------------------------------------------------


def test_empty_data_samples_prior():
    cfg = McmcConfig(n_chains=4, n_burn=500, n_keep=4000, seed=3)
    chain = tempered_posterior_sample(CBM111, empty(CBM111), PriorSpec(1.0), cfg)
    draws = chain.draws[:, ::40, :].reshape(-1, 2)
    for j in range(2):
        assert stats.kstest(draws[:, j], stats.uniform(-1, 2).cdf).pvalue > 1e-3


def test_sampler_deterministic():
    data = sample_dataset(CBM111, ONE, X1, 30, 0)
    cfg = McmcConfig(n_chains=2, n_burn=300, n_keep=200, seed=9)
    a = tempered_posterior_sample(CBM111, data, PriorSpec(), cfg)
    b = tempered_posterior_sample(CBM111, data, PriorSpec(), cfg)
    assert np.array_equal(a.draws, b.draws) and np.array_equal(a.loglik, b.loglik)
    assert not np.array_equal(a.draws[0], a.draws[1])
    assert a.draws.shape == (2, 200, 2) and a.loglik.shape == (2, 200)
    assert np.all((a.acceptance >= 0) & (a.acceptance <= 1))


def test_sampler_stays_in_box():
    data = sample_dataset(CBM111, ONE, X1, 5, 0)
    chain = tempered_posterior_sample(CBM111, data, PriorSpec(1.5), McmcConfig(n_burn=300, n_keep=500))
    assert np.all(np.abs(chain.draws) < 1.5)


def test_loglik_trace_matches_draws():
    data = sample_dataset(CBM111, ONE, X1, 40, 2)
    chain = tempered_posterior_sample(CBM111, data, PriorSpec(), McmcConfig(n_burn=200, n_keep=50, beta=0.5))
    left, right = chain.params()
    assert np.allclose(log_likelihood_batch(CBM111, left, right, data), chain.loglik.ravel())


def test_posterior_mean_matches_grid_oracle():
    data = sample_dataset(CBM111, ONE, X1, 50, 21)
    grid = np.linspace(-5, 5, 801)
    a, b = np.meshgrid(grid, grid, indexing="ij")
    ll = log_likelihood_batch(CBM111, a[..., None, None], b[..., None, None], data)
    w = np.exp(ll - ll.max())
    w /= w.sum()
    oracle_ab, oracle_b = np.sum(w * a * b), np.sum(w * b)
    sd_ab = math.sqrt(np.sum(w * (a * b - oracle_ab) ** 2))
    chain = tempered_posterior_sample(CBM111, data, PriorSpec(), McmcConfig(n_chains=4, n_burn=2000, n_keep=5000, seed=1))
    assert chain.ok, chain.failures
    flat = chain.flat_draws()
    mc_se = sd_ab / math.sqrt(chain.ess)
    assert np.mean(flat[:, 0] * flat[:, 1]) == pytest.approx(oracle_ab, abs=5 * mc_se + 1e-3)
    assert np.mean(flat[:, 1]) == pytest.approx(oracle_b, abs=0.05)


def test_tempered_means_nonincreasing_in_beta():
    data = sample_dataset(CBM111, ONE, X1, 200, 4)
    means = []
    for beta in (0.1, 0.3, 1.0):
        cfg = McmcConfig(n_chains=4, n_burn=1500, n_keep=4000, beta=beta, seed=5)
        means.append(tempered_posterior_sample(CBM111, data, PriorSpec(), cfg).mean_nll())
    assert means[0] > means[1] > means[2]


# --- estimators --------------------------------------------------------------------


def test_wbic_empty():
    assert wbic(CBM111, empty(CBM111), PriorSpec(), McmcConfig()) == 0.0


def test_two_temperature_rejects_bad_betas():
    data = sample_dataset(CBM111, ONE, X1, 50, 0)
    with pytest.raises(ValueError):
        rlct_two_temperature(CBM111, data, PriorSpec(), McmcConfig(), beta1=0.5, beta2=0.2)


@pytest.mark.parametrize(
    "family,truth,lam",
    [
        (CBM111, ONE, 1.0),
        (ModelFamily(Model.CBM, ModelDims(2, 1, 1)), ParamPoint(np.ones((1, 1)), np.array([[0.5, -0.7]])), 1.5),
    ],
    ids=["cbm111", "cbm211"],
)
def test_two_temperature_regular(family, truth, lam):
    cfg = McmcConfig(n_chains=4, n_burn=3000, n_keep=10000)
    inputs = InputSpec(n_in=family.dims.n_in)
    est = [
        rlct_two_temperature(family, sample_dataset(family, truth, inputs, 1000, s), PriorSpec(), replace(cfg, seed=s))
        for s in range(4)
    ]
    assert np.mean(est) == pytest.approx(lam, rel=0.3)


def test_predictive_single_draw():
    x, y, c = np.array([0.4]), np.array([1.2]), np.array([-0.3])
    chain = ChainResult.from_draws(CBM111, np.array([[0.7, 1.1]]))
    expected = stats.norm(0.7 * 1.1 * 0.4, 1).logpdf(1.2) + stats.norm(1.1 * 0.4, 1).logpdf(-0.3)
    assert posterior_predictive_log_density(chain, x, y, c) == pytest.approx(expected)
    dup = ChainResult.from_draws(CBM111, np.array([[0.7, 1.1]] * 5))
    assert posterior_predictive_log_density(dup, x, y, c) == pytest.approx(expected)


def test_predictive_two_component_mixture():
    draws = np.array([[0.7, 1.1], [-1.5, 0.2]])
    x, y, c = 1.3, 0.5, 0.9
    comps = [stats.norm(a * b * x, 1).pdf(y) * stats.norm(b * x, 1).pdf(c) for a, b in draws]
    expected = math.log(0.5 * sum(comps))
    assert posterior_predictive_log_density(ChainResult.from_draws(CBM111, draws), [x], [y], [c]) == pytest.approx(expected)
    flipped = ChainResult.from_draws(CBM111, draws[::-1])
    assert posterior_predictive_log_density(flipped, [x], [y], [c]) == pytest.approx(expected)


def test_gen_error_truth_chain_is_zero():
    chain = ChainResult.from_draws(CBM111, ONE.flatten()[None])
    est = estimate_generalization_error(chain, ONE, X1, 2000, 0)
    assert abs(est.estimate) <= 3 * est.std_error + 1e-12


def test_gen_error_decreases_with_n():
    values = []
    for n in (2, 200):
        data = sample_dataset(CBM111, ONE, X1, n, 1)
        chain = tempered_posterior_sample(CBM111, data, PriorSpec(), McmcConfig(n_burn=1000, n_keep=1000, seed=2))
        values.append(estimate_generalization_error(chain, ONE, X1, 4000, 3).estimate)
    assert values[0] > 0.05 > values[1] > 0


def test_gen_error_flags_negative():
    chain = ChainResult.from_draws(CBM111, np.array([[1.0, 1.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_generalization_error(chain, ONE, X1, 100, 0)


def test_volume_regular_norm():
    fit = estimate_rlct_volume(
        lambda w: np.sum(w**2, axis=1),
        lambda rng, m: rng.uniform(-1, 1, (m, 2)),
        np.geomspace(1e-1, 1e-4, 13),
        1_000_000,
        0,
    )
    assert fit.lam == pytest.approx(1.0, rel=0.1)
    assert fit.hits[0] == pytest.approx(1_000_000 * math.pi * 0.1 / 4, rel=0.02)


def test_volume_scale_invariance():
    kw = dict(prior_sampler=lambda rng, m: rng.uniform(-1, 1, (m, 2)), t_grid=np.geomspace(1e-1, 1e-4, 13), n_samples=500_000, rng_seed=1)
    a = estimate_rlct_volume(lambda w: np.sum(w**2, axis=1), **kw)
    b = estimate_rlct_volume(lambda w: 3.0 * np.sum(w**2, axis=1), **kw)
    assert a.lam == pytest.approx(b.lam, abs=3 * (a.std_error + b.std_error) + 0.02)


def test_volume_errors():
    kl = lambda w: np.sum(w**2, axis=1)  # noqa: E731
    prior = lambda rng, m: rng.uniform(-1, 1, (m, 2))  # noqa: E731
    with pytest.raises(ValueError):
        estimate_rlct_volume(kl, prior, [1e-3, 1e-2], 1000, 0)
    with pytest.raises(EstimationError):
        estimate_rlct_volume(kl, prior, np.geomspace(1e-3, 1e-6, 5), 1000, 0)


def test_volume_report_dict():
    fit = estimate_rlct_volume(lambda w: np.abs(w[:, 0]), lambda rng, m: rng.uniform(-1, 1, (m, 1)), [0.5, 0.25, 0.1, 0.05], 10_000, 0)
    d = fit.to_dict()
    assert set(d) == {"lambda_hat", "std_error", "t_grid", "hits", "used", "n_samples"}
