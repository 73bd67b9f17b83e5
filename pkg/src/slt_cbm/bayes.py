"""Tempered-posterior sampling and the free-energy / learning-coefficient estimators."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import logsumexp

from .models import (
    Dataset,
    InputSpec,
    ModelFamily,
    ParamPoint,
    linear_predictors,
    log_likelihood_batch,
    pointwise_log_density,
    sample_responses,
    split_flat,
)
from .rlct import ConceptKind, TaskKind

ACCEPT_LOW, ACCEPT_HIGH = 0.05, 0.95
RHAT_MAX = 1.2
# tempered log-likelihood gap (nats) beyond which a burn-in chain is moved to the best chain
RESTART_GAP = 10.0


class DiagnosticError(RuntimeError):
    """A sampler run failed its acceptance-rate diagnostics."""


class EstimationError(RuntimeError):
    """An estimator could not produce a value from the supplied settings."""


@dataclass(frozen=True)
class PriorSpec:
    """Uniform prior on the box ``[-half_width, half_width]^d``."""

    half_width: float = 5.0

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("prior half_width must be positive")

    def contains(self, flat: np.ndarray) -> np.ndarray:
        return np.all(np.abs(flat) < self.half_width, axis=-1)

    def sample(self, rng: np.random.Generator, size, dim: int) -> np.ndarray:
        shape = (size, dim) if np.isscalar(size) else (*size, dim)
        return rng.uniform(-self.half_width, self.half_width, shape)

    def check_truth(self, truth: ParamPoint) -> None:
        if not bool(self.contains(truth.flatten())):
            raise ValueError(f"truth lies outside the prior box of half-width {self.half_width}")


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 4
    n_burn: int = 2000
    n_keep: int = 1000
    thin: int = 1
    target_accept: float = 0.3
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_chains", "n_keep", "thin"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_burn < 0:
            raise ValueError("n_burn must be >= 0")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not self.beta > 0:
            raise ValueError("inverse temperature beta must be positive")


@dataclass
class ChainResult:
    family: ModelFamily
    draws: np.ndarray  # (chains, n_keep, d)
    loglik: np.ndarray  # (chains, n_keep), untempered log likelihood
    acceptance: np.ndarray  # (chains,), post burn-in
    beta: float
    ess: float
    rhat: float = float("nan")
    failures: list[str] = field(default_factory=list)
    restarts: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    def flat_draws(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return split_flat(self.family, self.flat_draws())

    def mean_nll(self) -> float:
        return float(-self.loglik.mean())

    def raise_on_failure(self) -> None:
        if self.failures:
            raise DiagnosticError("; ".join(self.failures))

    def to_csv(self, path) -> None:
        d = self.draws.shape[-1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "draw", *[f"w{i}" for i in range(d)], "loglik"])
            for ci in range(self.draws.shape[0]):
                for k in range(self.draws.shape[1]):
                    writer.writerow([ci, k, *map(repr, self.draws[ci, k].tolist()), repr(float(self.loglik[ci, k]))])

    @classmethod
    def from_draws(cls, family: ModelFamily, flat: np.ndarray, data: Dataset | None = None, beta: float = 1.0):
        """Wrap fixed parameter draws (e.g. the truth repeated) as a chain."""
        flat = np.atleast_2d(np.asarray(flat, dtype=float))
        if data is not None:
            left, right = split_flat(family, flat)
            ll = log_likelihood_batch(family, left, right, data)
        else:
            ll = np.zeros(flat.shape[0])
        return cls(family, flat[None], ll[None], np.zeros(1), beta, float(flat.shape[0]), 1.0)


def effective_sample_size(trace: np.ndarray) -> float:
    """ESS of a (chains, draws) trace via Geyer's initial positive sequence."""
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    chains, n = trace.shape
    if n < 4:
        return float(chains * n)
    centered = trace - trace.mean(axis=1, keepdims=True)
    var = centered.var(axis=1)
    if np.all(var == 0):
        return float(chains * n)
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(spec * np.conj(spec), size, axis=1)[:, :n] / n
    rho = (acov / np.where(var > 0, var, 1.0)[:, None]).mean(axis=0)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(chains * n / max(tau, 1.0 / (chains * n)))


def split_rhat(trace: np.ndarray) -> float:
    """Split-chain potential scale reduction of a (chains, draws) trace."""
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    half = trace.shape[1] // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([trace[:, :half], trace[:, half : 2 * half]], axis=0)
    within = parts.var(axis=1, ddof=1).mean()
    between = half * parts.mean(axis=1).var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else float("inf")
    return float(np.sqrt(((half - 1) / half * within + between / half) / within))


def _chain_rngs(seed: int, n_chains: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, ci]) for ci in range(n_chains)]


def tempered_posterior_sample(
    family: ModelFamily,
    data: Dataset,
    prior: PriorSpec,
    cfg: McmcConfig,
    init: np.ndarray | None = None,
    block: int = 256,
    anneal_frac: float = 0.4,
) -> ChainResult:
    """Adaptive random-walk Metropolis on ``prior(w) * prod p(X_i | w)^beta``.

    Chains run in lockstep but each one draws its randomness from its own
    generator seeded by ``(cfg.seed, chain index)``.  The first
    ``anneal_frac`` of burn-in raises the inverse temperature geometrically
    from ``beta * 1e-3`` to ``beta`` so chains started in a minor basin can
    leave it.  Throughout burn-in the step size follows a Robbins-Monro
    recursion toward ``cfg.target_accept`` and the proposal covariance is
    re-estimated from the chain's own history; both are frozen afterwards.
    """
    d = family.n_params
    C = cfg.n_chains
    rngs = _chain_rngs(cfg.seed, C)
    if init is None:
        state = np.stack([prior.sample(r, 1, d)[0] for r in rngs])
    else:
        state = np.broadcast_to(np.asarray(init, dtype=float), (C, d)).copy()
        if not np.all(prior.contains(state)):
            raise ValueError("initial state outside the prior box")

    def loglik(flat):
        left, right = split_flat(family, flat)
        return log_likelihood_batch(family, left, right, data)

    ll = loglik(state)
    chol = np.broadcast_to(np.eye(d), (C, d, d)).copy()
    log_scale = np.full(C, math.log(0.1 * prior.half_width))
    n_steps = cfg.n_burn + cfg.n_keep * cfg.thin
    draws = np.empty((C, cfg.n_keep, d))
    trace = np.empty((C, cfg.n_keep))
    accepted = np.zeros(C)
    n_anneal = int(anneal_frac * cfg.n_burn)
    checkpoints = {n_anneal + int((cfg.n_burn - n_anneal) * f) for f in (0.25, 0.5, 0.75)} - {0}
    history: list[np.ndarray] = []
    hist_start = 0
    restarts = 0
    noise = uniforms = None
    kept = 0
    for t in range(n_steps):
        j = t % block
        if j == 0:
            m = min(block, n_steps - t)
            noise = np.stack([r.standard_normal((m, d)) for r in rngs], axis=1)
            uniforms = np.stack([r.random(m) for r in rngs], axis=1)
        step = np.einsum("cij,cj->ci", chol, noise[j]) * np.exp(log_scale)[:, None]
        proposal = state + step
        inside = prior.contains(proposal)
        ll_prop = np.full(C, -np.inf)
        if np.any(inside):
            ll_prop[inside] = loglik(proposal[inside])
        beta_t = cfg.beta * 1e-3 ** (1.0 - t / n_anneal) if t < n_anneal else cfg.beta
        log_ratio = beta_t * (ll_prop - ll)
        accept = inside & (np.log(uniforms[j]) < log_ratio)
        state = np.where(accept[:, None], proposal, state)
        ll = np.where(accept, ll_prop, ll)
        if t < cfg.n_burn:
            if t == n_anneal:
                hist_start = t
            rate = np.minimum(1.0, np.exp(np.minimum(log_ratio, 0.0)))
            rate = np.where(inside, rate, 0.0)
            log_scale += (rate - cfg.target_accept) * 5.0 / (t - hist_start + 10) ** 0.6
            if t >= n_anneal:
                history.append(state.copy())
            if t + 1 in checkpoints:
                window = np.stack(history[len(history) // 2 :], axis=1)
                if window.shape[1] > 2 * d:
                    for ci in range(C):
                        cov = np.cov(window[ci], rowvar=False) + 1e-12 * np.eye(d)
                        try:
                            chol[ci] = np.linalg.cholesky(cov)
                        except np.linalg.LinAlgError:
                            continue
                        log_scale[ci] = math.log(2.38 / math.sqrt(d))
                    hist_start = t
                history = []
            if t + 1 == n_anneal or t + 1 in checkpoints:
                lagging = cfg.beta * (ll.max() - ll) > RESTART_GAP
                if np.any(lagging):
                    best = int(np.argmax(ll))
                    state[lagging] = state[best]
                    ll[lagging] = ll[best]
                    chol[lagging] = chol[best]
                    log_scale[lagging] = log_scale[best]
                    restarts += int(lagging.sum())
        else:
            accepted += accept
            if (t - cfg.n_burn + 1) % cfg.thin == 0:
                draws[:, kept] = state
                trace[:, kept] = ll
                kept += 1
    acceptance = accepted / (cfg.n_keep * cfg.thin)
    failures = [
        f"chain {ci}: acceptance rate {a:.3f} outside [{ACCEPT_LOW}, {ACCEPT_HIGH}]"
        for ci, a in enumerate(acceptance)
        if not ACCEPT_LOW <= a <= ACCEPT_HIGH
    ]
    rhat = split_rhat(trace)
    if rhat > RHAT_MAX:
        failures.append(f"log-likelihood split R-hat {rhat:.3f} exceeds {RHAT_MAX}")
    return ChainResult(
        family, draws, trace, acceptance, cfg.beta, effective_sample_size(trace), rhat, failures, restarts
    )


def wbic_beta(n: int) -> float:
    if n < 2:
        raise ValueError("WBIC temperature 1/log n needs n >= 2")
    return 1.0 / math.log(n)


def wbic(family: ModelFamily, data: Dataset, prior: PriorSpec, cfg: McmcConfig, strict: bool = True) -> float:
    """Posterior mean of the negative log likelihood sum at beta = 1/log n."""
    if data.n == 0:
        return 0.0
    chain = tempered_posterior_sample(family, data, prior, replace(cfg, beta=wbic_beta(data.n)))
    if strict:
        chain.raise_on_failure()
    return chain.mean_nll()


class TwoTemperatureEstimate(NamedTuple):
    lam: float
    nll_low: float
    nll_high: float
    beta_low: float
    beta_high: float
    failures: tuple[str, ...]


def rlct_two_temperature_detail(
    family: ModelFamily,
    data: Dataset,
    prior: PriorSpec,
    cfg: McmcConfig,
    beta1: float | None = None,
    beta2: float | None = None,
    strict: bool = True,
) -> TwoTemperatureEstimate:
    if data.n < 2:
        raise EstimationError("two-temperature estimate needs n >= 2")
    beta1 = wbic_beta(data.n) if beta1 is None else beta1
    beta2 = 1.5 * wbic_beta(data.n) if beta2 is None else beta2
    if not 0 < beta1 < beta2:
        raise ValueError("need 0 < beta1 < beta2")
    # same seed at both temperatures: common random numbers for the difference
    low = tempered_posterior_sample(family, data, prior, replace(cfg, beta=beta1))
    high = tempered_posterior_sample(family, data, prior, replace(cfg, beta=beta2))
    failures = tuple(low.failures + high.failures)
    if strict and failures:
        raise DiagnosticError("; ".join(failures))
    e1, e2 = low.mean_nll(), high.mean_nll()
    return TwoTemperatureEstimate((e1 - e2) / (1.0 / beta1 - 1.0 / beta2), e1, e2, beta1, beta2, failures)


def rlct_two_temperature(family, data, prior, cfg, beta1=None, beta2=None) -> float:
    """``(E^{b1}[nL_n] - E^{b2}[nL_n]) / (1/b1 - 1/b2)``; defaults b1 = 1/log n, b2 = 1.5/log n."""
    return rlct_two_temperature_detail(family, data, prior, cfg, beta1, beta2).lam


def posterior_predictive_log_density(chain: ChainResult, x, y, c=None) -> float:
    """log of the draw-averaged conditional density at a single record."""
    family = chain.family
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    c = np.zeros((1, family.dims.n_concepts)) if c is None else np.atleast_2d(np.asarray(c, dtype=float))
    left, right = chain.params()
    logp = pointwise_log_density(family, left, right, x, y, c)[:, 0]
    return float(logsumexp(logp) - math.log(logp.shape[0]))


class GenErrorEstimate(NamedTuple):
    estimate: float
    std_error: float

    @property
    def flagged(self) -> bool:
        return self.estimate < -3.0 * self.std_error


def _thin_draws(chain: ChainResult, max_draws: int) -> tuple[np.ndarray, np.ndarray]:
    flat = chain.flat_draws()
    if flat.shape[0] > max_draws:
        idx = np.linspace(0, flat.shape[0] - 1, max_draws).round().astype(int)
        flat = flat[idx]
    return split_flat(chain.family, flat)


def estimate_generalization_error(
    chain: ChainResult,
    truth: ParamPoint,
    inputs: InputSpec,
    n_test: int,
    rng_seed: int,
    max_draws: int = 1000,
    chunk: int = 512,
) -> GenErrorEstimate:
    """Monte Carlo KL from the truth to the posterior predictive.

    Test inputs come in pairs sharing ``x``; Gaussian noise is mirrored within a
    pair (antithetic), which cancels the leading odd term of the log ratio.
    Discrete responses are drawn independently.  The standard error is taken
    over pairs.
    """
    family = chain.family
    if n_test < 2:
        raise ValueError("n_test must be >= 2")
    rng = np.random.default_rng(rng_seed)
    half = n_test // 2
    x_half = inputs.sample(rng, half)
    y1, c1 = sample_responses(family, truth.left, truth.right, x_half, rng)
    y2, c2 = sample_responses(family, truth.left, truth.right, x_half, rng)
    mean_y, mean_c = linear_predictors(family, truth.left, truth.right, x_half)
    if family.kinds.task is TaskKind.REAL:
        y2 = 2.0 * mean_y - y1
    if family.dims.n_concepts and family.kinds.concept is ConceptKind.REAL:
        c2 = 2.0 * mean_c - c1
    x = np.vstack([x_half, x_half])
    y = np.vstack([y1, y2])
    c = np.vstack([c1, c2])
    left, right = _thin_draws(chain, max_draws)
    log_q = pointwise_log_density(family, truth.left, truth.right, x, y, c)
    log_pred = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        sl = slice(s, s + chunk)
        lp = pointwise_log_density(family, left, right, x[sl], y[sl], c[sl])
        log_pred[sl] = logsumexp(lp, axis=0) - math.log(lp.shape[0])
    diff = log_q - log_pred
    pairs = 0.5 * (diff[:half] + diff[half:])
    se = float(pairs.std(ddof=1) / math.sqrt(half)) if half > 1 else float("nan")
    result = GenErrorEstimate(float(pairs.mean()), se)
    if result.flagged:
        warnings.warn(f"generalization error estimate {result.estimate:.3g} is below -3 standard errors")
    return result


@dataclass
class VolumeFit:
    lam: float
    std_error: float
    t_grid: np.ndarray
    hits: np.ndarray
    used: np.ndarray
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "lambda_hat": self.lam,
            "std_error": self.std_error,
            "t_grid": self.t_grid.tolist(),
            "hits": self.hits.tolist(),
            "used": self.used.tolist(),
            "n_samples": self.n_samples,
        }


def estimate_rlct_volume(
    kl_evaluator: Callable[[np.ndarray], np.ndarray],
    prior_sampler: Callable[[np.random.Generator, int], np.ndarray],
    t_grid,
    n_samples: int,
    rng_seed: int,
    min_hits: int = 30,
    chunk: int = 1_000_000,
) -> VolumeFit:
    """Slope of log V(t) against log t, V(t) the prior mass of ``{K < t}``.

    ``kl_evaluator`` maps an ``(m, d)`` array of parameters to ``m`` nonnegative
    values; ``prior_sampler(rng, m)`` returns ``m`` prior draws.  Grid points
    with fewer than ``min_hits`` hits are left out of the least-squares fit.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(t_grid <= 0) or np.any(np.diff(t_grid) >= 0):
        raise ValueError("t_grid must be strictly decreasing and positive")
    rng = np.random.default_rng(rng_seed)
    hits = np.zeros(t_grid.size, dtype=np.int64)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        values = np.asarray(kl_evaluator(prior_sampler(rng, m)))
        hits += np.searchsorted(np.sort(values), t_grid, side="left")
        done += m
    used = hits >= min_hits
    if used.sum() < 3:
        raise EstimationError(
            f"only {int(used.sum())} grid points reached {min_hits} hits; t_grid too small for n_samples={n_samples}"
        )
    lx = np.log(t_grid[used])
    ly = np.log(hits[used] / n_samples)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    k = lx.size
    se = math.sqrt(np.sum(resid**2) / (k - 2) / np.sum((lx - lx.mean()) ** 2)) if k > 2 else float("nan")
    return VolumeFit(float(slope), se, t_grid, hits, used, n_samples)
