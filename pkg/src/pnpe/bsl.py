"""Bayesian synthetic likelihood.

The likelihood of the observed summaries is approximated by a Gaussian whose
mean and covariance are estimated from ``m`` simulations at the parameter,
and explored with random-walk Metropolis-Hastings.  The estimate at the
current state is carried over between iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pnpe.core import BoxPrior, RngLike, as_generator, prior_logpdf
from pnpe.models import Simulator

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2 * np.pi)


class SingularCovarianceError(RuntimeError):
    pass


@dataclass
class BslConfig:
    m: int = 100
    n_iters: int = 10_000
    proposal_cov: Optional[np.ndarray] = None
    init: Optional[np.ndarray] = None
    burn_in: int = 0
    adapt: bool = True
    target_acceptance: tuple = (0.15, 0.30)
    adapt_every: int = 100

    def validate(self, summary_dim: int) -> None:
        if self.m <= summary_dim + 1:
            raise ValueError(f"m={self.m} must exceed summary dimension + 1 = {summary_dim + 1}")
        if self.n_iters < 1:
            raise ValueError("n_iters must be at least 1")
        if not 0 <= self.burn_in < self.n_iters:
            raise ValueError("burn_in must lie in [0, n_iters)")


@dataclass
class BslChain:
    theta: np.ndarray
    loglik: np.ndarray
    accepted: np.ndarray
    acceptance_rate: float
    n_sims: int
    burn_in: int
    proposal_cov: np.ndarray
    converged: bool = True
    info: dict = field(default_factory=dict)

    @property
    def samples(self) -> np.ndarray:
        """Post burn-in draws."""
        return self.theta[self.burn_in + 1 :]

    def to_csv(self, names) -> str:
        lines = ["iteration," + ",".join(names) + ",loglik,accepted"]
        for i, row in enumerate(self.theta):
            vals = ",".join(repr(float(v)) for v in row)
            lines.append(f"{i},{vals},{float(self.loglik[i])!r},{int(self.accepted[i])}")
        return "\n".join(lines) + "\n"


def gaussian_loglik(s_obs: np.ndarray, summaries: np.ndarray, max_jitter_tries: int = 6) -> float:
    """Log density of ``s_obs`` under the moment-matched Gaussian of ``summaries``."""
    summaries = np.asarray(summaries, dtype=float)
    mu = summaries.mean(axis=0)
    cov = np.atleast_2d(np.cov(summaries, rowvar=False))
    diff = np.asarray(s_obs, dtype=float).reshape(-1) - mu
    scale = float(np.mean(np.diag(cov))) or 1.0
    jitter = 0.0
    for _ in range(max_jitter_tries + 1):
        try:
            L = np.linalg.cholesky(cov + jitter * np.eye(len(mu)))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 * scale if jitter == 0 else jitter * 100
    else:
        raise SingularCovarianceError("synthetic likelihood covariance is singular")
    z = np.linalg.solve(L, diff)
    return float(-0.5 * (len(mu) * _LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def synthetic_loglik(theta, model: Simulator, s_obs, m: int, rng: RngLike) -> float:
    """Gaussian synthetic log likelihood from ``m`` simulations at ``theta``."""
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    summaries = model.simulate_summaries(np.repeat(theta, m, axis=0), as_generator(rng))
    if not np.all(np.isfinite(summaries)):
        return -np.inf
    return gaussian_loglik(s_obs, summaries)


def run_bsl_mcmc(cfg: BslConfig, prior: BoxPrior, model: Simulator, s_obs, rng: RngLike) -> BslChain:
    """Random-walk MH on the synthetic likelihood.

    During burn-in the proposal covariance is rescaled every ``adapt_every``
    iterations to keep acceptance within ``target_acceptance``; it is frozen
    afterwards.  Proposals outside the prior box are rejected without
    simulating, so ``n_sims`` can fall below ``m * (n_iters + 1)``.
    """
    cfg.validate(model.summary_dim)
    gen = as_generator(rng)
    d = prior.dim
    s_obs = np.asarray(s_obs, dtype=float)
    cur = prior.sample(1, gen)[0] if cfg.init is None else np.asarray(cfg.init, dtype=float).copy()
    if not np.isfinite(prior_logpdf(prior, cur)):
        raise ValueError("initial value lies outside the prior support")
    cov = np.eye(d) * 0.01 if cfg.proposal_cov is None else np.atleast_2d(np.asarray(cfg.proposal_cov, dtype=float))
    chol = np.linalg.cholesky(cov + 1e-300 * np.eye(d)) if np.any(cov) else np.zeros((d, d))
    scale = 1.0

    cur_ll = synthetic_loglik(cur, model, s_obs, cfg.m, gen)
    n_sims = cfg.m
    cur_lp = prior_logpdf(prior, cur)

    theta = np.empty((cfg.n_iters + 1, d))
    loglik = np.empty(cfg.n_iters + 1)
    accepted = np.zeros(cfg.n_iters + 1, dtype=bool)
    theta[0], loglik[0] = cur, cur_ll
    window = 0
    for it in range(1, cfg.n_iters + 1):
        prop = cur + scale * (chol @ gen.standard_normal(d))
        prop_lp = prior_logpdf(prior, prop)
        if np.isfinite(prop_lp):
            prop_ll = synthetic_loglik(prop, model, s_obs, cfg.m, gen)
            n_sims += cfg.m
            log_ratio = prop_ll - cur_ll + prop_lp - cur_lp
            if np.isfinite(prop_ll) and (not np.isfinite(cur_ll) or np.log(gen.uniform()) < log_ratio):
                cur, cur_ll, cur_lp = prop, prop_ll, prop_lp
                accepted[it] = True
                window += 1
        theta[it], loglik[it] = cur, cur_ll
        if cfg.adapt and it <= cfg.burn_in and it % cfg.adapt_every == 0:
            rate = window / cfg.adapt_every
            lo, hi = cfg.target_acceptance
            if rate < lo:
                scale *= 0.7
            elif rate > hi:
                scale *= 1.3
            window = 0
        elif it % cfg.adapt_every == 0:
            window = 0

    post = accepted[cfg.burn_in + 1 :]
    rate = float(post.mean()) if post.size else float(accepted[1:].mean())
    chain = BslChain(
        theta=theta,
        loglik=loglik,
        accepted=accepted,
        acceptance_rate=rate,
        n_sims=int(n_sims),
        burn_in=cfg.burn_in,
        proposal_cov=(scale**2) * cov,
        converged=bool(accepted[1:].any()),
    )
    if not chain.converged:
        logger.warning("BSL chain never accepted a proposal; flagged non-converged")
    return chain
