"""Neural posterior estimation rounds.

A round draws parameters from a proposal, simulates summaries, optionally
drops outlying simulations, and fits a conditional flow ``q(theta | s)``.
Proposals other than the prior are corrected with importance weights
``prior / proposal`` (on by default).  Later rounds sample from the previous
posterior truncated to its highest-density region inside the prior box.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pnpe.core import BoxPrior, RngLike, as_generator, prior_logpdf
from pnpe.flows import FlowArch, FlowModel
from pnpe.models import Simulator
from pnpe.train import TrainConfig, TrainingCorpus, fit_flow, importance_weights

logger = logging.getLogger(__name__)

MIN_ACCEPTANCE = 1e-4


class LeakageError(RuntimeError):
    """Rejection sampling against the prior box has (near) zero acceptance."""


class SimulationBudgetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------


class PriorProposal:
    kind = "prior"

    def __init__(self, prior: BoxPrior):
        self.prior = prior

    def sample(self, n: int, rng: RngLike) -> np.ndarray:
        return self.prior.sample(n, rng)

    def log_prob(self, theta) -> np.ndarray:
        return prior_logpdf(self.prior, np.atleast_2d(theta))


def _rejection(draw, accept, n: int, gen: np.random.Generator, what: str, max_draws: int | None = None):
    """Collect ``n`` accepted rows from repeated batches of ``draw``."""
    out = []
    got = 0
    proposed = 0
    batch = max(n, 1000)
    max_draws = max_draws or max(100 * n, int(10 / MIN_ACCEPTANCE))
    while got < n:
        cand = draw(batch, gen)
        ok = accept(cand)
        proposed += batch
        out.append(cand[ok])
        got += int(ok.sum())
        rate = got / proposed
        if proposed >= 10_000 and rate < MIN_ACCEPTANCE:
            raise LeakageError(f"{what}: acceptance {rate:.2e} after {proposed} draws; fall back to another proposal")
        if proposed >= max_draws and got < n:
            raise LeakageError(f"{what}: only {got}/{n} samples after {proposed} draws")
        if got < n:
            batch = int(min(max((n - got) / max(rate, MIN_ACCEPTANCE) * 1.2, 1000), 1_000_000))
    return np.concatenate(out)[:n], proposed


class FlowProposal:
    """A flow (unconditional, or conditional at a fixed context) restricted to the prior box."""

    kind = "flow"

    def __init__(self, flow: FlowModel, prior: BoxPrior, context=None):
        self.flow = flow
        self.prior = prior
        self.context = None if context is None else np.asarray(context, dtype=float)
        self.draws = 0

    def sample(self, n: int, rng: RngLike) -> np.ndarray:
        gen = as_generator(rng)
        out, proposed = _rejection(
            lambda m, g: self.flow.sample(m, self.context, g), self.prior.contains, n, gen, "flow proposal"
        )
        self.draws += proposed
        return out

    def log_prob(self, theta) -> np.ndarray:
        """Log density up to the constant mass the flow puts inside the box."""
        theta = np.atleast_2d(theta)
        lp = self.flow.logpdf(theta, self.context)
        return np.where(self.prior.contains(theta), lp, -np.inf)


@dataclass
class TruncatedProposal:
    """Previous posterior restricted to ``logpdf >= log_threshold`` and the prior box."""

    base_flow: FlowModel
    prior: BoxPrior
    log_threshold: float
    context: np.ndarray
    acceptance_estimate: float = 1.0
    draws: int = 0
    kind: str = "truncated"

    def accept(self, theta: np.ndarray) -> np.ndarray:
        ok = self.prior.contains(theta)
        if np.any(ok):
            lp = np.full(theta.shape[0], -np.inf)
            lp[ok] = self.base_flow.logpdf(theta[ok], self.context)
            ok &= lp >= self.log_threshold
        return ok

    def sample(self, n: int, rng: RngLike) -> np.ndarray:
        gen = as_generator(rng)
        out, proposed = _rejection(
            lambda m, g: self.base_flow.sample(m, self.context, g), self.accept, n, gen, "truncated proposal"
        )
        self.draws += proposed
        return out

    def log_prob(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        lp = self.base_flow.logpdf(theta, self.context)
        return np.where(self.accept(theta), lp, -np.inf)


def build_truncated_proposal(
    flow: FlowModel,
    prior: BoxPrior,
    s_obs,
    mass_fraction: float = 1 - 1e-4,
    n_calibration: int = 10_000,
    rng: RngLike = 0,
) -> TruncatedProposal:
    """Calibrate the density cut so ``mass_fraction`` of the flow posterior is retained."""
    if not 0 < mass_fraction < 1:
        raise ValueError("mass_fraction must lie in (0, 1)")
    gen = as_generator(rng)
    s_obs = np.asarray(s_obs, dtype=float)
    theta, lp = flow.sample(n_calibration, s_obs, gen, return_logpdf=True)
    threshold = float(np.quantile(lp, 1 - mass_fraction))
    keep = prior.contains(theta) & (lp >= threshold)
    rate = float(keep.mean())
    if rate < MIN_ACCEPTANCE:
        raise LeakageError(
            f"truncated proposal would accept {rate:.3%} of flow samples; the posterior has leaked out of the prior"
        )
    return TruncatedProposal(flow, prior, threshold, s_obs, acceptance_estimate=rate)


def leakage_fraction(flow: FlowModel, prior: BoxPrior, s_obs, n: int = 10_000, rng: RngLike = 0) -> float:
    """Fraction of ``n`` posterior draws at ``s_obs`` falling outside the prior box."""
    if n < 1000:
        raise ValueError("use at least 1000 draws")
    theta = flow.sample(n, None if flow.arch.context_dim == 0 else s_obs, rng)
    return np.count_nonzero(~prior.contains(theta)) / n


# ---------------------------------------------------------------------------
# corpus generation and clipping
# ---------------------------------------------------------------------------


def generate_corpus(
    proposal,
    model: Simulator,
    n_sims: int,
    rng: RngLike,
    reweight: bool = True,
    clip_percentile: Optional[float] = 99.5,
    round_index: int = 0,
    max_fail_fraction: float = 0.10,
) -> TrainingCorpus:
    """Simulate ``n_sims`` pairs from ``proposal``.

    Non-finite simulations are dropped (and counted); more than
    ``max_fail_fraction`` failures aborts the round.
    """
    if n_sims < 1:
        raise ValueError("n_sims must be at least 1")
    gen = as_generator(rng)
    theta = proposal.sample(n_sims, gen)
    summaries = model.simulate_summaries(theta, gen)
    ok = np.all(np.isfinite(summaries), axis=1)
    n_failed = int((~ok).sum())
    if n_failed > max_fail_fraction * n_sims:
        raise SimulationBudgetError(f"{n_failed} of {n_sims} simulations failed")
    theta, summaries = theta[ok], summaries[ok]
    weights = None
    if reweight and proposal.kind != "prior":
        weights = importance_weights(prior_logpdf(proposal.prior, theta), proposal.log_prob(theta), clip_percentile)
    info = {"n_sims": int(n_sims), "n_failed": n_failed, "proposal": proposal.kind}
    return TrainingCorpus(theta, summaries, weights, np.full(len(theta), round_index), info)


def clip_outliers(corpus: TrainingCorpus, threshold: float) -> tuple[TrainingCorpus, float]:
    """Drop records whose summaries have any component with ``|s| > threshold``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if corpus.context is None:
        raise ValueError("corpus has no summaries to clip")
    keep = np.all(np.abs(corpus.context) <= threshold, axis=1)
    if not np.any(keep):
        raise ValueError(f"clip threshold {threshold} removes every record")
    removed = 1.0 - keep.mean()
    out = corpus.subset(np.nonzero(keep)[0])
    out.info["clipped_fraction"] = float(removed)
    return out, float(removed)


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------


def _append(corpus: TrainingCorpus, proposal, extra, reweight, clip_percentile, round_index) -> TrainingCorpus:
    theta = np.vstack([corpus.theta, np.atleast_2d(extra[0])])
    context = np.vstack([corpus.context, np.atleast_2d(extra[1])])
    weights = None
    if reweight and proposal.kind != "prior":
        weights = importance_weights(prior_logpdf(proposal.prior, theta), proposal.log_prob(theta), clip_percentile)
    info = dict(corpus.info, n_recycled=len(extra[0]))
    return TrainingCorpus(theta, context, weights, np.full(len(theta), round_index), info)


@dataclass
class RoundSpec:
    n_sims: int = 10_000
    proposal: str = "prior"  # "prior", "flow" (unconditional q_G) or "truncated"
    clip_threshold: Optional[float] = None
    round_index: int = 1
    mass_fraction: float = 1 - 1e-4
    n_calibration: int = 10_000

    def __post_init__(self):
        if self.proposal not in ("prior", "flow", "truncated"):
            raise ValueError(f"unknown proposal kind {self.proposal!r}")


@dataclass
class RoundRecord:
    round_index: int
    proposal: str
    n_sims: int
    n_failed: int
    n_train: int
    clipped_fraction: float
    calibration_draws: int
    proposal_draws: int
    leakage: float
    epochs: int
    best_val_loss: float
    ess_fraction: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def npe_round(
    spec: RoundSpec,
    model: Simulator,
    s_obs,
    proposal_flow: Optional[FlowModel] = None,
    arch: Optional[FlowArch] = None,
    train_cfg: TrainConfig = TrainConfig(),
    rng: RngLike = 0,
    reweight: bool = True,
    clip_percentile: Optional[float] = 99.5,
    extra: Optional[tuple] = None,
) -> tuple[FlowModel, RoundRecord, TrainingCorpus]:
    """One round: propose, simulate, clip, fit ``q(theta | s)``.

    ``proposal_flow`` is the unconditional preconditioning flow for
    ``proposal="flow"`` or the previous round's posterior for ``"truncated"``.
    ``extra`` is an optional ``(theta, summaries)`` pair of already simulated
    records appended to the corpus (not counted in ``n_sims``).
    """
    if spec.n_sims < 1:
        raise ValueError("a round needs at least one simulation")
    gen = as_generator(rng)
    s_obs = np.asarray(s_obs, dtype=float)
    prior = model.prior
    calibration = 0
    if spec.proposal == "prior":
        proposal = PriorProposal(prior)
    elif proposal_flow is None:
        raise ValueError(f"proposal {spec.proposal!r} needs a flow")
    elif spec.proposal == "flow":
        proposal = FlowProposal(proposal_flow, prior)
    else:
        proposal = build_truncated_proposal(proposal_flow, prior, s_obs, spec.mass_fraction, spec.n_calibration, gen)
        calibration = spec.n_calibration

    corpus = generate_corpus(proposal, model, spec.n_sims, gen, reweight, clip_percentile, spec.round_index)
    if extra is not None:
        corpus = _append(corpus, proposal, extra, reweight, clip_percentile, spec.round_index)
    clipped = 0.0
    if spec.clip_threshold is not None and math.isfinite(spec.clip_threshold):
        corpus, clipped = clip_outliers(corpus, spec.clip_threshold)
    w = corpus.weights
    ess = float(w.sum() ** 2 / (w**2).sum() / len(w))

    arch = arch or FlowArch.conditional(model.theta_dim, model.summary_dim)
    flow = fit_flow(corpus, arch, train_cfg, gen)
    leak = leakage_fraction(flow, prior, s_obs, 10_000, gen)
    record = RoundRecord(
        round_index=spec.round_index,
        proposal=spec.proposal,
        n_sims=int(spec.n_sims),
        n_failed=int(corpus.info["n_failed"]),
        n_train=len(corpus),
        clipped_fraction=clipped,
        calibration_draws=calibration,
        proposal_draws=int(getattr(proposal, "draws", spec.n_sims)),
        leakage=leak,
        epochs=len(flow.history),
        best_val_loss=float(flow.best_val_loss),
        ess_fraction=ess,
    )
    logger.info("round %d (%s): %d sims, clipped %.3f, leakage %.4f", spec.round_index, spec.proposal, spec.n_sims, clipped, leak)
    return flow, record, corpus


def sample_posterior(flow: FlowModel, prior: BoxPrior, s_obs, n: int, rng: RngLike) -> np.ndarray:
    """Posterior draws at ``s_obs`` restricted to the prior box."""
    gen = as_generator(rng)
    context = None if flow.arch.context_dim == 0 else np.asarray(s_obs, dtype=float)
    out, _ = _rejection(lambda m, g: flow.sample(m, context, g), prior.contains, n, gen, "posterior sampling")
    return out
