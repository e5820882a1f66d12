"""End-to-end runs: preconditioned NPE, the SNPE baseline, plain NPE and BSL.

Every stage draws from its own child stream of the master seed, so a plan
re-executed with the same seed reproduces all outputs exactly.  Wall-clock
times are kept apart from the manifest (see :attr:`RunResult.timings`) so
manifests stay byte-identical across reruns.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from pnpe.bsl import BslChain, BslConfig, run_bsl_mcmc
from pnpe.core import RngState, as_generator
from pnpe.flows import FlowArch, FlowModel
from pnpe.models import Simulator
from pnpe.npe import FlowProposal, RoundRecord, RoundSpec, npe_round, sample_posterior
from pnpe.smc_abc import ParticleSet, SmcConfig, discrepancy, smc_abc_run
from pnpe.train import TrainConfig, fit_unconditional_flow

logger = logging.getLogger(__name__)

METHODS = ("NPE", "SNPE", "PNPE", "PSNPE", "BSL")
BUDGET_MODES = ("match-total", "abc-only")

# child-stream keys, one per stage
_S_SMC, _S_QG, _S_ROUND, _S_SAMPLE, _S_PRED, _S_BSL = 1, 2, 3, 4, 5, 6


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunPlan:
    method: str
    model: Simulator
    s_obs: np.ndarray
    seed: int = 0
    rounds: int = 1
    round_sims: int = 10_000
    smc: Optional[SmcConfig] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    qg_train: Optional[TrainConfig] = None
    clip_threshold: Optional[float] = None
    reweight: bool = True
    budget_mode: str = "match-total"
    reference_n_abc: Optional[int] = None
    recycle_abc: bool = False
    mass_fraction: float = 1 - 1e-4
    n_calibration: int = 10_000
    n_posterior: int = 10_000
    n_predictive: int = 1000
    bsl: Optional[BslConfig] = None

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.budget_mode not in BUDGET_MODES:
            raise ValueError(f"unknown budget mode {self.budget_mode!r}")
        if self.method in ("PNPE", "PSNPE") and self.smc is None:
            raise ValueError(f"{self.method} needs an smc config")
        if self.method in ("NPE", "SNPE") and self.smc is not None:
            raise ValueError(f"{self.method} does not take an smc config")
        if self.method == "BSL" and self.bsl is None:
            raise ValueError("BSL needs a bsl config")
        if self.method in ("NPE", "PNPE") and self.rounds != 1:
            raise ValueError(f"{self.method} runs exactly one round")
        if self.rounds < 1 or self.round_sims < 1:
            raise ValueError("rounds and round_sims must be at least 1")
        self.s_obs = np.asarray(self.s_obs, dtype=float).reshape(-1)

    @property
    def rng(self) -> RngState:
        return RngState(int(self.seed))

    def describe(self) -> dict:
        return {
            "method": self.method,
            "model": self.model.describe(),
            "seed": int(self.seed),
            "rounds": self.rounds,
            "round_sims": self.round_sims,
            "smc": None if self.smc is None else _jsonable(asdict(self.smc)),
            "train": _jsonable(asdict(self.train)),
            "clip_threshold": self.clip_threshold,
            "reweight": self.reweight,
            "budget_mode": self.budget_mode,
            "reference_n_abc": self.reference_n_abc,
            "recycle_abc": self.recycle_abc,
            "mass_fraction": self.mass_fraction,
            "n_calibration": self.n_calibration,
            "n_posterior": self.n_posterior,
            "n_predictive": self.n_predictive,
            "observed_summary": self.s_obs.tolist(),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class PredictiveReport:
    """Per-summary 5/50/95% posterior-predictive quantiles and coverage."""

    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    observed: np.ndarray
    n_pred: int

    @property
    def covered(self) -> np.ndarray:
        return (self.observed >= self.q05) & (self.observed <= self.q95)

    def to_csv(self) -> str:
        lines = ["summary,q05,q50,q95,observed,covered"]
        for i in range(len(self.observed)):
            lines.append(
                f"{i},{float(self.q05[i])!r},{float(self.q50[i])!r},{float(self.q95[i])!r},"
                f"{float(self.observed[i])!r},{str(bool(self.covered[i])).lower()}"
            )
        return "\n".join(lines) + "\n"


def predictive_quantiles(summaries: np.ndarray, observed) -> PredictiveReport:
    summaries = np.atleast_2d(np.asarray(summaries, dtype=float))
    q = np.quantile(summaries, [0.05, 0.5, 0.95], axis=0, method="inverted_cdf")
    return PredictiveReport(q[0], q[1], q[2], np.asarray(observed, dtype=float).reshape(-1), summaries.shape[0])


def posterior_predictive(
    source: Union[FlowModel, ParticleSet, np.ndarray],
    model: Simulator,
    s_obs,
    n_pred: int = 1000,
    rng=0,
) -> PredictiveReport:
    """Simulate one dataset per posterior draw and summarise the spread.

    ``source`` is a conditional flow (sampled at ``s_obs`` within the prior
    box), an ABC particle set (resampled uniformly) or an array of draws
    (resampled uniformly).
    """
    if n_pred < 100:
        raise ValueError("n_pred must be at least 100")
    gen = as_generator(rng)
    if isinstance(source, FlowModel):
        theta = sample_posterior(source, model.prior, s_obs, n_pred, gen)
    else:
        pool = source.theta if isinstance(source, ParticleSet) else np.atleast_2d(source)
        theta = pool[gen.integers(0, len(pool), n_pred)]
    summaries = model.simulate_summaries(theta, gen)
    return predictive_quantiles(summaries, s_obs)


def mean_discrepancy(theta: np.ndarray, model: Simulator, s_obs, scale, rng) -> float:
    """Average scaled discrepancy of one simulation per parameter row."""
    gen = as_generator(rng)
    s = model.simulate_summaries(theta, gen)
    ok = np.all(np.isfinite(s), axis=1)
    return float(np.mean(discrepancy(s[ok], np.asarray(s_obs, dtype=float), scale)))


@dataclass
class RunResult:
    plan: RunPlan
    flow: Optional[FlowModel]
    samples: np.ndarray
    manifest: dict
    predictive: Optional[PredictiveReport] = None
    particles: Optional[ParticleSet] = None
    qg_flow: Optional[FlowModel] = None
    round_flows: list = field(default_factory=list)
    round_samples: list = field(default_factory=list)
    chain: Optional[BslChain] = None
    timings: dict = field(default_factory=dict)

    @property
    def total_sims(self) -> int:
        return int(self.manifest["total_sims"])


class _Stages:
    """Collects stage records and wall times for one run."""

    def __init__(self):
        self.records: list[dict] = []
        self.timings: dict = {}

    def run(self, name: str, fn, sims_of=None, artifacts=()):
        t0 = time.perf_counter()
        try:
            out = fn()
        except StageError:
            raise
        except Exception as exc:  # surfaced with the stage label
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        sims = int(sims_of(out)) if sims_of else 0
        self.records.append({"stage": name, "sims": sims, "artifacts": list(artifacts)})
        return out


def _round_schedule(plan: RunPlan, n_abc: int) -> list[int]:
    """Per-round simulation counts for the plan's method and budget mode."""
    n = plan.round_sims
    if plan.method in ("PNPE", "PSNPE", "NPE"):
        return [n] * plan.rounds
    # SNPE baseline: first round from the prior absorbs the ABC budget
    first = n_abc + n if plan.budget_mode == "match-total" else n_abc
    return [first] + [n] * (plan.rounds - 1)


def _npe_rounds(plan: RunPlan, schedule: list[int], first_proposal: str, qg: Optional[FlowModel], stages: _Stages, extra=None):
    """Run the rounds; ``extra`` (theta, summaries) joins the first round's corpus."""
    root = plan.rng
    records: list[RoundRecord] = []
    flows: list[FlowModel] = []
    samples: list[np.ndarray] = []
    prev = qg
    for r, n_sims in enumerate(schedule, start=1):
        spec = RoundSpec(
            n_sims=n_sims,
            proposal=first_proposal if r == 1 else "truncated",
            clip_threshold=plan.clip_threshold,
            round_index=r,
            mass_fraction=plan.mass_fraction,
            n_calibration=plan.n_calibration,
        )
        flow, rec, _ = stages.run(
            f"npe_round_{r}",
            lambda: npe_round(
                spec,
                plan.model,
                plan.s_obs,
                proposal_flow=prev,
                train_cfg=plan.train,
                rng=root.child(_S_ROUND, r),
                reweight=plan.reweight,
                extra=extra if r == 1 else None,
            ),
            sims_of=lambda out: out[1].n_sims,
            artifacts=[f"models/round_{r}.json", f"samples/round_{r}.csv"],
        )
        stages.records[-1]["round"] = rec.to_dict()
        flows.append(flow)
        records.append(rec)
        samples.append(
            stages.run(
                f"sample_round_{r}",
                lambda: sample_posterior(flow, plan.model.prior, plan.s_obs, plan.n_posterior, root.child(_S_SAMPLE, r)),
            )
        )
        prev = flow
    return flows, records, samples


def _finish(plan: RunPlan, stages: _Stages, flows, samples, n_abc: int = 0, **kw) -> RunResult:
    root = plan.rng
    final = flows[-1] if flows else None
    source = final if final is not None else samples[-1]
    pred = stages.run(
        "predictive",
        lambda: posterior_predictive(source, plan.model, plan.s_obs, plan.n_predictive, root.child(_S_PRED)),
        sims_of=lambda rep: rep.n_pred,
        artifacts=["reports/predictive.csv"],
    )
    inference = [r for r in stages.records if r["stage"] != "predictive"]
    total = sum(r["sims"] for r in inference)
    round_sims = [r["sims"] for r in inference if r["stage"].startswith("npe_round_")]
    manifest = {
        "format": "pnpe-run",
        "version": 1,
        "plan": plan.describe(),
        "stages": stages.records,
        "n_abc": int(n_abc),
        "round_sims": round_sims,
        "total_sims": int(total),
        "predictive_sims": int(pred.n_pred),
        "calibration_draws": int(sum(r.get("round", {}).get("calibration_draws", 0) for r in stages.records)),
        "posterior_mean": np.mean(samples[-1], axis=0).tolist(),
        "posterior_sd": np.std(samples[-1], axis=0, ddof=1).tolist(),
        "coverage": [bool(c) for c in pred.covered],
    }
    return RunResult(
        plan=plan,
        flow=final,
        samples=samples[-1],
        manifest=manifest,
        predictive=pred,
        round_flows=list(flows),
        round_samples=list(samples),
        timings=dict(stages.timings),
        **kw,
    )


def run_pnpe(plan: RunPlan) -> RunResult:
    """Preconditioning SMC ABC, unconditional flow on the particles, then NPE.

    PSNPE continues with ``rounds - 1`` truncated rounds.
    """
    if plan.method not in ("PNPE", "PSNPE"):
        raise ValueError("run_pnpe needs method PNPE or PSNPE")
    root = plan.rng
    stages = _Stages()
    model = plan.model
    particles = stages.run(
        "smc_abc",
        lambda: smc_abc_run(model.prior, model, plan.s_obs, plan.smc, root.child(_S_SMC)),
        sims_of=lambda ps: ps.total_sims,
        artifacts=["smc/particles.csv", "smc/history.csv"],
    )
    n_abc = particles.total_sims
    qg = stages.run(
        "fit_qg",
        lambda: fit_unconditional_flow(particles.theta, cfg=plan.qg_train or plan.train, rng=root.child(_S_QG)),
        artifacts=["models/qg.json"],
    )
    schedule = _round_schedule(plan, n_abc)
    extra = (particles.theta, particles.summaries) if plan.recycle_abc else None
    flows, records, samples = _npe_rounds(plan, schedule, "flow", qg, stages, extra)
    return _finish(plan, stages, flows, samples, n_abc=n_abc, particles=particles, qg_flow=qg)


def run_snpe_baseline(plan: RunPlan) -> RunResult:
    """Prior-proposal first round sized from ``reference_n_abc``, then truncated rounds."""
    if plan.method != "SNPE":
        raise ValueError("run_snpe_baseline needs method SNPE")
    if plan.reference_n_abc is None or plan.reference_n_abc < 0:
        raise ValueError("SNPE baseline needs reference_n_abc from a PNPE run or config")
    stages = _Stages()
    schedule = _round_schedule(plan, int(plan.reference_n_abc))
    flows, records, samples = _npe_rounds(plan, schedule, "prior", None, stages)
    return _finish(plan, stages, flows, samples, n_abc=0)


def run_npe(plan: RunPlan) -> RunResult:
    """Single round from the prior."""
    if plan.method != "NPE":
        raise ValueError("run_npe needs method NPE")
    stages = _Stages()
    flows, records, samples = _npe_rounds(plan, [plan.round_sims], "prior", None, stages)
    return _finish(plan, stages, flows, samples)


def run_bsl(plan: RunPlan) -> RunResult:
    if plan.method != "BSL":
        raise ValueError("run_bsl needs method BSL")
    stages = _Stages()
    chain = stages.run(
        "bsl_mcmc",
        lambda: run_bsl_mcmc(plan.bsl, plan.model.prior, plan.model, plan.s_obs, plan.rng.child(_S_BSL)),
        sims_of=lambda c: c.n_sims,
        artifacts=["samples/chain.csv"],
    )
    stages.records[-1]["acceptance_rate"] = chain.acceptance_rate
    stages.records[-1]["converged"] = chain.converged
    return _finish(plan, stages, [], [chain.samples], chain=chain)


def run_plan(plan: RunPlan) -> RunResult:
    return {
        "NPE": run_npe,
        "SNPE": run_snpe_baseline,
        "PNPE": run_pnpe,
        "PSNPE": run_pnpe,
        "BSL": run_bsl,
    }[plan.method](plan)


def proposal_quality(qg: FlowModel, model: Simulator, s_obs, scale, n: int = 1000, rng=0) -> dict:
    """Mean discrepancy of simulations from ``q_G`` draws versus prior draws."""
    root = rng if isinstance(rng, RngState) else RngState(int(rng))
    qg_theta = FlowProposal(qg, model.prior).sample(n, root.child(1))
    prior_theta = model.prior.sample(n, root.child(2))
    return {
        "qg": mean_discrepancy(qg_theta, model, s_obs, scale, root.child(3)),
        "prior": mean_discrepancy(prior_theta, model, s_obs, scale, root.child(4)),
    }
