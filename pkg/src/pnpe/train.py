"""Maximum-likelihood training of flows with Adam and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from pnpe.core import RngLike, as_generator
from pnpe.flows import FlowArch, FlowModel

logger = logging.getLogger(__name__)

torch.set_num_threads(1)


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class TrainingDivergedError(TrainingError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class DegenerateCorpusError(TrainingError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 50
    validation_fraction: float = 0.10
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be positive, patience nonnegative")


@dataclass
class TrainingCorpus:
    """Parameter/summary pairs with importance weights and provenance."""

    theta: np.ndarray
    context: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    round_index: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        n = self.theta.shape[0]
        if self.context is not None:
            self.context = np.asarray(self.context, dtype=float).reshape(n, -1)
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per record")
        self.round_index = np.zeros(n, dtype=int) if self.round_index is None else np.asarray(self.round_index, dtype=int)

    def __len__(self) -> int:
        return self.theta.shape[0]

    def subset(self, idx) -> "TrainingCorpus":
        return TrainingCorpus(
            self.theta[idx],
            None if self.context is None else self.context[idx],
            self.weights[idx],
            self.round_index[idx],
            dict(self.info),
        )

    def split(self, validation_fraction: float, rng: RngLike) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint, exhaustive (train, validation) index arrays."""
        n = len(self)
        if n < 2:
            raise ValueError("need at least two records to hold out a validation set")
        n_val = min(max(1, int(round(validation_fraction * n))), n - 1)
        perm = as_generator(rng).permutation(n)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def importance_weights(log_target, log_proposal, clip_percentile: Optional[float] = 99.5) -> np.ndarray:
    """Self-normalised weights ``target / proposal``, clipped from above and scaled to mean 1."""
    logw = np.asarray(log_target, dtype=float) - np.asarray(log_proposal, dtype=float)
    if not np.all(np.isfinite(logw)):
        raise ValueError("importance log-weights must be finite")
    w = np.exp(logw - logw.max())
    if clip_percentile is not None:
        w = np.minimum(w, np.percentile(w, clip_percentile))
    return w / w.mean()


def _tensors(corpus: TrainingCorpus):
    th = torch.as_tensor(corpus.theta, dtype=torch.float64)
    ctx = None if corpus.context is None else torch.as_tensor(corpus.context, dtype=torch.float64)
    w = torch.as_tensor(corpus.weights, dtype=torch.float64)
    return th, ctx, w


def _weighted_nll(flow: FlowModel, th, ctx, w) -> torch.Tensor:
    return -(w * flow.log_prob(th, ctx)).sum() / w.sum()


def loss_and_gradient(flow: FlowModel, batch: TrainingCorpus) -> tuple[float, np.ndarray]:
    """Weighted mean negative log-likelihood and its gradient over all weights."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    th, ctx, w = _tensors(batch)
    flow.zero_grad()
    logq = flow.log_prob(th, ctx)
    bad = ~torch.isfinite(logq)
    if bool(bad.any()):
        i = int(torch.nonzero(bad)[0, 0])
        raise NonFiniteLossError(f"non-finite log density at record {i}", i)
    loss = -(w * logq).sum() / w.sum()
    loss.backward()
    grad = torch.cat([p.grad.reshape(-1) for p in flow.parameters()]).numpy().copy()
    return float(loss.detach()), grad


def _standardization(corpus: TrainingCorpus, idx: np.ndarray):
    th = corpus.theta[idx]
    shift = th.mean(axis=0)
    scale = th.std(axis=0)
    tiny = 1e-10 * (1.0 + np.abs(shift))
    if np.any(scale <= tiny):
        cols = np.nonzero(scale <= tiny)[0].tolist()
        raise DegenerateCorpusError(f"parameter columns {cols} are (near) constant; cannot fit a density")
    if corpus.context is None:
        return shift, scale, None, None
    c = corpus.context[idx]
    cshift = c.mean(axis=0)
    cscale = c.std(axis=0)
    cscale = np.where(cscale > 0, cscale, 1.0)
    return shift, scale, cshift, cscale


def fit_flow(corpus: TrainingCorpus, arch: FlowArch, cfg: TrainConfig = TrainConfig(), rng: RngLike = 0) -> FlowModel:
    """Fit ``arch`` to ``corpus`` by weighted maximum likelihood.

    Returns the best-validation snapshot; the per-epoch history is stored on
    ``flow.history`` as dicts with ``epoch``, ``train_loss``, ``val_loss``.
    """
    gen = as_generator(rng)
    if corpus.theta.shape[1] != arch.dim:
        raise ValueError("corpus parameter dimension does not match the architecture")
    if (corpus.context is None) != (arch.context_dim == 0):
        raise ValueError("context presence does not match the architecture")
    train_idx, val_idx = corpus.split(cfg.validation_fraction, gen)
    flow = FlowModel(arch, rng=gen)
    flow.set_standardization(*_standardization(corpus, train_idx))

    th, ctx, w = _tensors(corpus)
    tr_th, tr_w = th[train_idx], w[train_idx]
    tr_ctx = None if ctx is None else ctx[train_idx]
    va_th, va_w = th[val_idx], w[val_idx]
    va_ctx = None if ctx is None else ctx[val_idx]

    opt = torch.optim.Adam(flow.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.adam_eps)
    n_train = len(train_idx)
    batch = min(cfg.batch_size, n_train)
    best_val = np.inf
    best_flat = flow.get_flat()
    best_epoch = 0
    stale = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        perm = torch.as_tensor(gen.permutation(n_train))
        total = 0.0
        for s in range(0, n_train, batch):
            b = perm[s : s + batch]
            opt.zero_grad()
            loss = _weighted_nll(flow, tr_th[b], None if tr_ctx is None else tr_ctx[b], tr_w[b])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}", history)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * float(tr_w[b].sum())
        with torch.no_grad():
            val = float(_weighted_nll(flow, va_th, va_ctx, va_w))
        train_loss = total / float(tr_w.sum())
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val})
        if not np.isfinite(val):
            raise TrainingDivergedError(f"validation loss became non-finite in epoch {epoch}", history)
        if val < best_val:
            best_val, best_flat, best_epoch, stale = val, flow.get_flat(), epoch, 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    flow.set_flat(best_flat)
    flow.history = history
    flow.best_epoch = best_epoch
    flow.best_val_loss = best_val
    logger.info("fit_flow: %d epochs, best val %.4f at epoch %d", len(history), best_val, best_epoch)
    return flow


def fit_unconditional_flow(samples, arch: Optional[FlowArch] = None, cfg: TrainConfig = TrainConfig(), rng: RngLike = 0) -> FlowModel:
    """Fit the unconditional proposal flow to preconditioning particles."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    arch = arch or FlowArch.unconditional(samples.shape[1])
    if arch.context_dim:
        raise ValueError("unconditional fit requires context_dim == 0")
    return fit_flow(TrainingCorpus(samples), arch, cfg, rng)


def history_csv(history: list) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{h['epoch']},{h['train_loss']!r},{h['val_loss']!r}" for h in history]
    return "\n".join(lines) + "\n"
