"""Spline coupling flows over a standard-normal base.

A :class:`FlowModel` is a stack of coupling layers.  Each layer leaves the
first block of coordinates unchanged and pushes the remaining block through
elementwise rational-quadratic splines whose parameters come from a small
MLP fed with the unchanged block (and the context, for conditional flows).
Coordinates are reversed between layers.

Direction convention: the density direction maps parameters to the base
(``to_base``), the sampling direction maps base draws to parameters
(``from_base``).  Inputs are affinely standardised before the splines; the
standardisation is part of the model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from pnpe.core import RngLike, as_generator
from pnpe.splines import constrain, rqs

FORMAT_VERSION = 1
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class FlowArch:
    dim: int
    context_dim: int = 0
    n_layers: int = 5
    n_bins: int = 16
    hidden: tuple = (50, 50)
    bound: float = 8.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("flow dimension must be at least 1")
        if self.n_layers < 1 or self.n_bins < 2:
            raise ValueError("need at least one layer and two bins")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def unconditional(cls, dim: int, **kw) -> "FlowArch":
        kw.setdefault("n_layers", 4)
        return cls(dim=dim, context_dim=0, **kw)

    @classmethod
    def conditional(cls, dim: int, context_dim: int, **kw) -> "FlowArch":
        kw.setdefault("n_layers", 5)
        return cls(dim=dim, context_dim=context_dim, **kw)


class Conditioner(nn.Module):
    """tanh MLP; the output layer starts at zero so the spline starts at identity."""

    def __init__(self, n_in: int, hidden: tuple, n_out: int, gen: np.random.Generator):
        super().__init__()
        sizes = (n_in,) + tuple(hidden) + (n_out,)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last:
                w = np.zeros((a, b))
            else:
                lim = math.sqrt(6.0 / (a + b)) if a > 0 else 0.0
                w = gen.uniform(-lim, lim, size=(a, b))
            self.weights.append(nn.Parameter(torch.tensor(w, dtype=torch.float64)))
            self.biases.append(nn.Parameter(torch.zeros(b, dtype=torch.float64)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        n = len(self.weights)
        for i in range(n):
            h = h @ self.weights[i] + self.biases[i]
            if i < n - 1:
                h = torch.tanh(h)
        return h


class CouplingLayer(nn.Module):
    def __init__(self, dim: int, context_dim: int, n_bins: int, hidden: tuple, bound: float, gen):
        super().__init__()
        self.dim = dim
        self.split = dim // 2
        self.n_bins = n_bins
        self.bound = bound
        n_tr = dim - self.split
        self.conditioner = Conditioner(self.split + context_dim, hidden, n_tr * (3 * n_bins - 1), gen)

    def _params(self, x1: torch.Tensor, ctx: Optional[torch.Tensor]):
        h = x1 if ctx is None else torch.cat([x1, ctx], dim=-1)
        raw = self.conditioner(h).reshape(x1.shape[0], self.dim - self.split, 3 * self.n_bins - 1)
        K = self.n_bins
        return constrain(raw[..., :K], raw[..., K : 2 * K], raw[..., 2 * K :], self.bound)

    def to_base(self, x: torch.Tensor, ctx=None):
        x1, x2 = x[:, : self.split], x[:, self.split :]
        w, h, d = self._params(x1, ctx)
        y2, ld = rqs(x2, w, h, d, self.bound, inverse=False)
        return torch.cat([x1, y2], dim=-1), ld.sum(dim=-1)

    def from_base(self, y: torch.Tensor, ctx=None):
        y1, y2 = y[:, : self.split], y[:, self.split :]
        w, h, d = self._params(y1, ctx)
        x2, ld = rqs(y2, w, h, d, self.bound, inverse=True)
        return torch.cat([y1, x2], dim=-1), ld.sum(dim=-1)


class FlowModel(nn.Module):
    """Normalizing flow ``q(theta)`` or ``q(theta | context)``."""

    def __init__(self, arch: FlowArch, rng: RngLike = 0):
        super().__init__()
        gen = as_generator(rng)
        self.arch = arch
        self.layers = nn.ModuleList(
            CouplingLayer(arch.dim, arch.context_dim, arch.n_bins, arch.hidden, arch.bound, gen)
            for _ in range(arch.n_layers)
        )
        self.register_buffer("theta_shift", torch.zeros(arch.dim, dtype=torch.float64))
        self.register_buffer("theta_scale", torch.ones(arch.dim, dtype=torch.float64))
        self.register_buffer("ctx_shift", torch.zeros(arch.context_dim, dtype=torch.float64))
        self.register_buffer("ctx_scale", torch.ones(arch.context_dim, dtype=torch.float64))
        self.history: list = []

    # -- standardisation -------------------------------------------------
    def set_standardization(self, theta_shift, theta_scale, ctx_shift=None, ctx_scale=None):
        self.theta_shift.copy_(torch.as_tensor(np.asarray(theta_shift, dtype=float)))
        self.theta_scale.copy_(torch.as_tensor(np.asarray(theta_scale, dtype=float)))
        if self.arch.context_dim:
            self.ctx_shift.copy_(torch.as_tensor(np.asarray(ctx_shift, dtype=float)))
            self.ctx_scale.copy_(torch.as_tensor(np.asarray(ctx_scale, dtype=float)))

    def _ctx(self, ctx: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if self.arch.context_dim == 0:
            if ctx is not None:
                raise ValueError("unconditional flow takes no context")
            return None
        if ctx is None:
            raise ValueError("conditional flow requires a context")
        if ctx.shape[-1] != self.arch.context_dim:
            raise ValueError(f"context must have {self.arch.context_dim} entries")
        return (ctx - self.ctx_shift) / self.ctx_scale

    # -- torch core --------------------------------------------------------
    def to_base(self, theta: torch.Tensor, ctx: Optional[torch.Tensor] = None):
        """Parameters to base draws; returns ``(u, log |det d u / d theta|)``."""
        c = self._ctx(ctx)
        z = (theta - self.theta_shift) / self.theta_scale
        logdet = -torch.log(self.theta_scale).sum().expand(theta.shape[0])
        for layer in self.layers:
            z, ld = layer.to_base(z, c)
            logdet = logdet + ld
            z = torch.flip(z, dims=(-1,))
        return z, logdet

    def from_base(self, u: torch.Tensor, ctx: Optional[torch.Tensor] = None):
        """Base draws to parameters; returns ``(theta, log |det d theta / d u|)``."""
        c = self._ctx(ctx)
        z = u
        logdet = torch.zeros(u.shape[0], dtype=u.dtype)
        for layer in reversed(self.layers):
            z = torch.flip(z, dims=(-1,))
            z, ld = layer.from_base(z, c)
            logdet = logdet + ld
        theta = z * self.theta_scale + self.theta_shift
        return theta, logdet + torch.log(self.theta_scale).sum()

    def log_prob(self, theta: torch.Tensor, ctx: Optional[torch.Tensor] = None) -> torch.Tensor:
        u, logdet = self.to_base(theta, ctx)
        return -0.5 * (u**2).sum(dim=-1) - 0.5 * self.arch.dim * LOG_2PI + logdet

    # -- numpy API ---------------------------------------------------------
    def _prep(self, theta, context):
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        theta = np.atleast_2d(theta)
        if theta.shape[1] != self.arch.dim:
            raise ValueError(f"expected {self.arch.dim}-dimensional parameters, got {theta.shape[1]}")
        ctx = None
        if context is not None:
            ctx = np.asarray(context, dtype=float)
            if ctx.ndim == 1:
                ctx = np.broadcast_to(ctx, (theta.shape[0], ctx.size))
            ctx = torch.as_tensor(np.array(ctx), dtype=torch.float64)
        return torch.as_tensor(theta, dtype=torch.float64), ctx, single

    def logpdf(self, theta, context=None, batch: int = 65536):
        """Log density at each row of ``theta`` (a float for a single vector)."""
        th, ctx, single = self._prep(theta, context)
        out = np.empty(th.shape[0])
        with torch.no_grad():
            for s in range(0, th.shape[0], batch):
                c = None if ctx is None else ctx[s : s + batch]
                out[s : s + batch] = self.log_prob(th[s : s + batch], c).numpy()
        return float(out[0]) if single else out

    def sample(self, n: int, context=None, rng: RngLike = 0, return_logpdf: bool = False):
        """Draw ``n`` samples; optionally also their log density from the generation path."""
        gen = as_generator(rng)
        u = gen.standard_normal((n, self.arch.dim))
        ut = torch.as_tensor(u, dtype=torch.float64)
        ctx = None
        if context is not None:
            c = np.asarray(context, dtype=float)
            ctx = torch.as_tensor(np.array(np.broadcast_to(c, (n, c.shape[-1]))), dtype=torch.float64)
        with torch.no_grad():
            theta, logdet = self.from_base(ut, ctx)
        theta = theta.numpy()
        if not return_logpdf:
            return theta
        base = -0.5 * np.sum(u**2, axis=1) - 0.5 * self.arch.dim * LOG_2PI
        return theta, base - logdet.numpy()

    # -- flat parameters and serialisation ---------------------------------
    def get_flat(self) -> np.ndarray:
        return torch.nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat(self, vec) -> None:
        torch.nn.utils.vector_to_parameters(torch.as_tensor(np.asarray(vec, dtype=float)), self.parameters())

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def to_dict(self) -> dict:
        return {
            "format": "pnpe-flow",
            "version": FORMAT_VERSION,
            "arch": asdict(self.arch),
            "standardization": {
                "theta_shift": self.theta_shift.tolist(),
                "theta_scale": self.theta_scale.tolist(),
                "ctx_shift": self.ctx_shift.tolist(),
                "ctx_scale": self.ctx_scale.tolist(),
            },
            "weights": self.get_flat().tolist(),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "FlowModel":
        if blob.get("format") != "pnpe-flow":
            raise ValueError("not a serialized flow")
        if blob.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported flow format version {blob.get('version')}")
        arch = FlowArch(**{**blob["arch"], "hidden": tuple(blob["arch"]["hidden"])})
        flow = cls(arch)
        st = blob["standardization"]
        flow.set_standardization(st["theta_shift"], st["theta_scale"], st["ctx_shift"], st["ctx_scale"])
        flow.set_flat(blob["weights"])
        return flow

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FlowModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def flow_logpdf(flow: FlowModel, theta, context=None):
    return flow.logpdf(theta, context)


def flow_sample(flow: FlowModel, n: int, context=None, rng: RngLike = 0):
    return flow.sample(n, context, rng)
