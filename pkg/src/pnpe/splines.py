"""Monotonic rational-quadratic splines with linear (identity) tails.

The torch functions operate elementwise on batched inputs and are
differentiable with respect to both inputs and spline parameters.  The
numpy-facing :func:`rq_spline_forward` / :func:`rq_spline_inverse` wrap them
for direct use on :class:`RqSplineParams`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

MIN_BIN = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(DERIVATIVE_SHIFT) + MIN_DERIVATIVE == 1, so zero raw parameters give the identity
DERIVATIVE_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


@dataclass
class RqSplineParams:
    """Knot geometry of one spline on ``[-bound, bound]``.

    ``widths`` and ``heights`` hold the ``K`` bin sizes (each summing to
    ``2 * bound``); ``derivatives`` the ``K + 1`` knot slopes.
    """

    widths: np.ndarray
    heights: np.ndarray
    derivatives: np.ndarray
    bound: float

    def __post_init__(self):
        self.widths = np.asarray(self.widths, dtype=float)
        self.heights = np.asarray(self.heights, dtype=float)
        self.derivatives = np.asarray(self.derivatives, dtype=float)
        K = self.widths.size
        if self.heights.size != K or self.derivatives.size != K + 1:
            raise ValueError("need K widths, K heights and K+1 derivatives")
        if np.any(self.widths <= 0) or np.any(self.heights <= 0) or np.any(self.derivatives <= 0):
            raise ValueError("widths, heights and derivatives must be positive")
        for name, v in (("widths", self.widths), ("heights", self.heights)):
            if not math.isclose(v.sum(), 2 * self.bound, rel_tol=1e-9):
                raise ValueError(f"{name} must sum to 2 * bound")

    @classmethod
    def identity(cls, n_bins: int, bound: float) -> "RqSplineParams":
        w = np.full(n_bins, 2 * bound / n_bins)
        return cls(w, w.copy(), np.ones(n_bins + 1), bound)

    @classmethod
    def random(cls, n_bins: int, bound: float, rng: np.random.Generator) -> "RqSplineParams":
        w = rng.dirichlet(np.ones(n_bins)) * 0.9 + 0.1 / n_bins
        h = rng.dirichlet(np.ones(n_bins)) * 0.9 + 0.1 / n_bins
        d = np.exp(rng.normal(0.0, 0.7, n_bins + 1))
        return cls(2 * bound * w, 2 * bound * h, d, bound)


def constrain(raw_w: torch.Tensor, raw_h: torch.Tensor, raw_d: torch.Tensor, bound: float):
    """Map unconstrained network outputs to valid spline parameters.

    ``raw_w``/``raw_h`` have ``K`` entries in the last axis, ``raw_d`` has
    ``K - 1`` (interior knots); the two boundary slopes are fixed at 1 so the
    spline joins the identity tails smoothly.
    """
    K = raw_w.shape[-1]
    widths = 2 * bound * (MIN_BIN + (1 - MIN_BIN * K) * torch.softmax(raw_w, dim=-1))
    heights = 2 * bound * (MIN_BIN + (1 - MIN_BIN * K) * torch.softmax(raw_h, dim=-1))
    inner = MIN_DERIVATIVE + F.softplus(raw_d + DERIVATIVE_SHIFT)
    ones = torch.ones(inner.shape[:-1] + (1,), dtype=inner.dtype)
    derivs = torch.cat([ones, inner, ones], dim=-1)
    return widths, heights, derivs


def _knots(sizes: torch.Tensor, bound: float) -> torch.Tensor:
    cum = torch.cumsum(sizes, dim=-1)
    cum = torch.cat([torch.zeros_like(cum[..., :1]), cum], dim=-1) - bound
    # pin the last knot exactly at the bound
    return torch.cat([cum[..., :-1], torch.full_like(cum[..., -1:], bound)], dim=-1)


def _gather(t: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(t, -1, idx[..., None])[..., 0]


def rqs(x: torch.Tensor, widths, heights, derivs, bound: float, inverse: bool = False):
    """Evaluate the spline (or its inverse) elementwise.

    Shapes: ``x`` is ``(...)``; parameters are ``(..., K)`` / ``(..., K+1)``.
    Returns ``(y, logdet)`` where ``logdet`` is ``log |dy/dx|`` of the map
    actually applied.  Outside ``[-bound, bound]`` the map is the identity.
    """
    inside = (x >= -bound) & (x <= bound)
    xc = torch.clamp(x, -bound, bound)
    xk = _knots(widths, bound)
    yk = _knots(heights, bound)
    search = yk if inverse else xk
    idx = torch.sum(xc[..., None] >= search[..., 1:-1], dim=-1)

    x0 = _gather(xk, idx)
    w = _gather(widths, idx)
    y0 = _gather(yk, idx)
    h = _gather(heights, idx)
    d0 = _gather(derivs, idx)
    d1 = _gather(derivs, idx + 1)
    s = h / w
    mix = d0 + d1 - 2 * s

    if not inverse:
        xi = (xc - x0) / w
        om = xi * (1 - xi)
        denom = s + mix * om
        y = y0 + h * (s * xi**2 + d0 * om) / denom
        dnum = s**2 * (d1 * xi**2 + 2 * s * om + d0 * (1 - xi) ** 2)
        logdet = torch.log(dnum) - 2 * torch.log(denom)
    else:
        dy = xc - y0
        a = h * (s - d0) + dy * mix
        b = h * d0 - dy * mix
        c = -s * dy
        disc = torch.clamp(b**2 - 4 * a * c, min=0.0)
        xi = (2 * c) / (-b - torch.sqrt(disc))
        xi = torch.clamp(xi, 0.0, 1.0)
        y = x0 + xi * w
        om = xi * (1 - xi)
        denom = s + mix * om
        dnum = s**2 * (d1 * xi**2 + 2 * s * om + d0 * (1 - xi) ** 2)
        logdet = -(torch.log(dnum) - 2 * torch.log(denom))

    y = torch.where(inside, y, x)
    logdet = torch.where(inside, logdet, torch.zeros_like(logdet))
    return y, logdet


def _apply(x, p: RqSplineParams, inverse: bool):
    x_arr = np.asarray(x, dtype=float)
    xt = torch.as_tensor(x_arr, dtype=torch.float64)
    shape = xt.shape
    xt = xt.reshape(-1)
    n = xt.shape[0]
    w = torch.as_tensor(p.widths, dtype=torch.float64).expand(n, -1)
    h = torch.as_tensor(p.heights, dtype=torch.float64).expand(n, -1)
    d = torch.as_tensor(p.derivatives, dtype=torch.float64).expand(n, -1)
    with torch.no_grad():
        y, ld = rqs(xt, w, h, d, p.bound, inverse=inverse)
    y = y.reshape(shape).numpy()
    ld = ld.reshape(shape).numpy()
    if x_arr.ndim == 0:
        return float(y), float(ld)
    return y, ld


def rq_spline_forward(x, p: RqSplineParams):
    """Returns ``(y, log y'(x))`` for scalar or array ``x``."""
    return _apply(x, p, inverse=False)


def rq_spline_inverse(y, p: RqSplineParams):
    """Returns ``(x, log x'(y))``; the logdet is minus the forward logdet at ``x``."""
    return _apply(y, p, inverse=True)
