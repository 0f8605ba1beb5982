"""Distance embedding, geodesic interpolant and their joint training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import TimeSeriesDataset
from .finsler import FinslerMetric
from .nn import MLP, DTYPE, TimeEmbedding, adamw_step, as_tensor, make_adamw, refresh_batchnorm, seeded
from .transport import ot_coupling

logger = logging.getLogger(__name__)


class EmbeddingModel(nn.Module):
    """Learned asymmetric distance ``||phi(x) - phi(y)|| + <psi(x) - psi(y), beta>_+``."""

    def __init__(self, dim: int, latent_dim: int = 32, hidden=(256, 256, 256), activation: str = "silu",
                 seed: int | None = None):
        super().__init__()
        seeds = np.random.SeedSequence(seed).generate_state(3) if seed is not None else (None,) * 3
        self.phi = MLP(dim, latent_dim, hidden, activation, seed=None if seed is None else int(seeds[0]))
        self.psi = MLP(dim, latent_dim, hidden, activation, seed=None if seed is None else int(seeds[1]))
        with seeded(None if seed is None else int(seeds[2])):
            beta = torch.randn(latent_dim, dtype=DTYPE) / math.sqrt(latent_dim)
        self.beta = nn.Parameter(beta)
        self.eval()

    def dhat(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        sym = torch.linalg.vector_norm(self.phi(x) - self.phi(y), dim=-1)
        return sym + torch.relu((self.psi(x) - self.psi(y)) @ self.beta)

    def fhat(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        _, jphi = self.phi.forward_tangent(x, v)
        _, jpsi = self.psi.forward_tangent(x, v)
        return torch.linalg.vector_norm(jphi, dim=-1) + torch.relu(-(jpsi @ self.beta))

    @torch.no_grad()
    def pairwise(self, x0, x1) -> np.ndarray:
        """Cost matrix ``C[i, j] = dhat(x0[i], x1[j])``."""
        x0, x1 = as_tensor(x0), as_tensor(x1)
        p0, p1 = self.phi(x0), self.phi(x1)
        s0, s1 = self.psi(x0) @ self.beta, self.psi(x1) @ self.beta
        sym = torch.cdist(p0, p1)
        return (sym + torch.relu(s0[:, None] - s1[None, :])).numpy()


def dhat(e: EmbeddingModel, x, y) -> float:
    x, y = as_tensor(x), as_tensor(y)
    if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
        raise ValueError("non-finite input")
    with torch.no_grad():
        return float(e.dhat(x.reshape(1, -1), y.reshape(1, -1))[0])


def fhat(e: EmbeddingModel, x, v) -> float:
    x, v = as_tensor(x), as_tensor(v)
    with torch.no_grad():
        return float(e.fhat(x.reshape(1, -1), v.reshape(1, -1))[0])


class GeodesicModel(nn.Module):
    """``x_t = (1-t) x0 + t x1 + t(1-t) eta(x0, x1, t)``."""

    def __init__(self, dim: int, hidden=(256, 256, 256), activation: str = "silu", seed: int | None = None):
        super().__init__()
        self.time = TimeEmbedding()
        self.eta = MLP(2 * dim + self.time.dim, dim, hidden, activation, seed=seed)
        self.eval()

    def eta_and_dt(self, x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor):
        """``eta`` and its exact t-derivative through the time embedding."""
        emb, demb = self.time.with_derivative(t)
        inp = torch.cat([x0, x1, emb], dim=-1)
        dinp = torch.cat([torch.zeros_like(x0), torch.zeros_like(x1), demb], dim=-1)
        return self.eta.forward_tangent(inp, dinp)

    def forward(self, x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor):
        eta, deta = self.eta_and_dt(x0, x1, t)
        s = t.reshape(-1, 1)
        xt = (1 - s) * x0 + s * x1 + s * (1 - s) * eta
        xdot = x1 - x0 + (1 - 2 * s) * eta + s * (1 - s) * deta
        return xt, xdot

    def eta_input(self, x0, x1, t):
        return torch.cat([x0, x1, self.time(t)], dim=-1)


def interpolant(g: GeodesicModel, x0, x1, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x0, x1 = as_tensor(x0).reshape(1, -1), as_tensor(x1).reshape(1, -1)
    with torch.no_grad():
        xt, xdot = g(x0, x1, as_tensor([t]))
    return xt[0], xdot[0]


def emb_loss(e: EmbeddingModel, metric: FinslerMetric, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mean ``|Fhat(x, v) - F(x, v)|``; the metric values are targets."""
    if len(x) == 0:
        raise ValueError("empty batch")
    with torch.no_grad():
        target = metric(x, v)
    if not torch.isfinite(target).all():
        raise FloatingPointError("non-finite metric values")
    return (e.fhat(x, v) - target).abs().mean()


def geo_loss(g: GeodesicModel, metric: FinslerMetric, x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor,
             stop_gradient_jacobian: bool = False, return_tangents: bool = False):
    """Mean ``F(x_t, xdot_t)^2`` over coupled pairs."""
    xt, xdot = g(x0, x1, t)
    val = metric(xt, xdot, stop_gradient_jacobian=stop_gradient_jacobian)
    loss = (val**2).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite geodesic energy")
    return (loss, xt, xdot) if return_tangents else loss


@dataclass
class MetricTrainingResult:
    embedding: EmbeddingModel
    geodesic: GeodesicModel
    history: list = field(default_factory=list)


def train_metric(data: TimeSeriesDataset, metric: FinslerMetric, *, latent_dim: int = 32, iters: int = 300,
                 batch_size: int = 2048, lr: float = 1e-3, stop_gradient_jacobian: bool = False,
                 hidden=(256, 256, 256), activation: str = "silu", seed: int = 0,
                 log_every: int = 50, init_bend=None) -> MetricTrainingResult:
    """Jointly fit the embedding (phi, psi, beta) and geodesic network eta.

    Each step couples two minibatches by exact OT under the current learned
    distance, draws one ``t ~ U[0, 1]`` per pair, and minimizes
    ``L_emb + L_geo``. Batches never exceed the smaller endpoint population.
    ``init_bend`` is added to the output bias of ``eta`` so the initial curves
    bow out by a quarter of it at their midpoint.
    """
    t0, t1 = data.endpoints()
    d0, d1 = torch.as_tensor(data.at(t0)), torch.as_tensor(data.at(t1))
    b = min(batch_size, len(d0), len(d1))
    ss = np.random.SeedSequence(seed)
    s_emb, s_geo, s_loop = (int(s) for s in ss.generate_state(3))
    e = EmbeddingModel(data.dim, latent_dim, hidden, activation, seed=s_emb)
    g = GeodesicModel(data.dim, hidden, activation, seed=s_geo)
    if init_bend is not None:
        with torch.no_grad():
            g.eta.net[-1].bias.add_(as_tensor(init_bend))
    opt = make_adamw(list(e.parameters()) + list(g.parameters()), lr=lr)
    rng = np.random.default_rng(s_loop)
    history = []
    for it in range(iters):
        x0 = d0[rng.choice(len(d0), b, replace=False)]
        x1 = d1[rng.choice(len(d1), b, replace=False)]
        t = torch.as_tensor(rng.random(b), dtype=DTYPE)
        coupling = ot_coupling(e.pairwise(x0, x1))
        x1 = x1[coupling.target]

        refresh_batchnorm(g.eta, g.eta_input(x0, x1, t))
        l_geo, xt, xdot = geo_loss(g, metric, x0, x1, t, stop_gradient_jacobian, return_tangents=True)
        xs, vs = xt.detach(), xdot.detach()
        refresh_batchnorm(e.phi, xs)
        refresh_batchnorm(e.psi, xs)
        l_emb = emb_loss(e, metric, xs, vs)
        loss = l_emb + l_geo
        if not torch.isfinite(loss):
            raise FloatingPointError(f"metric training diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        adamw_step(opt)
        history.append({"iter": it, "emb": l_emb.item(), "geo": l_geo.item(), "total": loss.item()})
        if log_every and it % log_every == 0:
            logger.info("metric iter %d: emb %.4f geo %.4f", it, l_emb.item(), l_geo.item())
    e.eval()
    g.eval()
    return MetricTrainingResult(e, g, history)
