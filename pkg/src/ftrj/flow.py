"""Flow-matching head regressed on learned geodesic velocities, plus RK4 simulation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .classifier import Classifier
from .data import TimeSeriesDataset
from .geodesic import GeodesicModel
from .nn import MLP, DTYPE, TimeEmbedding, adamw_step, as_tensor, make_adamw
from .transport import Coupling

logger = logging.getLogger(__name__)


class VectorField(nn.Module):
    def __init__(self, dim: int, hidden=(256, 256, 256), activation: str = "silu", seed: int | None = None):
        super().__init__()
        self.time = TimeEmbedding()
        self.net = MLP(dim + self.time.dim, dim, hidden, activation, seed=seed)
        self.eval()

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        t = as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        return self.net(torch.cat([x, self.time(t)], dim=-1))


def flow_loss(v: VectorField, xt: torch.Tensor, t: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((v(xt, t) - target) ** 2).sum(-1).mean()


@dataclass
class FlowTrainingResult:
    field: VectorField
    history: list = field(default_factory=list)


def train_flow(g: GeodesicModel, coupler: Callable[[torch.Tensor, torch.Tensor], Coupling] | Coupling,
               data: TimeSeriesDataset, *, iters: int = 1000, batch_size: int = 512, lr: float = 1e-3,
               hidden=(256, 256, 256), activation: str = "silu", seed: int = 0) -> FlowTrainingResult:
    """Regress ``v(x_t, t)`` onto ``xdot_t`` of the frozen interpolant over coupled pairs.

    ``coupler`` is either a function coupling each pair of minibatches or a
    fixed :class:`Coupling` between the full endpoint populations, from which
    minibatches of pairs are drawn.
    """
    t0, t1 = data.endpoints()
    d0, d1 = torch.as_tensor(data.at(t0)), torch.as_tensor(data.at(t1))
    b = min(batch_size, len(d0), len(d1))
    s_net, s_loop = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    v = VectorField(data.dim, hidden, activation, seed=s_net)
    opt = make_adamw(v.parameters(), lr=lr)
    rng = np.random.default_rng(s_loop)
    g.eval()
    history = []
    for it in range(iters):
        if isinstance(coupler, Coupling):
            src, dst = coupler.sample_pairs(b, rng)
            x0, x1 = d0[src], d1[dst]
        else:
            x0 = d0[rng.choice(len(d0), b, replace=False)]
            x1 = d1[rng.choice(len(d1), b, replace=False)]
            pi = coupler(x0, x1)
            src, dst = pi.sample_pairs(b, rng) if pi.shape[0] != pi.shape[1] else pi.pairs()
            x0, x1 = x0[src], x1[dst]
        t = torch.as_tensor(rng.random(b), dtype=DTYPE)
        with torch.no_grad():
            xt, xdot = g(x0, x1, t)
        v.train()
        loss = flow_loss(v, xt, t, xdot)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"flow training diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        adamw_step(opt)
        history.append(loss.item())
    v.eval()
    return FlowTrainingResult(v, history)


@torch.no_grad()
def integrate(v: Callable, x0, t_from: float, t_to: float, steps: int = 100) -> torch.Tensor:
    """Fixed-step RK4 from ``t_from`` to ``t_to``; ``v(x, t)`` takes a batch and a scalar time."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(v, nn.Module):
        v.eval()
    x = as_tensor(x0).clone()
    h = (t_to - t_from) / steps
    for i in range(steps):
        t = t_from + i * h
        k1 = v(x, t)
        k2 = v(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = v(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = v(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite state at RK4 step {i}")
    return x


@torch.no_grad()
def simulate(v: VectorField, x0, times, steps_per_unit: int = 100) -> dict[float, torch.Tensor]:
    """States at each requested normalized time, integrating forward from t=0."""
    x = as_tensor(x0)
    out: dict[float, torch.Tensor] = {}
    t_prev = 0.0
    for t in sorted(times):
        n = int(round(steps_per_unit * (t - t_prev)))
        if n > 0:
            x = integrate(v, x, t_prev, t, n)
        out[t] = x
        t_prev = t
    return out


@dataclass
class TrajectoryTable:
    times: np.ndarray
    positions: np.ndarray
    probs: np.ndarray

    def argmax_paths(self) -> np.ndarray:
        return self.probs.argmax(-1)

    def write_csv(self, path) -> None:
        n_traj, n_t, dim = self.positions.shape
        n_cls = self.probs.shape[-1]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["traj_id", "t"] + [f"x_{i + 1}" for i in range(dim)]
                       + [f"p_class_{c}" for c in range(n_cls)])
            for k in range(n_traj):
                for j in range(n_t):
                    w.writerow([k, repr(float(self.times[j]))]
                               + [repr(float(a)) for a in self.positions[k, j]]
                               + [repr(float(a)) for a in self.probs[k, j]])


@torch.no_grad()
def simulate_and_classify(v: VectorField, f: Classifier, x0, t_grid, steps_per_unit: int = 100) -> TrajectoryTable:
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(np.diff(t_grid) < 0) or t_grid.min() < 0 or t_grid.max() > 1:
        raise ValueError("t_grid must be ascending within [0, 1]")
    states = simulate(v, x0, t_grid.tolist(), steps_per_unit)
    pos = torch.stack([states[t] for t in t_grid.tolist()], dim=1)
    f.eval()
    probs = f(pos.reshape(-1, pos.shape[-1])).reshape(pos.shape[0], pos.shape[1], -1)
    return TrajectoryTable(t_grid, pos.numpy(), probs.numpy())


def lineage_consistency(table: TrajectoryTable, adjacency=None, allowed=None) -> float:
    """Fraction of trajectories whose argmax path respects the prior.

    With ``adjacency`` every consecutive change of argmax class must be an
    edge; with ``allowed`` every visited class must belong to the set.
    """
    paths = table.argmax_paths()
    ok = np.ones(len(paths), dtype=bool)
    for k, p in enumerate(paths):
        if allowed is not None and not set(p.tolist()) <= set(allowed):
            ok[k] = False
        if adjacency is not None and any(not adjacency[a, b] for a, b in zip(p[:-1], p[1:])):
            ok[k] = False
    return float(ok.mean())
