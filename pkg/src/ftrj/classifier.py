"""Cell-type classifier ``f: R^n -> simplex`` and its Jacobian queries."""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.func import vjp

from .data import TimeSeriesDataset
from .lineage import LineageTree
from .nn import MLP, DTYPE, adamw_step, as_tensor, make_adamw, seeded

logger = logging.getLogger(__name__)


class Classifier(nn.Module):
    """Softmax head over an MLP; always queried in inference mode."""

    def __init__(self, dim: int, n_classes: int, smoothing: float = 0.05, hidden=(256, 256, 256),
                 activation: str = "silu", seed: int | None = None):
        super().__init__()
        if not 0.0 <= smoothing < 0.5:
            raise ValueError("label smoothing must lie in [0, 0.5)")
        self.net = MLP(dim, n_classes, hidden, activation, seed=seed)
        self.smoothing = smoothing
        self.eval()

    @property
    def n_classes(self) -> int:
        return self.net.out_dim

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=-1)

    def prob_jvp(self, x: torch.Tensor, v: torch.Tensor):
        """``(f(x), Jf(x) v)`` for a batch; differentiable w.r.t. ``x`` and ``v``."""
        z, dz = self.net.forward_tangent(x, v)
        p = torch.softmax(z, dim=-1)
        return p, p * (dz - (p * dz).sum(-1, keepdim=True))


def predict_proba(f: Classifier, x) -> torch.Tensor:
    x = as_tensor(x)
    single = x.ndim == 1
    with torch.no_grad():
        p = f(x.reshape(1, -1) if single else x)
    return p[0] if single else p


def classifier_vjp(f: Classifier, x, w) -> torch.Tensor:
    """``Jf(x)^T w`` through the softmax."""
    if f.training:
        raise RuntimeError("classifier must be in inference mode")
    x, w = as_tensor(x), as_tensor(w)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    wb = w.reshape(1, -1).expand(xb.shape[0], -1) if w.ndim == 1 else w
    _, pullback = vjp(f, xb)
    out = pullback(wb)[0].detach()
    return out[0] if single else out


@dataclass
class ClassifierReport:
    train_accuracy: float
    val_accuracy: float
    epochs: int
    losses: list


def _select(data: TimeSeriesDataset, train_on: str) -> np.ndarray:
    if train_on == "all":
        return np.arange(len(data.points))
    if train_on == "endpoints":
        t0, t1 = data.endpoints()
        return np.flatnonzero((data.times == t0) | (data.times == t1))
    raise ValueError(f"train_on must be 'all' or 'endpoints', got {train_on!r}")


def train_classifier(data: TimeSeriesDataset, tree: LineageTree, *, smoothing: float = 0.05,
                     batch_size: int = 512, max_epochs: int = 300, patience: int = 20, lr: float = 1e-3,
                     val_fraction: float = 0.1, train_on: str = "all", hidden=(256, 256, 256),
                     activation: str = "silu", seed: int = 0):
    """Cross-entropy training with label smoothing and early stopping on a validation split."""
    if data.class_names != tree.class_names:
        raise ValueError("dataset and lineage disagree on class names")
    idx = _select(data, train_on)
    rng = np.random.default_rng(seed)
    idx = rng.permutation(idx)
    absent = set(range(tree.n_classes)) - set(data.labels[idx].tolist())
    if absent:
        warnings.warn(f"classes {sorted(absent)} have no training samples", stacklevel=2)
    n_val = int(round(val_fraction * len(idx))) if len(idx) >= 10 else 0
    val_idx, tr_idx = idx[:n_val], idx[n_val:]
    x = torch.as_tensor(data.points, dtype=DTYPE)
    y = torch.as_tensor(data.labels)

    f = Classifier(data.dim, tree.n_classes, smoothing, hidden, activation, seed=seed)
    opt = make_adamw(f.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss(label_smoothing=smoothing)
    best, best_state, stale, losses = np.inf, None, 0, []
    epoch = 0
    with seeded(seed):
        for epoch in range(1, max_epochs + 1):
            f.train()
            perm = rng.permutation(tr_idx)
            total = 0.0
            for start in range(0, len(perm), batch_size):
                b = perm[start:start + batch_size]
                if len(b) < 2:
                    continue
                loss = loss_fn(f.logits(x[b]), y[b])
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"classifier loss diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                adamw_step(opt)
                total += loss.item() * len(b)
            losses.append(total / max(len(perm), 1))
            if n_val == 0:
                continue
            f.eval()
            with torch.no_grad():
                val_loss = loss_fn(f.logits(x[val_idx]), y[val_idx]).item()
            if val_loss < best - 1e-9:
                best, best_state, stale = val_loss, copy.deepcopy(f.state_dict()), 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        f.load_state_dict(best_state)
    f.eval()
    report = ClassifierReport(accuracy(f, data.points[tr_idx], data.labels[tr_idx]),
                              accuracy(f, data.points[val_idx], data.labels[val_idx]) if n_val else float("nan"),
                              epoch, losses)
    logger.info("classifier: %d epochs, val accuracy %.4f", epoch, report.val_accuracy)
    return f, report


def accuracy(f: Classifier, points, labels) -> float:
    if len(points) == 0:
        return float("nan")
    pred = predict_proba(f, points).argmax(dim=-1).numpy()
    return float((pred == np.asarray(labels)).mean())
