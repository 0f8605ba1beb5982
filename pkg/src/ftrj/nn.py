"""Small dense networks with the derivative queries the metric needs.

Everything runs in float64. Derivative queries (``mlp_jvp``, ``mlp_vjp``,
``mlp_second_order``) require the network to be in inference mode so that
batch normalization is a fixed affine map and per-sample Jacobians exist.
"""

from __future__ import annotations

import logging
import math
import warnings
from contextlib import contextmanager
from typing import Iterable, Sequence

import torch
from torch import nn
from torch.func import jvp, vjp

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DEFAULT_HIDDEN = (256, 256, 256)

_ACTIVATIONS = {
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
    "relu": nn.ReLU,
}
_PIECEWISE_LINEAR = {"relu"}


class TrainingModeError(RuntimeError):
    """Raised when a per-sample derivative is requested from a network in training mode."""


@contextmanager
def seeded(seed: int | None):
    """Fork the global torch RNG and seed it for the duration of the block."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class MLP(nn.Module):
    """Linear -> BatchNorm -> activation per hidden layer, linear head."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        activation: str = "silu",
        batchnorm: bool = True,
        seed: int | None = None,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if activation in _PIECEWISE_LINEAR:
            warnings.warn(
                f"activation {activation!r} is piecewise linear; second-order queries vanish almost everywhere",
                stacklevel=2,
            )
        self.layer_dims = (in_dim, *hidden, out_dim)
        self.activation = activation
        layers: list[nn.Module] = []
        with seeded(seed):
            for a, b in zip(self.layer_dims[:-2], self.layer_dims[1:-1]):
                layers.append(nn.Linear(a, b, dtype=DTYPE))
                if batchnorm:
                    layers.append(nn.BatchNorm1d(b, dtype=DTYPE))
                layers.append(_ACTIVATIONS[activation]())
            layers.append(nn.Linear(self.layer_dims[-2], self.layer_dims[-1], dtype=DTYPE))
        self.net = nn.Sequential(*layers)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def forward_tangent(self, x: torch.Tensor, dx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Output and its directional derivative along ``dx``, row-wise.

        Propagates the tangent layer by layer; the result stays differentiable
        by autograd. Batch norm must be in inference mode.
        """
        _require_inference(self)
        h, dh = x, dx
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                h, dh = layer(h), dh @ layer.weight.T
            elif isinstance(layer, nn.BatchNorm1d):
                scale = layer.weight / torch.sqrt(layer.running_var + layer.eps)
                h, dh = layer(h), dh * scale
            elif isinstance(layer, nn.SiLU):
                sig = torch.sigmoid(h)
                h, dh = h * sig, dh * (sig * (1 + h * (1 - sig)))
            elif isinstance(layer, nn.Tanh):
                h = torch.tanh(h)
                dh = dh * (1 - h * h)
            elif isinstance(layer, nn.Softplus):
                h, dh = layer(h), dh * torch.sigmoid(h)
            elif isinstance(layer, nn.ReLU):
                h, dh = layer(h), dh * (h > 0)
            else:
                raise TypeError(f"no tangent rule for {type(layer).__name__}")
        return h, dh


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _check_input(net: nn.Module, x: torch.Tensor) -> None:
    if x.shape[-1] != getattr(net, "in_dim", x.shape[-1]):
        raise ValueError(f"expected input dim {net.in_dim}, got {x.shape[-1]}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input")


def _require_inference(net: nn.Module) -> None:
    if net.training:
        raise TrainingModeError("derivative queries need the network in inference mode (call .eval())")


def mlp_forward(net: MLP, batch, training: bool) -> torch.Tensor:
    """Evaluate ``net`` on a (rows, in_dim) batch in the requested batch-norm mode."""
    batch = as_tensor(batch)
    if batch.ndim != 2:
        raise ValueError("batch must be 2-D (rows, cols)")
    _check_input(net, batch)
    net.train(training)
    return net(batch)


def _single(net: nn.Module):
    return lambda z: net(z.unsqueeze(0)).squeeze(0)


def mlp_jvp(net: MLP, x, v) -> torch.Tensor:
    """Forward-mode ``J_net(x) v``. Batched inputs are handled row-wise."""
    _require_inference(net)
    x, v = as_tensor(x), as_tensor(v)
    _check_input(net, x)
    if v.shape != x.shape:
        raise ValueError("tangent must match input shape")
    if isinstance(net, MLP):
        with torch.no_grad():
            out = net.forward_tangent(x.reshape(-1, x.shape[-1]), v.reshape(-1, v.shape[-1]))[1]
        return out.reshape(*x.shape[:-1], -1)
    fn = net if x.ndim == 2 else _single(net)
    return jvp(fn, (x,), (v,))[1].detach()


def mlp_vjp(net: MLP, x, w) -> torch.Tensor:
    """Reverse-mode ``J_net(x)^T w``. Batched inputs are handled row-wise."""
    _require_inference(net)
    x, w = as_tensor(x), as_tensor(w)
    _check_input(net, x)
    if w.shape[-1] != getattr(net, "out_dim", w.shape[-1]):
        raise ValueError(f"cotangent must have dim {net.out_dim}")
    fn = net if x.ndim == 2 else _single(net)
    _, pullback = vjp(fn, x)
    return pullback(w)[0].detach()


def mlp_second_order(net: MLP, x, w, u) -> torch.Tensor:
    """Directional derivative of ``x -> J(x)^T w`` along ``u`` (forward-over-reverse)."""
    _require_inference(net)
    if getattr(net, "activation", None) in _PIECEWISE_LINEAR:
        raise ValueError("second-order query on a piecewise-linear network is zero almost everywhere")
    x, w, u = as_tensor(x), as_tensor(w), as_tensor(u)
    _check_input(net, x)
    fn = net if x.ndim == 2 else _single(net)

    def grad_fn(z):
        _, pullback = vjp(fn, z)
        return pullback(w)[0]

    return jvp(grad_fn, (x,), (u,))[1].detach()


class TimeEmbedding(nn.Module):
    """Sinusoidal features ``[sin(w_k t), cos(w_k t)]`` for 32 geometric frequencies.

    Default ladder ``w_k = 2^(k/8)`` spans 1 to ~14.7 rad per unit time. Much
    faster channels make the interpolant oscillate in t and swamp the energy.
    """

    def __init__(self, n_freqs: int = 32, base: float = 1.0, ratio: float = 2.0 ** 0.125):
        super().__init__()
        k = torch.arange(n_freqs, dtype=DTYPE)
        self.register_buffer("freqs", base * ratio**k)

    @property
    def dim(self) -> int:
        return 2 * self.freqs.numel()

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = as_tensor(t)
        arg = t.reshape(-1, 1) * self.freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)

    def with_derivative(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Embedding and its derivative in ``t``."""
        arg = as_tensor(t).reshape(-1, 1) * self.freqs
        s, c = torch.sin(arg), torch.cos(arg)
        return torch.cat([s, c], dim=-1), torch.cat([c * self.freqs, -s * self.freqs], dim=-1)


def time_embed(t: float, embedding: TimeEmbedding | None = None) -> torch.Tensor:
    emb = embedding or TimeEmbedding()
    return emb(as_tensor([t]))[0]


def make_adamw(params: Iterable[nn.Parameter], lr: float = 1e-3, weight_decay: float = 1e-2,
               betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def adamw_step(opt: torch.optim.AdamW) -> bool:
    """Take one AdamW step unless some gradient is non-finite.

    Returns False (and clears gradients) when the step was skipped.
    """
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                logger.warning("non-finite gradient, skipping optimizer step")
                opt.zero_grad(set_to_none=True)
                return False
    opt.step()
    return True


@torch.no_grad()
def refresh_batchnorm(net: nn.Module, batch: torch.Tensor) -> None:
    """Update running statistics from ``batch`` and leave the net in inference mode."""
    net.train()
    net(batch)
    net.eval()
