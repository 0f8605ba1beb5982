"""Lineage-informed Finsler metric and an empirical asymmetric-norm checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy.cluster.vq import kmeans2

from .classifier import Classifier, classifier_vjp
from .lineage import LineageTree, illegal_matrix
from .nn import DTYPE, as_tensor


class ConformalMetric:
    """Conformal base ``||v||_g = G(x) ||v||``.

    ``euclidean`` uses ``G = 1``; ``rbf`` uses the inverse-density scale
    ``G(x) = (sum_k exp(-||x - c_k||^2 / kappa^2) + eps)^(-1/2)`` over k-means centers.
    """

    def __init__(self, variant: str = "euclidean", centers=None, kappa: float = 1.0, epsilon: float = 0.05):
        if variant not in ("euclidean", "rbf"):
            raise ValueError(f"only conformal bases are supported, got {variant!r}")
        if kappa <= 0 or epsilon <= 0:
            raise ValueError("kappa and epsilon must be positive")
        self.variant = variant
        self.centers = None if centers is None else as_tensor(centers)
        self.kappa = kappa
        self.epsilon = epsilon

    @classmethod
    def fit_rbf(cls, points, n_clusters: int = 100, kappa: float = 1.0, epsilon: float = 0.05, seed: int = 0):
        points = np.asarray(points, dtype=np.float64)
        k = min(n_clusters, len(points))
        centers, _ = kmeans2(points, k, minit="++", seed=np.random.default_rng(seed))
        return cls("rbf", centers, kappa, epsilon)

    def scale(self, x: torch.Tensor) -> torch.Tensor:
        x = as_tensor(x)
        if self.variant == "euclidean":
            return torch.ones(x.shape[:-1], dtype=DTYPE)
        if self.centers is None:
            raise RuntimeError("rbf conformal metric has no fitted centers")
        sq = ((x.unsqueeze(-2) - self.centers) ** 2).sum(-1)
        return (torch.exp(-sq / self.kappa**2).sum(-1) + self.epsilon) ** -0.5

    def norm(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.scale(x) * torch.linalg.vector_norm(as_tensor(v), dim=-1)


def conformal_scale(base: ConformalMetric, x) -> float:
    return float(base.scale(as_tensor(x).reshape(1, -1))[0])


@dataclass
class FinslerMetric:
    """``F(x, v) = G(x) ||v|| + lam * G(x) * Ftilde(x, v)``."""

    classifier: Classifier
    illegal: torch.Tensor
    base: ConformalMetric = field(default_factory=ConformalMetric)
    lam: float = 1.0

    def __post_init__(self):
        self.illegal = as_tensor(self.illegal)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.illegal.shape != (self.classifier.n_classes,) * 2:
            raise ValueError("illegal-direction matrix does not match classifier output dimension")

    @classmethod
    def from_tree(cls, classifier: Classifier, tree: LineageTree, base: ConformalMetric | None = None,
                  lam: float = 1.0):
        return cls(classifier, torch.as_tensor(illegal_matrix(tree)), base or ConformalMetric(), lam)

    @property
    def active(self) -> bool:
        # with nothing illegal the penalty is identically zero; skipping it keeps
        # the result bitwise equal to the conformal base
        return self.lam > 0 and bool(self.illegal.any())

    def tilde(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Batched penalty ``sum_c f_c(x) <Jf(x) v, M e_c>_+`` (one JVP per batch)."""
        f, jv = self.classifier.prob_jvp(x, v)
        return (f * torch.relu(jv @ self.illegal)).sum(-1)

    def __call__(self, x: torch.Tensor, v: torch.Tensor, stop_gradient_jacobian: bool = False) -> torch.Tensor:
        if stop_gradient_jacobian:
            x = x.detach()
        g = self.base.scale(x)
        speed = torch.linalg.vector_norm(v, dim=-1)
        if not self.active:
            return g * speed
        return g * speed + self.lam * g * self.tilde(x, v)


def _check(x, v):
    x, v = as_tensor(x), as_tensor(v)
    if not (torch.isfinite(x).all() and torch.isfinite(v).all()):
        raise ValueError("non-finite input")
    return x, v


def tilde_f(metric: FinslerMetric, x, v, method: str = "jvp") -> float:
    """Penalty at a single ``(x, v)``.

    ``method="vjp"`` evaluates one ``Jf(x)^T (1 - A^T) e_c`` per class; ``"jvp"``
    uses the equivalent single forward-mode product.
    """
    x, v = _check(x, v)
    with torch.no_grad():
        p = metric.classifier(x.reshape(1, -1))[0]
    if method == "jvp":
        return float(metric.tilde(x.reshape(1, -1), v.reshape(1, -1))[0].detach())
    if method != "vjp":
        raise ValueError(method)
    total = torch.zeros((), dtype=DTYPE)
    for c in range(metric.illegal.shape[1]):
        w = metric.illegal[:, c]
        if not w.any():
            continue
        grad = classifier_vjp(metric.classifier, x, w)
        total = total + p[c] * torch.relu(torch.dot(v, grad))
    return float(total.detach())


def finsler_f(metric: FinslerMetric, x, v) -> float:
    x, v = _check(x, v)
    return float(metric(x.reshape(1, -1), v.reshape(1, -1))[0].detach())


@dataclass
class AxiomReport:
    homogeneity: float
    subadditivity: float
    lower_bound: float
    nonnegativity: float
    passed: dict

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def check_finsler_axioms(F: Callable, points, directions, tol: float = 1e-8,
                         alphas=(0.5, 2.0, 10.0), min_lower_bound: float = 1e-6,
                         homogeneity_tol: float | None = None) -> AxiomReport:
    """Worst violations of the asymmetric-norm axioms over paired samples.

    ``F`` maps batched ``(x, v)`` arrays to a vector of values. ``points`` and
    ``directions`` are (N, n); subadditivity pairs each direction with the next.
    Homogeneity is measured relative to ``F(x, v)``; ``lower_bound`` is the
    smallest observed ``F(x, v) / ||v||``.
    """
    x, v = as_tensor(points), as_tensor(directions)
    if len(x) == 0 or len(v) == 0:
        raise ValueError("empty sample sets")
    if x.shape != v.shape:
        raise ValueError("points and directions must pair up")
    with torch.no_grad():
        base = as_tensor(F(x, v))
        scale = torch.clamp(base.abs(), min=1.0)
        hom = max(float(((as_tensor(F(x, a * v)) - a * base).abs() / (a * scale)).max()) for a in alphas)
        u = torch.roll(v, 1, dims=0)
        sub = float(torch.clamp(as_tensor(F(x, u + v)) - as_tensor(F(x, u)) - base, min=0).max())
        norms = torch.linalg.vector_norm(v, dim=-1)
        nz = norms > 0
        m = float((base[nz] / norms[nz]).min()) if nz.any() else float("nan")
        neg = float(torch.clamp(-base, min=0).max())
    passed = {
        "homogeneity": hom <= (tol if homogeneity_tol is None else homogeneity_tol),
        "subadditivity": sub <= tol,
        "nondegeneracy": m > min_lower_bound,
        "nonnegativity": neg == 0.0,
    }
    return AxiomReport(hom, sub, m, neg, passed)
