import numpy as np
import pytest
import torch

from ftrj.classifier import Classifier
from ftrj.data import gen_synthetic
from ftrj.finsler import FinslerMetric, finsler_f
from ftrj.geodesic import (
    EmbeddingModel, GeodesicModel, dhat, emb_loss, fhat, geo_loss, interpolant, train_metric,
)
from ftrj.lineage import LineageTree

F64 = torch.float64
SMALL = (24, 24)


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    e = EmbeddingModel(2, 6, SMALL, seed=1)
    g = GeodesicModel(2, SMALL, seed=2)
    f = Classifier(2, 3, hidden=SMALL, seed=3)
    # non-trivial batch-norm statistics so inference mode is not the identity
    with torch.no_grad():
        for net in (e.phi, e.psi, g.eta, f.net):
            net.train()
            net(torch.randn(64, net.in_dim, dtype=F64) * 2)
            net.eval()
    tree = LineageTree.from_edges(("0", "1", "2"), [("0", "1")])
    return e, g, FinslerMetric.from_tree(f, tree, lam=0.7)


def test_boundary_exactness(models):
    _, g, _ = models
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0, x1 = rng.normal(size=2), rng.normal(size=2)
        assert torch.equal(interpolant(g, x0, x1, 0.0)[0], torch.as_tensor(x0))
        assert torch.equal(interpolant(g, x0, x1, 1.0)[0], torch.as_tensor(x1))
    with pytest.raises(ValueError):
        interpolant(g, x0, x1, 1.5)


def test_velocity_matches_finite_differences(models):
    _, g, _ = models
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(50):
        x0, x1, t = rng.normal(size=2), rng.normal(size=2), rng.uniform(0.05, 0.95)
        xd = interpolant(g, x0, x1, t)[1].numpy()
        fd = (interpolant(g, x0, x1, t + h)[0] - interpolant(g, x0, x1, t - h)[0]).numpy() / (2 * h)
        assert np.linalg.norm(xd - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_zero_eta_gives_straight_line():
    g = GeodesicModel(2, SMALL, seed=0)
    with torch.no_grad():
        g.eta.net[-1].weight.zero_()
        g.eta.net[-1].bias.zero_()
    x0, x1 = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    xt, xd = interpolant(g, x0, x1, 0.25)
    np.testing.assert_allclose(xt.numpy(), [0.5, 0.5], rtol=1e-15)
    np.testing.assert_allclose(xd.numpy(), x1 - x0, rtol=1e-15)


def test_dhat_identity_and_relu_antisymmetry(models):
    e, _, _ = models
    rng = np.random.default_rng(2)
    for _ in range(30):
        x, y = rng.normal(size=2), rng.normal(size=2)
        assert dhat(e, x, x) == 0.0
        xt, yt = torch.as_tensor(x)[None], torch.as_tensor(y)[None]
        with torch.no_grad():
            lin = float(((e.psi(xt) - e.psi(yt)) @ e.beta)[0])
        assert dhat(e, x, y) - dhat(e, y, x) == pytest.approx(lin, abs=1e-12)
        assert dhat(e, x, y) >= 0


def test_dhat_taylor_limit_is_fhat(models):
    e, _, _ = models
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, v = rng.normal(size=2), rng.normal(size=2)
        target = fhat(e, x, v)
        errs = [abs(dhat(e, x, x + h * v) / h - target) for h in (1e-3, 1e-4, 1e-5)]
        assert errs[-1] <= 1e-4 * max(target, 1.0)
        assert errs[-1] <= errs[0] + 1e-9


def test_pairwise_matches_pointwise(models):
    e, _, _ = models
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    c = e.pairwise(a, b)
    for i in range(4):
        for j in range(5):
            assert c[i, j] == pytest.approx(dhat(e, a[i], b[j]), abs=1e-12)


def test_emb_loss_oracle(models):
    e, _, metric = models
    rng = np.random.default_rng(5)
    x, v = rng.normal(size=(16, 2)), rng.normal(size=(16, 2))
    expected = np.mean([abs(fhat(e, xi, vi) - finsler_f(metric, xi, vi)) for xi, vi in zip(x, v)])
    got = emb_loss(e, metric, torch.as_tensor(x), torch.as_tensor(v))
    assert float(got.detach()) == pytest.approx(expected, rel=1e-12)


def test_geo_loss_oracle(models):
    _, g, metric = models
    rng = np.random.default_rng(6)
    x0, x1, t = rng.normal(size=(12, 2)), rng.normal(size=(12, 2)), rng.random(12)
    vals = []
    for a, b, s in zip(x0, x1, t):
        xt, xd = interpolant(g, a, b, float(s))
        vals.append(finsler_f(metric, xt, xd) ** 2)
    got = geo_loss(g, metric, torch.as_tensor(x0), torch.as_tensor(x1), torch.as_tensor(t))
    assert float(got) == pytest.approx(np.mean(vals), rel=1e-12)


def test_geo_loss_gradient_matches_finite_differences(models):
    _, g, metric = models
    rng = np.random.default_rng(7)
    x0, x1, t = (torch.as_tensor(a) for a in (rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), rng.random(8)))
    w = g.eta.net[0].weight
    g.zero_grad()
    geo_loss(g, metric, x0, x1, t).backward()
    grad = w.grad.clone()
    h = 1e-6
    for idx in [(0, 0), (3, 5), (7, 67)]:
        with torch.no_grad():
            old = w[idx].item()
            w[idx] = old + h
            up = float(geo_loss(g, metric, x0, x1, t))
            w[idx] = old - h
            down = float(geo_loss(g, metric, x0, x1, t))
            w[idx] = old
        fd = (up - down) / (2 * h)
        assert grad[idx].item() == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_train_metric_smoke():
    ds, tree = gen_synthetic(seed=0)
    f = Classifier(2, 5, hidden=SMALL, seed=0)
    metric = FinslerMetric.from_tree(f, tree, lam=1.0)
    res = train_metric(ds, metric, iters=3, batch_size=32, hidden=SMALL, latent_dim=4, seed=0, log_every=0)
    assert len(res.history) == 3
    assert all(np.isfinite([h["total"] for h in res.history]))
    assert not res.embedding.training and not res.geodesic.training
    again = train_metric(ds, metric, iters=3, batch_size=32, hidden=SMALL, latent_dim=4, seed=0, log_every=0)
    assert [h["total"] for h in again.history] == [h["total"] for h in res.history]


def test_init_bend_shifts_midpoint():
    ds, tree = gen_synthetic(seed=0)
    metric = FinslerMetric.from_tree(Classifier(2, 5, hidden=SMALL, seed=0), tree, lam=1.0)
    kw = dict(iters=1, batch_size=32, hidden=SMALL, latent_dim=4, seed=0, log_every=0)
    bend = np.array([0.0, 2.0])
    flat = train_metric(ds, metric, **kw).geodesic
    bent = train_metric(ds, metric, init_bend=bend, **kw).geodesic
    x0, x1 = np.array([-1.0, 0.0]), np.array([1.0, 0.0])
    shift = (interpolant(bent, x0, x1, 0.5)[0] - interpolant(flat, x0, x1, 0.5)[0]).numpy()
    np.testing.assert_allclose(shift, bend / 4, atol=0.05)
