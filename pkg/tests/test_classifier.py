import numpy as np
import pytest
import torch

from ftrj.classifier import Classifier, accuracy, classifier_vjp, predict_proba, train_classifier
from ftrj.data import TimeSeriesDataset, gen_synthetic
from ftrj.lineage import LineageTree

SMALL = (32, 32)


def _blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal([-1, 0], 0.2, (n, 2)), rng.normal([1, 0], 0.2, (n, 2))])
    y = np.repeat([0, 1], n)
    return TimeSeriesDataset(x, y, np.zeros(2 * n), ("a", "b"))


def _tree(k):
    return LineageTree(tuple("ab"[:k]) if k <= 2 else tuple(str(i) for i in range(k)), np.eye(k, dtype=int))


@pytest.fixture(scope="module")
def synthetic_classifier():
    ds, tree = gen_synthetic(seed=0)
    f, report = train_classifier(ds, tree, hidden=(64, 64), seed=0)
    return ds, f, report


def test_separable_blobs():
    ds = _blobs()
    f, report = train_classifier(ds, _tree(2), hidden=SMALL, seed=0)
    test = _blobs(seed=1)
    assert accuracy(f, test.points, test.labels) >= 0.99
    assert report.val_accuracy >= 0.99


def test_single_class_gives_constant_smoothed_output():
    ds = _blobs()
    ds = TimeSeriesDataset(ds.points, np.zeros(len(ds.points), dtype=int), ds.times, ("a", "b"))
    with pytest.warns(UserWarning, match="no training samples"):
        f, _ = train_classifier(ds, _tree(2), smoothing=0.05, hidden=SMALL, seed=0)
    p = predict_proba(f, ds.points).numpy()
    assert (p[:, 0] >= 1 - 0.05 - 0.02).all()
    assert (p[:, 0] < 1).all()


def test_synthetic_accuracy_and_centers(synthetic_classifier):
    ds, f, report = synthetic_classifier
    assert report.val_accuracy >= 0.95
    centers = np.array([[-1, 0], [0, 0.95], [0, 0], [0, -0.95], [1, 0]])
    assert predict_proba(f, centers).argmax(-1).tolist() == [0, 1, 2, 3, 4]


def test_outputs_on_simplex(synthetic_classifier):
    _, f, _ = synthetic_classifier
    x = np.random.default_rng(0).normal(scale=3, size=(500, 2))
    p = predict_proba(f, x)
    assert (p >= 0).all() and (p <= 1).all()
    np.testing.assert_allclose(p.sum(-1).numpy(), 1.0, atol=1e-12)


def test_equal_logits_give_uniform():
    f = Classifier(3, 4, hidden=SMALL, seed=0)
    with torch.no_grad():
        f.net.net[-1].weight.zero_()
        f.net.net[-1].bias.zero_()
    np.testing.assert_allclose(predict_proba(f, [1.0, 2.0, 3.0]).numpy(), 0.25, rtol=1e-15)


def test_vjp_conservation_and_zero(synthetic_classifier):
    _, f, _ = synthetic_classifier
    x = torch.randn(20, 2, dtype=torch.float64)
    assert classifier_vjp(f, x, torch.ones(5, dtype=torch.float64)).abs().max() <= 1e-9
    assert not classifier_vjp(f, x[0], torch.zeros(5, dtype=torch.float64)).any()


def test_vjp_matches_finite_differences(synthetic_classifier):
    _, f, _ = synthetic_classifier
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(20):
        x = torch.as_tensor(rng.normal(size=2) * 0.8)
        w = torch.as_tensor(rng.normal(size=5))
        g = classifier_vjp(f, x, w).numpy()
        fd = np.array([(float(predict_proba(f, x + h * e) @ w) - float(predict_proba(f, x - h * e) @ w)) / (2 * h)
                       for e in torch.eye(2, dtype=torch.float64)])
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-3)


def test_prob_jvp_agrees_with_vjp(synthetic_classifier):
    _, f, _ = synthetic_classifier
    x, v = torch.randn(8, 2, dtype=torch.float64), torch.randn(8, 2, dtype=torch.float64)
    w = torch.randn(5, dtype=torch.float64)
    _, jv = f.prob_jvp(x, v)
    torch.testing.assert_close(jv @ w, (classifier_vjp(f, x, w) * v).sum(-1), rtol=1e-10, atol=1e-12)


def test_training_is_deterministic():
    ds = _blobs(50)
    a, _ = train_classifier(ds, _tree(2), hidden=SMALL, seed=3, max_epochs=5)
    b, _ = train_classifier(ds, _tree(2), hidden=SMALL, seed=3, max_epochs=5)
    for (k, u), v in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(u, v), k


def test_endpoints_mode_and_bad_smoothing():
    ds, tree = gen_synthetic(seed=0)
    with pytest.warns(UserWarning):
        train_classifier(ds, tree, train_on="endpoints", hidden=SMALL, max_epochs=1)
    with pytest.raises(ValueError):
        Classifier(2, 2, smoothing=0.5)
