import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebt import id_removal as idr
from ebt.tensor import Tensor, make_rng
from oracles import fd_grads, analytic_grads, rel_err


@pytest.fixture(scope="module")
def model():
    m = idr.init_id_removal(0, n_ceps=5, k=3, hidden=8)
    rng = np.random.default_rng(0)
    # larger components than the near-identity init so the oracle is not trivial
    for j in range(3):
        m.store.replace(f"idrm/components/{j}", rng.normal(0, 0.5, (5, 6)))
    return m


def dense_transform(model, lam, x):
    """Assemble [I | 0] + sum_j lam_j Wbar_j and multiply by (x; 1) per frame."""
    c = model.n_ceps
    W = np.hstack([np.eye(c), np.zeros((c, 1))])
    for j in range(model.k):
        W = W + lam[j] * model.component(j).data.astype(np.float64)
    xe = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    return xe @ W.T


def test_zero_lambda_is_identity(model):
    x = np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32)
    np.testing.assert_array_equal(idr.apply_transform(model, np.zeros(3), x).data, x)


def test_pure_bias_component():
    m = idr.init_id_removal(0, n_ceps=4, k=1, hidden=4)
    b = np.array([0.5, -1.0, 2.0, 0.25])
    m.store.replace("idrm/components/0", np.hstack([np.zeros((4, 4)), b[:, None]]))
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(idr.apply_transform(m, [1.0], x).data, x + b, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_assembly(model, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 7, 5))
    lam = rng.normal(size=(2, 3))
    out = idr.apply_transform(model, lam, x).data
    ref = np.stack([dense_transform(model, lam[i], x[i]) for i in range(2)])
    np.testing.assert_allclose(out, ref, atol=1e-5)
    np.testing.assert_allclose(idr.transform_matrix(model, lam[0]) @ np.append(x[0, 0], 1.0), ref[0, 0], atol=1e-5)


def test_transform_rejects_wrong_sizes(model):
    with pytest.raises(ValueError, match="C=5"):
        idr.apply_transform(model, np.zeros(3), np.zeros((2, 4)))


def test_fresh_lambda_is_small_and_deterministic():
    m = idr.init_id_removal(3)
    rng = np.random.default_rng(3)
    x = rng.normal(0, 3, (6, 100, 13)).astype(np.float32)
    lam = idr.infer_lambda(m, x).data
    assert lam.shape == (6, 4) and np.all(np.isfinite(lam)) and np.abs(lam).max() < 10
    np.testing.assert_allclose(idr.infer_lambda(m, x[2]).data, lam[2], atol=1e-6)
    np.testing.assert_array_equal(idr.infer_lambda(m, x).data, lam)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(-50, 50))
def test_lambda_finite_for_finite_input(seed, offset):
    m = idr.init_id_removal(seed)
    x = np.random.default_rng(seed).normal(offset, 10, (100, 13))
    assert np.all(np.isfinite(idr.infer_lambda(m, x).data))


def test_one_lambda_per_window():
    m = idr.init_id_removal(1, n_ceps=3, k=2, hidden=4)
    x = np.random.default_rng(1).normal(size=(10, 3)).astype(np.float32)
    lam = idr.infer_lambda(m, x).data
    out = idr.remove_identity(m, x).data
    np.testing.assert_allclose(out, dense_transform(m, lam, x), atol=1e-5)


def test_uniform_classifier_gives_log_n():
    clf = idr.init_classifier(0, 5, n_ceps=3, hidden=4)
    for name in clf.param_names():
        if name.startswith("spk/fc"):
            clf.store.replace(name, np.zeros(clf.store[name].shape))
    x = np.random.default_rng(0).normal(size=(3, 20, 3))
    assert idr.confusion_loss(clf, x).item() == pytest.approx(np.log(5), abs=1e-6)


def test_confident_classifier_loss_with_floor():
    # p = (1, 0, 0, 0, 0) after flooring: (1/5)(-ln 1 - 4 ln 1e-12)
    clf = idr.init_classifier(0, 5, n_ceps=3, hidden=4)
    clf.store.replace("spk/fc/w", np.zeros(clf.store["spk/fc/w"].shape))
    clf.store.replace("spk/fc/b", np.array([0.0, -500.0, -500.0, -500.0, -500.0]))
    loss = idr.confusion_loss(clf, np.zeros((1, 10, 3))).item()
    assert loss == pytest.approx(-4 * np.log(1e-12) / 5, rel=1e-5)
    assert loss == pytest.approx(22.1, abs=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_confusion_loss_bounded_below(seed):
    clf = idr.init_classifier(seed, 4, n_ceps=3, hidden=6)
    rng = np.random.default_rng(seed)
    for name in clf.param_names():
        clf.store.replace(name, rng.normal(0, 2, clf.store[name].shape))
    x = rng.normal(0, 3, (5, 12, 3))
    assert idr.confusion_loss(clf, x).item() >= np.log(4) - 1e-4


def test_id_stack_gradient_matches_finite_differences():
    m = idr.init_id_removal(2, n_ceps=3, k=2, hidden=4, component_std=0.3)
    clf = idr.init_classifier(5, 3, n_ceps=3, hidden=4)
    x = np.random.default_rng(2).normal(size=(2, 6, 3))
    comp = m.component(0).data.astype(np.float64)

    def loss(c0):
        saved = m.store["idrm/components/0"]
        m.store.params["idrm/components/0"] = c0
        try:
            return idr.confusion_loss(clf, idr.remove_identity(m, Tensor(x, c0.data.dtype)))
        finally:
            m.store.params["idrm/components/0"] = saved

    a = analytic_grads(loss, [comp])[0]
    f = fd_grads(loss, [comp])[0]
    assert rel_err(a, f) < 1e-2


def test_split_holdout_is_per_class():
    labels = np.repeat(np.arange(3), 10)
    tr, ho = idr.split_holdout(labels, 0.2, seed=0)
    assert np.bincount(labels[ho]).tolist() == [2, 2, 2]
    assert np.intersect1d(tr, ho).size == 0 and tr.size + ho.size == 30


def toy_corpus(n_per=24, seed=0):
    """Three 'speakers' separated by a constant cepstral offset."""
    rng = np.random.default_rng(seed)
    offsets = np.array([[-1.0, 0.0, 0.5], [1.0, -0.5, 0.0], [0.0, 1.0, -0.5]])
    x = np.concatenate([rng.normal(0, 0.5, (n_per, 8, 3)) + offsets[s] for s in range(3)]).astype(np.float32)
    return x, np.repeat(np.arange(3), n_per)


def test_classifier_learns_separable_speakers():
    x, y = toy_corpus()
    clf, rep = idr.pretrain_classifier(x, y, seed=0, epochs=15, hidden=8)
    assert rep.train_accuracy >= 0.95 and rep.heldout_accuracy >= 0.9


def test_shuffled_labels_give_chance():
    x, y = toy_corpus(n_per=60)
    y = np.random.default_rng(1).permutation(y)
    clf, rep = idr.pretrain_classifier(x, y, seed=0, epochs=5, hidden=8)
    assert abs(rep.heldout_accuracy - 1 / 3) <= 0.15


def test_single_batch_memorisation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(32, 10, 4)).astype(np.float32)
    y = np.arange(32) % 4
    clf = idr.init_classifier(0, 4, n_ceps=4, hidden=16)
    idr.train_classifier_steps(clf, x, y, epochs=200, lr=1e-2, batch=32, rng=make_rng(0))
    assert idr.accuracy(clf, x, y) == 1.0


def test_zero_epochs_leave_model_unchanged():
    x, y = toy_corpus()
    clf = idr.init_classifier(0, 3, n_ceps=3, hidden=8)
    m = idr.init_id_removal(0, n_ceps=3, hidden=8)
    before = {k: m.store[k].data.copy() for k in m.param_names()}
    assert idr.train_id_removal(m, clf, x, epochs=0) == []
    for k, v in before.items():
        np.testing.assert_array_equal(m.store[k].data, v)


def test_confusion_training_lowers_loss_and_accuracy():
    x, y = toy_corpus()
    clf, rep = idr.pretrain_classifier(x, y, seed=0, epochs=15, hidden=8)
    clf_before = {k: clf.store[k].data.copy() for k in clf.param_names()}
    m = idr.init_id_removal(1, n_ceps=3, hidden=8)
    hist = idr.train_id_removal(m, clf, x, epochs=8, seed=2)
    assert hist[-1] <= hist[0]
    assert min(hist) >= np.log(3) - 1e-4
    assert idr.accuracy(clf, idr.transform_all(m, x), y) < rep.train_accuracy
    for k, v in clf_before.items():  # frozen
        np.testing.assert_array_equal(clf.store[k].data, v)


def test_alternating_mode_updates_classifier():
    x, y = toy_corpus(n_per=8)
    clf = idr.init_classifier(0, 3, n_ceps=3, hidden=8)
    w = clf.store["spk/fc/w"].data.copy()
    idr.train_id_removal(idr.init_id_removal(1, n_ceps=3, hidden=8), clf, x, epochs=1, labels=y, alternate=True)
    assert not np.array_equal(clf.store["spk/fc/w"].data, w)
    with pytest.raises(ValueError, match="labels"):
        idr.train_id_removal(idr.init_id_removal(1, n_ceps=3, hidden=8), clf, x, epochs=1, alternate=True)
