import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p4l.learning import (
    Architecture, ModelParams, PeerDataset, TrainConfig, auc_score, binary_auc,
    centralized_baseline, clip_weights, evaluate, fedavg, fl_baseline, init_model, local_train,
    loss_and_grad, make_task, objective, partition_data,
)


def numeric_grad(model, X, y, l1=0.0, l2=0.0, h=1e-6):
    g = np.zeros_like(model.weights)
    for i in range(g.size):
        w = model.weights.copy()
        w[i] += h
        up = objective(model.with_weights(w), X, y, l1, l2)
        w[i] -= 2 * h
        down = objective(model.with_weights(w), X, y, l1, l2)
        g[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("sizes", [(4, 1), (3, 5, 4), (5, 6, 3, 2)])
def test_gradient_matches_finite_differences(sizes):
    rng = np.random.default_rng(0)
    arch = Architecture(sizes)
    model = init_model(arch, rng)
    X = rng.normal(size=(12, sizes[0]))
    y = rng.integers(0, arch.n_classes, size=12)
    loss, g = loss_and_grad(model, X, y, l2=0.01)
    assert loss == pytest.approx(objective(model, X, y, l2=0.01), rel=1e-12)
    num = numeric_grad(model, X, y, l2=0.01)
    assert np.max(np.abs(g - num)) / max(1.0, np.max(np.abs(num))) < 1e-5


def test_l1_gradient_away_from_zero():
    rng = np.random.default_rng(1)
    model = ModelParams(rng.uniform(0.5, 1.0, size=5) * rng.choice([-1, 1], size=5), Architecture((4, 1)))
    X = rng.normal(size=(10, 4))
    y = rng.integers(0, 2, size=10)
    _, g = loss_and_grad(model, X, y, l1=0.05)
    assert np.allclose(g, numeric_grad(model, X, y, l1=0.05), atol=1e-6)


def test_auc_hand_case():
    assert binary_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
    assert binary_auc([1, 1], [0.2, 0.3]) is None
    assert binary_auc([0, 1], [0.5, 0.5]) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 5)), min_size=2, max_size=30))
def test_auc_equals_pairwise_concordance(pairs):
    y = np.array([p[0] for p in pairs])
    s = np.array([p[1] for p in pairs], dtype=float)
    pos, neg = s[y], s[~y]
    if not len(pos) or not len(neg):
        assert binary_auc(y, s) is None
        return
    brute = np.mean([(a > b) + 0.5 * (a == b) for a in pos for b in neg])
    assert binary_auc(y, s) == pytest.approx(brute, abs=1e-12)


def test_random_scores_auc_near_half_and_multiclass():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, size=20000)
    assert abs(binary_auc(y, rng.random(20000)) - 0.5) < 0.02
    proba = np.eye(3)[[0, 1, 2, 0]]
    assert auc_score(np.array([0, 1, 2, 0]), proba) == 1.0
    assert auc_score(np.array([1, 1]), np.eye(3)[[1, 1]]) is None


def test_evaluate_separable_and_empty():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    data = PeerDataset(X, [0, 0, 1, 1])
    m = evaluate(ModelParams([20.0, 0.0], Architecture((1, 1))), data)
    assert m["accuracy"] == 1.0 and m["auc"] == 1.0 and m["loss"] < 1e-8
    with pytest.raises(ValueError):
        evaluate(ModelParams([1.0, 0.0], Architecture((1, 1))), data.subset([]))


def test_local_train_reduces_loss_and_handles_empty():
    rng = np.random.default_rng(3)
    task = make_task("blobs", rng, n_train=600, n_test=200)
    model = init_model(task.arch, rng)
    cfg = TrainConfig(epochs=5)
    trained = local_train(model, task.train, cfg, rng)
    assert evaluate(trained, task.test)["loss"] < evaluate(model, task.test)["loss"]
    same = local_train(model, task.train.subset([]), cfg, rng)
    assert np.array_equal(same.weights, model.weights) and same is not model


def test_clip_weights():
    w = np.array([1.0, -5e3, 2e3])
    assert clip_weights(w).tolist() == [1.0, -1e3, 1e3]
    small = np.array([0.5])
    assert clip_weights(small) is small


def test_model_shape_checked():
    with pytest.raises(ValueError):
        ModelParams(np.zeros(3), Architecture((4, 1)))
    assert Architecture((8, 8, 10)).n_weights == 8 * 8 + 8 + 8 * 10 + 10


def test_unknown_task():
    with pytest.raises(ValueError, match="unknown task id"):
        make_task("mnist", np.random.default_rng(0))


def test_imbalanced_task_positive_rate():
    task = make_task("imbalanced", np.random.default_rng(4))
    rate = task.train.y.mean()
    assert 0.03 < rate < 0.07
    assert task.arch.sizes == (16, 1)


def test_partition_iid_balance():
    rng = np.random.default_rng(5)
    task = make_task("blobs", rng, n_train=10000)
    shards = partition_data(task.train, 20, "iid", rng)
    assert all(s.k == 500 for s in shards)
    hist = np.stack([s.class_histogram() for s in shards])
    expected = task.train.class_histogram() / 20
    sigma = np.sqrt(expected)
    assert np.all(np.abs(hist - expected) < 3 * sigma + 3)


def test_partition_label_skew():
    rng = np.random.default_rng(6)
    task = make_task("blobs", rng, n_train=12000)
    shards = partition_data(task.train, 100, "label_skew", rng, classes_per_peer=6, samples_per_peer=50)
    for s in shards:
        assert s.k == 50
        assert np.count_nonzero(s.class_histogram()) <= 6
    with pytest.raises(ValueError):
        partition_data(task.train, 10, "label_skew", rng, classes_per_peer=11)


def test_partition_size_skew_and_edge_cases():
    rng = np.random.default_rng(7)
    task = make_task("imbalanced", rng, n_train=5000)
    shards = partition_data(task.train, 50, "size_skew", rng, samples_per_peer=100)
    sizes = [s.k for s in shards]
    assert sum(sizes) <= 5000 and max(sizes) > 2 * min(sizes)
    (only,) = partition_data(task.train, 1, "iid", rng)
    assert only.k == task.train.k
    with pytest.raises(ValueError):
        partition_data(task.train, 3, "pathological", rng)
    with pytest.raises(ValueError):
        partition_data(task.train.subset(np.arange(2)), 3, "iid", rng)


def test_centralized_baseline_stops_early_and_is_deterministic():
    task = make_task("blobs", np.random.default_rng(8), n_train=2000, n_test=500)
    init = init_model(task.arch, np.random.default_rng(9))
    cfg = TrainConfig(max_epochs=300)
    m1, metrics1, epochs = centralized_baseline(task.train, task.test, init, cfg, np.random.default_rng(10))
    m2, metrics2, _ = centralized_baseline(task.train, task.test, init, cfg, np.random.default_rng(10))
    assert epochs <= 300
    assert np.array_equal(m1.weights, m2.weights) and metrics1 == metrics2
    assert metrics1["accuracy"] > 0.8


def test_fedavg_is_mean():
    arch = Architecture((2, 1))
    models = [ModelParams(np.full(3, v), arch) for v in (0.3, 0.6, 0.9)]
    assert np.allclose(fedavg(models).weights, 0.6)


def test_fl_single_peer_equals_local_training():
    rng = np.random.default_rng(11)
    task = make_task("blobs", rng, n_train=500, n_test=100)
    init = init_model(task.arch, rng)
    cfg = TrainConfig(epochs=1)
    model, hist = fl_baseline([task.train], init, cfg, 3, 1, np.random.default_rng(12), test=task.test)
    ref_rng = np.random.default_rng(12)
    ref = init
    for _ in range(3):
        ref = local_train(ref, task.train, cfg, ref_rng)
    assert np.allclose(model.weights, ref.weights)
    with pytest.raises(ValueError):
        fl_baseline([task.train], init, cfg, 1, 2, rng)
