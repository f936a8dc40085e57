import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mapn import autodiff as ad
from mapn.autodiff import ParamStore, Tensor
from mapn.cli import builtin_corpus, builtin_dataset
from mapn.graph import cycle_graph, default_meta_paths, generate_synthetic, star_graph
from mapn.train import (AdamW, ConstantLr, CosineWarmRestarts, GraphClsConfig, NonFiniteError, ReduceOnPlateau,
                        TrainConfig, average_precision, cross_entropy, eval_graph_classification,
                        eval_node_classification, make_scheduler, mean_absolute_error, nce_loss, train)


def test_nce_zero_embeddings_give_two_ln2():
    loss = nce_loss(Tensor(np.zeros((4, 3))), np.array([[0, 1, 2], [2, 3, 0]]))
    assert float(loss.data) == pytest.approx(2 * math.log(2), abs=1e-15)


def test_nce_saturation():
    z = np.array([[math.sqrt(30), 0.0], [math.sqrt(30), 0.0], [-math.sqrt(30), 0.0]])
    good = float(nce_loss(Tensor(z), np.array([[0, 1, 2]])).data)
    assert good == pytest.approx(2 * math.log1p(math.exp(-30)), rel=1e-9)
    bad = float(nce_loss(Tensor(z), np.array([[0, 2, 1]])).data)
    assert bad == pytest.approx(60.0, abs=1e-9)


def test_nce_gradient_matches_closed_form():
    rng = np.random.default_rng(0)
    s = ParamStore()
    z = s.add("z", rng.standard_normal((3, 2)))
    ad.backward(nce_loss(z, np.array([[0, 1, 2]])))
    za, zb, zn = z.data
    sig = lambda t: 1 / (1 + math.exp(-t))
    expect_a = -(1 - sig(za @ zb)) * zb + sig(za @ zn) * zn
    np.testing.assert_allclose(z.grad[0], expect_a, atol=1e-14)
    np.testing.assert_allclose(z.grad[1], -(1 - sig(za @ zb)) * za, atol=1e-14)
    np.testing.assert_allclose(z.grad[2], sig(za @ zn) * za, atol=1e-14)


@given(st.floats(0.1, 3.0), st.floats(1.1, 3.0))
def test_nce_decreases_as_separation_grows(scale, factor):
    rng = np.random.default_rng(1)
    base = rng.standard_normal(3)
    z = np.stack([base, base, -base])
    tr = np.array([[0, 1, 2]])
    small = float(nce_loss(Tensor(scale * z), tr).data)
    large = float(nce_loss(Tensor(scale * factor * z), tr).data)
    assert large < small


def test_nce_rejects_empty():
    with pytest.raises(ValueError):
        nce_loss(Tensor(np.zeros((2, 2))), np.zeros((0, 3)))


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((5, 4))), np.array([0, 1, 2, 3, 0]))
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-15)


def _hand_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd)
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adamw_matches_hand_oracle():
    s = ParamStore()
    p = s.add("p", np.array([1.5]))
    opt = AdamW(s, lr=0.1, weight_decay=0.01)
    grads = []
    for _ in range(5):
        s.zero_grad()
        ad.backward(ad.sum_(p * p))
        grads.append(float(p.grad[0]))
        opt.step()
    theta, m, v = 1.5, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * theta
        assert g == pytest.approx(grads[t - 1], abs=1e-14)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta *= 1 - 0.1 * 0.01
        theta -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert float(p.data[0]) == pytest.approx(theta, abs=1e-14)


def test_adamw_first_step_is_lr_sized():
    s = ParamStore()
    p = s.add("p", np.array([3.0, -2.0]))
    p.grad = np.array([0.7, -40.0])
    AdamW(s, lr=0.05).step()
    np.testing.assert_allclose(p.data, [3.0 - 0.05, -2.0 + 0.05], atol=1e-8)


def test_adamw_decay_only():
    s = ParamStore()
    p = s.add("p", np.array([2.0]))
    p.grad = np.zeros(1)
    AdamW(s, lr=0.1, weight_decay=0.1).step()
    assert float(p.data[0]) == pytest.approx(2.0 * 0.99, abs=1e-15)


def test_adamw_nonfinite_gradient():
    s = ParamStore()
    p = s.add("p", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError, match="'p'"):
        AdamW(s).step()
    assert p.data[0] == 1.0


def test_cosine_warm_restarts_schedule():
    sch = CosineWarmRestarts(1.0, t0=2, t_mult=2)
    lrs = [sch.lr] + [sch.step() for _ in range(6)]
    half = lambda x: (1 + math.cos(math.pi * x)) / 2
    np.testing.assert_allclose(lrs, [1.0, 0.5, 1.0, half(0.25), 0.5, half(0.75), 1.0], atol=1e-12)


def test_reduce_on_plateau():
    sch = ReduceOnPlateau(1.0, factor=0.5, patience=2)
    lrs = [sch.step(l) for l in [3.0, 2.0, 2.0, 2.0, 2.0, 1.0]]
    assert lrs == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5]


def test_make_scheduler_and_config_validation():
    assert isinstance(make_scheduler(TrainConfig()), ConstantLr)
    assert isinstance(make_scheduler(TrainConfig(scheduler="reduce-on-plateau")), ReduceOnPlateau)
    for bad in (dict(learning_rate=0.0), dict(max_epochs=0), dict(K=0), dict(scheduler="step"),
                dict(train_fraction=0.9, val_fraction=0.2)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


FAST = dict(d=4, state_dim=4, L=1, K=2, k_neighbors=3, walk_length=20, walks_per_node=2)


def test_train_is_deterministic():
    g = builtin_dataset("synth-sbm", 0)
    cfg = TrainConfig(learning_rate=0.01, max_epochs=5, **FAST)
    a = train(g, default_meta_paths(g), cfg)
    b = train(g, default_meta_paths(g), cfg)
    assert a.metrics.losses == b.metrics.losses
    assert a.metrics.best_loss == min(a.metrics.losses)
    np.testing.assert_array_equal(a.model.embed(), b.model.embed())


def test_twelve_node_descent():
    g = generate_synthetic("homophilous-sbm", 12, 2, 0.6, 0.1, 3, seed=1)
    res = train(g, default_meta_paths(g), TrainConfig(learning_rate=0.01, max_epochs=50, walk_length=20, walks_per_node=3))
    assert res.metrics.losses[-1] < res.metrics.losses[0]


@pytest.mark.parametrize("name", ["synth-sbm", "synth-hetero-sbm", "synth-academic"])
def test_first_ten_epochs_decrease_on_builtin_data(name):
    g = builtin_dataset(name, 0)
    res = train(g, default_meta_paths(g), TrainConfig(learning_rate=0.01, max_epochs=10))
    steps = np.diff(res.metrics.losses)
    assert np.all(steps <= 0) and np.sum(steps == 0) <= 2


def test_supervised_training_reports_accuracy():
    g = builtin_dataset("synth-sbm", 0)
    res = train(g, default_meta_paths(g), TrainConfig(learning_rate=0.01, max_epochs=10, supervised=True, **FAST))
    assert set(res.metrics.results) == {"train_accuracy", "val_accuracy", "test_accuracy"}
    assert "head.W" in res.store


def test_probe_one_hot_embeddings_are_perfect():
    y = np.repeat(np.arange(3), 20)
    x = np.eye(3)[y]
    assert eval_node_classification(x, y, n_splits=3)["mean"] == 1.0


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((300, 4))
    y = rng.integers(0, 2, 300)
    assert abs(eval_node_classification(x, y, n_splits=5)["mean"] - 0.5) < 0.1


def test_probe_rejects_bad_split():
    with pytest.raises(ValueError):
        eval_node_classification(np.zeros((4, 2)), np.array([0, 1, 0, 1]), split=(0.5, 0.5, 0.5))


def test_graph_classification_cycles_vs_stars():
    res = eval_graph_classification(builtin_corpus(0), GraphClsConfig(K=2, L=2, folds=5))
    assert res["mean"] >= 0.95
    assert not res["degenerate"]


def _labelled(graphs, label):
    for g in graphs:
        g.graph_label = label
    return graphs


def test_graph_classification_toy_mean_feature_corpus():
    rng = np.random.default_rng(0)
    low = _labelled([cycle_graph(6, np.full((6, 1), 0.0) + 0.01 * rng.standard_normal((6, 1))) for _ in range(10)], 0)
    high = _labelled([cycle_graph(6, np.full((6, 1), 5.0) + 0.01 * rng.standard_normal((6, 1))) for _ in range(10)], 1)
    assert eval_graph_classification(low + high, GraphClsConfig(folds=5))["mean"] == 1.0


def test_graph_classification_fifty_cycles_fifty_stars():
    rng = np.random.default_rng(1)
    cycles, stars = [], []
    for _ in range(50):
        n = int(rng.integers(6, 13))
        cycles.append(cycle_graph(n, 1.0 + 0.3 * rng.standard_normal((n, 2))))
        n = int(rng.integers(6, 13))
        stars.append(star_graph(n - 1, 1.0 + 0.3 * rng.standard_normal((n, 2))))
    corpus = _labelled(cycles, 0) + _labelled(stars, 1)
    # degree-histogram baseline: the classes are structurally separable
    max_deg = np.array([max(len(g.skeleton_neighbors(v)) for v in range(g.num_nodes)) for g in corpus])
    assert max_deg[:50].max() < max_deg[50:].min()
    assert eval_graph_classification(corpus)["mean"] >= 0.95


def test_graph_classification_single_class_and_errors():
    one = [cycle_graph(5), cycle_graph(6)]
    for g in one:
        g.graph_label = 0
    assert eval_graph_classification(one)["degenerate"]
    unlabeled = [star_graph(3)]
    with pytest.raises(ValueError):
        eval_graph_classification(unlabeled)
    with pytest.raises(ValueError):
        eval_graph_classification([])


def test_average_precision_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.1, 0.8, 0.9], [1, 0, 0]) == pytest.approx(1 / 3)
    assert average_precision(np.array([[0.9, 0.1], [0.2, 0.8]]), np.array([[1, 0], [0, 0]])) == 1.0
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 0])


def test_mean_absolute_error():
    assert mean_absolute_error([1.0, 2.0], [2.0, 0.0]) == 1.5
    with pytest.raises(ValueError):
        mean_absolute_error([1.0], [1.0, 2.0])
