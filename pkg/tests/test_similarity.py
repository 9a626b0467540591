import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tglora.gradcheck import numeric_grad, relative_error
from tglora.grouping import best_partition
from tglora.network import NetworkConfig, build_network
from tglora.similarity import (SimilarityMatrix, example_gradient, example_gradients, matrix_from_gradients,
                               pair_similarity, similarity_matrix, tune_heads)
from tglora.synthetic import TaskGenerator, generate
from tglora.trainer import DivergenceError, backbone_hash, task_loss
from tglora.tree import TaskTree

SMALL = NetworkConfig(input_dim=16, hidden_dim=8, stages=2, head_hidden=4, rank=4)


def small_setup(seed=0, n=40, **gen_kw):
    gen = TaskGenerator(input_dim=16, hidden_dim=8, stages=2, teacher_seed=seed, **gen_kw)
    data = generate(gen, n, 16, seed)
    net = build_network(SMALL, data.tasks, TaskTree.shared(2, gen.task_count), seed, backbone_seed=seed)
    return data, net


def test_pair_similarity_examples():
    g = np.array([1.0, -2.0, 0.5])
    assert pair_similarity(g, g) == pytest.approx(1.0, abs=1e-15)
    assert pair_similarity(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert pair_similarity(np.zeros(3), g) == 0.0
    assert pair_similarity(g, np.full(3, 1e-13)) == 0.0
    with pytest.raises(ValueError):
        pair_similarity(g, np.ones(2))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31))
def test_pair_similarity_is_plain_cosine(n, seed):
    rng = np.random.default_rng(seed)
    g, h = rng.normal(size=n) * rng.uniform(0.01, 100), rng.normal(size=n) * rng.uniform(0.01, 100)
    cos = g @ h / (np.linalg.norm(g) * np.linalg.norm(h))
    assert abs(pair_similarity(g, h) - cos) < 1e-12
    assert abs(pair_similarity(3.7 * g, h) - pair_similarity(g, h)) < 1e-12


def test_tune_heads_touches_only_heads():
    data, net = small_setup()
    h0 = backbone_hash(net)
    adapters = {n: net.store[n].data.copy() for n in net.adapter_names()}
    heads = {n: net.store[n].data.copy() for n in net.head_names()}
    trace = tune_heads(net, data, steps=20, lr=1e-2)
    assert backbone_hash(net) == h0
    assert all(np.array_equal(net.store[n].data, v) for n, v in adapters.items())
    assert any(not np.array_equal(net.store[n].data, v) for n, v in heads.items())
    assert len(trace) == 21


def test_tune_heads_zero_steps_is_identity():
    data, net = small_setup()
    before = net.store.state_dict()
    tune_heads(net, data, steps=0)
    assert all(np.array_equal(before[n], t.data) for n, t in net.store)


def test_linear_head_loss_decreases():
    data, _ = small_setup()
    cfg = NetworkConfig(**{**SMALL.__dict__, "head_hidden": 0})
    net = build_network(cfg, data.tasks, TaskTree.shared(2, 4), 0)
    trace = tune_heads(net, data, steps=50, lr=1e-3)
    assert trace[-1] < trace[0]
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_tune_heads_aborts_on_non_finite_loss():
    data, net = small_setup()
    data.y_train[0][0, 0] = np.inf
    with pytest.raises(DivergenceError):
        tune_heads(net, data, steps=3)


def test_example_gradient_shape_and_determinism():
    data, net = small_setup()
    g1 = example_gradient(net, data.x_train[0], data.y_train[1][0], 1)
    g2 = example_gradient(net, data.x_train[0], data.y_train[1][0], 1)
    assert g1.tobytes() == g2.tobytes()
    assert g1.shape == (sum(t.size for _, t in net.store.frozen()),)
    assert all(t.grad is None for _, t in net.store)


def test_example_gradient_matches_finite_differences():
    data, net = small_setup()
    tune_heads(net, data, steps=10)
    x, y, t = data.x_train[3], data.y_train[2][3], 2
    g = example_gradient(net, x, y, t)
    rng = np.random.default_rng(0)

    def loss():
        return task_loss(net.forward(x[None, :])[t], y[None, :], net.tasks[t])

    offset = 0
    analytic, numeric = [], []
    for name, p in net.store.frozen():
        idx = [tuple(int(rng.integers(0, s)) for s in p.shape) for _ in range(3)]
        fd = numeric_grad(loss, p, index=idx)
        flat = g[offset:offset + p.size].reshape(p.shape)
        analytic += [flat[i] for i in idx]
        numeric += [fd[i] for i in idx]
        offset += p.size
    assert relative_error(np.array(analytic), np.array(numeric)) < 1e-5


def test_duplicated_task_has_similarity_one():
    data, net = small_setup(task_count=2, clusters=[0, 0], epsilon=0.0, noise=0.0)
    assert np.array_equal(data.y_train[0], data.y_train[1])
    for (n0, p0), (n1, p1) in zip([(n, p) for n, p in net.store if n.startswith("head.t0.")],
                                  [(n, p) for n, p in net.store if n.startswith("head.t1.")]):
        p1.data[...] = p0.data
    sim = similarity_matrix(net, data, 20)
    assert sim.values[0, 1] == pytest.approx(1.0, abs=1e-10)


def test_matrix_is_mean_of_per_example_matrices():
    data, net = small_setup()
    tune_heads(net, data, steps=10)
    sim = similarity_matrix(net, data, 6)
    grads = example_gradients(net, data, range(6))
    per = [matrix_from_gradients(grads[:, i:i + 1]) for i in range(6)]
    assert np.allclose(sim.values, np.mean(per, axis=0), rtol=0, atol=1e-12)
    assert np.array_equal(sim.values, sim.values.T)
    assert np.all(np.diag(sim.values) == 1.0)
    assert np.all(np.abs(sim.values) <= 1.0 + 1e-12)


def test_loss_scale_equivariance():
    data, net = small_setup()
    tune_heads(net, data, steps=10)
    base = similarity_matrix(net, data, 8)
    for c in (0.1, 10.0):
        scaled = similarity_matrix(net, data, 8, loss_scales=[c, 1.0, 1.0, c])
        assert np.allclose(scaled.values, base.values, rtol=0, atol=1e-12)


def test_bad_example_counts():
    data, net = small_setup()
    with pytest.raises(ValueError):
        similarity_matrix(net, data, 0)
    with pytest.raises(ValueError):
        similarity_matrix(net, data, data.n_train + 1)


def test_seeded_sample_is_deterministic():
    data, net = small_setup()
    a = similarity_matrix(net, data, 5, seed=3).values
    b = similarity_matrix(net, data, 5, seed=3).values
    assert np.array_equal(a, b)


def test_csv_format_and_round_trip(tmp_path):
    sim = SimilarityMatrix(np.array([[1.0, 0.25], [0.25, 1.0]]), ["a", "b"], 4)
    text = sim.to_csv()
    assert text == "a,b\n1.000000,0.250000\n0.250000,1.000000\n"
    sim.save(tmp_path / "s.csv")
    back = SimilarityMatrix.load(tmp_path / "s.csv")
    assert back.task_names == ["a", "b"] and np.array_equal(back.values, sim.values)


def _clustered_similarity(seed, n_examples=128, offset=0):
    gen = TaskGenerator(teacher_seed=seed)
    data = generate(gen, 512, 64, seed)
    net = build_network(NetworkConfig(), data.tasks, TaskTree.shared(4, 4), seed, backbone_seed=seed)
    tune_heads(net, data, seed=seed)
    if offset:
        data = data.__class__(data.generator, data.seed, data.x_train[offset:],
                              [y[offset:] for y in data.y_train], data.x_val, data.y_val)
    return similarity_matrix(net, data, n_examples).values, gen


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_within_cluster_exceeds_cross_cluster(seed):
    sim, gen = _clustered_similarity(seed)
    within = [sim[a, b] for a in range(4) for b in range(a + 1, 4) if gen.clusters[a] == gen.clusters[b]]
    cross = [sim[a, b] for a in range(4) for b in range(a + 1, 4) if gen.clusters[a] != gen.clusters[b]]
    assert np.mean(within) > np.mean(cross)


def test_disjoint_halves_induce_same_grouping():
    agree = 0
    for seed in range(3):
        first, _ = _clustered_similarity(seed, 128)
        second, _ = _clustered_similarity(seed, 128, offset=128)
        agree += best_partition(first, 2) == best_partition(second, 2)
    assert agree >= 2
