import numpy as np
import pytest

from tglora.network import backbone_features
from tglora.synthetic import Dataset, TaskGenerator, _Teacher, generate


def test_identical_targets_without_perturbation_or_noise():
    data = generate(TaskGenerator(task_count=2, clusters=[0, 0], epsilon=0.0, noise=0.0), 50, 10, 0)
    assert np.array_equal(data.y_train[0], data.y_train[1])
    assert np.array_equal(data.y_val[0], data.y_val[1])


def test_same_seed_same_dataset():
    a = generate(TaskGenerator(), 30, 10, 4)
    b = generate(TaskGenerator(), 30, 10, 4)
    assert np.array_equal(a.x_train, b.x_train)
    assert all(np.array_equal(u, v) for u, v in zip(a.y_train + a.y_val, b.y_train + b.y_val))
    c = generate(TaskGenerator(), 30, 10, 5)
    assert not np.array_equal(a.x_train, c.x_train)


def _corr(a, b):
    return np.mean([np.corrcoef(a[:, j], b[:, j])[0, 1] for j in range(a.shape[1])])


@pytest.mark.parametrize("seed", [0, 1])
def test_within_cluster_targets_correlate_more(seed):
    gen = TaskGenerator(teacher_seed=seed, noise=0.05, epsilon=0.1)
    data = generate(gen, 10_000, 1, seed)
    y = data.y_train
    within = [_corr(y[0], y[1]), _corr(y[2], y[3])]
    cross = [abs(_corr(y[a], y[b])) for a in (0, 1) for b in (2, 3)]
    assert min(within) > max(cross)


def test_shared_inputs_and_shapes():
    data = generate(TaskGenerator(task_count=3, clusters=[0, 1, 1], out_dim=5), 20, 7, 0)
    assert data.x_train.shape == (20, 16) and data.x_val.shape == (7, 16)
    assert all(y.shape == (20, 5) for y in data.y_train)


def test_classification_tasks_are_labels():
    data = generate(TaskGenerator(classification=[1]), 200, 10, 0)
    labels = data.y_train[1]
    assert labels.shape == (200,)
    assert set(np.unique(labels)) <= set(range(4))
    assert data.tasks[1].loss == "cross_entropy" and data.tasks[1].metric == "accuracy"


def test_teacher_differs_from_frozen_backbone():
    gen = TaskGenerator()
    x = np.random.default_rng(0).normal(size=(5, 16))
    teacher = _Teacher(gen)
    base = backbone_features(gen.backbone(), x)
    for c in (0, 1):
        assert not np.allclose(teacher.features(x, c), base)
    assert not np.allclose(teacher.features(x, 0), teacher.features(x, 1))


def test_invalid_generator():
    with pytest.raises(ValueError):
        TaskGenerator(task_count=3, clusters=[0, 1])
    with pytest.raises(ValueError):
        TaskGenerator(epsilon=-0.1)
    with pytest.raises(ValueError):
        generate(TaskGenerator(), 0, 5, 0)


def test_persistence_round_trip(tmp_path):
    data = generate(TaskGenerator(classification=[3]), 25, 9, 2)
    data.save(tmp_path, provenance={"seed": 2})
    back = Dataset.load(tmp_path)
    assert back.generator == data.generator and back.seed == 2
    assert np.array_equal(back.x_train, data.x_train)
    assert all(np.array_equal(u, v) for u, v in zip(back.y_val, data.y_val))
    assert back.manifest()["cluster_truth"] == [[0, 1], [2, 3]]


def test_subset_takes_leading_examples():
    data = generate(TaskGenerator(), 30, 5, 0)
    sub = data.subset(8)
    assert sub.n_train == 8 and np.array_equal(sub.x_train, data.x_train[:8])
    assert np.array_equal(sub.x_val, data.x_val)
