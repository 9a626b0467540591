import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tglora import autodiff as ad
from tglora.autodiff import Tensor
from tglora.layer import (ConfigurationError, LoRALinear, RoutingError, TGLoRALayer, allocate_ranks,
                          load_adapters, save_adapters)


def _with_random_b(layer, seed=0):
    rng = np.random.default_rng(seed)
    for m in layer.modules:
        m.B.data[...] = rng.normal(size=m.B.shape)
    return layer


def test_init_forward_equals_base():
    layer = TGLoRALayer.init(5, 3, [2, 1], seed=0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    base = x @ layer.weight.data.T
    for y in layer([Tensor(x), Tensor(x)]):
        assert np.array_equal(y.data, base)


def test_init_statistics_and_zero_b():
    layer = TGLoRALayer.init(64, 64, [16], seed=3)
    m = layer.modules[0]
    assert np.all(m.B.data == 0)
    # A ~ N(0, 1/r): std 0.25 over 1024 draws
    assert abs(m.A.data.std() - 0.25) < 0.02


def test_scaling_alpha_four_rank_four():
    layer = TGLoRALayer.init(8, 8, [4], alpha=4.0)
    assert layer.modules[0].scale == 1.0


def test_same_seed_same_a():
    a = TGLoRALayer.init(6, 6, [3, 2], seed=9)
    b = TGLoRALayer.init(6, 6, [3, 2], seed=9)
    for ma, mb in zip(a.modules, b.modules):
        assert np.array_equal(ma.A.data, mb.A.data)


@pytest.mark.parametrize("ranks", [[0], [5], [2, 0]])
def test_bad_rank_rejected(ranks):
    with pytest.raises(ConfigurationError):
        TGLoRALayer.init(4, 6, ranks)


def test_stream_count_mismatch():
    layer = TGLoRALayer.init(4, 4, [1, 1])
    with pytest.raises(RoutingError):
        layer([Tensor(np.ones(4))])


def test_one_group_equals_plain_lora_bitwise():
    layer = _with_random_b(TGLoRALayer.init(6, 5, [3], alpha=4.0, seed=1, bias=np.arange(6.0)))
    m = layer.modules[0]
    ref = LoRALinear(layer.weight, layer.bias, m.A, m.B, m.alpha)
    x = Tensor(np.random.default_rng(2).normal(size=(7, 5)))
    assert layer([x])[0].data.tobytes() == ref(x).data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_forward_matches_merged_matrix(d, k, seed):
    r = max(1, min(d, k) // 2)
    layer = _with_random_b(TGLoRALayer.init(d, k, [r, 1], alpha=3.0, seed=seed), seed)
    x = np.random.default_rng(seed).normal(size=(3, k))
    outs = layer([Tensor(x), Tensor(x)])
    for g, y in enumerate(outs):
        merged = layer.merge(g)
        assert merged.shape == (d, k)
        assert np.allclose(y.data, x @ merged.T, rtol=0, atol=1e-10)


def test_merge_with_zero_b_is_base():
    layer = TGLoRALayer.init(4, 3, [2])
    assert np.array_equal(layer.merge(0), layer.weight.data)
    with pytest.raises(IndexError):
        layer.merge(1)


def test_gradient_isolation_between_groups():
    layer = _with_random_b(TGLoRALayer.init(4, 4, [2, 2, 1], seed=0))
    x = np.random.default_rng(1).normal(size=(3, 4))
    outs = layer([Tensor(x), Tensor(x), Tensor(x)])
    ad.backward(ad.sum_all(ad.mul(outs[1], outs[1])))
    for g, m in enumerate(layer.modules):
        if g == 1:
            assert np.any(m.A.grad != 0) and np.any(m.B.grad != 0)
        else:
            assert m.A.grad is None and m.B.grad is None
    assert layer.weight.grad is None


def test_doubling_alpha_doubles_adapter_contribution():
    x = np.random.default_rng(4).normal(size=(2, 5))
    out = []
    for alpha in (2.5, 5.0):
        layer = _with_random_b(TGLoRALayer.init(3, 5, [2], alpha=alpha, seed=7))
        out.append(layer([Tensor(x)])[0].data - x @ layer.weight.data.T)
    assert np.allclose(out[1], 2 * out[0], rtol=1e-14, atol=0)


def test_dropout_only_in_training():
    layer = _with_random_b(TGLoRALayer.init(4, 4, [2], dropout=0.5))
    x = Tensor(np.ones((3, 4)))
    ev = layer([x])[0].data
    assert np.array_equal(ev, layer([x], training=False)[0].data)
    tr = layer([x], training=True, rng=np.random.default_rng(0))[0].data
    assert not np.array_equal(ev, tr)


@pytest.mark.parametrize("total,sizes,fixed,expected", [
    (8, [2, 2], None, [4, 4]),
    (8, [3, 1], None, [6, 2]),
    (5, [1, 1, 1, 1], 4, [4, 4, 4, 4]),
    (8, [1, 1, 1, 1], None, [2, 2, 2, 2]),
    (8, [2, 1, 1], None, [4, 2, 2]),
    (3, [6, 1, 1], None, [1, 1, 1]),
    (7, [1, 2], None, [2, 5]),
])
def test_allocate_ranks_examples(total, sizes, fixed, expected):
    assert allocate_ranks(total, sizes, fixed) == expected


def test_allocate_ranks_infeasible():
    with pytest.raises(ConfigurationError):
        allocate_ranks(2, [1, 1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(0, 40))
def test_allocate_ranks_properties(sizes, extra):
    total = len(sizes) + extra
    ranks = allocate_ranks(total, sizes)
    assert sum(ranks) == total
    assert min(ranks) >= 1
    floors = [total * s // sum(sizes) for s in sizes]
    if min(floors) >= 1:
        # no stealing needed: floor plus at most one remainder unit
        assert all(f <= r <= f + 1 for f, r in zip(floors, ranks))
    larger = [i for i in range(len(sizes)) if sizes[i] > sizes[0]]
    assert all(ranks[i] >= ranks[0] for i in larger) or min(floors) == 0


def test_adapter_round_trip(tmp_path):
    a = [_with_random_b(TGLoRALayer.init(4, 4, [2, 1], seed=1, name="l0")),
         _with_random_b(TGLoRALayer.init(4, 4, [3], seed=2, name="l1"), 5)]
    save_adapters(a, tmp_path, extra={"provenance": {"seed": 1}})
    b = [TGLoRALayer.init(4, 4, [2, 1], seed=8, name="l0"), TGLoRALayer.init(4, 4, [3], seed=9, name="l1")]
    load_adapters(b, tmp_path)
    for la, lb in zip(a, b):
        for ma, mb in zip(la.modules, lb.modules):
            assert np.array_equal(ma.A.data, mb.A.data) and np.array_equal(ma.B.data, mb.B.data)
    with pytest.raises(ConfigurationError):
        load_adapters([TGLoRALayer.init(4, 4, [1, 1], name="l0")], tmp_path)
