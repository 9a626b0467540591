import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tglora.grouping import (MAX_EXACT_TASKS, CapacityError, GroupingResult, best_partition,
                             best_partition_with_ties, compute_grouping, compute_tree, merge_steps,
                             merge_task_groups, partition_score, restricted_growth_strings, set_partitions)
from tglora.similarity import SimilarityMatrix
from tglora.tree import PartitionError, canonical, validate_tree

BLOCKS = np.array([[1.0, 0.9, 0.1, 0.0],
                   [0.9, 1.0, 0.05, 0.1],
                   [0.1, 0.05, 1.0, 0.8],
                   [0.0, 0.1, 0.8, 1.0]])


def random_sim(rng, n):
    m = rng.uniform(-1, 1, (n, n))
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m


# independent oracles -------------------------------------------------------

def oracle_partitions(n, blocks):
    """All partitions via labelings in range(blocks)^n, deduplicated."""
    seen = set()
    for labels in itertools.product(range(blocks), repeat=n):
        if len(set(labels)) != blocks:
            continue
        seen.add(canonical([[t for t in range(n) if labels[t] == b] for b in range(blocks)]))
    return sorted(seen)


def oracle_score(sim, part):
    total = 0.0
    for g in part:
        for t in g:
            others = [sim[t][u] for u in g if u != t]
            total += sum(others) / len(others) if others else 0.0
    return total


def oracle_best_merge(sim, part):
    best = None
    for i, j in itertools.combinations(range(len(part)), 2):
        cand = canonical([g for k, g in enumerate(part) if k not in (i, j)] + [part[i] + part[j]])
        merged = tuple(sorted(part[i] + part[j]))
        key = (-oracle_score(sim, cand), merged)
        if best is None or key < best[0]:
            best = (key, cand)
    return best[1]


# ---------------------------------------------------------------------------

def test_singletons_score_zero():
    assert partition_score(BLOCKS, [[0], [1], [2], [3]]).total == 0.0


@pytest.mark.parametrize("s", [0.3, -0.2, 0.9])
def test_pair_and_quad_scores(s):
    assert partition_score(np.array([[1, s], [s, 1]]), [[0, 1]]).total == pytest.approx(2 * s, abs=1e-15)
    quad = np.full((4, 4), s)
    np.fill_diagonal(quad, 1.0)
    assert partition_score(quad, [[0, 1, 2, 3]]).total == pytest.approx(4 * s, abs=1e-14)


def test_invalid_partition_rejected():
    with pytest.raises(PartitionError, match="missing"):
        partition_score(BLOCKS, [[0, 1], [2]])


def test_score_per_task_breakdown():
    sc = partition_score(BLOCKS, [[0, 1, 2], [3]])
    assert sc.task_scores[3] == 0.0
    assert sc.task_scores[0] == pytest.approx((0.9 + 0.1) / 2)
    assert sc.total == pytest.approx(sum(sc.task_scores.values()))


@pytest.mark.parametrize("n", range(1, 7))
def test_partition_enumeration_counts(n):
    stirling = {1: [1], 2: [1, 1], 3: [1, 3, 1], 4: [1, 7, 6, 1], 5: [1, 15, 25, 10, 1],
                6: [1, 31, 90, 65, 15, 1]}
    for m, count in enumerate(stirling[n], start=1):
        parts = list(set_partitions(n, m))
        assert len(parts) == count == len(set(parts))
        assert sorted(parts) == oracle_partitions(n, m)
    assert len(list(restricted_growth_strings(n))) == sum(stirling[n])


def test_best_partition_examples():
    assert best_partition(BLOCKS, 4) == ((0,), (1,), (2,), (3,))
    assert best_partition(BLOCKS, 1) == ((0, 1, 2, 3),)
    assert best_partition(BLOCKS, 2) == ((0, 1), (2, 3))


def test_best_partition_tie_goes_to_smallest_canonical():
    # zero off-diagonal: every two-group partition scores 0
    part, ties = best_partition_with_ties(np.eye(4), 2)
    assert part == ((0,), (1, 2, 3))
    assert ties > 0


def test_capacity_error_beyond_bound():
    n = MAX_EXACT_TASKS + 1
    with pytest.raises(CapacityError, match="greedy"):
        best_partition(np.eye(n), 2)


def test_unconstrained_best_partition():
    assert best_partition(BLOCKS, None) == ((0, 1), (2, 3))


def test_merge_examples():
    sim = np.array([[1, 0.9, 0.1], [0.9, 1, 0.2], [0.1, 0.2, 1]])
    assert merge_task_groups(sim, [[0], [1], [2]], 2) == ((0, 1), (2,))
    assert merge_task_groups(sim, [[0], [1], [2]], 1) == ((0, 1, 2),)
    with pytest.raises(ValueError):
        merge_task_groups(sim, [[0], [1], [2]], 3)
    with pytest.raises(ValueError):
        merge_task_groups(sim, [[0], [1], [2]], 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_every_merge_step_matches_oracle(n, seed):
    sim = random_sim(np.random.default_rng(seed), n)
    part = canonical([t] for t in range(n))
    for got, score, _ in merge_steps(sim, part, 1):
        expected = oracle_best_merge(sim, part)
        assert got == expected
        assert score == pytest.approx(oracle_score(sim, got), abs=1e-12)
        part = got


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_best_partition_matches_exhaustive_oracle(n, seed):
    sim = random_sim(np.random.default_rng(seed), n)
    for m in range(1, n + 1):
        scored = [(-oracle_score(sim, p), p) for p in oracle_partitions(n, m)]
        best = min(s for s, _ in scored)
        winners = [p for s, p in scored if s <= best + 1e-12 * max(1.0, abs(best))]
        assert best_partition(sim, m) == min(winners)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    sim = random_sim(rng, n)
    perm = rng.permutation(n)
    relabelled = sim[np.ix_(np.argsort(perm), np.argsort(perm))]
    # task t in sim becomes task perm[t] in relabelled
    for m in range(1, n + 1):
        a = best_partition(sim, m)
        b = best_partition(relabelled, m)
        mapped = canonical([[int(perm[t]) for t in g] for g in a])
        assert partition_score(relabelled, mapped).total == pytest.approx(
            partition_score(relabelled, b).total, abs=1e-12)
        if best_partition_with_ties(sim, m)[1] == 0:
            assert mapped == b


def test_compute_tree_block_example():
    tree = compute_tree(BLOCKS, [1, 2, 3, 4])
    assert tree.stages == (((0, 1, 2, 3),), ((0, 1), (2, 3)), ((0, 1), (2,), (3,)),
                           ((0,), (1,), (2,), (3,)))


def test_compute_tree_all_task_specific():
    tree = compute_tree(BLOCKS, [4, 4, 4])
    assert all(s == ((0,), (1,), (2,), (3,)) for s in tree.stages)


def test_compute_tree_rejects_bad_schedule():
    with pytest.raises(ValueError):
        compute_tree(BLOCKS, [2, 1, 4])


def test_compute_tree_partial_last_stage():
    tree = compute_tree(BLOCKS, [1, 2, 2])
    assert tree.stages[-1] == ((0, 1), (2, 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 7), st.integers(1, 5), st.integers(0, 2**31), st.booleans())
def test_compute_tree_always_valid(n, S, seed, unconstrained):
    rng = np.random.default_rng(seed)
    counts = sorted(int(c) for c in rng.integers(1, n + 1, S))
    result = compute_grouping(random_sim(rng, n), counts, "unconstrained" if unconstrained else "constrained")
    assert validate_tree(result.tree, n) == []


def test_groups_json_round_trip_and_scores(tmp_path):
    result = compute_grouping(BLOCKS, [1, 2, 3, 4])
    path = tmp_path / "groups.json"
    result.save(path, provenance={"seed": 0, "config_hash": "x"})
    back = GroupingResult.load(path)
    assert back.tree == result.tree and back.scores == result.scores
    assert back.schedule == [1, 2, 3, 4] and back.tie_breaks == result.tie_breaks
    csv = tmp_path / "similarity.csv"
    SimilarityMatrix(BLOCKS, ["a", "b", "c", "d"], 0).save(csv)
    sim = SimilarityMatrix.load(csv)
    for part, score in zip(back.tree.stages, back.scores):
        assert partition_score(sim, part).total == pytest.approx(score, abs=1e-12)
