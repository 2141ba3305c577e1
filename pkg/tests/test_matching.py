"""Hungarian and greedy assignment, plus the matching cost matrix."""

import itertools
import math

import numpy as np
import pytest

from rovis.losses import LossWeights, point_indices
from rovis.matching import greedy_assign, hungarian, match_cost, match_cost_matrix
from rovis.rng import Rng
from rovis.tensor import Tensor, graph_edge_count


def injections(n_pred: int, n_gt: int):
    """Every matching of size min(P, G) as a sorted list of (prediction, instance)."""
    if n_pred >= n_gt:
        for rows in itertools.permutations(range(n_pred), n_gt):
            yield sorted(zip(rows, range(n_gt)))
    else:
        for cols in itertools.permutations(range(n_gt), n_pred):
            yield list(zip(range(n_pred), cols))


def brute_force_lexicographic(cost: np.ndarray):
    """(minimum cost, smallest sorted pair list among minimum-cost matchings)."""
    best, best_pairs = math.inf, None
    for pairs in injections(*cost.shape):
        total = sum(cost[r, c] for r, c in pairs)
        if total < best - 1e-9 or (total <= best + 1e-9 and pairs < best_pairs):
            best, best_pairs = min(best, total), pairs
    return best, best_pairs


def brute_force_min(cost: np.ndarray) -> float:
    return brute_force_lexicographic(cost)[0]


class TestHungarian:
    @pytest.mark.parametrize("shape", [(6, 4), (4, 4), (6, 6), (5, 1)])
    def test_matches_brute_force(self, shape):
        rng = Rng(sum(shape))
        for _ in range(10):
            cost = rng.random(shape) * 10
            result = hungarian(cost)
            assert len(result.pairs) == min(shape)
            assert result.total_cost == pytest.approx(brute_force_min(cost))
            assert len({p for p, _ in result.pairs}) == len(result.pairs)
            assert len({g for _, g in result.pairs}) == len(result.pairs)

    @pytest.mark.slow
    def test_matches_brute_force_on_many_matrices(self):
        rng = Rng(70)
        for _ in range(1000):
            shape = (rng.integers(1, 7), rng.integers(1, 7))
            cost = rng.random(shape) * 10
            assert hungarian(cost).total_cost == pytest.approx(brute_force_min(cost))

    def test_ties_resolve_to_lowest_pairs(self):
        cost = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
        result = hungarian(cost)
        assert result.pairs == [(0, 0), (1, 1), (2, 2)]
        assert result.unmatched_predictions == [3]
        assert result.total_cost == pytest.approx(2.0)

    def test_all_equal_cost_is_diagonal(self):
        assert hungarian(np.zeros((3, 5))).pairs == [(0, 0), (1, 1), (2, 2)]
        assert hungarian(np.zeros((5, 3))).pairs == [(0, 0), (1, 1), (2, 2)]

    def test_ties_on_binary_matrices_match_brute_force(self):
        rng = Rng(71)
        for _ in range(300):
            shape = (rng.integers(1, 5), rng.integers(1, 5))
            cost = (rng.random(shape) < 0.5).astype(float)
            best, pairs = brute_force_lexicographic(cost)
            result = hungarian(cost)
            assert result.pairs == pairs, cost
            assert result.total_cost == pytest.approx(best)

    def test_no_ground_truth_leaves_everything_unmatched(self):
        result = hungarian(np.zeros((3, 0)))
        assert result.pairs == []
        assert result.unmatched_predictions == [0, 1, 2]

    def test_diagonal_is_chosen(self):
        cost = np.array([[0.0, 5.0, 5.0], [5.0, 0.0, 5.0], [5.0, 5.0, 0.0], [1.0, 1.0, 1.0]])
        result = hungarian(cost)
        assert result.pairs == [(0, 0), (1, 1), (2, 2)]
        assert result.unmatched_predictions == [3]

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            hungarian(np.array([[1.0, np.nan]]))

    def test_needs_a_prediction(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((0, 2)))


class TestGreedy:
    def test_takes_global_minimum_first(self):
        result = greedy_assign(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert result.total_cost == pytest.approx(2.0)
        assert result.pairs == [(0, 0), (1, 1)]

    def test_can_be_worse_than_optimal(self):
        cost = np.array([[1.0, 1.5], [1.2, 10.0]])
        assert greedy_assign(cost).total_cost == pytest.approx(11.0)
        assert hungarian(cost.T).total_cost == pytest.approx(2.7)

    def test_ties_go_to_lowest_cell(self):
        result = greedy_assign(np.ones((2, 3)))
        assert result.pairs == [(0, 0), (1, 1)]
        assert result.unmatched_predictions == [2]

    def test_never_better_than_hungarian(self):
        rng = Rng(12)
        for _ in range(25):
            cost = rng.random((3, 5))
            assert hungarian(cost.T).total_cost <= greedy_assign(cost).total_cost + 1e-12

    @pytest.mark.slow
    def test_never_better_than_hungarian_on_many_matrices(self):
        rng = Rng(72)
        for _ in range(1000):
            cost = rng.random((rng.integers(1, 7), rng.integers(1, 7)))
            assert hungarian(cost.T).total_cost <= greedy_assign(cost).total_cost + 1e-12

    def test_deficit_when_instances_outnumber_predictions(self):
        result = greedy_assign(np.array([[0.5], [0.1], [0.9]]))
        assert result.pairs == [(0, 1)]
        assert result.deficit == 2
        assert result.unmatched_targets == [0, 2]

    def test_no_new_instances(self):
        result = greedy_assign(np.zeros((0, 4)))
        assert result.pairs == []
        assert result.unmatched_predictions == [0, 1, 2, 3]


class TestCostMatrix:
    def test_recomputed_by_hand(self):
        rng = Rng(13)
        weights = LossWeights(num_point_samples=16)
        probs = rng.random((3, 4))
        probs /= probs.sum(axis=1, keepdims=True)
        logits = rng.normal(size=(3, 6, 6))
        gt_classes = [2, 0]
        gt_masks = rng.random((2, 6, 6)) < 0.5
        points = point_indices(6, 6, 16, Rng(14))
        matrix = match_cost_matrix(probs, logits, gt_classes, gt_masks, weights, points=points)
        assert matrix.shape == (3, 2)
        for i in range(3):
            for j in range(2):
                x = logits[i].reshape(-1)[points]
                t = gt_masks[j].reshape(-1)[points].astype(float)
                p = np.clip(1 / (1 + np.exp(-x)), 1e-12, 1 - 1e-12)
                p_t = p * t + (1 - p) * (1 - t)
                alpha_t = 0.25 * t + 0.75 * (1 - t)
                focal = np.mean(-np.log(p_t) * (1 - p_t) ** 2 * alpha_t)
                dice = 1 - (2 * np.sum(p * t) + 1) / (p.sum() + t.sum() + 1)
                expected = 2.0 * -np.log(probs[i, gt_classes[j]]) + 5.0 * (focal + dice)
                assert matrix[i, j] == pytest.approx(expected, rel=1e-10)

    def test_single_cell_agrees_with_matrix(self):
        rng = Rng(15)
        weights = LossWeights()
        probs = np.array([[0.1, 0.6, 0.2, 0.1]])
        logits = rng.normal(size=(1, 8, 8))
        gt = rng.random((1, 8, 8)) < 0.3
        dense = match_cost_matrix(probs, logits, [1], gt, weights, dense=True)
        assert match_cost(probs[0], logits[0], 1, gt[0], weights, dense=True) == pytest.approx(dense[0, 0])

    def test_records_no_graph_edges(self):
        rng = Rng(16)
        probs = Tensor(np.full((2, 4), 0.25), requires_grad=True)
        logits = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        before = graph_edge_count()
        match_cost_matrix(probs, logits, [0, 1], rng.random((2, 8, 8)) < 0.5, LossWeights(), rng=Rng(17))
        assert graph_edge_count() == before

    def test_no_ground_truth_gives_empty_columns(self):
        matrix = match_cost_matrix(np.full((3, 4), 0.25), np.zeros((3, 4, 4)), [], np.zeros((0, 4, 4)), LossWeights())
        assert matrix.shape == (3, 0)
