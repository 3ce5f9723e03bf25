"""Tests for the hybrid matching cost and the Hungarian assignment."""

import itertools

import numpy as np
import pytest
import torch

from scene_recon.config import MatchCostConfig
from scene_recon.exceptions import InvalidArgumentError
from scene_recon.matcher import InstanceTargets, cost_matrix, hungarian, match
from scene_recon.scenegen import SceneSample

from factories import make_preds, make_targets


def _brute_force_minimum(cost):
    m, g = cost.shape
    if m >= g:
        return min(sum(cost[rows[j], j] for j in range(g)) for rows in itertools.permutations(range(m), g))
    return min(sum(cost[i, cols[i]] for i in range(m)) for cols in itertools.permutations(range(g), m))


def _lexicographic_optimum(cost):
    """Enumerate every maximum matching; keep the cheapest, then lowest rows, then lowest columns."""
    m, g = cost.shape
    candidates = []
    if m >= g:
        for rows in itertools.combinations(range(m), g):
            for cols in itertools.permutations(range(g)):
                candidates.append((sum(cost[r, c] for r, c in zip(rows, cols)), rows, cols))
    else:
        for cols in itertools.permutations(range(g), m):
            candidates.append((sum(cost[r, c] for r, c in zip(range(m), cols)), tuple(range(m)), cols))
    _, rows, cols = min(candidates)
    return list(zip(rows, cols))


class TestCostMatrix:
    def test_perfect_prediction_costs_nothing(self):
        masks = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], dtype=float)
        gts = make_targets(masks, [0, 2], [[0, 0, 0], [2, 0, 0]], [[1, 1, 1], [0.5, 0.5, 0.5]])
        preds = make_preds(
            100 * (2 * masks - 1),
            [[50.0, -50, -50, -50], [-50, -50, 50.0, -50]],
            [[0, 0, 0], [2, 0, 0]],
            [[1, 1, 1], [0.5, 0.5, 0.5]],
        )
        cost = cost_matrix(preds, gts, MatchCostConfig())
        assert cost[0, 0] == pytest.approx(0.0, abs=1e-6)
        assert cost[1, 1] == pytest.approx(0.0, abs=1e-6)

    def test_worst_case(self):
        """Disjoint mask, far-apart boxes and zero class probability cost 5 + 4 + 2."""
        gts = make_targets([[1, 1, 0, 0]], [1], [[0, 0, 0]], [[1e-3, 1e-3, 1e-3]])
        preds = make_preds([[-100.0, -100, 100, 100]], [[50.0, -50, -50, -50]], [[100, 0, 0]], [[1e-3, 1e-3, 1e-3]])
        cost = cost_matrix(preds, gts, MatchCostConfig())
        assert float(cost[0, 0]) == pytest.approx(11.0, abs=1e-3)

    def test_mask_only_cost(self):
        gts = make_targets([[1, 1, 0, 0]], [1], [[0, 0, 0]], [[1, 1, 1]])
        preds = make_preds([[100.0, 100, -100, -100]], [[50.0, -50, -50, -50]], [[100, 0, 0]], [[1, 1, 1]])
        cost = cost_matrix(preds, gts, MatchCostConfig(hybrid=False))
        assert float(cost[0, 0]) == pytest.approx(0.0, abs=1e-6)

    def test_entries_match_scalar_recomputation(self):
        rng = np.random.default_rng(42)
        m, g, n = 4, 3, 10
        mask_logits = rng.normal(size=(m, n))
        class_logits = rng.normal(size=(m, 4))
        centers, sizes = rng.uniform(-1, 1, size=(m, 3)), rng.uniform(0.2, 1.5, size=(m, 3))
        gt_masks = (rng.random((g, n)) < 0.4).astype(float)
        gt_masks[:, 0] = 1.0
        labels = [0, 2, 1]
        gt_centers, gt_sizes = rng.uniform(-1, 1, size=(g, 3)), rng.uniform(0.2, 1.5, size=(g, 3))
        cfg = MatchCostConfig()

        cost = cost_matrix(
            make_preds(mask_logits, class_logits, centers, sizes),
            make_targets(gt_masks, labels, gt_centers, gt_sizes),
            cfg,
        ).numpy()

        for j in range(m):
            p = 1 / (1 + np.exp(-mask_logits[j]))
            probs = np.exp(class_logits[j]) / np.exp(class_logits[j]).sum()
            for k in range(g):
                dice = 1 - 2 * (p * gt_masks[k]).sum() / (p.sum() + gt_masks[k].sum())
                lo1, hi1 = centers[j] - sizes[j] / 2, centers[j] + sizes[j] / 2
                lo2, hi2 = gt_centers[k] - gt_sizes[k] / 2, gt_centers[k] + gt_sizes[k] / 2
                inter = np.prod(np.clip(np.minimum(hi1, hi2) - np.maximum(lo1, lo2), 0, None))
                union = np.prod(sizes[j]) + np.prod(gt_sizes[k]) - inter
                hull = np.prod(np.maximum(hi1, hi2) - np.minimum(lo1, lo2))
                giou = inter / union - (hull - union) / hull
                expected = 5 * dice + 2 * (1 - giou) + 2 * (1 - probs[labels[k]])
                assert cost[j, k] == pytest.approx(expected, abs=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        m, g, n = 5, 3, 12
        mask_logits, class_logits = rng.normal(size=(m, n)), rng.normal(size=(m, 4))
        centers, sizes = rng.uniform(-1, 1, size=(m, 3)), rng.uniform(0.2, 1.5, size=(m, 3))
        gt_masks = (rng.random((g, n)) < 0.5).astype(float)
        gt_masks[:, 0] = 1.0
        labels = np.array([0, 2, 1])
        gt_centers, gt_sizes = rng.uniform(-1, 1, size=(g, 3)), rng.uniform(0.2, 1.5, size=(g, 3))
        cfg = MatchCostConfig()
        cost = cost_matrix(
            make_preds(mask_logits, class_logits, centers, sizes),
            make_targets(gt_masks, labels, gt_centers, gt_sizes),
            cfg,
        )

        qp, gp = rng.permutation(m), rng.permutation(g)
        permuted = cost_matrix(
            make_preds(mask_logits[qp], class_logits[qp], centers[qp], sizes[qp]),
            make_targets(gt_masks[gp], labels[gp], gt_centers[gp], gt_sizes[gp]),
            cfg,
        )
        torch.testing.assert_close(permuted, cost[torch.as_tensor(qp)][:, torch.as_tensor(gp)])

    def test_needs_ground_truth(self):
        preds = make_preds(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 3)), np.ones((2, 3)))
        gts = make_targets(np.zeros((0, 4)), [], np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(InvalidArgumentError):
            cost_matrix(preds, gts, MatchCostConfig())
        assert match(preds, gts, MatchCostConfig()).unmatched_queries == [0, 1]


class TestHungarian:
    def test_diagonal(self):
        cost = np.full((4, 4), 5.0)
        np.fill_diagonal(cost, 0.0)
        assert hungarian(cost).pairs == [(0, 0), (1, 1), (2, 2), (3, 3)]

    def test_anti_diagonal(self):
        assignment = hungarian(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert assignment.pairs == [(0, 1), (1, 0)]

    def test_more_queries_than_objects(self):
        cost = np.array([[3.0, 1.0], [0.0, 5.0], [2.0, 2.0]])
        assignment = hungarian(cost)
        assert assignment.pairs == [(0, 1), (1, 0)]
        assert assignment.unmatched_queries == [2]
        assert len(assignment) == 2

    def test_matches_brute_force(self):
        """200 random instances up to 7 x 7 reach the enumerated minimum."""
        rng = np.random.default_rng(42)
        for _ in range(200):
            m, g = rng.integers(1, 8, size=2)
            cost = rng.uniform(0, 10, size=(m, g))
            assignment = hungarian(cost)
            total = sum(cost[q, k] for q, k in assignment.pairs)
            assert total == pytest.approx(_brute_force_minimum(cost), abs=1e-9)
            assert len(assignment) == min(m, g)
            assert len({k for _, k in assignment.pairs}) == len(assignment)
            assert sorted(assignment.unmatched_queries + [q for q, _ in assignment.pairs]) == list(range(m))

    def test_ties_go_to_lowest_query(self):
        cost = np.array([[2.0, 1, 1], [1, 2, 1], [2, 0, 1], [0, 2, 0]])
        assignment = hungarian(cost)
        assert assignment.pairs == [(0, 2), (2, 1), (3, 0)]
        assert assignment.unmatched_queries == [1]

    def test_ties_go_to_lowest_column(self):
        assert hungarian(np.ones((2, 3))).pairs == [(0, 0), (1, 1)]
        assert hungarian(np.zeros((3, 2))).pairs == [(0, 0), (1, 1)]

    def test_ties_match_lexicographic_brute_force(self):
        """Small integer costs have many equal optima; the lowest rows, then columns, win."""
        rng = np.random.default_rng(42)
        for _ in range(300):
            m, g = rng.integers(1, 6, size=2)
            cost = rng.integers(0, 3, size=(m, g)).astype(float)
            assert hungarian(cost).pairs == _lexicographic_optimum(cost)

    def test_constant_shift(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m, g = rng.integers(1, 7, size=2)
            cost = rng.uniform(0, 10, size=(m, g))
            shift = rng.uniform(-20, 20)
            assert hungarian(cost + shift).pairs == hungarian(cost).pairs
        ties = rng.integers(0, 3, size=(5, 4)).astype(float)
        assert hungarian(ties + 4.0).pairs == hungarian(ties).pairs

    def test_nan(self):
        with pytest.raises(InvalidArgumentError):
            hungarian(np.array([[0.0, np.nan]]))

    def test_empty(self):
        assignment = hungarian(np.zeros((3, 0)))
        assert assignment.pairs == [] and assignment.unmatched_queries == [0, 1, 2]

    def test_accepts_tensors(self):
        assignment = hungarian(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
        assert assignment.pairs == [(0, 0), (1, 1)]


class TestInstanceTargets:
    def test_from_scene(self, scene: SceneSample):
        targets = InstanceTargets.from_scene(scene)
        assert targets.masks.shape == (scene.num_instances, scene.num_points)
        assert torch.equal(targets.masks.sum(0), torch.as_tensor(scene.instance_ids >= 0, dtype=torch.float32))
        assert targets.labels.tolist() == [inst.class_id for inst in scene.instances]
        assert targets.shape_mu.shape == (scene.num_instances, 8)
