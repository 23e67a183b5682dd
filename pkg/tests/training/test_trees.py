from itertools import combinations

import numpy as np
import pytest

from src.features.words import validate_for_layout, words_for_batch
from src.training.growth import CandidatePrior, GrowthConfig, PatchWordCache, init_gradients, score_R
from src.training.trees import grow_tree, select_children, split_node
from src.utils.errors import TrainingError

CONFIG = GrowthConfig(candidate_count=6, replacement_sweeps=1, refinement_sweeps=0,
                      tree_candidate_count=12, spatial_enforcement_range=(1, 1))


def _objective(scores, chosen):
    return scores[:, chosen].max(axis=1).sum()


def test_single_child_takes_best_column(rng):
    scores = rng.random((4, 5))
    chosen, directing = select_children(scores, 1)
    assert chosen == [int(np.argmax(scores.sum(axis=0)))]
    np.testing.assert_array_equal(directing, np.ones(4))


def test_pair_search_is_exhaustive(rng):
    scores = rng.random((8, 6))
    chosen, directing = select_children(scores, 2)
    best = max(_objective(scores, list(pair)) for pair in combinations(range(6), 2))
    assert _objective(scores, chosen) == pytest.approx(best)
    np.testing.assert_array_equal(directing, 1 + np.argmax(scores[:, chosen], axis=1))


def test_greedy_growth_past_pairs(rng):
    scores = rng.random((16, 7))
    chosen, directing = select_children(scores, 4)
    assert len(set(chosen)) == 4
    assert set(directing) <= {1, 2, 3, 4}
    pair_best = max(_objective(scores, list(pair)) for pair in combinations(range(7), 2))
    assert _objective(scores, chosen) >= pair_best
    for z, child in enumerate(directing):
        assert scores[z, chosen[child - 1]] == scores[z, chosen].max()


def test_too_few_candidates(rng):
    with pytest.raises(TrainingError):
        select_children(rng.random((4, 2)), 3)


def test_split_node_routes_every_word(sample, rng):
    g = init_gradients(sample.labels, sample.class_count)
    prior = CandidatePrior(sample.kinds, sample.bit_widths, rng, 5)
    node_bits = [prior.draw(exclude_spatial=True) for _ in range(3)]
    cache = PatchWordCache.for_bits(sample, g, node_bits)
    firsts, directing = split_node(cache, [prior.draw() for _ in range(10)], 3, rng)
    assert len(firsts) == 3
    assert len(directing) == 8
    assert set(directing) <= {1, 2, 3}


def test_grown_tree_is_consistent(sample, rng):
    g = init_gradients(sample.labels, sample.class_count)
    prior = CandidatePrior(sample.kinds, sample.bit_widths, rng, 5)
    tree = grow_tree(sample, g, (3, 2, 2), (2, 2), CONFIG, prior, patch_size=5)
    assert tree.stage_sizes == (3, 2, 2)
    assert [len(stage) for stage in tree.nodes] == [1, 2, 4]
    assert tree.cell_count == 4 * 4
    validate_for_layout(tree, sample.kinds, sample.bit_widths)
    # spatial enforcement only touches the root
    assert sum(b.is_spatial for b in tree.nodes[0][0].bits) == 1

    cells = words_for_batch(tree, sample.tensor[:2], sample.area)
    for x, y in [(sample.area.x0, sample.area.y0), (8, 6)]:
        assert cells[1, y - sample.area.y0, x - sample.area.x0] == tree.cell_at(sample.tensor[1], x, y)
    assert score_R(tree, sample, g) > 0.0


def test_tree_growth_is_deterministic(sample):
    g = init_gradients(sample.labels, sample.class_count)

    def grow():
        prior = CandidatePrior(sample.kinds, sample.bit_widths, np.random.default_rng(5), 5)
        return grow_tree(sample, g, (2, 2), (2,), CONFIG, prior, patch_size=5)

    assert grow() == grow()


def test_single_stage_tree_is_a_fern_shape(sample, rng):
    g = init_gradients(sample.labels, sample.class_count)
    prior = CandidatePrior(sample.kinds, sample.bit_widths, rng, 5)
    tree = grow_tree(sample, g, (4,), (), CONFIG, prior, patch_size=5)
    assert tree.leaf_count == 1 and tree.cell_count == 16
