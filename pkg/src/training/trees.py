"""
Long-tree growth: staged nodes with optimized child splits.
"""

import logging
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.features.words import DEFAULT_PATCH_SIZE, BitFunction, LongTree, TreeNode
from src.utils.errors import ConfigError, TrainingError
from .growth import (
    CandidatePrior,
    GrowthConfig,
    PatchWordCache,
    TrainingSample,
    NodeGrower,
    SlotPlan,
    fit_candidate,
    spatial_plan,
)

logger = logging.getLogger(__name__)


def select_children(scores: np.ndarray, q: int) -> Tuple[List[int], np.ndarray]:
    """
    Choose q candidate columns and route every node word to one of them

    The objective is sum_z max_{j in G} S(z, j). All pairs are tried
    exhaustively, then the set grows greedily one column at a time.

    Args:
        scores: Matrix S of shape (words, candidates)
        q: Number of children

    Returns:
        (chosen column indices in child order, directing table with entries in 1..q)

    Raises:
        TrainingError: fewer candidates than children
    """
    scores = np.asarray(scores, dtype=np.float64)
    words, candidates = scores.shape
    if q < 1:
        raise ConfigError(f"Split factor must be >= 1, got {q}")
    if candidates < q:
        raise TrainingError(f"Need at least {q} split candidates, got {candidates}")

    if q == 1:
        chosen = [int(np.argmax(scores.sum(axis=0)))]
        return chosen, np.ones(words, dtype=np.int64)

    best_pair, best_value = None, -np.inf
    for a, b in combinations(range(candidates), 2):
        value = np.maximum(scores[:, a], scores[:, b]).sum()
        if value > best_value:
            best_pair, best_value = [a, b], value
    chosen = list(best_pair)

    covered = scores[:, chosen].max(axis=1)
    while len(chosen) < q:
        best_j, best_value = None, -np.inf
        for j in range(candidates):
            if j in chosen:
                continue
            value = np.maximum(covered, scores[:, j]).sum()
            if value > best_value:
                best_j, best_value = j, value
        chosen.append(best_j)
        covered = np.maximum(covered, scores[:, best_j])

    directing = 1 + np.argmax(scores[:, chosen], axis=1)
    return chosen, directing.astype(np.int64)


def split_node(cache: PatchWordCache, pool: Sequence[BitFunction], q: int, rng: np.random.Generator,
               optimize_thresholds: bool = True) -> Tuple[Tuple[BitFunction, ...], Tuple[int, ...]]:
    """
    Pick the first bits of a node's q children and its directing table

    Each pool candidate is fitted against the node's bits, then scored per
    node word z as the R contribution of the cell split by the candidate.

    Args:
        cache: Node-local word cache after the node's own bits
        pool: Candidate bit functions F
        q: Split factor
        rng: Random state for unoptimized thresholds

    Returns:
        (children's first bits, directing table of 2^K_s entries in 1..q)
    """
    if len(pool) < q:
        raise TrainingError(f"Need at least {q} split candidates, got {len(pool)}")
    fitted = []
    columns = []
    for candidate in pool:
        candidate, _ = fit_candidate(candidate, cache, rng, optimize_thresholds)
        fitted.append(candidate)
        columns.append(cache.split_scores(cache.bits_of(candidate)))
    chosen, directing = select_children(np.stack(columns, axis=1), q)
    return tuple(fitted[j] for j in chosen), tuple(int(v) for v in directing)


def grow_tree(sample: TrainingSample, g: np.ndarray, stage_sizes: Sequence[int],
              split_factors: Sequence[int], config: GrowthConfig, prior: CandidatePrior,
              patch_size: int = DEFAULT_PATCH_SIZE) -> LongTree:
    """
    Grow a long tree stage by stage

    Every node is grown like a fern on the entries that reach it; a
    non-final node is then split and frozen. Its children start from the
    first bit the split chose for them. Spatial-bit enforcement applies to
    the root node.

    Args:
        sample: Training sample
        g: Gradient matrix (N, C)
        stage_sizes: Bits per stage K_1..K_S
        split_factors: Children per node q_1..q_{S-1}
        config: Growth settings
        prior: Candidate generator, owns the random state
        patch_size: Patch size l

    Returns:
        LongTree
    """
    stage_sizes = tuple(stage_sizes)
    split_factors = tuple(split_factors)
    if len(split_factors) != len(stage_sizes) - 1:
        raise ConfigError(f"Need {len(stage_sizes) - 1} split factors, got {len(split_factors)}")

    # (entries reaching the node, fixed first bit)
    frontier: List[Tuple[Optional[np.ndarray], Optional[BitFunction]]] = [(None, None)]
    nodes: List[Tuple[TreeNode, ...]] = []
    for s, size in enumerate(stage_sizes):
        final = s == len(stage_sizes) - 1
        stage_nodes = []
        following = []
        for entries, first in frontier:
            fixed = frozenset({0}) if first is not None else frozenset()
            plan = spatial_plan(config, prior, size, fixed) if s == 0 else SlotPlan(fixed_slots=fixed)
            grower = NodeGrower(sample, g, config, prior, entries, plan)
            bits = grower.grow(size, first)
            if final:
                stage_nodes.append(TreeNode(tuple(bits)))
                continue

            q = split_factors[s]
            cache = grower.cache(bits)
            pool = [prior.draw() for _ in range(max(config.tree_candidate_count, q))]
            firsts, directing = split_node(cache, pool, q, prior.rng, config.optimize_thresholds)
            stage_nodes.append(TreeNode(tuple(bits), directing))

            child_of = np.asarray(directing, dtype=np.int64)[cache.words] - 1
            base = np.arange(sample.count * sample.pixels_per_image) if entries is None else entries
            for k in range(q):
                following.append((base[child_of == k], firsts[k]))
        nodes.append(tuple(stage_nodes))
        frontier = following
        logger.debug("Stage %d grown with %d nodes", s + 1, len(stage_nodes))

    return LongTree(stage_sizes, split_factors, tuple(nodes), patch_size)
