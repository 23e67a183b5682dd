"""
Gradient-guided growth of word calculators.

A new table is grown to align its word histogram with the current loss
gradients. The alignment of a finished calculator is the R score

    R(B) = sum over classes c and cells b of | sum_{i,p: b_{i,p} = b} g_i^c |

Bits are added one at a time. Each candidate bit is scored with the
normalized R_delta score, which only counts how the candidate splits every
existing cell away from that cell's mean gradient, so constant candidates
score 0. Thresholds are chosen by one sorted sweep over the candidate's
underlying values.

All entries (i, p) of image i and area pixel p are flattened to one axis;
node-local caches used by tree growth hold a subset of that axis.
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from src.features.channels import ChannelKind
from src.features.words import (
    DEFAULT_PATCH_SIZE,
    GENERIC_GET_BIT_WIDTH,
    BitFunction,
    BitKind,
    Fern,
    WordCalculator,
    bit_values,
    underlying_values,
)
from src.utils.errors import ConfigError, TrainingError
from src.utils.image_utils import Region
from .losses import histogram_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """
    Prepared training images with their labels

    ``tensor`` is the float32 (N, D_e, H, W) output of ``prepare_batch``;
    ``area`` is the shared aggregation area all new tables use.
    """

    tensor: np.ndarray
    labels: np.ndarray
    class_count: int
    area: Region
    kinds: Tuple[ChannelKind, ...]
    bit_widths: Tuple[int, ...]

    def __post_init__(self):
        if self.tensor.ndim != 4 or self.tensor.shape[0] != len(self.labels):
            raise TrainingError(
                f"Tensor of shape {self.tensor.shape} does not match {len(self.labels)} labels"
            )

    @property
    def count(self) -> int:
        return self.tensor.shape[0]

    @property
    def pixels_per_image(self) -> int:
        return self.area.size


@dataclass(frozen=True)
class GrowthConfig:
    candidate_count: int = 40
    replacement_sweeps: int = 2
    refinement_sweeps: int = 1
    enforce_spatial_bits: bool = True
    spatial_enforcement_range: Tuple[int, int] = (1, 5)
    tree_candidate_count: int = 64
    optimize_thresholds: bool = True
    optimize_bits: bool = True
    spatial_bits: bool = True

    def validate(self):
        if self.candidate_count < 1:
            raise ConfigError(f"candidate_count must be >= 1, got {self.candidate_count}")
        if self.replacement_sweeps < 0 or self.refinement_sweeps < 0:
            raise ConfigError("Sweep counts must be >= 0")
        low, high = self.spatial_enforcement_range
        if not 0 <= low <= high:
            raise ConfigError(f"Invalid spatial_enforcement_range {self.spatial_enforcement_range}")
        if self.tree_candidate_count < 1:
            raise ConfigError(f"tree_candidate_count must be >= 1, got {self.tree_candidate_count}")

    def draw_spatial_count(self, rng: np.random.Generator, bit_count: int) -> int:
        """Number of get-bit slots enforced in a new table"""
        if not (self.enforce_spatial_bits and self.spatial_bits):
            return 0
        low, high = self.spatial_enforcement_range
        return min(int(rng.integers(low, high + 1)), bit_count)


def init_gradients(labels: np.ndarray, class_count: int) -> np.ndarray:
    """
    Balanced starting gradients before any table exists

    g_i^c = 1 / #positives of c when y_i = c, otherwise -1 / #negatives of c.

    Raises:
        TrainingError: a class has no examples
    """
    labels = np.asarray(labels)
    g = np.zeros((len(labels), class_count), dtype=np.float64)
    for c in range(class_count):
        positive = labels == c + 1
        n_pos = int(positive.sum())
        if n_pos == 0:
            raise TrainingError(f"Class {c + 1} has no training examples")
        n_neg = len(labels) - n_pos
        g[positive, c] = 1.0 / n_pos
        if n_neg:
            g[~positive, c] = -1.0 / n_neg
    return g


def _cell_sums(cells: np.ndarray, rows: np.ndarray, g: np.ndarray, cell_count: int) -> np.ndarray:
    """Sum of g rows per cell, (cell_count, C) float64"""
    if cells.size == 0:
        return np.zeros((cell_count, g.shape[1]), dtype=np.float64)
    incidence = sparse.csr_matrix(
        (np.ones(cells.size, dtype=np.float64), (cells, rows)),
        shape=(cell_count, g.shape[0]),
    )
    return np.asarray(incidence @ g)


def score_R(calc: WordCalculator, sample: TrainingSample, g: np.ndarray) -> float:
    """
    Alignment of a calculator's histograms with the gradients

    Args:
        calc: Fern or long tree
        sample: Training sample
        g: Gradient matrix (N, C)

    Returns:
        Sum over classes and cells of the absolute cell gradient sums
    """
    cells = calc.cells(sample.tensor, sample.area).reshape(sample.count, -1)
    features = histogram_matrix(cells, calc.cell_count)
    return float(np.abs(features.T @ g).sum())


class PatchWordCache:
    """
    Current words of a calculator under construction

    Holds, for every flattened entry (i, p), the word of the bits chosen so
    far plus per-cell gradient sums and counts. A cache is immutable;
    :meth:`extend` returns the cache of the longer prefix.

    Args:
        sample: Training sample
        g: Gradient matrix (N, C)
        entries: Flat indices into the (N * |A|) entry axis, or None for all
        words: Prefix word per entry
        bit_count: Length of the prefix
    """

    def __init__(self, sample: TrainingSample, g: np.ndarray, entries: Optional[np.ndarray] = None,
                 words: Optional[np.ndarray] = None, bit_count: int = 0):
        self.sample = sample
        self.g = np.asarray(g, dtype=np.float64)
        if self.g.shape != (sample.count, sample.class_count):
            raise TrainingError(f"Gradient matrix {self.g.shape} does not match sample")
        pixels = sample.pixels_per_image
        self.entries = entries
        if entries is None:
            self.rows = np.repeat(np.arange(sample.count, dtype=np.int64), pixels)
        else:
            self.rows = np.asarray(entries, dtype=np.int64) // pixels
        size = self.rows.size
        self.words = np.zeros(size, dtype=np.int64) if words is None else np.asarray(words, dtype=np.int64)
        self.bit_count = bit_count
        self.cell_count = 1 << bit_count
        self.cell_sums = _cell_sums(self.words, self.rows, self.g, self.cell_count)
        self.cell_sizes = np.bincount(self.words, minlength=self.cell_count)

    @classmethod
    def for_bits(cls, sample: TrainingSample, g: np.ndarray, bits: Sequence[BitFunction],
                 entries: Optional[np.ndarray] = None) -> "PatchWordCache":
        cache = cls(sample, g, entries)
        for bit in bits:
            cache = cache.extend(cache.bits_of(bit))
        return cache

    @property
    def size(self) -> int:
        return self.rows.size

    def _flat(self, array: np.ndarray) -> np.ndarray:
        flat = array.reshape(-1)
        return flat if self.entries is None else flat[self.entries]

    def bits_of(self, bit: BitFunction) -> np.ndarray:
        return self._flat(bit_values(bit, self.sample.tensor, self.sample.area))

    def values_of(self, bit: BitFunction) -> np.ndarray:
        return self._flat(underlying_values(bit, self.sample.tensor, self.sample.area))

    def extend(self, bits: np.ndarray) -> "PatchWordCache":
        words = self.words | (bits.astype(np.int64) << self.bit_count)
        return PatchWordCache(self.sample, self.g, self.entries, words, self.bit_count + 1)

    def cell_means(self) -> np.ndarray:
        """Mean gradient per cell; empty cells get 0"""
        sizes = self.cell_sizes[:, np.newaxis].astype(np.float64)
        return np.divide(self.cell_sums, sizes, out=np.zeros_like(self.cell_sums), where=sizes > 0)

    def split_sums(self, bits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient sums and counts of the entries whose candidate bit is 1"""
        on = bits.astype(bool)
        sums = _cell_sums(self.words[on], self.rows[on], self.g, self.cell_count)
        counts = np.bincount(self.words[on], minlength=self.cell_count)
        return sums, counts

    def score_delta(self, bits: np.ndarray) -> float:
        """Normalized score of appending a candidate with the given bits"""
        sums, counts = self.split_sums(bits)
        centered = sums - counts[:, np.newaxis] * self.cell_means()
        return float(np.abs(centered).sum())

    def score_full(self, bits: np.ndarray) -> float:
        """R score of the prefix with the candidate appended"""
        return float(self.split_scores(bits).sum())

    def split_scores(self, bits: np.ndarray) -> np.ndarray:
        """Per-cell R contribution of the prefix with the candidate appended"""
        sums, _ = self.split_sums(bits)
        return (np.abs(sums) + np.abs(self.cell_sums - sums)).sum(axis=1)

    def score(self) -> float:
        """R score of the prefix itself"""
        return float(np.abs(self.cell_sums).sum())


def score_R_delta(cache: PatchWordCache, candidate: BitFunction) -> float:
    """
    Normalized score of appending ``candidate`` to the cached prefix

    Every cell b contributes sum_c | S1_b^c - n1_b * E_b^c | where S1 and n1
    are the gradient sum and count of the entries the candidate sets to 1
    and E_b is the cell's mean gradient.
    """
    return cache.score_delta(cache.bits_of(candidate))


def optimal_threshold(candidate: BitFunction, cache: PatchWordCache) -> Tuple[float, float]:
    """
    Threshold maximizing the normalized score of a thresholded candidate

    Entries are sorted by decreasing underlying value, so lowering the
    threshold past a value switches those entries to 1. Each switch only
    changes its own cell's term, so running per-cell sums give the score of
    every threshold in one pass. Only boundaries between distinct values are
    considered; the threshold is their float32 midpoint.

    Returns:
        (threshold, score). When all values are equal the score is 0.
    """
    if not candidate.kind.thresholded:
        raise ConfigError("Get-bit candidates have no threshold")
    values = cache.values_of(candidate)
    if values.size == 0:
        return 0.0, 0.0

    order = np.argsort(-values, kind="stable")
    sorted_values = values[order]
    cells = cache.words[order]
    rows = cache.rows[order]
    boundaries = np.flatnonzero(sorted_values[:-1] != sorted_values[1:])
    if boundaries.size == 0:
        return float(sorted_values[0]), 0.0

    by_cell = np.argsort(cells, kind="stable")
    grouped_cells = cells[by_cell]
    group_start = np.r_[True, grouped_cells[1:] != grouped_cells[:-1]]
    start_index = np.maximum.accumulate(np.where(group_start, np.arange(by_cell.size), 0))

    means = cache.cell_means()
    change = np.zeros(values.size, dtype=np.float64)
    # one class at a time keeps memory at a few entry-length vectors
    for c in range(cache.g.shape[1]):
        delta = (cache.g[rows, c] - means[cells, c])[by_cell]
        running = np.cumsum(delta)
        before_group = np.where(start_index > 0, running[start_index - 1], 0.0)
        within = running - before_group
        change[by_cell] += np.abs(within) - np.abs(within - delta)
    scores = np.cumsum(change)

    best = boundaries[int(np.argmax(scores[boundaries]))]
    high = np.float32(sorted_values[best])
    low = np.float32(sorted_values[best + 1])
    threshold = np.float32((float(low) + float(high)) / 2.0)
    if threshold <= low:
        threshold = high
    return float(threshold), cache.score_delta(values >= threshold)


class CandidatePrior:
    """
    Random bit functions for a channel layout

    Kinds are drawn uniformly among those the layout supports: one- and
    two-pixel comparisons on non-spatial channels, integral bits on integral
    channels and get-bits on spatial channels. Offsets are uniform over the
    patch. Thresholds are left at 0 for the caller to fit.
    """

    def __init__(self, kinds: Sequence[ChannelKind], bit_widths: Sequence[int], rng: np.random.Generator,
                 patch_size: int = DEFAULT_PATCH_SIZE, spatial_bits: bool = True,
                 allow_any_get_bit: bool = False):
        self.rng = rng
        self.radius = patch_size // 2
        self.bit_widths = tuple(bit_widths)
        self.pixel_channels = [d for d, k in enumerate(kinds) if not k.is_spatial]
        self.integral_channels = [d for d, k in enumerate(kinds) if k == ChannelKind.INTEGRAL]
        if allow_any_get_bit:
            self.get_bit_channels = list(range(len(kinds)))
        else:
            self.get_bit_channels = [d for d, k in enumerate(kinds) if k.is_spatial]
        if not spatial_bits:
            self.get_bit_channels = []

        self.plain_kinds = []
        if self.pixel_channels:
            self.plain_kinds += [BitKind.ONE_PIXEL, BitKind.TWO_PIXEL]
        if self.integral_channels and self.radius >= 1:
            self.plain_kinds.append(BitKind.INTEGRAL_BIT)
        if not self.plain_kinds and not self.get_bit_channels:
            raise TrainingError("Channel layout supports no bit functions")

    @property
    def has_spatial(self) -> bool:
        return bool(self.get_bit_channels)

    def _offset(self) -> int:
        return int(self.rng.integers(-self.radius, self.radius + 1))

    def _sorted_pair(self) -> Tuple[int, int]:
        a, b = self.rng.choice(2 * self.radius + 1, size=2, replace=False) - self.radius
        return int(min(a, b)), int(max(a, b))

    def get_bit_width(self, channel: int) -> int:
        return self.bit_widths[channel] or GENERIC_GET_BIT_WIDTH

    def draw(self, spatial_only: bool = False, exclude_spatial: bool = False) -> BitFunction:
        """
        One random bit function

        Args:
            spatial_only: Draw a get-bit on a spatial channel
            exclude_spatial: Never draw a get-bit
        """
        if spatial_only:
            if not self.has_spatial:
                raise TrainingError("No channels available for spatial bits")
            kinds = [BitKind.GET_BIT]
        elif exclude_spatial or not self.has_spatial:
            kinds = self.plain_kinds
        else:
            kinds = self.plain_kinds + [BitKind.GET_BIT]
        if not kinds:
            kinds = [BitKind.GET_BIT]
        kind = kinds[int(self.rng.integers(len(kinds)))]

        if kind == BitKind.GET_BIT:
            channel = self.get_bit_channels[int(self.rng.integers(len(self.get_bit_channels)))]
            bit_index = int(self.rng.integers(self.get_bit_width(channel)))
            return BitFunction(kind, channel, (self._offset(), self._offset(), 0, 0), bit_index=bit_index)
        if kind == BitKind.INTEGRAL_BIT:
            channel = self.integral_channels[int(self.rng.integers(len(self.integral_channels)))]
            x1, x2 = self._sorted_pair()
            y1, y2 = self._sorted_pair()
            return BitFunction(kind, channel, (x1, y1, x2, y2))
        channel = self.pixel_channels[int(self.rng.integers(len(self.pixel_channels)))]
        if kind == BitKind.ONE_PIXEL:
            return BitFunction(kind, channel, (self._offset(), self._offset(), 0, 0))
        return BitFunction(kind, channel, tuple(self._offset() for _ in range(4)))


def fit_candidate(candidate: BitFunction, cache: PatchWordCache, rng: np.random.Generator,
                  optimize_thresholds: bool = True) -> Tuple[BitFunction, float]:
    """
    Set the candidate's threshold and score it against the cached prefix

    Without threshold optimization the threshold is drawn uniformly between
    the smallest and largest underlying value.
    """
    if candidate.kind.thresholded:
        if optimize_thresholds:
            threshold, score = optimal_threshold(candidate, cache)
            return candidate.with_threshold(threshold), score
        values = cache.values_of(candidate)
        if values.size:
            candidate = candidate.with_threshold(rng.uniform(float(values.min()), float(values.max())))
    return candidate, score_R_delta(cache, candidate)


def perturbations(bit: BitFunction, radius: int, get_bit_width: int) -> List[BitFunction]:
    """
    Small variations of a bit function, the incumbent included

    Offset points move on the 3x3 grid around their position, one point at a
    time; get-bits move their bit index by one. The channel is held.
    """
    if bit.kind == BitKind.GET_BIT:
        indices = [i for i in (bit.bit_index - 1, bit.bit_index, bit.bit_index + 1) if 0 <= i < get_bit_width]
        return [BitFunction(bit.kind, bit.channel, bit.offsets, bit.threshold, i) for i in indices]

    points = 1 if bit.kind == BitKind.ONE_PIXEL else 2
    variants = [bit]
    seen = {bit.offsets}
    for point in range(points):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                offsets = list(bit.offsets)
                offsets[2 * point] += dx
                offsets[2 * point + 1] += dy
                offsets = tuple(offsets)
                if offsets in seen or max(abs(o) for o in offsets[:2 * points]) > radius:
                    continue
                if bit.kind == BitKind.INTEGRAL_BIT and not (offsets[0] < offsets[2] and offsets[1] < offsets[3]):
                    continue
                seen.add(offsets)
                variants.append(BitFunction(bit.kind, bit.channel, offsets, bit.threshold, bit.bit_index))
    return variants


@dataclass
class SlotPlan:
    """Which slots draw spatial candidates and which are frozen"""

    spatial_slots: FrozenSet[int] = frozenset()
    fixed_slots: FrozenSet[int] = frozenset()
    enforce: bool = False

    def draw(self, prior: CandidatePrior, slot: int) -> BitFunction:
        spatial = slot in self.spatial_slots
        return prior.draw(spatial_only=spatial, exclude_spatial=self.enforce and not spatial)


@dataclass(eq=False)
class NodeGrower:
    """Forward selection, replacement and refinement for one fern or tree node"""

    sample: TrainingSample
    g: np.ndarray
    config: GrowthConfig
    prior: CandidatePrior
    entries: Optional[np.ndarray] = None
    plan: SlotPlan = field(default_factory=SlotPlan)

    def cache(self, bits: Sequence[BitFunction]) -> PatchWordCache:
        return PatchWordCache.for_bits(self.sample, self.g, bits, self.entries)

    def fit(self, candidate: BitFunction, cache: PatchWordCache) -> Tuple[BitFunction, float]:
        return fit_candidate(candidate, cache, self.prior.rng, self.config.optimize_thresholds)

    def forward(self, bits: List[BitFunction], bit_count: int) -> List[BitFunction]:
        cache = self.cache(bits)
        draws = self.config.candidate_count if self.config.optimize_bits else 1
        for slot in range(len(bits), bit_count):
            best, best_score = None, -np.inf
            for _ in range(draws):
                candidate, score = self.fit(self.plan.draw(self.prior, slot), cache)
                if score > best_score:
                    best, best_score = candidate, score
            bits.append(best)
            cache = cache.extend(cache.bits_of(best))
            logger.debug("Slot %d: %s score %.6g", slot, best.kind.name, best_score)
        return bits

    def _improve(self, bits: List[BitFunction], sweeps: int, propose) -> List[BitFunction]:
        bits = list(bits)
        for _ in range(sweeps):
            for j in range(len(bits)):
                if j in self.plan.fixed_slots:
                    continue
                others = self.cache(bits[:j] + bits[j + 1:])
                current = others.score_full(others.bits_of(bits[j]))
                best, best_score = None, current
                for candidate in propose(bits[j], j):
                    candidate, _ = self.fit(candidate, others)
                    score = others.score_full(others.bits_of(candidate))
                    if score > best_score:
                        best, best_score = candidate, score
                if best is not None:
                    logger.debug("Slot %d improved %.6g -> %.6g", j, current, best_score)
                    bits[j] = best
        return bits

    def replace(self, bits: List[BitFunction], sweeps: int) -> List[BitFunction]:
        def propose(_, slot):
            return [self.plan.draw(self.prior, slot) for _ in range(self.config.candidate_count)]
        return self._improve(bits, sweeps, propose)

    def refine(self, bits: List[BitFunction], sweeps: int) -> List[BitFunction]:
        def propose(incumbent, _):
            width = self.prior.get_bit_width(incumbent.channel) if incumbent.is_spatial else 0
            return perturbations(incumbent, self.prior.radius, width)
        return self._improve(bits, sweeps, propose)

    def grow(self, bit_count: int, first: Optional[BitFunction] = None) -> List[BitFunction]:
        bits = [first] if first is not None else []
        if self.entries is not None and len(self.entries) == 0:
            # nothing reaches this node, keep a random valid filling
            while len(bits) < bit_count:
                bits.append(self.plan.draw(self.prior, len(bits)))
            return bits
        bits = self.forward(bits, bit_count)
        if self.config.optimize_bits:
            bits = self.replace(bits, self.config.replacement_sweeps)
            bits = self.refine(bits, self.config.refinement_sweeps)
        return bits


def spatial_plan(config: GrowthConfig, prior: CandidatePrior, bit_count: int,
                 fixed_slots: FrozenSet[int] = frozenset()) -> SlotPlan:
    """Draw how many and which slots of a new table hold enforced get-bits"""
    enforce = config.enforce_spatial_bits and config.spatial_bits and prior.has_spatial
    if not enforce:
        return SlotPlan(fixed_slots=fixed_slots)
    free = [s for s in range(bit_count) if s not in fixed_slots]
    count = min(config.draw_spatial_count(prior.rng, bit_count), len(free))
    slots = prior.rng.choice(free, size=count, replace=False) if count else []
    return SlotPlan(frozenset(int(s) for s in slots), fixed_slots, True)


def grow_fern(sample: TrainingSample, g: np.ndarray, bit_count: int, config: GrowthConfig,
              prior: CandidatePrior, patch_size: int = DEFAULT_PATCH_SIZE) -> Fern:
    """
    Grow a K-bit fern against the gradients

    Forward selection picks, for each slot, the best of N_c fitted
    candidates; replacement and refinement sweeps follow.

    Args:
        sample: Training sample
        g: Gradient matrix (N, C)
        bit_count: K
        config: Growth settings
        prior: Candidate generator, owns the random state
        patch_size: Patch size l

    Returns:
        Fern with the grown bits
    """
    if bit_count < 1:
        raise ConfigError(f"Fern needs at least one bit, got {bit_count}")
    plan = spatial_plan(config, prior, bit_count)
    bits = NodeGrower(sample, g, config, prior, plan=plan).grow(bit_count)
    fern = Fern(tuple(bits), patch_size)
    logger.debug("Grew fern with %d spatial bits", sum(b.is_spatial for b in bits))
    return fern


def replace_bits(fern: Fern, sample: TrainingSample, g: np.ndarray, sweeps: int,
                 config: GrowthConfig, prior: CandidatePrior) -> Fern:
    """
    Replacement sweeps: swap a bit for a fresh candidate when R(B) improves

    The spatial-bit enforcement of the existing fern is kept: get-bit slots
    only receive get-bit candidates and the others never do.
    """
    plan = _existing_plan(fern, config)
    bits = NodeGrower(sample, g, config, prior, plan=plan).replace(list(fern.bits), sweeps)
    return Fern(tuple(bits), fern.patch_size)


def refine_bits(fern: Fern, sample: TrainingSample, g: np.ndarray, sweeps: int,
                config: GrowthConfig, prior: CandidatePrior) -> Fern:
    """Refinement sweeps over small perturbations of each bit"""
    bits = NodeGrower(sample, g, config, prior).refine(list(fern.bits), sweeps)
    return Fern(tuple(bits), fern.patch_size)


def _existing_plan(fern: Fern, config: GrowthConfig) -> SlotPlan:
    if not (config.enforce_spatial_bits and config.spatial_bits):
        return SlotPlan()
    spatial = frozenset(j for j, b in enumerate(fern.bits) if b.is_spatial)
    return SlotPlan(spatial, frozenset(), True)
