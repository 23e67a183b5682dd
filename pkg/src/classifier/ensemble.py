"""
Convolutional tables ensemble classifier.

Each table applies its word calculator at every pixel of its aggregation
area. Every resulting word votes its row of class weights, and the class
with the highest total minus its bias wins. Direct voting gives the same
result as scoring the word histogram with the weight matrix, which is kept
as :func:`histogram_class_scores` for checking.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.features.channels import ExtendedImage, PrepConfig, RawImage, layout_metadata, prepare_channels
from src.features.words import BitKind, Fern, WordCalculator, valid_area, validate_for_layout
from src.utils.benchmark import LatencyStats
from src.utils.errors import ConfigError, DimensionError
from src.utils.image_utils import Region

logger = logging.getLogger(__name__)

WEIGHT_DTYPE = np.float32


@dataclass(frozen=True, eq=False)
class ConvTable:
    """
    One (calculator, area, weights) triple

    ``weights`` has shape (cell_count, C): one contiguous row of class
    weights per table cell.
    """

    calculator: WordCalculator
    area: Region
    weights: np.ndarray
    spatial_bit_count: int = 0

    def __post_init__(self):
        weights = np.ascontiguousarray(self.weights, dtype=WEIGHT_DTYPE)
        if weights.ndim != 2 or weights.shape[0] != self.calculator.cell_count:
            raise DimensionError(
                f"Weights must be ({self.calculator.cell_count}, C), got {weights.shape}"
            )
        weights.flags.writeable = False
        object.__setattr__(self, "weights", weights)

    @property
    def class_count(self) -> int:
        return self.weights.shape[1]

    def check_area(self, width: int, height: int):
        if not valid_area(self.calculator, width, height).contains(self.area):
            raise DimensionError(f"Area {self.area} exceeds the valid region of a {width}x{height} image")


@dataclass(frozen=True)
class WordHistogram:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True, eq=False)
class Ensemble:
    """
    Trained classifier

    ``image_shape`` is (height, width, depth) of the training images.
    ``feature_scales`` optionally holds, per table, the per-cell scale the
    weights were learned against; the effective weights are W / scale and
    :meth:`fold_feature_scales` bakes them in.
    """

    tables: Tuple[ConvTable, ...]
    biases: np.ndarray
    class_count: int
    prep: PrepConfig
    image_shape: Tuple[int, int, int]
    feature_scales: Optional[Tuple[np.ndarray, ...]] = None
    allow_any_get_bit: bool = False
    _plan: Dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        biases = np.ascontiguousarray(self.biases, dtype=WEIGHT_DTYPE)
        if biases.shape != (self.class_count,):
            raise DimensionError(f"Biases must have length {self.class_count}, got {biases.shape}")
        object.__setattr__(self, "biases", biases)
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if len(self.image_shape) != 3:
            raise DimensionError(f"image_shape must be (height, width, depth), got {self.image_shape}")
        height, width, depth = self.image_shape
        kinds, bit_widths = layout_metadata(depth, width, height, self.prep)
        for m, table in enumerate(self.tables):
            if table.class_count != self.class_count:
                raise DimensionError(f"Table {m} has {table.class_count} classes, expected {self.class_count}")
            table.check_area(width, height)
            validate_for_layout(table.calculator, kinds, bit_widths, self.allow_any_get_bit)
        if self.feature_scales is not None:
            if len(self.feature_scales) != len(self.tables):
                raise DimensionError("Need one feature-scale vector per table")
            for table, scale in zip(self.tables, self.feature_scales):
                if np.shape(scale) != (table.calculator.cell_count,):
                    raise DimensionError(f"Feature scale must have {table.calculator.cell_count} entries")

    @property
    def table_count(self) -> int:
        return len(self.tables)

    def effective_weights(self, m: int) -> np.ndarray:
        weights = self.tables[m].weights
        if self.feature_scales is None:
            return weights
        scale = np.asarray(self.feature_scales[m], dtype=np.float64)
        return (weights / scale[:, np.newaxis]).astype(WEIGHT_DTYPE)

    def fold_feature_scales(self) -> "Ensemble":
        """Copy with the scales divided into the weights and dropped"""
        if self.feature_scales is None:
            return self
        tables = tuple(replace(t, weights=self.effective_weights(m)) for m, t in enumerate(self.tables))
        return replace(self, tables=tables, feature_scales=None)

    def check_image(self, image: RawImage):
        shape = (image.height, image.width, image.depth)
        if shape != self.image_shape:
            raise DimensionError(f"Image shape {shape} does not match model shape {self.image_shape}")

    def prepare(self, image: RawImage) -> np.ndarray:
        self.check_image(image)
        return prepare_channels(image, self.prep).as_float32()

    def inference_plan(self) -> "InferencePlan":
        plan = self._plan.get("plan")
        if plan is None:
            plan = InferencePlan(self)
            self._plan["plan"] = plan
        return plan


class _FernGather:
    """
    Precomputed flat indices for evaluating one fern over its whole area

    Every bit reads up to four corners a, b, c, d and forms
    ((a + cb * b) + cc * c) + cd * d with coefficients in {-1, 0, 1}. This
    reproduces the one-pixel, two-pixel and integral measurements exactly in
    float32.
    """

    def __init__(self, fern: Fern, area: Region, height: int, width: int):
        ys, xs = np.mgrid[area.y0:area.y1, area.x0:area.x1]
        xs = xs.ravel()
        ys = ys.ravel()
        k = fern.bit_count
        self.indices = np.empty((4, k, xs.size), dtype=np.int64)
        self.coefficients = np.zeros((3, k, 1), dtype=np.float32)
        self.thresholds = np.empty((k, 1), dtype=np.float32)
        self.bit_indices = np.zeros((k, 1), dtype=np.int64)
        self.get_bit = np.zeros(k, dtype=bool)
        plane = height * width

        def flat(channel, dx, dy):
            return channel * plane + (ys + dy) * width + (xs + dx)

        for j, bit in enumerate(fern.bits):
            x1, y1, x2, y2 = bit.offsets
            a = flat(bit.channel, x1, y1)
            self.indices[:, j] = a
            self.thresholds[j] = bit.threshold
            if bit.kind == BitKind.TWO_PIXEL:
                self.indices[1, j] = flat(bit.channel, x2, y2)
                self.coefficients[0, j] = -1.0
            elif bit.kind == BitKind.INTEGRAL_BIT:
                self.indices[1, j] = flat(bit.channel, x1, y2)
                self.indices[2, j] = flat(bit.channel, x2, y1)
                self.indices[3, j] = flat(bit.channel, x2, y2)
                self.coefficients[:, j] = np.array([[-1.0], [-1.0], [1.0]], dtype=np.float32)
            elif bit.kind == BitKind.GET_BIT:
                self.get_bit[j] = True
                self.bit_indices[j] = bit.bit_index
        self.shifts = np.arange(k, dtype=np.int64)[:, np.newaxis]

    def cells(self, flat_planes: np.ndarray) -> np.ndarray:
        a, b, c, d = (flat_planes[idx] for idx in self.indices)
        values = ((a + self.coefficients[0] * b) + self.coefficients[1] * c) + self.coefficients[2] * d
        bits = (values >= self.thresholds).astype(np.int64)
        if self.get_bit.any():
            read = (a[self.get_bit].astype(np.int64) >> self.bit_indices[self.get_bit]) & 1
            bits[self.get_bit] = read
        return (bits << self.shifts).sum(axis=0)


class InferencePlan:
    """Per-ensemble cache of gather indices and effective weights"""

    def __init__(self, ensemble: Ensemble):
        height, width, _ = ensemble.image_shape
        self.weights = [ensemble.effective_weights(m) for m in range(ensemble.table_count)]
        self.gathers: List[Optional[_FernGather]] = []
        for table in ensemble.tables:
            if isinstance(table.calculator, Fern):
                self.gathers.append(_FernGather(table.calculator, table.area, height, width))
            else:
                self.gathers.append(None)
        self.tables = ensemble.tables
        self.biases = ensemble.biases

    def vote(self, planes: np.ndarray) -> np.ndarray:
        """Scores from prepared float32 planes (D_e, H, W)"""
        scores = -self.biases.copy()
        flat_planes = planes.ravel()
        for table, gather, weights in zip(self.tables, self.gathers, self.weights):
            if gather is not None:
                cells = gather.cells(flat_planes)
            else:
                cells = table.calculator.cells(planes, table.area).ravel()
            scores += weights[cells].sum(axis=0, dtype=WEIGHT_DTYPE)
        return scores


def table_histogram(table: ConvTable, image: ExtendedImage) -> WordHistogram:
    """
    Count each table cell over the aggregation area

    Args:
        table: Convolutional table
        image: Image prepared with the ensemble's PrepConfig

    Returns:
        WordHistogram with cell_count entries summing to the area size
    """
    table.check_area(image.width, image.height)
    cells = table.calculator.cells(image, table.area)
    return WordHistogram(np.bincount(cells.ravel(), minlength=table.calculator.cell_count))


def histogram_class_scores(ens: Ensemble, image: RawImage) -> np.ndarray:
    """Scores as W H^T - T from explicit word histograms, in float64"""
    ens.check_image(image)
    extended = prepare_channels(image, ens.prep)
    scores = -ens.biases.astype(np.float64)
    for m, table in enumerate(ens.tables):
        hist = table_histogram(table, extended).counts.astype(np.float64)
        scores += hist @ ens.effective_weights(m).astype(np.float64)
    return scores


def class_scores(ens: Ensemble, image: RawImage) -> np.ndarray:
    """
    Score vector of length C by direct per-word voting

    Raises:
        DimensionError: image shape differs from the training shape
    """
    return ens.inference_plan().vote(ens.prepare(image))


def reference_class_scores(ens: Ensemble, image: RawImage) -> np.ndarray:
    """Direct voting with scalar per-pixel word evaluation"""
    planes = ens.prepare(image)
    scores = -ens.biases.copy()
    for m, table in enumerate(ens.tables):
        weights = ens.effective_weights(m)
        for x, y in table.area.pixels():
            scores += weights[table.calculator.cell_at(planes, x, y)]
    return scores


def _label(scores: np.ndarray) -> int:
    # argmax returns the first maximum, labels are 1-based
    return int(np.argmax(scores)) + 1


def classify(ens: Ensemble, image: RawImage) -> int:
    """Class label in 1..C; ties go to the smallest label"""
    return _label(class_scores(ens, image))


def classify_batch(ens: Ensemble, images: np.ndarray) -> np.ndarray:
    """
    Labels for a stack of images

    Args:
        ens: Trained ensemble
        images: Array (N, height, width, depth) or (N, height, width)

    Returns:
        int64 array of labels in 1..C
    """
    return np.array([classify(ens, RawImage(image)) for image in images], dtype=np.int64)


@dataclass(frozen=True)
class BatchTiming:
    preparation: LatencyStats
    voting: LatencyStats
    total: LatencyStats

    def to_dict(self) -> Dict:
        return {
            "preparation": self.preparation.to_dict(),
            "voting": self.voting.to_dict(),
            "total": self.total.to_dict(),
        }


def classify_batch_timed(ens: Ensemble, images: np.ndarray, warmup: int = 1) -> Tuple[np.ndarray, BatchTiming]:
    """
    Classify a batch and time every image on the calling thread

    Channel preparation and voting are timed separately; ``warmup`` images
    are classified once untimed beforehand.

    Returns:
        (labels, BatchTiming)
    """
    raw = [RawImage(image) for image in images]
    plan = ens.inference_plan()
    for image in raw[:warmup]:
        plan.vote(ens.prepare(image))

    labels = np.empty(len(raw), dtype=np.int64)
    prep_times, vote_times = [], []
    for i, image in enumerate(raw):
        start = time.perf_counter()
        planes = ens.prepare(image)
        prepared = time.perf_counter()
        scores = plan.vote(planes)
        done = time.perf_counter()
        labels[i] = _label(scores)
        prep_times.append(prepared - start)
        vote_times.append(done - prepared)

    totals = [p + v for p, v in zip(prep_times, vote_times)]
    timing = BatchTiming(
        LatencyStats.from_seconds(prep_times),
        LatencyStats.from_seconds(vote_times),
        LatencyStats.from_seconds(totals),
    )
    logger.debug("Voting median %.2f us over %d images", timing.voting.median_us, len(raw))
    return labels, timing


@dataclass(frozen=True)
class EvaluationResult:
    error_rate: float
    confusion: np.ndarray  # rows: true label, columns: predicted label
    count: int

    def to_dict(self) -> Dict:
        return {
            "error_rate": self.error_rate,
            "confusion": self.confusion.tolist(),
            "count": self.count,
        }


def evaluate(ens: Ensemble, dataset) -> EvaluationResult:
    """
    Error rate and confusion matrix on a labeled dataset

    Args:
        ens: Trained ensemble
        dataset: Object with ``images`` (N, H, W, D) and 1-based ``labels``

    Returns:
        EvaluationResult
    """
    predictions = classify_batch(ens, dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > ens.class_count):
        raise DimensionError(f"Dataset labels exceed the model's {ens.class_count} classes")
    confusion = np.zeros((ens.class_count, ens.class_count), dtype=np.int64)
    np.add.at(confusion, (labels - 1, predictions - 1), 1)
    count = int(labels.size)
    errors = int((predictions != labels).sum())
    return EvaluationResult(errors / count if count else 0.0, confusion, count)
