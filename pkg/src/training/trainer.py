"""
Ensemble training loop.

Tables are added one at a time. Each new table is grown against the loss
gradients of the current model, its histogram block is appended to the
feature matrix, and the global linear model is solved again over all
blocks.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import sparse
from tqdm import tqdm

from src.classifier.ensemble import ConvTable, Ensemble, evaluate
from src.features.channels import layout_metadata, prepare_batch
from src.features.words import Fern, words_for_batch
from src.utils.config import TrainConfig
from src.utils.errors import DimensionError, TrainingError
from src.utils.image_utils import Region
from .growth import CandidatePrior, TrainingSample, grow_fern, init_gradients, score_R
from .losses import SolveResult, class_scores_matrix, histogram_matrix, loss_gradients, normalize_columns, solve
from .trees import grow_tree

logger = logging.getLogger(__name__)


@dataclass
class TableRecord:
    """What the training log stores for every added table"""

    table: int
    calculator: str
    r_score: float
    objective: float
    certificate: float
    converged: bool
    iterations: int
    train_error: float
    validation_error: Optional[float]
    seconds: float


@dataclass
class TrainingResult:
    ensemble: Ensemble
    history: List[TableRecord]


def aggregation_area(width: int, height: int, patch_size: int, margin: int) -> Region:
    """Centered area shared by all tables: the valid region minus ``margin`` pixels per side"""
    radius = patch_size // 2
    if width - 2 * radius - 2 * margin < 1 or height - 2 * radius - 2 * margin < 1:
        raise DimensionError(
            f"{width}x{height} images leave no area for patch {patch_size} and margin {margin}"
        )
    return Region(radius, radius, width - 2 * radius, height - 2 * radius).shrink(margin)


def _error_rate(scores: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.argmax(scores, axis=1) + 1
    return float((predictions != labels).mean()) if labels.size else 0.0


class EnsembleTrainer:
    """
    Grows and solves an ensemble for one configuration

    Args:
        config: Validated training configuration
        teacher: Optional (N, C) soft labels for the distillation loss
        log_path: Optional JSON-lines file receiving one record per table
        progress: Show a progress bar over tables
    """

    def __init__(self, config: TrainConfig, teacher: Optional[np.ndarray] = None,
                 log_path: Optional[Path] = None, progress: bool = True):
        self.config = config.validate()
        self.teacher = teacher
        self.log_path = Path(log_path) if log_path else None
        self.progress = progress

    def _sample(self, images: np.ndarray, labels: np.ndarray, class_count: int) -> TrainingSample:
        _, height, width, depth = images.shape
        structure = self.config.structure
        area = aggregation_area(width, height, structure.patch_size, self.config.area_margin)
        kinds, bit_widths = layout_metadata(depth, width, height, self.config.prep)
        tensor = prepare_batch(images, self.config.prep)
        return TrainingSample(tensor, labels, class_count, area, kinds, bit_widths)

    def _grow(self, sample: TrainingSample, g: np.ndarray, prior: CandidatePrior):
        structure = self.config.structure
        if structure.is_tree:
            return grow_tree(sample, g, structure.stage_sizes, structure.split_factors,
                             self.config.growth, prior, structure.patch_size)
        return grow_fern(sample, g, structure.bit_count, self.config.growth, prior, structure.patch_size)

    def _assemble(self, calculators, scales, result: Optional[SolveResult], sample: TrainingSample,
                  class_count: int, image_shape) -> Ensemble:
        tables = []
        offset = 0
        for calc in calculators:
            cells = calc.cell_count
            if result is None:
                weights = np.zeros((cells, class_count))
            else:
                weights = result.weights[offset:offset + cells]
            offset += cells
            spatial = sum(bit.is_spatial for bit in calc.all_bits())
            tables.append(ConvTable(calc, sample.area, weights, spatial))
        biases = np.zeros(class_count) if result is None else result.biases
        ensemble = Ensemble(
            tuple(tables), biases, class_count, self.config.prep, image_shape,
            feature_scales=tuple(scales) if scales else None,
            allow_any_get_bit=self.config.structure.allow_get_bit_on_any_channel,
        )
        return ensemble.fold_feature_scales()

    def _log(self, record: TableRecord):
        logger.info(
            "Table %d (%s): R=%.6g objective=%.6g certificate=%.3g train error=%.4f%s in %.1fs",
            record.table, record.calculator, record.r_score, record.objective, record.certificate,
            record.train_error,
            "" if record.validation_error is None else f" validation error={record.validation_error:.4f}",
            record.seconds,
        )
        if self.log_path is not None:
            with open(self.log_path, "a") as handle:
                handle.write(json.dumps(asdict(record)) + "\n")

    def fit(self, images: np.ndarray, labels: np.ndarray, class_count: int, validation=None) -> TrainingResult:
        """
        Train on a stack of images

        Args:
            images: (N, height, width, depth) array in [0, 1]
            labels: Labels in 1..C
            class_count: C
            validation: Optional dataset with ``images`` and ``labels``

        Returns:
            TrainingResult with the ensemble and per-table records
        """
        if images.ndim == 3:
            images = images[..., np.newaxis]
        labels = np.asarray(labels, dtype=np.int64)
        if images.shape[0] != labels.size or labels.size == 0:
            raise TrainingError(f"{images.shape[0]} images for {labels.size} labels")
        config = self.config
        image_shape = images.shape[1:]

        sample = self._sample(images, labels, class_count)
        g = init_gradients(labels, class_count)
        rng = np.random.default_rng(config.seed)
        prior = CandidatePrior(
            sample.kinds, sample.bit_widths, rng, config.structure.patch_size,
            spatial_bits=config.growth.spatial_bits,
            allow_any_get_bit=config.structure.allow_get_bit_on_any_channel,
        )
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

        calculators, blocks, scales = [], [], []
        result: Optional[SolveResult] = None
        history: List[TableRecord] = []
        tables = tqdm(range(config.structure.table_count), desc="Tables", disable=not self.progress)
        for m in tables:
            start = time.perf_counter()
            calc = self._grow(sample, g, prior)
            r_score = score_R(calc, sample, g)

            cells = words_for_batch(calc, sample.tensor, sample.area).reshape(sample.count, -1)
            block = histogram_matrix(cells, calc.cell_count)
            if config.loss.normalize_features:
                block, scale = normalize_columns(block)
            else:
                scale = np.ones(calc.cell_count)
            calculators.append(calc)
            blocks.append(block)
            scales.append(scale)
            features = sparse.hstack(blocks, format="csr")

            result = solve(features, labels, class_count, config.loss, self.teacher)
            g = loss_gradients(result.weights, result.biases, features, labels, config.loss,
                               self.teacher, result.dual)

            train_error = _error_rate(class_scores_matrix(features, result.weights, result.biases), labels)
            validation_error = None
            if validation is not None:
                partial = self._assemble(calculators, scales, result, sample, class_count, image_shape)
                validation_error = evaluate(partial, validation).error_rate
            record = TableRecord(
                table=m + 1,
                calculator="fern" if isinstance(calc, Fern) else "tree",
                r_score=r_score,
                objective=result.objective,
                certificate=result.certificate,
                converged=result.converged,
                iterations=result.iterations,
                train_error=train_error,
                validation_error=validation_error,
                seconds=time.perf_counter() - start,
            )
            history.append(record)
            self._log(record)

        if result is None:
            # no tables: biases only, ties resolve to class 1
            logger.info("Trained an empty ensemble")
        ensemble = self._assemble(calculators, scales, result, sample, class_count, image_shape)
        return TrainingResult(ensemble, history)


def train_ensemble(images: np.ndarray, labels: np.ndarray, class_count: int, config: TrainConfig,
                   teacher: Optional[np.ndarray] = None, validation=None,
                   log_path: Optional[Path] = None, progress: bool = True) -> TrainingResult:
    """Convenience wrapper around :class:`EnsembleTrainer`"""
    trainer = EnsembleTrainer(config, teacher, log_path, progress)
    return trainer.fit(images, labels, class_count, validation)
