import json

import numpy as np
import pytest

from src.classifier.ensemble import classify_batch, evaluate
from src.classifier.model_io import serialize_model
from src.datasets.loaders import synthetic_dataset
from src.training.trainer import EnsembleTrainer, aggregation_area, train_ensemble
from src.utils.config import config_from_dict
from src.utils.errors import DimensionError, TrainingError
from src.utils.image_utils import Region

SMALL = {
    "prep": {"orientation_count": 4},
    "structure": {"table_count": 3, "bit_count": 5, "patch_size": 5},
    "growth": {"candidate_count": 6, "replacement_sweeps": 1, "refinement_sweeps": 0,
               "spatial_enforcement_range": [1, 1]},
    "loss": {"max_iterations": 200},
}


def _config(**sections):
    values = {key: dict(value) for key, value in SMALL.items()}
    for key, value in sections.items():
        values.setdefault(key, {}).update(value)
    return config_from_dict(values)


def test_aggregation_area():
    assert aggregation_area(16, 16, 5, 1) == Region(3, 3, 10, 10)
    assert aggregation_area(28, 28, 9, 0) == Region(4, 4, 20, 20)
    with pytest.raises(DimensionError):
        aggregation_area(8, 8, 7, 1)


def test_training_learns_bars(bars, tmp_path):
    log_path = tmp_path / "train.log.jsonl"
    result = train_ensemble(bars.images, bars.labels, 2, _config(), log_path=log_path, progress=False)
    ens = result.ensemble
    assert ens.table_count == 3
    assert ens.feature_scales is None
    assert [r.table for r in result.history] == [1, 2, 3]
    assert result.history[-1].train_error < 0.25

    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert len(records) == 3
    assert {"table", "r_score", "objective", "certificate", "train_error"} <= set(records[0])

    test = synthetic_dataset(40, class_count=2, size=16, seed=7)
    assert evaluate(ens, test).error_rate < 0.35


def test_training_is_reproducible(bars):
    first = train_ensemble(bars.images, bars.labels, 2, _config(), progress=False)
    second = train_ensemble(bars.images, bars.labels, 2, _config(), progress=False)
    assert serialize_model(first.ensemble) == serialize_model(second.ensemble)
    other = train_ensemble(bars.images, bars.labels, 2, config_from_dict({"seed": 4}, _config()),
                           progress=False)
    assert serialize_model(other.ensemble) != serialize_model(first.ensemble)


def test_tree_and_svm_training(bars3):
    config = _config(structure={"calculator": "tree", "stage_sizes": [3, 2], "split_factors": [2],
                                "table_count": 2},
                     loss={"kind": "svm"})
    result = train_ensemble(bars3.images, bars3.labels, 3, config, progress=False)
    assert result.history[-1].calculator == "tree"
    assert result.ensemble.tables[0].calculator.cell_count == 8
    assert result.history[-1].train_error < 0.5


def test_dual_svm_gradients(bars):
    config = _config(loss={"kind": "svm", "svm_gradient": "dual"}, structure={"table_count": 2})
    result = train_ensemble(bars.images, bars.labels, 2, config, progress=False)
    assert result.ensemble.table_count == 2


def test_distillation_needs_and_uses_soft_labels(bars):
    config = _config(loss={"kind": "softmax-distill", "distill_mix": 0.5, "distill_temperature": 2.0},
                     structure={"table_count": 2})
    with pytest.raises(TrainingError):
        train_ensemble(bars.images, bars.labels, 2, config, progress=False)
    teacher = np.full((len(bars), 2), 0.1)
    teacher[np.arange(len(bars)), bars.labels - 1] = 0.9
    result = train_ensemble(bars.images, bars.labels, 2, config, teacher=teacher, progress=False)
    assert result.ensemble.table_count == 2


def test_validation_error_is_recorded(bars):
    validation = synthetic_dataset(20, class_count=2, size=16, seed=9)
    result = EnsembleTrainer(_config(structure={"table_count": 2}), progress=False).fit(
        bars.images, bars.labels, 2, validation=validation)
    assert all(r.validation_error is not None for r in result.history)


def test_zero_tables_gives_bias_only_model(bars):
    result = train_ensemble(bars.images, bars.labels, 2, _config(structure={"table_count": 0}), progress=False)
    assert result.ensemble.table_count == 0
    assert result.history == []
    assert set(classify_batch(result.ensemble, bars.images[:3])) == {1}


def test_label_count_mismatch(bars):
    with pytest.raises(TrainingError):
        train_ensemble(bars.images, bars.labels[:-1], 2, _config(), progress=False)


@pytest.mark.parametrize("kind, tolerance", [("softmax", 1e-6), ("svm", 1e-5)])
def test_objective_never_rises_as_tables_are_added(bars, kind, tolerance):
    config = _config(structure={"table_count": 4},
                     loss={"kind": kind, "tolerance": tolerance, "max_iterations": 5000})
    history = train_ensemble(bars.images, bars.labels, 2, config, progress=False).history
    assert all(r.converged for r in history)
    for before, after in zip(history, history[1:]):
        assert after.objective <= before.objective + 2 * tolerance
