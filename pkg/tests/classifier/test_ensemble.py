import numpy as np
import pytest

from src.classifier.ensemble import (
    ConvTable,
    Ensemble,
    class_scores,
    classify,
    classify_batch,
    classify_batch_timed,
    evaluate,
    histogram_class_scores,
    reference_class_scores,
    table_histogram,
)
from src.datasets.loaders import synthetic_dataset
from src.features.channels import RawImage, layout_metadata, prepare_channels
from src.features.words import BitFunction, BitKind, Fern
from src.training.trainer import aggregation_area
from src.utils.benchmark import LatencyStats, linear_fit_r2, time_calls
from src.utils.errors import ChannelKindError, DimensionError
from helpers import SMALL_PREP, make_ensemble, random_fern

SHAPE = (16, 16, 1)
AREA = aggregation_area(16, 16, 5, 1)


def test_fast_path_agrees_with_reference_paths(rng, bars):
    ens = make_ensemble(rng)
    for image in bars.images[:4]:
        raw = RawImage(image)
        fast = class_scores(ens, raw)
        assert fast.dtype == np.float32
        np.testing.assert_allclose(fast, reference_class_scores(ens, raw), rtol=1e-4, atol=1e-3)
        np.testing.assert_allclose(fast, histogram_class_scores(ens, raw), rtol=1e-4, atol=1e-3)
        assert classify(ens, raw) == int(np.argmax(reference_class_scores(ens, raw))) + 1


def test_histograms_cover_the_area(rng, bars):
    ens = make_ensemble(rng)
    extended = prepare_channels(RawImage(bars.images[0]), SMALL_PREP)
    for table in ens.tables:
        hist = table_histogram(table, extended)
        assert hist.counts.shape == (table.calculator.cell_count,)
        assert hist.total == AREA.size


def test_empty_ensemble_votes_biases_only(bars):
    ens = Ensemble((), np.array([0.5, -1.0, -1.0]), 3, SMALL_PREP, SHAPE)
    # scores are minus the biases
    assert classify(ens, RawImage(bars.images[0])) == 2


def test_ties_go_to_lowest_label(bars, rng):
    kinds, widths = layout_metadata(1, 16, 16, SMALL_PREP)
    fern = random_fern(kinds, widths, rng, bit_count=3)
    table = ConvTable(fern, AREA, np.zeros((8, 4)))
    ens = Ensemble((table,), np.zeros(4), 4, SMALL_PREP, SHAPE)
    assert classify(ens, RawImage(bars.images[0])) == 1


def test_shape_checks(rng, bars):
    ens = make_ensemble(rng, with_tree=False)
    with pytest.raises(DimensionError):
        classify(ens, RawImage(np.zeros((16, 15))))
    fern = ens.tables[0].calculator
    with pytest.raises(DimensionError):
        ConvTable(fern, AREA, np.zeros((fern.cell_count + 1, 3)))
    with pytest.raises(DimensionError):
        Ensemble(ens.tables, np.zeros(2), 3, SMALL_PREP, SHAPE)
    # the 16x16 valid area does not fit 12x12 images
    wide = ConvTable(fern, aggregation_area(16, 16, 5, 0), np.zeros((fern.cell_count, 3)))
    with pytest.raises(DimensionError):
        Ensemble((wide,), np.zeros(3), 3, SMALL_PREP, (12, 12, 1))


def test_bad_channel_kind_is_rejected():
    bit = BitFunction(BitKind.INTEGRAL_BIT, 0, (-1, -1, 1, 1))
    table = ConvTable(Fern((bit,), 5), AREA, np.zeros((2, 2)))
    with pytest.raises(ChannelKindError):
        Ensemble((table,), np.zeros(2), 2, SMALL_PREP, SHAPE)


def test_weights_are_read_only(rng):
    ens = make_ensemble(rng, with_tree=False)
    with pytest.raises(ValueError):
        ens.tables[0].weights[0, 0] = 1.0


def test_folding_feature_scales_keeps_scores(rng, bars):
    ens = make_ensemble(rng, scales=True)
    folded = ens.fold_feature_scales()
    assert folded.feature_scales is None
    raw = RawImage(bars.images[3])
    np.testing.assert_allclose(class_scores(folded, raw), class_scores(ens, raw), rtol=1e-5, atol=1e-4)


def test_batch_classification_and_timing(rng, bars):
    ens = make_ensemble(rng)
    labels = classify_batch(ens, bars.images[:6])
    assert labels.dtype == np.int64
    assert set(labels) <= {1, 2, 3}
    timed, timing = classify_batch_timed(ens, bars.images[:6], warmup=2)
    np.testing.assert_array_equal(timed, labels)
    assert timing.voting.count == 6
    assert timing.total.mean_us >= timing.voting.mean_us
    assert set(timing.to_dict()) == {"preparation", "voting", "total"}


def test_evaluate_confusion(rng, bars3):
    ens = make_ensemble(rng)
    result = evaluate(ens, bars3)
    assert result.count == len(bars3)
    assert result.confusion.sum() == len(bars3)
    np.testing.assert_array_equal(result.confusion.sum(axis=1), bars3.class_counts())
    correct = np.trace(result.confusion)
    assert result.error_rate == pytest.approx(1.0 - correct / len(bars3))


def test_integer_weights_give_identical_scores_on_every_path(rng):
    ens = make_ensemble(rng, integer_weights=True)
    images = synthetic_dataset(1000, class_count=3, size=16, seed=4).images
    labels = classify_batch(ens, images)
    for image, label in zip(images, labels):
        raw = RawImage(image)
        fast = class_scores(ens, raw)
        reference = reference_class_scores(ens, raw)
        np.testing.assert_array_equal(fast, reference)
        np.testing.assert_array_equal(fast, histogram_class_scores(ens, raw))
        assert label == int(np.argmax(reference)) + 1


def test_voting_time_grows_linearly_with_table_count(rng, bars):
    planes = [make_ensemble(rng, table_count=1).prepare(RawImage(image)) for image in bars.images[:20]]
    counts = [8, 32, 64]
    medians = []
    for count in counts:
        plan = make_ensemble(rng, table_count=count, with_tree=False).inference_plan()
        medians.append(LatencyStats.from_seconds(time_calls(plan.vote, planes * 5, warmup=5)).median_us)
    assert medians[0] < medians[-1]
    assert linear_fit_r2(counts, medians) >= 0.95
