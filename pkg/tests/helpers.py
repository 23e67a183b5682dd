import numpy as np

from src.classifier.ensemble import ConvTable, Ensemble
from src.features.channels import PrepConfig, layout_metadata, prepare_batch
from src.features.words import Fern, LongTree, TreeNode
from src.training.growth import CandidatePrior, TrainingSample
from src.training.trainer import aggregation_area

SMALL_PREP = PrepConfig(orientation_count=4, smoothing_radius=1)


def make_sample(dataset, prep=SMALL_PREP, patch_size=5, margin=1) -> TrainingSample:
    _, height, width, depth = dataset.images.shape
    kinds, widths = layout_metadata(depth, width, height, prep)
    area = aggregation_area(width, height, patch_size, margin)
    tensor = prepare_batch(dataset.images, prep)
    return TrainingSample(tensor, dataset.labels.astype(np.int64), dataset.class_count, area, kinds, widths)


def random_fern(kinds, widths, rng, bit_count=6, patch_size=5) -> Fern:
    """Fern of random bits with thresholds inside the typical pixel range"""
    prior = CandidatePrior(kinds, widths, rng, patch_size)
    bits = []
    for _ in range(bit_count):
        bit = prior.draw()
        if bit.kind.thresholded:
            bit = bit.with_threshold(rng.uniform(-0.2, 0.5))
        bits.append(bit)
    return Fern(tuple(bits), patch_size)


def random_tree(kinds, widths, rng, patch_size=5) -> LongTree:
    """Two-stage 3-2 bit tree with a random directing table"""
    bits = lambda k: random_fern(kinds, widths, rng, bit_count=k, patch_size=patch_size).bits
    root = TreeNode(bits(3), tuple(int(v) for v in rng.integers(1, 3, size=8)))
    children = (TreeNode(bits(2)), TreeNode(bits(2)))
    return LongTree((3, 2), (2,), ((root,), children), patch_size=patch_size)


def make_ensemble(rng, class_count=3, table_count=4, with_tree=True, scales=False,
                  integer_weights=False) -> Ensemble:
    """
    Random-weight ensemble for 16x16 gray images

    Integer weights keep every float32 vote sum exact, so all scoring paths
    must agree bit for bit.
    """
    def draw(*shape):
        return np.round(rng.normal(scale=4.0, size=shape)) if integer_weights else rng.normal(size=shape)

    kinds, widths = layout_metadata(1, 16, 16, SMALL_PREP)
    area = aggregation_area(16, 16, 5, 1)
    calculators = [random_fern(kinds, widths, rng, bit_count=6) for _ in range(table_count)]
    if with_tree:
        calculators.append(random_tree(kinds, widths, rng))
    tables = tuple(
        ConvTable(calc, area, draw(calc.cell_count, class_count))
        for calc in calculators
    )
    feature_scales = None
    if scales:
        feature_scales = tuple(rng.uniform(0.5, 2.0, size=t.calculator.cell_count) for t in tables)
    return Ensemble(tables, draw(class_count), class_count, SMALL_PREP, (16, 16, 1),
                    feature_scales=feature_scales)
