import numpy as np
import pytest
from scipy import sparse
from scipy.special import softmax

from src.training.losses import (
    LossConfig,
    SoftmaxObjective,
    class_scores_matrix,
    distill_loss,
    histogram_matrix,
    loss_gradients,
    normalize_columns,
    one_vs_all_labels,
    read_soft_labels,
    softmax_objective,
    solve,
    solve_softmax,
    solve_svm,
    write_soft_labels,
)
from src.utils.errors import ConfigError, DatasetFormatError, DimensionError, TrainingError


@pytest.fixture
def problem(rng):
    """Small separable-ish problem: 30 examples, 8 count features, 3 classes"""
    labels = np.repeat([1, 2, 3], 10)
    counts = rng.poisson(1.0, size=(30, 8)).astype(np.float64)
    counts[np.arange(30), labels + 2] += 4.0
    return sparse.csr_matrix(counts), labels


def _numeric_gradient(fn, theta, eps=1e-6):
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        step = np.zeros_like(theta)
        step[k] = eps
        grad[k] = (fn(theta + step)[0] - fn(theta - step)[0]) / (2 * eps)
    return grad


def test_histogram_matrix_counts():
    cells = np.array([[0, 1, 1, 3], [2, 2, 2, 2]])
    features = histogram_matrix(cells, 4).toarray()
    np.testing.assert_array_equal(features, [[1, 2, 0, 1], [0, 0, 4, 0]])


def test_normalize_columns():
    features = sparse.csr_matrix(np.array([[2.0, 0.0, 1.0], [4.0, 0.0, 0.0]]))
    normalized, scales = normalize_columns(features)
    np.testing.assert_allclose(scales, [3.0, 1.0, 1.0])
    np.testing.assert_allclose(normalized.toarray(), [[2 / 3, 0.0, 1.0], [4 / 3, 0.0, 0.0]])


def test_one_vs_all_labels():
    np.testing.assert_array_equal(one_vs_all_labels(np.array([2, 1]), 3), [[-1, 1, -1], [1, -1, -1]])
    with pytest.raises(DimensionError):
        one_vs_all_labels(np.array([0]), 3)


def test_softmax_gradient_matches_finite_differences(problem, rng):
    features, labels = problem
    objective = SoftmaxObjective(features, labels, 3, regularization=0.7)
    theta = rng.normal(scale=0.3, size=8 * 3 + 3)
    _, grad = objective(theta)
    np.testing.assert_allclose(grad, _numeric_gradient(objective, theta), rtol=1e-5, atol=1e-5)


def test_distillation_gradient_matches_finite_differences(problem, rng):
    features, labels = problem
    teacher = softmax(rng.normal(size=(30, 3)), axis=1)
    objective = SoftmaxObjective(features, labels, 3, 1.3, teacher, mix=0.4, temperature=2.5)
    theta = rng.normal(scale=0.3, size=8 * 3 + 3)
    _, grad = objective(theta)
    np.testing.assert_allclose(grad, _numeric_gradient(objective, theta), rtol=1e-5, atol=1e-5)


def test_distill_loss_reduces_to_cross_entropy(rng):
    scores = rng.normal(size=(5, 3))
    labels = np.array([1, 2, 3, 1, 2])
    teacher = softmax(rng.normal(size=(5, 3)), axis=1)
    pure = distill_loss(scores, labels, teacher, mix=1.0, temperature=3.0)
    expected = -np.log(softmax(scores, axis=1)[np.arange(5), labels - 1]).sum()
    assert pure == pytest.approx(expected)
    # matching the teacher exactly leaves no KL term
    matched = distill_loss(np.log(teacher), labels, teacher, mix=0.0, temperature=1.0)
    assert matched == pytest.approx(0.0, abs=1e-10)


def test_objective_pieces(problem):
    features, labels = problem
    weights = np.zeros((8, 3))
    value, d_weights, d_biases = softmax_objective(weights, np.zeros(3), features, labels, 2.0)
    assert value == pytest.approx(2.0 * 30 * np.log(3))
    # balanced labels: bias gradient vanishes at the origin
    np.testing.assert_allclose(d_biases, 0.0, atol=1e-12)
    assert d_weights.shape == (8, 3)


def test_softmax_solver_reaches_tolerance(problem):
    features, labels = problem
    result = solve_softmax(features, labels, 3, regularization=1.0, tol=1e-5, max_iterations=2000)
    assert result.converged
    assert result.certificate <= 1e-5
    # the certificate is the full gradient 2-norm, not its largest entry
    _, d_weights, d_biases = softmax_objective(result.weights, result.biases, features, labels, 1.0)
    norm = np.sqrt((d_weights ** 2).sum() + (d_biases ** 2).sum())
    assert norm <= 1e-5
    assert result.certificate == pytest.approx(norm, rel=1e-4, abs=1e-9)
    assert result.biases.mean() == pytest.approx(0.0, abs=1e-12)
    scores = class_scores_matrix(features, result.weights, result.biases)
    assert (np.argmax(scores, axis=1) + 1 == labels).mean() > 0.9


def test_svm_solver_reaches_gap_and_matches_dual(problem):
    features, labels = problem
    result = solve_svm(features, labels, 3, regularization=1.0, tol=1e-4, max_iterations=2000)
    assert result.converged
    assert result.certificate <= 1e-4
    y = one_vs_all_labels(labels, 3)
    assert ((result.dual >= 0) & (result.dual <= 1.0)).all()
    # W = sum_i alpha_i y_i x_i with the dual equality constraint kept
    np.testing.assert_allclose(result.weights, features.T @ (result.dual * y), atol=1e-8)
    np.testing.assert_allclose((result.dual * y).sum(axis=0), 0.0, atol=1e-10)
    scores = class_scores_matrix(features, result.weights, result.biases)
    assert (np.argmax(scores, axis=1) + 1 == labels).mean() > 0.9


def test_svm_gap_is_absolute(problem):
    features, labels = problem
    y = one_vs_all_labels(labels, 3)
    result = solve_svm(features, labels, 3, regularization=5.0, tol=1e-6, max_iterations=5000)
    assert result.converged
    scores = class_scores_matrix(features, result.weights, result.biases)
    primal = (0.5 * (result.weights ** 2).sum(axis=0)
              + 5.0 * np.maximum(0.0, 1.0 - y * scores).sum(axis=0))
    dual = result.dual.sum(axis=0) - 0.5 * (result.weights ** 2).sum(axis=0)
    assert result.objective == pytest.approx(primal.sum(), rel=1e-9)
    assert (primal - dual).max() <= 1e-6


def test_svm_bias_is_not_regularized():
    # with no features the scores are -T alone; the hinge optimum puts every
    # example of the majority on the margin, so |T| = 1 whatever Λ is
    features = sparse.csr_matrix((10, 4))
    labels = np.array([1] * 8 + [2] * 2)
    result = solve_svm(features, labels, 2, regularization=1e-3, tol=1e-8)
    assert result.converged
    np.testing.assert_allclose(result.biases, [-1.0, 1.0])
    scores = class_scores_matrix(features, result.weights, result.biases)
    assert (np.argmax(scores, axis=1) == 0).all()


def test_svm_needs_two_classes(problem):
    features, _ = problem
    with pytest.raises(TrainingError):
        solve_svm(features, np.ones(30, dtype=int), 1)


def test_loss_gradients(problem, rng):
    features, labels = problem
    weights, biases = rng.normal(size=(8, 3)), rng.normal(size=3)
    softmax_grad = loss_gradients(weights, biases, features, labels, LossConfig(kind="softmax"))
    np.testing.assert_allclose(softmax_grad.sum(axis=1), 0.0, atol=1e-12)

    hinge = loss_gradients(weights, biases, features, labels, LossConfig(kind="svm"))
    y = one_vs_all_labels(labels, 3)
    scores = class_scores_matrix(features, weights, biases)
    np.testing.assert_array_equal(hinge, np.where(y * scores < 1, -y, 0.0))

    with pytest.raises(DimensionError):
        loss_gradients(weights, biases, features, labels, LossConfig(kind="svm", svm_gradient="dual"))
    dual = rng.uniform(size=(30, 3))
    np.testing.assert_allclose(
        loss_gradients(weights, biases, features, labels, LossConfig(kind="svm", svm_gradient="dual"),
                       dual=dual),
        -dual * y,
    )
    with pytest.raises(TrainingError):
        loss_gradients(weights, biases, features, labels, LossConfig(kind="softmax-distill"))


def test_pure_label_distillation_matches_softmax_gradients(problem, rng):
    features, labels = problem
    weights, biases = rng.normal(size=(8, 3)), rng.normal(size=3)
    teacher = softmax(rng.normal(size=(30, 3)), axis=1)
    plain = loss_gradients(weights, biases, features, labels, LossConfig(kind="softmax"))
    distilled = loss_gradients(weights, biases, features, labels,
                               LossConfig(kind="softmax-distill", distill_mix=1.0, distill_temperature=3.0),
                               teacher)
    np.testing.assert_allclose(distilled, plain, atol=1e-12)


def test_solve_dispatch(problem, rng):
    features, labels = problem
    teacher = softmax(rng.normal(size=(30, 3)), axis=1)
    distilled = solve(features, labels, 3, LossConfig(kind="softmax-distill", distill_mix=0.5), teacher)
    assert distilled.weights.shape == (8, 3)
    with pytest.raises(TrainingError):
        solve(features, labels, 3, LossConfig(kind="softmax-distill"))
    with pytest.raises(TrainingError):
        solve(features, labels, 3, LossConfig(kind="softmax-distill"), 2.0 * teacher)


def test_loss_config_validation():
    for bad in [dict(kind="hinge"), dict(regularization=0.0), dict(distill_mix=1.5),
                dict(distill_temperature=0.0), dict(svm_gradient="exact")]:
        with pytest.raises(ConfigError):
            LossConfig(**bad).validate()


def test_soft_label_files(tmp_path, rng):
    probabilities = softmax(rng.normal(size=(6, 4)), axis=1)
    path = tmp_path / "soft.bin"
    write_soft_labels(path, probabilities, temperature=2.0)
    read, temperature = read_soft_labels(path)
    np.testing.assert_allclose(read, probabilities, atol=1e-7)
    assert temperature == 2.0
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DatasetFormatError):
        read_soft_labels(path)
    with pytest.raises(DatasetFormatError):
        read_soft_labels(tmp_path / "missing.bin")
