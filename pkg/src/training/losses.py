"""
Global convex solvers over fixed histogram features.

Features are the sparse (N, sum of cell counts) matrix of word histograms,
one block of columns per table. Scores are s_i^c = W_c . H_i - T^c. Two
losses are supported:

- one-vs-all L1-hinge SVM, solved per class by dual coordinate descent;
- softmax, optionally blended with a KL term towards a teacher model's
  soft labels, solved with L-BFGS-B.

Both return the optimality certificate they stopped on: the largest
per-program duality gap for the SVM, the gradient 2-norm for softmax.
"""

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import optimize, sparse
from scipy.special import log_softmax, softmax

from src.utils.errors import ConfigError, DatasetFormatError, DimensionError, TrainingError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("svm", "softmax", "softmax-distill")
SVM_GRADIENTS = ("subgradient", "dual")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "softmax"
    regularization: float = 1.0
    distill_mix: float = 0.5
    distill_temperature: float = 1.0
    tolerance: float = 1e-4
    max_iterations: int = 1000
    svm_gradient: str = "subgradient"
    normalize_features: bool = True

    def validate(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"Unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.regularization <= 0:
            raise ConfigError(f"regularization must be > 0, got {self.regularization}")
        if not 0.0 <= self.distill_mix <= 1.0:
            raise ConfigError(f"distill_mix must lie in [0, 1], got {self.distill_mix}")
        if self.distill_temperature <= 0:
            raise ConfigError(f"distill_temperature must be > 0, got {self.distill_temperature}")
        if self.tolerance <= 0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.svm_gradient not in SVM_GRADIENTS:
            raise ConfigError(f"Unknown svm_gradient {self.svm_gradient!r}, expected one of {SVM_GRADIENTS}")


@dataclass(frozen=True, eq=False)
class SolveResult:
    weights: np.ndarray  # (features, C)
    biases: np.ndarray  # (C,)
    objective: float
    certificate: float
    iterations: int
    converged: bool
    dual: Optional[np.ndarray] = None  # SVM dual variables (N, C)


def histogram_matrix(cells: np.ndarray, cell_count: int) -> sparse.csr_matrix:
    """
    Per-image word counts as a sparse feature block

    Args:
        cells: int array (N, pixels) of table cells
        cell_count: Number of cells of the table

    Returns:
        float64 CSR matrix (N, cell_count)
    """
    count = cells.shape[0]
    rows = np.repeat(np.arange(count), cells.shape[1])
    block = sparse.coo_matrix(
        (np.ones(rows.size, dtype=np.float64), (rows, cells.reshape(-1))),
        shape=(count, cell_count),
    )
    return block.tocsr()


def normalize_columns(features: sparse.spmatrix) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """
    Divide every column by its mean nonzero value L1 / L0

    All-zero columns keep scale 1.

    Returns:
        (normalized CSR matrix, scales of length n_columns)
    """
    features = sparse.csc_matrix(features, dtype=np.float64)
    features.eliminate_zeros()
    l1 = np.asarray(abs(features).sum(axis=0)).ravel()
    l0 = np.diff(features.indptr)
    scales = np.ones(features.shape[1], dtype=np.float64)
    active = l0 > 0
    scales[active] = l1[active] / l0[active]
    normalized = features @ sparse.diags(1.0 / scales)
    return sparse.csr_matrix(normalized), scales


def one_vs_all_labels(labels: np.ndarray, class_count: int) -> np.ndarray:
    """y_{i,c} = 2 delta(y_i, c) - 1 as an (N, C) array"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > class_count):
        raise DimensionError(f"Labels must lie in 1..{class_count}")
    y = -np.ones((labels.size, class_count), dtype=np.float64)
    y[np.arange(labels.size), labels - 1] = 1.0
    return y


def class_scores_matrix(features, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    return np.asarray(features @ weights) - biases[np.newaxis, :]


# -- SVM --------------------------------------------------------------------


def _optimal_bias(outputs: np.ndarray, y: np.ndarray) -> float:
    """
    Bias b minimizing sum_i max(0, 1 - y_i (f_i - b)) for fixed outputs f

    The hinge sum is piecewise linear in b with breakpoints f_i - y_i and
    slope -n_neg + (breakpoints passed), so its minimizers are the interval
    between the n_neg-th and the next breakpoint; the midpoint is returned.
    """
    breakpoints = np.sort(outputs - y)
    negatives = int((y < 0).sum())
    low = breakpoints[negatives - 1] if negatives > 0 else None
    high = breakpoints[negatives] if negatives < breakpoints.size else None
    if low is None:
        return float(high)
    if high is None:
        return float(low)
    return float(0.5 * (low + high))


def _svm_program(features: sparse.csr_matrix, columns: sparse.csc_matrix, y: np.ndarray, upper: float,
                 tol: float, max_iterations: int, cache_rows: int = 128):
    """
    Pairwise dual coordinate descent for one binary L1-hinge program

    min 1/2 ||w||^2 + upper * sum_i max(0, 1 - y_i (w.x_i - b)), b free.

    The dual keeps 0 <= alpha_i <= upper and sum_i alpha_i y_i = 0; every
    step moves the maximal violating pair along that constraint. One epoch is
    N pair steps, after which the duality gap P(w, b*) - D(alpha) is checked
    with b* the exact minimizer of the primal for the current w.
    """
    count = features.shape[0]
    q_diag = np.asarray(features.multiply(features).sum(axis=1)).ravel()
    alpha = np.zeros(count, dtype=np.float64)
    w = np.zeros(features.shape[1], dtype=np.float64)
    gradient = -np.ones(count, dtype=np.float64)  # y_i w.x_i - 1
    positive = y > 0

    @lru_cache(maxsize=cache_rows)
    def kernel_column(i: int) -> np.ndarray:
        start, end = features.indptr[i], features.indptr[i + 1]
        return np.asarray(columns[:, features.indices[start:end]] @ features.data[start:end]).ravel()

    def certificate():
        outputs = features @ w
        bias = _optimal_bias(outputs, y)
        half_norm = 0.5 * w.dot(w)
        primal = half_norm + upper * np.maximum(0.0, 1.0 - y * (outputs - bias)).sum()
        dual = alpha.sum() - half_norm
        return bias, primal, primal - dual, y * outputs - 1.0

    for epoch in range(1, max_iterations + 1):
        optimal = False
        for _ in range(count):
            score = -y * gradient
            up = np.where(positive, alpha < upper, alpha > 0)
            low = np.where(positive, alpha > 0, alpha < upper)
            if not up.any() or not low.any():
                optimal = True
                break
            i = int(np.argmax(np.where(up, score, -np.inf)))
            j = int(np.argmin(np.where(low, score, np.inf)))
            violation = score[i] - score[j]
            if violation <= 1e-12:
                optimal = True
                break
            column_i, column_j = kernel_column(i), kernel_column(j)
            curvature = max(q_diag[i] + q_diag[j] - 2.0 * column_i[j], 1e-12)
            step = violation / curvature
            step = min(step, upper - alpha[i] if positive[i] else alpha[i])
            step = min(step, alpha[j] if positive[j] else upper - alpha[j])
            alpha[i] += y[i] * step
            alpha[j] -= y[j] * step
            for k, sign in ((i, 1.0), (j, -1.0)):
                start, end = features.indptr[k], features.indptr[k + 1]
                w[features.indices[start:end]] += sign * step * features.data[start:end]
            gradient += step * y * (column_i - column_j)

        bias, primal, gap, gradient = certificate()
        if gap <= tol or optimal:
            return w, bias, alpha, primal, gap, epoch, gap <= tol
    return w, bias, alpha, primal, gap, epoch, False


def solve_svm(features, labels: np.ndarray, class_count: int, regularization: float = 1.0,
              tol: float = 1e-4, max_iterations: int = 1000) -> SolveResult:
    """
    One-vs-all SVM, one independent program per class

    Minimizes 1/2 ||W_c||^2 + Λ sum_i max(1 - y_{i,c} s_i^c, 0) for every c
    with s_i^c = W_c . H_i - T^c. The biases are free (not regularized).

    Args:
        features: Sparse (N, F) feature matrix
        labels: Labels in 1..C
        class_count: C
        regularization: Λ
        tol: Duality gap P - D every program must reach
        max_iterations: Epochs (N pair steps each) per program

    Returns:
        SolveResult whose certificate is the largest per-program gap
    """
    if class_count < 2:
        raise TrainingError("SVM training needs at least 2 classes")
    features = sparse.csr_matrix(features, dtype=np.float64)
    columns = features.tocsc()
    count, width = features.shape
    y = one_vs_all_labels(labels, class_count)

    weights = np.zeros((width, class_count), dtype=np.float64)
    biases = np.zeros(class_count, dtype=np.float64)
    dual = np.zeros((count, class_count), dtype=np.float64)
    objective, certificate, iterations, converged = 0.0, 0.0, 0, True
    for c in range(class_count):
        w, bias, alpha, primal, gap, epochs, ok = _svm_program(
            features, columns, y[:, c], regularization, tol, max_iterations
        )
        weights[:, c] = w
        biases[c] = bias
        dual[:, c] = alpha
        objective += primal
        certificate = max(certificate, gap)
        iterations = max(iterations, epochs)
        if not ok:
            converged = False
            logger.warning("SVM program for class %d stopped after %d epochs with gap %.3g", c + 1, epochs, gap)
    return SolveResult(weights, biases, objective, certificate, iterations, converged, dual)


# -- softmax ----------------------------------------------------------------


def soften(probabilities: np.ndarray, temperature: float) -> np.ndarray:
    """Raise probabilities to 1/T and renormalize"""
    if temperature == 1.0:
        return probabilities
    with np.errstate(divide="ignore"):
        logits = np.log(probabilities) / temperature
    return softmax(logits, axis=1)


def validate_soft_labels(teacher: np.ndarray, count: int, class_count: int) -> np.ndarray:
    teacher = np.asarray(teacher, dtype=np.float64)
    if teacher.shape != (count, class_count):
        raise DimensionError(f"Soft labels must be ({count}, {class_count}), got {teacher.shape}")
    if (teacher < 0).any() or not np.allclose(teacher.sum(axis=1), 1.0, atol=1e-6):
        raise TrainingError("Soft label rows must be nonnegative and sum to 1")
    return teacher


def _kl_rows(target: np.ndarray, log_model: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(target > 0, target * (np.log(target) - log_model), 0.0)
    return terms.sum(axis=1)


def distill_loss(scores: np.ndarray, labels: np.ndarray, teacher: np.ndarray,
                 mix: float, temperature: float) -> float:
    """
    Blend of softmax loss on the true labels and KL towards soft labels

    alpha * CE + (1 - alpha) * T^2 * sum_i KL(soften(teacher_i, T) || softmax(s_i / T))
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    teacher = validate_soft_labels(teacher, scores.shape[0], scores.shape[1])
    cross_entropy = -log_softmax(scores, axis=1)[np.arange(labels.size), labels - 1].sum()
    kl = _kl_rows(soften(teacher, temperature), log_softmax(scores / temperature, axis=1)).sum()
    return float(mix * cross_entropy + (1.0 - mix) * temperature ** 2 * kl)


def _score_gradient(scores: np.ndarray, labels: np.ndarray, teacher: Optional[np.ndarray],
                    mix: float, temperature: float) -> Tuple[float, np.ndarray]:
    """Data loss and its gradient with respect to the score matrix"""
    log_p = log_softmax(scores, axis=1)
    probabilities = np.exp(log_p)
    rows = np.arange(labels.size)
    onehot = np.zeros_like(scores)
    onehot[rows, labels - 1] = 1.0
    loss = -log_p[rows, labels - 1].sum()
    grad = probabilities - onehot
    if teacher is None:
        return float(loss), grad

    target = soften(teacher, temperature)
    log_pt = log_softmax(scores / temperature, axis=1)
    kl = _kl_rows(target, log_pt).sum()
    loss = mix * loss + (1.0 - mix) * temperature ** 2 * kl
    grad = mix * grad + (1.0 - mix) * temperature * (np.exp(log_pt) - target)
    return float(loss), grad


def softmax_objective(weights: np.ndarray, biases: np.ndarray, features, labels: np.ndarray,
                      regularization: float, teacher: Optional[np.ndarray] = None,
                      mix: float = 1.0, temperature: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Regularized softmax (or distillation) objective with its gradient

    1/2 ||W||^2 + Λ * data loss; the biases are not regularized.

    Returns:
        (value, dW of shape (F, C), dT of shape (C,))
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = class_scores_matrix(features, weights, biases)
    loss, dscores = _score_gradient(scores, labels, teacher, mix, temperature)
    dscores *= regularization
    value = 0.5 * float((weights * weights).sum()) + regularization * loss
    d_weights = weights + np.asarray(features.T @ dscores)
    d_biases = -dscores.sum(axis=0)
    return value, d_weights, d_biases


class SoftmaxObjective:
    """
    Flat-vector wrapper for scipy optimizers

    ``__call__`` returns (value, gradient) for theta = [W.ravel(), T].
    """

    def __init__(self, features, labels, class_count: int, regularization: float,
                 teacher: Optional[np.ndarray] = None, mix: float = 1.0, temperature: float = 1.0):
        self.features = sparse.csr_matrix(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_count = class_count
        self.regularization = regularization
        self.teacher = teacher
        self.mix = mix
        self.temperature = temperature
        self.width = self.features.shape[1]

    def unpack(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        split = self.width * self.class_count
        return theta[:split].reshape(self.width, self.class_count), theta[split:]

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        weights, biases = self.unpack(theta)
        value, d_weights, d_biases = softmax_objective(
            weights, biases, self.features, self.labels, self.regularization,
            self.teacher, self.mix, self.temperature,
        )
        return value, np.concatenate([d_weights.ravel(), d_biases])


def solve_softmax(features, labels: np.ndarray, class_count: int, regularization: float = 1.0,
                  tol: float = 1e-4, max_iterations: int = 1000, teacher: Optional[np.ndarray] = None,
                  mix: float = 0.5, temperature: float = 1.0,
                  initial: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> SolveResult:
    """
    Minimize the regularized softmax (or distillation) objective

    The biases are only defined up to a common constant; the returned
    biases are centered to mean 0.

    Args:
        features: Sparse (N, F) feature matrix
        labels: Labels in 1..C
        class_count: C
        regularization: Λ
        tol: Largest allowed gradient 2-norm at return
        max_iterations: L-BFGS iterations
        teacher: Optional (N, C) soft labels; enables the distillation blend
        mix: Weight alpha of the true-label term when distilling
        temperature: Distillation temperature T_d
        initial: Optional (W, T) starting point

    Returns:
        SolveResult whose certificate is the gradient 2-norm
    """
    labels = np.asarray(labels, dtype=np.int64)
    if teacher is not None:
        teacher = validate_soft_labels(teacher, labels.size, class_count)
    else:
        mix = 1.0
    objective = SoftmaxObjective(features, labels, class_count, regularization, teacher, mix, temperature)
    theta0 = np.zeros(objective.width * class_count + class_count)
    if initial is not None:
        theta0[:objective.width * class_count] = np.asarray(initial[0]).ravel()
        theta0[objective.width * class_count:] = initial[1]

    result = optimize.minimize(
        objective, theta0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iterations, "gtol": tol / np.sqrt(theta0.size), "ftol": 0.0},
    )
    value, gradient = objective(result.x)
    certificate = float(np.linalg.norm(gradient))
    converged = certificate <= tol
    if not converged:
        logger.warning(
            "Softmax solve stopped after %d iterations with gradient norm %.3g (%s)",
            result.nit, certificate, result.message,
        )
    weights, biases = objective.unpack(result.x)
    biases = biases - biases.mean()
    return SolveResult(weights.copy(), biases, float(value), certificate, int(result.nit), converged)


def solve(features, labels: np.ndarray, class_count: int, config: LossConfig,
          teacher: Optional[np.ndarray] = None) -> SolveResult:
    """Dispatch to the solver of the configured loss"""
    config.validate()
    if config.kind == "svm":
        return solve_svm(features, labels, class_count, config.regularization,
                         config.tolerance, config.max_iterations)
    if config.kind == "softmax-distill":
        if teacher is None:
            raise TrainingError("Distillation loss needs soft labels")
        return solve_softmax(features, labels, class_count, config.regularization, config.tolerance,
                             config.max_iterations, teacher, config.distill_mix, config.distill_temperature)
    return solve_softmax(features, labels, class_count, config.regularization,
                         config.tolerance, config.max_iterations)


def loss_gradients(weights: np.ndarray, biases: np.ndarray, features, labels: np.ndarray,
                   config: LossConfig, teacher: Optional[np.ndarray] = None,
                   dual: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-example, per-class loss gradients g_i^c = dL / ds_i^c

    SVM: -y_{i,c} on margin violators (or -alpha_i y_{i,c} with the dual
    variant). Softmax: p_i^c - delta(y_i, c). Distillation blends the
    softmax gradient with the temperature-scaled gradient towards the soft
    labels.

    Returns:
        (N, C) float64 array
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = class_scores_matrix(features, weights, biases)
    if scores.shape[0] != labels.size:
        raise DimensionError(f"{scores.shape[0]} score rows for {labels.size} labels")
    class_count = scores.shape[1]

    if config.kind == "svm":
        y = one_vs_all_labels(labels, class_count)
        if config.svm_gradient == "dual":
            if dual is None or dual.shape != scores.shape:
                raise DimensionError("Dual SVM gradients need the (N, C) dual variables")
            return -dual * y
        return -y * (1.0 - y * scores > 0)

    if config.kind == "softmax-distill":
        if teacher is None:
            raise TrainingError("Distillation loss needs soft labels")
        teacher = validate_soft_labels(teacher, labels.size, class_count)
        _, grad = _score_gradient(scores, labels, teacher, config.distill_mix, config.distill_temperature)
        return grad
    _, grad = _score_gradient(scores, labels, None, 1.0, 1.0)
    return grad


# -- soft label files -------------------------------------------------------

_SOFT_HEADER = struct.Struct("<IIf")


def write_soft_labels(path: Path, probabilities: np.ndarray, temperature: float = 1.0):
    """Header (N u32, C u32, temperature f32) followed by N x C f32 rows"""
    probabilities = np.asarray(probabilities, dtype="<f4")
    count, class_count = probabilities.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_SOFT_HEADER.pack(count, class_count, temperature) + probabilities.tobytes())


def read_soft_labels(path: Path) -> Tuple[np.ndarray, float]:
    """
    Read a soft label file

    Returns:
        ((N, C) float64 probabilities, provenance temperature)
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"Soft label file not found: {path}")
    data = path.read_bytes()
    if len(data) < _SOFT_HEADER.size:
        raise DatasetFormatError(f"Soft label file {path} is truncated")
    count, class_count, temperature = _SOFT_HEADER.unpack_from(data)
    expected = _SOFT_HEADER.size + 4 * count * class_count
    if len(data) != expected:
        raise DatasetFormatError(f"Soft label file {path} has {len(data)} bytes, expected {expected}")
    rows = np.frombuffer(data, dtype="<f4", offset=_SOFT_HEADER.size).reshape(count, class_count)
    return rows.astype(np.float64), float(temperature)
