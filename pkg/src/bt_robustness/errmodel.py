"""
Error detection model: which ASR edit operations hurt NLU robustness.

Samples whose hypothesis differs from the reference are featurized as bags of
serialized edit operations and labeled 1 when their change category is
negative under a robustness policy. An L2-regularized logistic regression is
fitted with full-batch gradient descent; its coefficients rank the operations.
"""

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
from pydantic import BaseModel, ValidationError

from .align import extract_editops, format_editop
from .corpus import DEFAULT_POLICY, NormalizationPolicy, Sample
from .errors import (
    ConvergenceError,
    CorpusError,
    SchemaError,
    SingleClassError,
    TrainingError,
)
from .logging_config import get_logger, log_function_call
from .robustness import RobustnessPolicy, categorize

logger = get_logger("errmodel")


@dataclass(frozen=True)
class FeatureVector:
    sample_id: str
    counts: dict[str, int]
    label: int


def backoff_feature(op_name: str) -> str:
    return f"*[{op_name}]"


def featurize(
    sample: Sample,
    policy: RobustnessPolicy,
    backoff: bool = False,
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> FeatureVector:
    """
    Bag of serialized edit operations of a sample and its label.

    The label is 1 when the sample's change category is negative under the
    policy (CtoI always is), 0 otherwise, including unchanged outcomes.

    Raises:
        CorpusError: If the hypothesis equals the reference
    """
    if not sample.differs(normalization):
        raise CorpusError(
            f"Sample {sample.id} has h = r and carries no edit operations",
            sample_id=sample.id,
        )
    assert sample.hypothesis is not None
    label = int(policy.is_negative(categorize(sample)))
    ops = extract_editops(sample.reference, sample.hypothesis)
    counts = Counter(format_editop(op) for op in ops)
    if backoff:
        counts.update(backoff_feature(op.name) for op in ops)
    return FeatureVector(sample.id, dict(counts), label)


@dataclass(frozen=True)
class Dataset:
    """Dense design matrix over a sorted feature vocabulary."""

    features: np.ndarray
    labels: np.ndarray
    vocabulary: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)


def dataset_from_vectors(
    vectors: Iterable[FeatureVector], min_feature_frequency: int = 1
) -> Dataset:
    vectors = list(vectors)
    totals: Counter[str] = Counter()
    for vector in vectors:
        totals.update(vector.counts)
    vocabulary = tuple(sorted(f for f, n in totals.items() if n >= min_feature_frequency))
    index = {feature: i for i, feature in enumerate(vocabulary)}

    features = np.zeros((len(vectors), len(vocabulary)), dtype=np.float64)
    for row, vector in enumerate(vectors):
        for feature, count in vector.counts.items():
            column = index.get(feature)
            if column is not None:
                features[row, column] = count
    labels = np.array([v.label for v in vectors], dtype=np.float64)
    return Dataset(features, labels, vocabulary, tuple(v.sample_id for v in vectors))


def build_dataset(
    corpus: Iterable[Sample],
    policy: RobustnessPolicy,
    min_feature_frequency: int = 1,
    backoff: bool = False,
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> Dataset:
    """
    Featurize every sample with h != r; features occurring fewer than
    ``min_feature_frequency`` times in total are dropped.
    """
    if min_feature_frequency < 1:
        raise TrainingError("min_feature_frequency must be >= 1")
    vectors = [
        featurize(sample, policy, backoff, normalization)
        for sample in corpus
        if sample.differs(normalization)
    ]
    dataset = dataset_from_vectors(vectors, min_feature_frequency)
    logger.info(
        f"Built dataset for {policy.name}: {len(dataset)} examples, "
        f"{len(dataset.vocabulary)} features, {int(dataset.labels.sum())} negative-impact"
    )
    return dataset


@dataclass(frozen=True)
class LogRegHyperparams:
    l2_lambda: float = 1.0
    tolerance: float = 1e-6
    max_iterations: int = 10000
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    min_step: float = 1e-12

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise TrainingError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.tolerance <= 0:
            raise TrainingError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 0:
            raise TrainingError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if not 0 < self.backtrack_factor < 1 or not 0 < self.armijo_c < 1:
            raise TrainingError("backtrack_factor and armijo_c must lie in (0, 1)")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2_lambda: float) -> float:
    """
    Negative log-likelihood plus lambda/2 * ||w||^2.

    ``theta`` holds the weights followed by the (unregularized) bias.
    """
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    nll = np.sum(np.logaddexp(0.0, z) - y * z)
    return float(nll + 0.5 * l2_lambda * np.dot(w, w))


def gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2_lambda: float) -> np.ndarray:
    w, b = theta[:-1], theta[-1]
    residual = _sigmoid(X @ w + b) - y
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ residual + l2_lambda * w
    grad[-1] = residual.sum()
    return grad


@dataclass
class ErrorModel:
    vocabulary: tuple[str, ...]
    weights: np.ndarray
    bias: float
    hyperparams: LogRegHyperparams = field(default_factory=LogRegHyperparams)
    metadata: dict[str, Any] = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.weights) != len(self.vocabulary):
            raise TrainingError(
                f"{len(self.weights)} weights for {len(self.vocabulary)} features"
            )

    @property
    def index(self) -> dict[str, int]:
        return {feature: i for i, feature in enumerate(self.vocabulary)}

    def weight(self, feature: str) -> float:
        return float(self.weights[self.index[feature]])

    def predict_proba(self, features: np.ndarray | Mapping[str, int]) -> np.ndarray | float:
        """
        P(Y=1) for a design matrix, or for one bag of features given as a
        mapping (features outside the vocabulary are ignored).
        """
        if isinstance(features, np.ndarray):
            return _sigmoid(features @ self.weights + self.bias)
        index = self.index
        z = self.bias + sum(
            count * self.weights[index[f]] for f, count in features.items() if f in index
        )
        return float(_sigmoid(np.array(z)))


@log_function_call(logger)
def train_logreg(
    dataset: Dataset, hyperparams: LogRegHyperparams = LogRegHyperparams()
) -> ErrorModel:
    """
    Fit the L2-regularized logistic regression by full-batch gradient descent.

    Each iteration tries a Barzilai-Borwein step and backtracks until the
    Armijo condition holds, so the loss never increases. With max_iterations=0
    the initial model (all zeros, every prediction 0.5) is returned.

    Raises:
        SingleClassError: If the labels are not a mix of 0 and 1
        ConvergenceError: If the gradient norm stays above the tolerance
    """
    X, y = dataset.features, dataset.labels
    positives = int(y.sum())
    if positives == 0 or positives == len(y):
        raise SingleClassError(
            f"Training needs both classes, got {positives} of {len(y)} examples labeled 1",
            examples=len(y),
            positives=positives,
        )

    lam = hyperparams.l2_lambda
    theta = np.zeros(X.shape[1] + 1)
    loss = objective(theta, X, y, lam)
    grad = gradient(theta, X, y, lam)
    history = [loss]
    step = 1.0
    iterations = 0
    converged = float(np.linalg.norm(grad)) <= hyperparams.tolerance

    while not converged and iterations < hyperparams.max_iterations:
        direction = -grad
        slope = float(grad @ direction)
        grad_norm = float(np.linalg.norm(grad))
        while True:
            candidate = theta + step * direction
            candidate_loss = objective(candidate, X, y, lam)
            candidate_grad = gradient(candidate, X, y, lam)
            if candidate_loss <= loss + hyperparams.armijo_c * step * slope:
                break
            # near the optimum the sufficient decrease drowns in rounding noise
            if candidate_loss <= loss and np.linalg.norm(candidate_grad) < grad_norm:
                break
            step *= hyperparams.backtrack_factor
            if step < hyperparams.min_step:
                raise ConvergenceError(
                    f"Line search failed after {iterations} iterations; "
                    f"gradient norm {np.linalg.norm(grad):.3e}",
                    iterations=iterations,
                    gradient_norm=float(np.linalg.norm(grad)),
                )
        s, g_diff = candidate - theta, candidate_grad - grad
        curvature = float(s @ g_diff)
        theta, loss, grad = candidate, candidate_loss, candidate_grad
        history.append(loss)
        iterations += 1
        converged = float(np.linalg.norm(grad)) <= hyperparams.tolerance
        # Barzilai-Borwein guess for the next trial step
        step = float(s @ s) / curvature if curvature > 0 else 1.0

    gradient_norm = float(np.linalg.norm(grad))
    if hyperparams.max_iterations > 0 and not converged:
        raise ConvergenceError(
            f"No convergence within {hyperparams.max_iterations} iterations; "
            f"gradient norm {gradient_norm:.3e}",
            iterations=iterations,
            gradient_norm=gradient_norm,
        )
    logger.info(
        f"Trained error model: {iterations} iterations, loss {loss:.6f}, "
        f"gradient norm {gradient_norm:.2e}"
    )
    return ErrorModel(
        vocabulary=dataset.vocabulary,
        weights=theta[:-1].copy(),
        bias=float(theta[-1]),
        hyperparams=hyperparams,
        metadata={
            "examples": len(y),
            "positives": positives,
            "iterations": iterations,
            "final_loss": loss,
            "gradient_norm": gradient_norm,
            "converged": converged,
        },
        loss_history=history,
    )


def rank_errors(model: ErrorModel, k: int) -> list[tuple[str, float]]:
    """Top-k features by coefficient, descending; ties in feature order."""
    if k < 0:
        raise TrainingError(f"k must be >= 0, got {k}")
    if k > len(model.vocabulary):
        logger.info(f"Requested top {k} but the model has {len(model.vocabulary)} features")
    ranked = sorted(
        zip(model.vocabulary, (float(w) for w in model.weights)),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def rank_frequency(
    corpus: Iterable[Sample],
    k: int,
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> list[tuple[str, int]]:
    """Top-k serialized operations by count over samples with h != r."""
    counts: Counter[str] = Counter()
    for sample in corpus:
        if sample.hypothesis is None or not sample.differs(normalization):
            continue
        counts.update(
            format_editop(op) for op in extract_editops(sample.reference, sample.hypothesis)
        )
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:k]


class _ModelRecord(BaseModel):
    hyperparameters: dict[str, float | int]
    vocabulary: list[str]
    weights: list[float]
    bias: float
    metadata: dict[str, Any] = {}


def save_model(model: ErrorModel, path: str | Path) -> None:
    record = {
        "hyperparameters": asdict(model.hyperparams),
        "vocabulary": list(model.vocabulary),
        "weights": [float(w) for w in model.weights],
        "bias": model.bias,
        "metadata": model.metadata,
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, ensure_ascii=False)


def load_model(path: str | Path) -> ErrorModel:
    """
    Raises:
        SchemaError: If the file is not a valid model file
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            record = _ModelRecord.model_validate(json.load(f))
        except (json.JSONDecodeError, ValidationError) as e:
            raise SchemaError(f"Invalid model file {path}: {e}") from e
    try:
        hyperparams = LogRegHyperparams(**record.hyperparameters)  # type: ignore[arg-type]
    except TypeError as e:
        raise SchemaError(f"Invalid hyperparameters in {path}: {e}") from e
    return ErrorModel(
        vocabulary=tuple(record.vocabulary),
        weights=np.array(record.weights, dtype=np.float64),
        bias=record.bias,
        hyperparams=hyperparams,
        metadata=record.metadata,
    )
