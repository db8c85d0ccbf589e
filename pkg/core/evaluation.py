"""
Evaluation Harness
Leave-one-bag-out cross-validation, per-fold PCA preprocessing and the
non-MIL QDA majority-vote baseline
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, List, Optional

import numpy as np
from scipy.stats import norm
from sklearn.decomposition import PCA
from sklearn.metrics import confusion_matrix
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from .config import settings
from .errors import ConfigurationError, InsufficientDataError, InvalidInputError
from .mil_engine import EmConfig, check_config_for_dataset, infer_bag, train
from .models.bag import Dataset
from .models.classifiers import ClassifierKind, fit_classifier

logger = logging.getLogger(__name__)

CONFIDENCE_LEVEL = 0.99
BASELINE_NAME = "non-mil/qda"
_THRESHOLD_SLACK = 1e-10


@dataclass(frozen=True)
class PcaTransform:
    """Standardize kept features, then project on the leading principal axes"""
    kept_features: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    components: np.ndarray
    retained_variance: float

    @property
    def q(self) -> int:
        return self.components.shape[1]

    def transform(self, instances) -> np.ndarray:
        """Project raw instances into the q retained components"""
        X = np.asarray(instances, dtype=float)
        return ((X[:, self.kept_features] - self.center) / self.scale) @ self.components


def fit_pca(instances, variance_threshold: float) -> PcaTransform:
    """Smallest number of standardized principal components reaching the variance threshold"""
    X = np.asarray(instances, dtype=float)
    if not 0.0 < variance_threshold <= 1.0:
        raise ConfigurationError(f"PCA variance threshold must lie in (0, 1], got {variance_threshold}")
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientDataError("PCA needs at least 2 instances")

    constant = np.ptp(X, axis=0) == 0
    if constant.any():
        logger.warning(f"Dropping {int(constant.sum())} constant feature(s) before PCA")
    kept = np.flatnonzero(~constant)
    if kept.size == 0:
        raise InsufficientDataError("every feature is constant, nothing to project")

    scaler = StandardScaler().fit(X[:, kept])
    Z = scaler.transform(X[:, kept])
    pca = PCA(svd_solver="full").fit(Z)

    cumulative = np.cumsum(pca.explained_variance_ratio_)
    q = int(min(np.searchsorted(cumulative, variance_threshold - _THRESHOLD_SLACK) + 1, cumulative.size))
    # fold the (near-zero) PCA mean of the standardized data into the centering
    center = scaler.mean_ + scaler.scale_ * pca.mean_
    logger.info(f"PCA keeps {q} of {kept.size} components ({cumulative[q - 1]:.4f} of the variance)")
    return PcaTransform(
        kept_features=kept,
        center=center,
        scale=scaler.scale_.copy(),
        components=pca.components_[:q].T.copy(),
        retained_variance=float(cumulative[q - 1]),
    )


def majority_vote(labels, t: int) -> int:
    """Most frequent label, the lower label on ties"""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=t + 1)[1:]
    return int(np.argmax(counts)) + 1


@dataclass
class FoldPrediction:
    """Held-out prediction for one bag"""
    bag_index: int
    bag_id: str
    true_label: int
    predicted_label: Optional[int] = None
    instance_predictions: Optional[np.ndarray] = None
    gold_labels: Optional[np.ndarray] = None
    label_scores: Optional[np.ndarray] = None
    degenerate_reason: Optional[str] = None

    @property
    def degenerate(self) -> bool:
        return self.degenerate_reason is not None


@dataclass
class EvalReport:
    """Accuracies, confusion matrices and likelihood of one model under LOBO"""
    name: str
    t: int
    n_bags: int
    bag_accuracy: float
    bag_confusion: np.ndarray
    folds: List[FoldPrediction] = field(default_factory=list)
    instance_accuracy: Optional[float] = None
    instance_confusion: Optional[np.ndarray] = None
    train_loglik: Optional[float] = None
    degenerate_folds: int = 0
    bag_ci_halfwidth: float = 0.0
    instance_ci_halfwidth: Optional[float] = None
    iteration_count: Optional[int] = None
    converged: Optional[bool] = None
    pca_components: Optional[int] = None

    @property
    def chance_rate(self) -> float:
        return 1.0 / self.t

    @property
    def evaluated_folds(self) -> int:
        return self.n_bags - self.degenerate_folds


def bernoulli_halfwidth(accuracy: float, trials: int, level: float = CONFIDENCE_LEVEL) -> float:
    if trials == 0:
        return 0.0
    z = float(norm.ppf(0.5 + level / 2.0))
    return z * float(np.sqrt(accuracy * (1.0 - accuracy) / trials))


def _prepare_fold(dataset: Dataset, index: int, pca_threshold: Optional[float]):
    """Training set and held-out instances, projected by a PCA fitted on training bags only"""
    training = dataset.subset([j for j in range(dataset.n) if j != index])
    test_instances = dataset.bags[index].without_bag_label().instances
    pca = None
    if pca_threshold is not None:
        pca = fit_pca(training.pooled_instances(), pca_threshold)
        training = training.map_instances(pca.transform)
        test_instances = pca.transform(test_instances)
    return training, test_instances, pca


def _missing_classes(training: Dataset, required: np.ndarray) -> List[int]:
    present = set(training.bag_labels().tolist())
    return [int(label) for label in required if label not in present]


def _mark_starved(fold: FoldPrediction, error: InsufficientDataError) -> None:
    """Record a fold whose fit ran out of data for some class"""
    fold.degenerate_reason = str(error)
    logger.warning(f"fold {fold.bag_index} ({fold.bag_id}) is degenerate: {error}")


def _mil_fold(index: int, dataset: Dataset, config: EmConfig, pca_threshold: Optional[float]) -> FoldPrediction:
    bag = dataset.bags[index]
    fold = FoldPrediction(bag_index=index, bag_id=bag.bag_id, true_label=bag.bag_label, gold_labels=bag.gold_labels)
    try:
        training, test_instances, _ = _prepare_fold(dataset, index, pca_threshold)
        missing = _missing_classes(training, np.unique(dataset.bag_labels()))
        if missing:
            fold.degenerate_reason = f"training bags lack class(es) {missing}"
            return fold
        result = train(training, config)
        inference = infer_bag(result.params, test_instances)
    except InsufficientDataError as e:
        _mark_starved(fold, e)
        return fold

    fold.predicted_label = inference.bag_label
    fold.instance_predictions = inference.instance_labels
    fold.label_scores = inference.label_scores
    return fold


def _baseline_fold(index: int, dataset: Dataset, pca_threshold: Optional[float]) -> FoldPrediction:
    bag = dataset.bags[index]
    fold = FoldPrediction(bag_index=index, bag_id=bag.bag_id, true_label=bag.bag_label, gold_labels=bag.gold_labels)
    try:
        training, test_instances, _ = _prepare_fold(dataset, index, pca_threshold)
        missing = _missing_classes(training, np.unique(dataset.bag_labels()))
        if missing:
            fold.degenerate_reason = f"training bags lack class(es) {missing}"
            return fold
        pooled_labels = np.concatenate([np.full(b.m, b.bag_label) for b in training.bags])
        qda = fit_classifier(ClassifierKind.QDA, training.pooled_instances(), pooled_labels, dataset.t)
        instance_predictions = np.argmax(qda.predict_log_proba_many(test_instances), axis=1) + 1
    except InsufficientDataError as e:
        _mark_starved(fold, e)
        return fold

    fold.predicted_label = majority_vote(instance_predictions, dataset.t)
    fold.instance_predictions = instance_predictions
    return fold


def _run_folds(
    dataset: Dataset,
    fold_fn: Callable[[int], FoldPrediction],
    name: str,
    workers: Optional[int],
    show_progress: Optional[bool],
) -> List[FoldPrediction]:
    workers = workers or settings.EVAL_WORKERS
    show_progress = settings.SHOW_PROGRESS if show_progress is None else show_progress
    indices = range(dataset.n)
    progress = partial(tqdm, total=dataset.n, desc=name, unit="fold", disable=not show_progress, leave=False)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            folds = list(progress(executor.map(fold_fn, indices)))
    else:
        folds = [fold_fn(index) for index in progress(indices)]
    return sorted(folds, key=lambda fold: fold.bag_index)


def _build_report(dataset: Dataset, name: str, folds: List[FoldPrediction]) -> EvalReport:
    t = dataset.t
    labels = list(range(1, t + 1))
    evaluated = [fold for fold in folds if not fold.degenerate]
    degenerate = len(folds) - len(evaluated)
    if degenerate:
        logger.warning(f"{name}: {degenerate} degenerate fold(s) excluded from the accuracies")

    truth = np.array([fold.true_label for fold in evaluated], dtype=int)
    predicted = np.array([fold.predicted_label for fold in evaluated], dtype=int)
    bag_accuracy = float(np.mean(truth == predicted)) if evaluated else 0.0
    report = EvalReport(
        name=name,
        t=t,
        n_bags=dataset.n,
        bag_accuracy=bag_accuracy,
        bag_confusion=confusion_matrix(truth, predicted, labels=labels) if evaluated else np.zeros((t, t), dtype=int),
        folds=folds,
        degenerate_folds=degenerate,
        bag_ci_halfwidth=bernoulli_halfwidth(bag_accuracy, len(evaluated)),
    )

    if evaluated and all(fold.gold_labels is not None for fold in evaluated):
        gold = np.concatenate([fold.gold_labels for fold in evaluated])
        guessed = np.concatenate([fold.instance_predictions for fold in evaluated])
        report.instance_accuracy = float(np.mean(gold == guessed))
        report.instance_confusion = confusion_matrix(gold, guessed, labels=labels)
        report.instance_ci_halfwidth = bernoulli_halfwidth(report.instance_accuracy, gold.size)

    logger.info(
        f"{name}: bag accuracy {report.bag_accuracy:.3f}"
        + (f", instance accuracy {report.instance_accuracy:.3f}" if report.instance_accuracy is not None else "")
        + f" over {len(evaluated)} folds"
    )
    return report


def _check_eval_input(dataset: Dataset):
    if dataset.n < 2:
        raise InvalidInputError("leave-one-bag-out needs at least 2 bags")
    if not dataset.is_labeled:
        raise InvalidInputError("evaluation needs a bag label on every bag")


def leave_one_bag_out(
    dataset: Dataset,
    config: Optional[EmConfig] = None,
    pca_threshold: Optional[float] = None,
    workers: Optional[int] = None,
    show_progress: Optional[bool] = None,
) -> EvalReport:
    """LOBO accuracies plus the log-likelihood of a single fit on the full dataset"""
    _check_eval_input(dataset)
    config = config or EmConfig()
    check_config_for_dataset(config, dataset)
    fold_fn = partial(_mil_fold, dataset=dataset, config=config, pca_threshold=pca_threshold)
    folds = _run_folds(dataset, fold_fn, config.label, workers, show_progress)
    report = _build_report(dataset, config.label, folds)

    full = dataset
    if pca_threshold is not None:
        pca = fit_pca(dataset.pooled_instances(), pca_threshold)
        full = dataset.map_instances(pca.transform)
        report.pca_components = pca.q
    try:
        result = train(full, config)
        report.train_loglik = result.final_loglik
        report.iteration_count = result.iteration_count
        report.converged = result.converged
    except InsufficientDataError as e:
        logger.warning(f"{config.label}: full-data fit failed, no log-likelihood reported: {e}")
    return report


def non_mil_baseline(
    dataset: Dataset,
    pca_threshold: Optional[float] = None,
    workers: Optional[int] = None,
    show_progress: Optional[bool] = None,
) -> EvalReport:
    """QDA trained on (instance, bag label) pairs, bags labeled by majority vote"""
    _check_eval_input(dataset)
    fold_fn = partial(_baseline_fold, dataset=dataset, pca_threshold=pca_threshold)
    folds = _run_folds(dataset, fold_fn, BASELINE_NAME, workers, show_progress)
    report = _build_report(dataset, BASELINE_NAME, folds)
    if pca_threshold is not None:
        report.pca_components = fit_pca(dataset.pooled_instances(), pca_threshold).q
    return report
