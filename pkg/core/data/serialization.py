"""
Serialization
Versioned JSON model files, evaluation report text, inference and
iteration-log CSVs, and atomic file writes
"""

import io
import json
import logging
import math
import os
import tempfile
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..errors import MilError, ModelFormatError
from ..models.bag import InferenceResult
from ..models.bif import BifParams
from ..models.classifiers import (
    ClassifierKind,
    ClassProbModel,
    DiverseDensityParams,
    KnnParams,
    LogisticParams,
    QdaParams,
)
from ..models.density import CopulaParams, DensityKind, DensityModel, GaussianParams, KdeParams
from ..models.fib import FibParams

logger = logging.getLogger(__name__)

MODEL_SCHEMA = "genmil-model"
MODEL_VERSION = 1
FLOAT_FORMAT = "%.17g"


def atomic_write_text(path: str, text: str) -> None:
    """Write to a temporary file in the target directory, then rename over path"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(temp_path, path)
    except Exception as e:
        logger.error(f"Failed to write {path}: {e}")
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


# Densities

def density_to_dict(density: DensityModel) -> Dict[str, Any]:
    """Fitted density as plain lists, tagged with its kind"""
    if isinstance(density, GaussianParams):
        return {
            "kind": density.kind.value,
            "mean": density.mean.tolist(),
            "covariance": density.covariance.tolist(),
        }
    if isinstance(density, KdeParams):
        return {
            "kind": DensityKind.KDE.value,
            "support_points": density.support_points.tolist(),
            "bandwidths": density.bandwidths.tolist(),
        }
    if isinstance(density, CopulaParams):
        return {
            "kind": density.kind.value,
            "clip_epsilon": density.clip_epsilon,
            "correlation": density.correlation.tolist(),
            "marginals": [density_to_dict(m) for m in density.marginals],
        }
    raise ModelFormatError(f"cannot serialize density of type {type(density).__name__}")


def density_from_dict(data: Dict[str, Any]) -> DensityModel:
    """Rebuild a density; the dataclass constructors re-validate it"""
    kind = DensityKind(data["kind"])
    if kind in (DensityKind.GAUSS, DensityKind.GAUSS_DIAG):
        return GaussianParams(
            mean=data["mean"], covariance=data["covariance"], diagonal_only=kind is DensityKind.GAUSS_DIAG
        )
    if kind is DensityKind.KDE:
        return KdeParams(support_points=data["support_points"], bandwidths=data["bandwidths"])
    return CopulaParams(
        marginals=tuple(density_from_dict(m) for m in data["marginals"]),
        correlation=data["correlation"],
        clip_epsilon=float(data["clip_epsilon"]),
        independent=kind is DensityKind.COPULA_DIAG,
    )


# Classifiers

def classifier_to_dict(model: ClassProbModel) -> Dict[str, Any]:
    """Fitted classifier as plain lists, tagged with its kind"""
    if isinstance(model, LogisticParams):
        return {"kind": "lr", "weights": model.weights.tolist(), "regularization": model.regularization}
    if isinstance(model, KnnParams):
        return {
            "kind": "knn",
            "support_points": model.support_points.tolist(),
            "support_labels": model.support_labels.tolist(),
            "k": model.k,
            "smoothing": model.smoothing,
            "t": model.t,
        }
    if isinstance(model, QdaParams):
        return {
            "kind": "qda",
            "priors": model.priors.tolist(),
            "classes": [None if g is None else density_to_dict(g) for g in model.class_gaussians],
        }
    if isinstance(model, DiverseDensityParams):
        return {"kind": "dd", "w": model.w.tolist(), "s": model.s.tolist()}
    raise ModelFormatError(f"cannot serialize classifier of type {type(model).__name__}")


def classifier_from_dict(data: Dict[str, Any]) -> ClassProbModel:
    """Rebuild a classifier from classifier_to_dict output"""
    kind = ClassifierKind(data["kind"])
    if kind is ClassifierKind.LR:
        return LogisticParams(weights=data["weights"], regularization=float(data["regularization"]))
    if kind is ClassifierKind.KNN:
        return KnnParams(
            support_points=data["support_points"],
            support_labels=data["support_labels"],
            k=int(data["k"]),
            smoothing=float(data["smoothing"]),
            n_labels=int(data["t"]),
        )
    if kind is ClassifierKind.QDA:
        return QdaParams(
            priors=data["priors"],
            class_gaussians=tuple(None if g is None else density_from_dict(g) for g in data["classes"]),
        )
    return DiverseDensityParams(w=data["w"], s=data["s"])


# Model files

def params_to_dict(params) -> Dict[str, Any]:
    """JSON-ready dictionary for BIF or FIB parameters"""
    if isinstance(params, BifParams):
        return {
            "model_kind": "bif",
            "bag_prior": params.bag_prior.tolist(),
            "instance_table": params.instance_table.tolist(),
            "class_densities": [density_to_dict(d) for d in params.class_densities],
        }
    return {
        "model_kind": "fib",
        "feature_density": density_to_dict(params.feature_density),
        "instance_classifier": classifier_to_dict(params.instance_classifier),
    }


def params_from_dict(data: Dict[str, Any]):
    """BIF or FIB parameters from params_to_dict output"""
    kind = data["model_kind"]
    if kind == "bif":
        return BifParams(
            bag_prior=data["bag_prior"],
            instance_table=data["instance_table"],
            class_densities=tuple(density_from_dict(d) for d in data["class_densities"]),
        )
    if kind == "fib":
        return FibParams(
            feature_density=density_from_dict(data["feature_density"]),
            instance_classifier=classifier_from_dict(data["instance_classifier"]),
        )
    raise ModelFormatError(f"unknown model kind {kind!r}")


def model_to_text(params, metadata: Optional[Dict[str, Any]] = None) -> str:
    """Versioned model document as indented JSON"""
    document = {
        "schema": MODEL_SCHEMA,
        "version": MODEL_VERSION,
        "t": params.t,
        "p": params.p,
        "metadata": metadata or {},
        "params": params_to_dict(params),
    }
    return json.dumps(document, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_model(params, path: str, metadata: Optional[Dict[str, Any]] = None) -> None:
    """Write the model document atomically, creating parent directories"""
    atomic_write_text(path, model_to_text(params, metadata))
    logger.info(f"Saved {params_to_dict(params)['model_kind']} model to {path}")


def model_from_text(text: str) -> Tuple[Any, Dict[str, Any]]:
    """Parameters and metadata; any structural problem raises ModelFormatError"""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"model file is not valid JSON: {e}")
    if not isinstance(document, dict) or document.get("schema") != MODEL_SCHEMA:
        raise ModelFormatError(f"not a {MODEL_SCHEMA} file")
    if document.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {document.get('version')!r}")
    try:
        params = params_from_dict(document["params"])
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, MilError) as e:
        raise ModelFormatError(f"malformed model parameters: {e!r}")
    if params.t != document.get("t") or params.p != document.get("p"):
        raise ModelFormatError("model header t/p disagree with the stored parameters")
    return params, document.get("metadata", {})


def load_model(path: str) -> Tuple[Any, Dict[str, Any]]:
    """Read a model file; unreadable files raise ModelFormatError"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ModelFormatError(f"cannot read model file {path}: {e}")
    return model_from_text(text)


# Reports and CSV products

def _number(value: Optional[float], digits: int = 6) -> str:
    if value is None:
        return "NA"
    if math.isinf(value):
        return "-inf" if value < 0 else "inf"
    return f"{value:.{digits}f}"


def _confusion_lines(title: str, matrix: np.ndarray) -> List[str]:
    t = matrix.shape[0]
    lines = [f"{title}:", "truth\\pred," + ",".join(str(i) for i in range(1, t + 1))]
    for i, row in enumerate(matrix, start=1):
        lines.append(f"{i}," + ",".join(str(int(v)) for v in row))
    return lines


def format_report(report) -> str:
    """key=value summary followed by the confusion matrices"""
    lines = [
        f"model={report.name}",
        f"t={report.t}",
        f"bags={report.n_bags}",
        f"evaluated_folds={report.evaluated_folds}",
        f"degenerate_folds={report.degenerate_folds}",
        f"chance_rate={_number(report.chance_rate)}",
        f"bag_accuracy={_number(report.bag_accuracy)}",
        f"bag_accuracy_ci99={_number(report.bag_ci_halfwidth)}",
        f"instance_accuracy={_number(report.instance_accuracy)}",
        f"instance_accuracy_ci99={_number(report.instance_ci_halfwidth)}",
        f"train_loglik={_number(report.train_loglik)}",
        f"iterations={'NA' if report.iteration_count is None else report.iteration_count}",
        f"converged={'NA' if report.converged is None else str(report.converged).lower()}",
        f"pca_components={'NA' if report.pca_components is None else report.pca_components}",
    ]
    lines += _confusion_lines("bag_confusion", report.bag_confusion)
    if report.instance_confusion is not None:
        lines += _confusion_lines("instance_confusion", report.instance_confusion)
    return "\n".join(lines) + "\n"


def _frame_to_csv(frame: pd.DataFrame) -> str:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return buffer.getvalue()


def inference_csv(results: Iterable[Tuple[str, InferenceResult]], t: int) -> str:
    """One row per instance with the bag's MAP label and its per-candidate log-scores"""
    score_columns = [f"log_score_{b}" for b in range(1, t + 1)]
    rows = []
    for bag_id, result in results:
        for j, label in enumerate(result.instance_labels):
            rows.append([bag_id, j + 1, result.bag_label, int(label), *result.label_scores.tolist()])
    columns = ["bag_id", "instance", "predicted_bag_label", "predicted_instance_label", *score_columns]
    return _frame_to_csv(pd.DataFrame(rows, columns=columns))


def iteration_log_csv(events) -> str:
    """One row per EM iteration; unrecorded likelihoods are left empty"""
    frame = pd.DataFrame(
        [[e.iteration, e.labels_changed, e.loglik, e.objective] for e in events],
        columns=["iteration", "labels_changed", "loglik", "objective"],
    )
    return _frame_to_csv(frame)
