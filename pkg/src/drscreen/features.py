"""Count features and the preprocessing chain: select -> scale -> optional PCA.

The numeric record for one image is simply how many lesions of each class were
detected in it. Preprocessing is fitted on the training split only and the
fitted parameters travel with the model so inference applies the exact same
transform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import ALL_LESION_CLASSES, Detection, LesionClass
from .errors import DomainError, TrainError

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Per-class lesion counts for one image, in class-subset order."""

    image_id: str
    values: np.ndarray


def extract_counts(
    detections: Sequence[Detection],
    class_subset: Sequence[LesionClass] = ALL_LESION_CLASSES,
    image_id: str = "",
    weighted: bool = False,
) -> FeatureVector:
    """Count detections per active class (optionally confidence-weighted).

    Detections whose class is outside the subset are not counted anywhere;
    they only produce a warning.
    """
    index = {cls: i for i, cls in enumerate(class_subset)}
    values = np.zeros(len(class_subset), dtype=float)
    for det in detections:
        i = index.get(det.lesion_class)
        if i is None:
            log.warning(
                "detection of class %s outside active subset (image %r); not counted",
                det.lesion_class.name,
                image_id,
            )
            continue
        values[i] += det.confidence if weighted else 1.0
    return FeatureVector(image_id=image_id, values=values)


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    return np.stack([fv.values for fv in vectors]).astype(float)


def fit_scaler(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population std, std floored at VARIANCE_FLOOR.

    The floor keeps constant columns (common for rare lesion classes) from
    blowing up the division; scaling such a column yields exact zeros.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise TrainError("scaler requires at least 2 feature vectors")
    means = X.mean(axis=0)
    stds = np.maximum(X.std(axis=0), VARIANCE_FLOOR)
    return means, stds


def apply_scaler(X: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=float) - means) / stds


def anova_f_scores(X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """One-way ANOVA F statistic of each feature across label groups.

    Zero-variance features score 0. A feature with zero within-group variance
    but nonzero between-group variance separates the groups perfectly and
    scores +inf.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    n, d = X.shape
    k = len(groups)
    grand = X.mean(axis=0)
    ssb = np.zeros(d)
    ssw = np.zeros(d)
    for g in groups:
        Xg = X[labels == g]
        mg = Xg.mean(axis=0)
        ssb += len(Xg) * (mg - grand) ** 2
        ssw += ((Xg - mg) ** 2).sum(axis=0)
    scores = np.zeros(d)
    for j in range(d):
        if ssw[j] <= 0.0:
            scores[j] = np.inf if ssb[j] > 0.0 else 0.0
        elif k > 1 and n > k:
            scores[j] = (ssb[j] / (k - 1)) / (ssw[j] / (n - k))
    return scores


def select_features(X: np.ndarray, labels: np.ndarray, k: int) -> list[int]:
    """Indices of the k highest-F features, ties to the lower index."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    if not 1 <= k <= d:
        raise DomainError(f"cannot select k={k} features out of {d}")
    if len(np.unique(labels)) < 2:
        raise DomainError("feature selection requires at least 2 distinct labels")
    scores = anova_f_scores(X, labels)
    ranked = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in ranked[:k])


@dataclass(frozen=True)
class PcaParams:
    components: np.ndarray  # (k, d) rows orthonormal
    component_means: np.ndarray  # (d,)
    explained_ratio: np.ndarray  # (k,)


def fit_pca(
    X: np.ndarray,
    k: int | None = None,
    variance_target: float | None = None,
) -> PcaParams:
    """Top-k principal components of the (population) covariance.

    Components are sorted by eigenvalue descending and sign-normalized so each
    row's largest-magnitude entry is positive, which makes serialized models
    stable across eigendecomposition implementations. In variance-target mode
    the smallest k whose cumulative explained-variance ratio reaches the
    target is chosen.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise TrainError("PCA requires at least 2 feature vectors")
    n, d = X.shape
    if k is not None and not 1 <= k <= d:
        raise DomainError(f"cannot keep k={k} components out of {d}")
    if k is None and variance_target is None:
        raise DomainError("fit_pca needs either k or variance_target")

    mu = X.mean(axis=0)
    Z = X - mu
    cov = Z.T @ Z / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    components = evecs[:, order].T

    total = evals.sum()
    ratios = evals / total if total > 0.0 else np.zeros_like(evals)

    if k is None:
        cum = np.cumsum(ratios)
        reaching = np.nonzero(cum >= variance_target - 1e-12)[0]
        # Degenerate zero-variance data never reaches a positive target; keep
        # everything in that case.
        k = int(reaching[0]) + 1 if len(reaching) else d

    components = components[:k].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaParams(
        components=components,
        component_means=mu,
        explained_ratio=ratios[:k].copy(),
    )


def apply_pca(X: np.ndarray, params: PcaParams) -> np.ndarray:
    return (np.asarray(X, dtype=float) - params.component_means) @ params.components.T


def inverse_pca(Z: np.ndarray, params: PcaParams) -> np.ndarray:
    return np.asarray(Z, dtype=float) @ params.components + params.component_means


@dataclass(frozen=True)
class PreprocessConfig:
    """Which preprocessing stages to run; the order is fixed."""

    select_k: int | None = None
    scale: bool = True
    pca_components: int | None = None
    pca_variance_target: float | None = None


@dataclass(frozen=True, eq=False)
class PreprocessParams:
    """Fitted preprocessing: selection indices, scaler stats, optional PCA.

    Applied strictly as select -> scale -> PCA. When scaling is disabled the
    stored means/stds are the identity transform.
    """

    selected_indices: tuple[int, ...]
    means: np.ndarray
    stds: np.ndarray
    pca: PcaParams | None = None
    variance_floor: float = VARIANCE_FLOOR

    @property
    def output_dim(self) -> int:
        if self.pca is not None:
            return self.pca.components.shape[0]
        return len(self.selected_indices)


def fit_preprocess(
    X: np.ndarray, labels: np.ndarray, config: PreprocessConfig
) -> PreprocessParams:
    """Fit the whole chain on training data only."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    if config.select_k is not None:
        selected = select_features(X, labels, config.select_k)
    else:
        selected = list(range(d))
    Xs = X[:, selected]

    if config.scale:
        means, stds = fit_scaler(Xs)
        Xs = apply_scaler(Xs, means, stds)
    else:
        means = np.zeros(len(selected))
        stds = np.ones(len(selected))

    pca = None
    if config.pca_components is not None or config.pca_variance_target is not None:
        pca = fit_pca(
            Xs, k=config.pca_components, variance_target=config.pca_variance_target
        )
    return PreprocessParams(
        selected_indices=tuple(selected), means=means, stds=stds, pca=pca
    )


def apply_preprocess(X: np.ndarray, params: PreprocessParams) -> np.ndarray:
    """Transform raw count vectors (single or batch) with fitted parameters."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] < (max(params.selected_indices) + 1 if params.selected_indices else 0):
        raise DomainError(
            f"feature dimension {X.shape[1]} too small for selection indices"
        )
    Xs = X[:, list(params.selected_indices)]
    Xs = apply_scaler(Xs, params.means, params.stds)
    if params.pca is not None:
        Xs = apply_pca(Xs, params.pca)
    return Xs[0] if single else Xs
