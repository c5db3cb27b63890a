"""Soft-margin SVM trained from scratch with SMO, plus one-vs-one multiclass.

The binary solver maximizes the dual

    D(a) = sum(a) - 1/2 * sum_ij a_i a_j y_i y_j K(x_i, x_j)
    s.t.  0 <= a_i <= C,  sum_i a_i y_i = 0

by pairwise coordinate ascent: the first multiplier is the point with the
largest KKT violation, the second the one with the largest error gap
|E_1 - E_2|, falling back to a seeded random scan when that pair cannot move.
Pair updates preserve the equality constraint exactly (the two deltas cancel
by construction), so dual feasibility never needs repair.

The bias is re-derived from the current multipliers every iteration (mean over
free support vectors, else the midpoint of the feasible KKT interval), and
convergence is declared only when every training point satisfies its KKT
condition within tol AGAINST THAT BIAS - the same bias the final model stores.

Multiclass is one-vs-one over the DR grades present in the training data; in
each pair machine the +1 label is the more severe grade, so a decision value
of exactly zero resolves toward referral.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import json
import numpy as np

from .domain import ALL_LESION_CLASSES, DrGrade, LesionClass
from .errors import DomainError, ModelFormatError, TrainError
from .features import PcaParams, PreprocessParams, apply_preprocess

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_MODEL_FORMAT = "drscreen-svm"


class KernelKind(Enum):
    LINEAR = "linear"
    RBF = "rbf"


@dataclass(frozen=True)
class Kernel:
    kind: KernelKind
    gamma: float | None = None  # required (and > 0) for RBF

    def __post_init__(self):
        if self.kind is KernelKind.RBF:
            if self.gamma is None or self.gamma <= 0:
                raise DomainError(f"RBF kernel requires gamma > 0, got {self.gamma}")


def resolve_gamma(gamma: float | None, X: np.ndarray) -> float:
    """Numeric gamma; None means the 'scale' heuristic 1 / (d * var(X))."""
    if gamma is not None:
        return float(gamma)
    X = np.asarray(X, dtype=float)
    var = float(X.var())
    d = X.shape[1] if X.ndim == 2 else len(X)
    denom = d * var
    return 1.0 / denom if denom > 0 else 1.0


def kernel_eval(kernel: Kernel, x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DomainError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    if kernel.kind is KernelKind.LINEAR:
        return float(x @ y)
    diff = x - y
    return float(np.exp(-kernel.gamma * (diff @ diff)))


def kernel_matrix(kernel: Kernel, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Gram matrix K[i, j] = k(A[i], B[j])."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise DomainError(
            f"kernel arguments differ in dimension: {A.shape[1]} vs {B.shape[1]}"
        )
    if kernel.kind is KernelKind.LINEAR:
        return A @ B.T
    diff = A[:, None, :] - B[None, :, :]
    return np.exp(-kernel.gamma * (diff**2).sum(axis=2))


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    kernel: KernelKind = KernelKind.RBF
    gamma: float | None = None  # None -> scale heuristic at fit time
    tol: float = 1e-3
    max_passes: int = 200  # caps pair updates at max_passes * n
    seed: int = 0

    def __post_init__(self):
        if self.C <= 0:
            raise TrainError(f"C must be positive, got {self.C}")
        if self.tol <= 0:
            raise TrainError(f"tol must be positive, got {self.tol}")


@dataclass(frozen=True, eq=False)
class BinarySvm:
    """One trained binary machine: support vectors, a_i*y_i coefficients, bias."""

    support_vectors: np.ndarray  # (n_sv, d)
    dual_coefs: np.ndarray  # (n_sv,), alpha_i * y_i, all nonzero
    bias: float
    kernel: Kernel
    C: float
    support_indices: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


def _bound_masks(alpha: np.ndarray, C: float):
    # Pair updates can leave an alpha a few ulps off a bound (the bound of the
    # update was itself a float expression); classify with a tolerance so such
    # dust is treated as sitting at the bound.
    eps = 1e-10 * max(1.0, C)
    at_lo = alpha <= eps
    at_hi = alpha >= C - eps
    return at_lo, at_hi, ~at_lo & ~at_hi


def _bias_for(alpha: np.ndarray, g: np.ndarray, y: np.ndarray, C: float) -> float:
    # g_i = sum_j a_j y_j K_ij (margins without bias). Free support vectors pin
    # b exactly; otherwise b is any point of the interval allowed by the bound
    # points and we take the midpoint, which minimizes the worst violation.
    at_lo, at_hi, free = _bound_masks(alpha, C)
    if free.any():
        return float(np.mean(y[free] - g[free]))
    lo, hi = -np.inf, np.inf
    lower = ((y > 0) & at_lo) | ((y < 0) & at_hi)
    upper = ((y > 0) & at_hi) | ((y < 0) & at_lo)
    if lower.any():
        lo = float(np.max(y[lower] - g[lower]))
    if upper.any():
        hi = float(np.min(y[upper] - g[upper]))
    if not math.isfinite(lo):
        return hi if math.isfinite(hi) else 0.0
    if not math.isfinite(hi):
        return lo
    return (lo + hi) / 2.0


def _kkt_violations(
    alpha: np.ndarray, g: np.ndarray, y: np.ndarray, b: float, C: float
) -> np.ndarray:
    at_lo, at_hi, _ = _bound_masks(alpha, C)
    r = y * (g + b) - 1.0
    viol = np.maximum(
        np.where(~at_hi, -r, 0.0),  # point wants alpha to grow
        np.where(~at_lo, r, 0.0),  # point wants alpha to shrink
    )
    return np.maximum(viol, 0.0)


def smo_train_binary(X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> BinarySvm:
    """Train one binary machine; labels must be -1/+1 with both present."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise TrainError("X must be (n, d) with one label per row")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise TrainError("labels must be -1/+1")
    if not ((y > 0).any() and (y < 0).any()):
        raise TrainError("training data contains a single class")

    kern = Kernel(cfg.kernel, resolve_gamma(cfg.gamma, X))
    if cfg.kernel is KernelKind.LINEAR:
        kern = Kernel(KernelKind.LINEAR, None)

    n = len(y)
    C, tol = float(cfg.C), float(cfg.tol)
    K = kernel_matrix(kern, X, X)
    alpha = np.zeros(n)
    g = np.zeros(n)  # g_i = sum_j a_j y_j K_ij
    rng = np.random.default_rng(cfg.seed)
    step_floor = 1e-14 * max(1.0, C)

    snap = 1e-12 * max(1.0, C)

    def take_step(i: int, j: int) -> bool:
        if i == j:
            return False
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if eta <= 1e-12:
            return False  # degenerate pair direction
        yi, yj = y[i], y[j]
        ai, aj = alpha[i], alpha[j]
        if yi != yj:
            L, H = max(0.0, aj - ai), min(C, C + aj - ai)
        else:
            L, H = max(0.0, ai + aj - C), min(C, ai + aj)
        if H - L <= 0.0:
            return False
        # E_i - E_j is bias-free: (g_i - y_i) - (g_j - y_j)
        aj_new = aj + yj * ((g[i] - y[i]) - (g[j] - y[j])) / eta
        aj_new = min(max(aj_new, L), H)
        if aj_new - L < snap:
            aj_new = L
        elif H - aj_new < snap:
            aj_new = H
        step = aj_new - aj
        if abs(step) < step_floor:
            return False
        ai_new = ai - yi * yj * step  # keeps sum(a*y) exact
        # Pin float dust at the box bounds exactly, compensating the partner so
        # the equality constraint is still conserved (delta_j derived from the
        # exact delta_i).
        if ai_new < snap:
            ai_new = 0.0
            aj_new = min(max(aj + yi * yj * ai, L), H)
            step = aj_new - aj
        elif ai_new > C - snap:
            ai_new = C
            aj_new = min(max(aj - yi * yj * (C - ai), L), H)
            step = aj_new - aj
        g[:] += yi * (ai_new - ai) * K[i] + yj * step * K[j]
        alpha[i] = ai_new
        alpha[j] = aj_new
        return True

    max_updates = max(1, cfg.max_passes) * n
    for _ in range(max_updates):
        b = _bias_for(alpha, g, y, C)
        viol = _kkt_violations(alpha, g, y, b, C)
        if float(viol.max()) <= tol:
            break
        E = g + b - y
        progressed = False
        for i in np.argsort(-viol, kind="stable"):
            i = int(i)
            if viol[i] <= tol:
                break
            gaps = np.abs(E[i] - E)
            gaps[i] = -1.0
            j_best = int(np.argmax(gaps))
            if take_step(i, j_best):
                progressed = True
                break
            for j in rng.permutation(n):
                j = int(j)
                if j != j_best and take_step(i, j):
                    progressed = True
                    break
            if progressed:
                break
        if not progressed:
            log.debug("SMO stalled with max KKT violation %.3g", float(viol.max()))
            break
    else:
        log.debug("SMO hit the update cap (%d) before tol %.3g", max_updates, tol)

    b = _bias_for(alpha, g, y, C)
    sv = alpha > 0.0
    return BinarySvm(
        support_vectors=X[sv].copy(),
        dual_coefs=(alpha * y)[sv].copy(),
        bias=b,
        kernel=kern,
        C=C,
        support_indices=tuple(int(i) for i in np.nonzero(sv)[0]),
    )


def decision(machine: BinarySvm, x: np.ndarray) -> float:
    """f(x) = sum_i coef_i K(sv_i, x) + b."""
    return float(decision_many(machine, np.asarray(x, dtype=float)[None, :])[0])


def decision_many(machine: BinarySvm, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != machine.dim:
        raise DomainError(
            f"feature dimension {X.shape[1]} does not match model dimension {machine.dim}"
        )
    if len(machine.dual_coefs) == 0:
        return np.full(len(X), machine.bias)
    K = kernel_matrix(machine.kernel, X, machine.support_vectors)
    return K @ machine.dual_coefs + machine.bias


def classify_binary(machine: BinarySvm, x: np.ndarray) -> int:
    """Sign of the decision value; exactly zero maps to +1."""
    return 1 if decision(machine, x) >= 0.0 else -1


def dual_objective(machine: BinarySvm, ) -> float:
    """Dual objective value of the stored multipliers (zero alphas drop out)."""
    coef = machine.dual_coefs
    if len(coef) == 0:
        return 0.0
    K = kernel_matrix(machine.kernel, machine.support_vectors, machine.support_vectors)
    return float(np.sum(np.abs(coef)) - 0.5 * coef @ K @ coef)


@dataclass(frozen=True, eq=False)
class SvmModel:
    """One-vs-one multiclass grader plus the preprocessing fitted with it."""

    classes: tuple[DrGrade, ...]
    machines: Mapping[tuple[DrGrade, DrGrade], BinarySvm]  # key (low, high)
    preprocess: PreprocessParams
    feature_classes: tuple[LesionClass, ...] = ALL_LESION_CLASSES
    schema_version: int = SCHEMA_VERSION
    created_at: str | None = None
    train_summary: dict | None = None

    @property
    def dim(self) -> int:
        return next(iter(self.machines.values())).dim


def identity_preprocess(dim: int) -> PreprocessParams:
    return PreprocessParams(
        selected_indices=tuple(range(dim)),
        means=np.zeros(dim),
        stds=np.ones(dim),
        pca=None,
    )


def train_multiclass(
    X: np.ndarray,
    grades: Sequence[DrGrade],
    cfg: TrainConfig,
    preprocess: PreprocessParams | None = None,
    feature_classes: Sequence[LesionClass] = ALL_LESION_CLASSES,
) -> SvmModel:
    """Train one binary machine per pair of grades present in the data.

    X must already be preprocessed; the params are embedded in the model so
    inference can reproduce the transform. Grades with no samples are skipped
    with a warning and the model's class list shrinks accordingly.
    """
    X = np.asarray(X, dtype=float)
    grade_ids = np.array([int(g) for g in grades])
    present = tuple(DrGrade(int(v)) for v in np.unique(grade_ids))
    absent = [g for g in DrGrade if g not in present]
    if absent:
        log.warning(
            "grades with no training samples are excluded: %s",
            ", ".join(g.name for g in absent),
        )
    if len(present) < 2:
        raise TrainError(
            f"multiclass training needs at least 2 grades, got {len(present)}"
        )

    gamma = resolve_gamma(cfg.gamma, X) if cfg.kernel is KernelKind.RBF else None
    pair_cfg = replace(cfg, gamma=gamma)

    machines: dict[tuple[DrGrade, DrGrade], BinarySvm] = {}
    for ia, a in enumerate(present):
        for b in present[ia + 1 :]:
            rows = (grade_ids == int(a)) | (grade_ids == int(b))
            ybin = np.where(grade_ids[rows] == int(b), 1.0, -1.0)  # +1 = more severe
            machines[(a, b)] = smo_train_binary(X[rows], ybin, pair_cfg)

    if preprocess is None:
        preprocess = identity_preprocess(X.shape[1])
    return SvmModel(
        classes=present,
        machines=machines,
        preprocess=preprocess,
        feature_classes=tuple(feature_classes),
    )


def predict(
    model: SvmModel, x: np.ndarray
) -> tuple[DrGrade, dict[DrGrade, int], dict[DrGrade, float]]:
    """Predict one preprocessed feature vector.

    Returns the winning grade plus per-class votes and summed signed decision
    values. Ties in votes fall to the larger summed score; a remaining tie
    falls to the more severe grade (screening fails toward referral).
    """
    x = np.asarray(x, dtype=float)
    votes = {c: 0 for c in model.classes}
    scores = {c: 0.0 for c in model.classes}
    for (a, b), machine in model.machines.items():
        f = decision(machine, x)
        winner = b if f >= 0.0 else a
        votes[winner] += 1
        scores[b] += f
        scores[a] -= f
    best = max(model.classes, key=lambda c: (votes[c], scores[c], int(c)))
    return best, votes, scores


def predict_batch(model: SvmModel, X: np.ndarray) -> list[DrGrade]:
    """Vectorized predict over many preprocessed rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k = len(model.classes)
    index = {c: i for i, c in enumerate(model.classes)}
    votes = np.zeros((len(X), k))
    scores = np.zeros((len(X), k))
    for (a, b), machine in model.machines.items():
        f = decision_many(machine, X)
        ia, ib = index[a], index[b]
        win_b = f >= 0.0
        votes[win_b, ib] += 1
        votes[~win_b, ia] += 1
        scores[:, ib] += f
        scores[:, ia] -= f
    ids = np.array([int(c) for c in model.classes])
    out = []
    for row in range(len(X)):
        order = np.lexsort((ids, scores[row], votes[row]))
        out.append(model.classes[order[-1]])
    return out


def predict_from_counts(
    model: SvmModel, counts: np.ndarray
) -> tuple[DrGrade, dict[DrGrade, int], dict[DrGrade, float]]:
    """Apply the model's fitted preprocessing to raw counts, then predict."""
    return predict(model, apply_preprocess(np.asarray(counts, dtype=float), model.preprocess))


# --- serialization ---------------------------------------------------------
#
# The model file is a JSON document with every float rendered at 17
# significant digits, which round-trips IEEE doubles exactly: a reloaded model
# produces bit-identical decision values.


def _render_json(obj) -> str:
    out: list[str] = []
    _render_into(obj, out)
    return "".join(out)


def _render_into(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            raise ModelFormatError(f"non-finite number {f!r} cannot be serialized")
        out.append(f"{f:.17g}")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _render_into(item, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(key)))
            out.append(":")
            _render_into(value, out)
        out.append("}")
    elif isinstance(obj, np.ndarray):
        _render_into(obj.tolist(), out)
    else:
        raise ModelFormatError(f"cannot serialize {type(obj).__name__}")


def _preprocess_to_doc(p: PreprocessParams) -> dict:
    doc = {
        "selected_indices": list(p.selected_indices),
        "means": [float(v) for v in p.means],
        "stds": [float(v) for v in p.stds],
        "variance_floor": float(p.variance_floor),
        "pca": None,
    }
    if p.pca is not None:
        doc["pca"] = {
            "components": [[float(v) for v in row] for row in p.pca.components],
            "component_means": [float(v) for v in p.pca.component_means],
            "explained_ratio": [float(v) for v in p.pca.explained_ratio],
        }
    return doc


def model_to_doc(model: SvmModel) -> dict:
    machines = []
    for (a, b), m in sorted(model.machines.items(), key=lambda kv: (int(kv[0][0]), int(kv[0][1]))):
        machines.append(
            {
                "pair": [int(a), int(b)],
                "kernel": {
                    "kind": m.kernel.kind.value,
                    "gamma": None if m.kernel.gamma is None else float(m.kernel.gamma),
                },
                "C": float(m.C),
                "bias": float(m.bias),
                "dual_coefs": [float(v) for v in m.dual_coefs],
                "support_vectors": [[float(v) for v in row] for row in m.support_vectors],
                "support_indices": list(m.support_indices),
            }
        )
    return {
        "format": _MODEL_FORMAT,
        "schema_version": model.schema_version,
        "created_at": model.created_at,
        "classes": [int(c) for c in model.classes],
        "feature_classes": [int(c) for c in model.feature_classes],
        "preprocess": _preprocess_to_doc(model.preprocess),
        "machines": machines,
        "train_summary": model.train_summary,
    }


def save_model(model: SvmModel, path) -> None:
    if model.schema_version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"cannot write schema_version {model.schema_version}; "
            f"this build writes {SCHEMA_VERSION}"
        )
    Path(path).write_text(_render_json(model_to_doc(model)) + "\n", encoding="utf-8")


class _Doc:
    """Field accessor that names the offending field on any failure."""

    def __init__(self, raw: dict, context: str = "model"):
        if not isinstance(raw, dict):
            raise ModelFormatError(f"corrupted field '{context}': expected an object")
        self.raw = raw
        self.context = context

    def get(self, name: str, kind=None):
        if name not in self.raw:
            raise ModelFormatError(f"missing field '{self.context}.{name}'")
        value = self.raw[name]
        if kind is not None and not isinstance(value, kind):
            raise ModelFormatError(f"corrupted field '{self.context}.{name}'")
        return value

    def sub(self, name: str) -> "_Doc":
        return _Doc(self.get(name, dict), f"{self.context}.{name}")


def _doc_to_preprocess(doc: _Doc) -> PreprocessParams:
    pca_raw = doc.get("pca")
    pca = None
    if pca_raw is not None:
        pd = _Doc(pca_raw, f"{doc.context}.pca")
        pca = PcaParams(
            components=np.array(pd.get("components", list), dtype=float),
            component_means=np.array(pd.get("component_means", list), dtype=float),
            explained_ratio=np.array(pd.get("explained_ratio", list), dtype=float),
        )
    return PreprocessParams(
        selected_indices=tuple(int(i) for i in doc.get("selected_indices", list)),
        means=np.array(doc.get("means", list), dtype=float),
        stds=np.array(doc.get("stds", list), dtype=float),
        pca=pca,
        variance_floor=float(doc.get("variance_floor", (int, float))),
    )


def model_from_doc(raw: dict) -> SvmModel:
    doc = _Doc(raw)
    if doc.get("format") != _MODEL_FORMAT:
        raise ModelFormatError(f"not a {_MODEL_FORMAT} file")
    version = doc.get("schema_version", int)
    if version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"unsupported schema_version {version}; this build reads {SCHEMA_VERSION}"
        )
    try:
        classes = tuple(DrGrade(int(v)) for v in doc.get("classes", list))
        feature_classes = tuple(
            LesionClass(int(v)) for v in doc.get("feature_classes", list)
        )
    except ValueError as exc:
        raise ModelFormatError(f"corrupted field 'classes': {exc}") from None

    machines: dict[tuple[DrGrade, DrGrade], BinarySvm] = {}
    for idx, m_raw in enumerate(doc.get("machines", list)):
        md = _Doc(m_raw, f"machines[{idx}]")
        pair_raw = md.get("pair", list)
        try:
            pair = (DrGrade(int(pair_raw[0])), DrGrade(int(pair_raw[1])))
        except (ValueError, IndexError) as exc:
            raise ModelFormatError(
                f"corrupted field 'machines[{idx}].pair': {exc}"
            ) from None
        kd = md.sub("kernel")
        kind_raw = kd.get("kind", str)
        try:
            kind = KernelKind(kind_raw)
        except ValueError:
            raise ModelFormatError(
                f"corrupted field 'machines[{idx}].kernel.kind': {kind_raw!r}"
            ) from None
        gamma_raw = kd.get("gamma")
        kernel = Kernel(kind, None if gamma_raw is None else float(gamma_raw))
        machines[pair] = BinarySvm(
            support_vectors=np.array(md.get("support_vectors", list), dtype=float),
            dual_coefs=np.array(md.get("dual_coefs", list), dtype=float),
            bias=float(md.get("bias", (int, float))),
            kernel=kernel,
            C=float(md.get("C", (int, float))),
            support_indices=tuple(int(i) for i in md.get("support_indices", list)),
        )
    expected = len(classes) * (len(classes) - 1) // 2
    if len(machines) != expected:
        raise ModelFormatError(
            f"corrupted field 'machines': expected {expected} pair machines, "
            f"got {len(machines)}"
        )
    return SvmModel(
        classes=classes,
        machines=machines,
        preprocess=_doc_to_preprocess(doc.sub("preprocess")),
        feature_classes=feature_classes,
        schema_version=version,
        created_at=doc.get("created_at"),
        train_summary=doc.get("train_summary"),
    )


def load_model(path) -> SvmModel:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    return model_from_doc(raw)
