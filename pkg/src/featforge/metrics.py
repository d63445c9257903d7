"""The non-LM executor: feature encoding, deterministic multinomial logistic
regression, macro-F1 over stratified folds, exact linear SHAP, plug-in mutual
information, coverage, and the deterministic label-leakage guard.

All functions are pure over immutable inputs; fold assignment is derived from
example ids (not row positions) so results are invariant to row permutation.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import FeatureKind, FeatureMatrix, MatrixRow

MISSING_BUCKET = "<missing>"


class DegenerateLabels(ValueError):
    pass


class TooFewPerClass(ValueError):
    pass


class NonFinite(ArithmeticError):
    """Training loss or gradients left the finite range; encoding bug upstream."""


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ColumnInfo:
    feature: str
    role: str  # "numeric" | "onehot" | "missing_indicator"
    category: str | None = None


@dataclass(frozen=True)
class FeatureStats:
    """Fit-fold statistics for one non-categorical feature."""

    impute_mean: float
    scale_mean: float
    scale_std: float


@dataclass(frozen=True, eq=False)
class EncodingStats:
    class_names: tuple[str, ...]
    per_feature: dict[str, FeatureStats]
    fitted_column_means: np.ndarray


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    columns: tuple[ColumnInfo, ...]
    X: np.ndarray
    y: np.ndarray
    class_names: tuple[str, ...]
    example_ids: tuple[str, ...]
    stats: EncodingStats

    def group_indices(self) -> dict[str, list[int]]:
        """Column indices per source feature, in feature order."""
        groups: dict[str, list[int]] = {}
        for j, col in enumerate(self.columns):
            groups.setdefault(col.feature, []).append(j)
        return groups


def _numeric_raw(values, kind: FeatureKind) -> np.ndarray:
    out = np.zeros(len(values))
    for i, v in enumerate(values):
        if v.is_missing:
            out[i] = np.nan
        elif kind is FeatureKind.BOOLEAN:
            out[i] = 1.0 if v.value else 0.0
        else:
            out[i] = float(v.value)
    return out


def encode(
    matrix: FeatureMatrix,
    fit_stats: EncodingStats | None = None,
    class_names: Sequence[str] | None = None,
) -> EncodedMatrix:
    """Encode realized feature values into a dense real matrix.

    Boolean features become a {0,1} value column (mean-imputed when missing)
    plus a missing-indicator column; Integer/Real features a standardized
    column plus an indicator; Categorical features c+1 one-hot columns where
    the extra column is the MISSING category. In fit mode (fit_stats=None)
    imputation means and standardization stats are computed from this matrix;
    in transform mode the provided fitted stats are applied unchanged.

    Raises:
        DegenerateLabels: fit mode with fewer than 2 distinct labels.
    """
    rows = matrix.rows
    n = len(rows)
    fitting = fit_stats is None
    if fitting:
        if n < 2:
            raise ValueError(f"need at least 2 rows to fit an encoding, got {n}")
        labels_present = sorted({r.label for r in rows})
        if len(labels_present) < 2:
            raise DegenerateLabels(f"only one class present: {labels_present}")
        names = tuple(class_names) if class_names is not None else tuple(labels_present)
    else:
        names = fit_stats.class_names

    class_index = {c: i for i, c in enumerate(names)}
    y = np.array([class_index[r.label] for r in rows], dtype=int)

    columns: list[ColumnInfo] = []
    blocks: list[np.ndarray] = []
    per_feature_stats: dict[str, FeatureStats] = {}

    for fi, feat in enumerate(matrix.feature_set.features):
        values = [r.values[fi] for r in rows]
        kind = feat.value_type.kind
        if kind is FeatureKind.CATEGORICAL:
            cats = list(feat.value_type.categories) + [MISSING_BUCKET]
            block = np.zeros((n, len(cats)))
            for i, v in enumerate(values):
                if v.is_missing or v.value not in feat.value_type.categories:
                    block[i, -1] = 1.0
                else:
                    block[i, cats.index(v.value)] = 1.0
            for c in cats:
                columns.append(ColumnInfo(feat.name, "onehot", c))
            blocks.append(block)
            continue

        raw = _numeric_raw(values, kind)
        missing = np.isnan(raw)
        if fitting:
            observed = raw[~missing]
            impute_mean = float(observed.mean()) if observed.size else 0.0
            filled = np.where(missing, impute_mean, raw)
            scale_mean = float(filled.mean())
            scale_std = float(filled.std())
            per_feature_stats[feat.name] = FeatureStats(impute_mean, scale_mean, scale_std)
            stats_f = per_feature_stats[feat.name]
        else:
            stats_f = fit_stats.per_feature[feat.name]
            filled = np.where(missing, stats_f.impute_mean, raw)

        if kind is FeatureKind.BOOLEAN:
            value_col = filled
        elif stats_f.scale_std > 0:
            value_col = (filled - stats_f.scale_mean) / stats_f.scale_std
        else:
            value_col = np.zeros(n)
        columns.append(ColumnInfo(feat.name, "numeric"))
        blocks.append(value_col.reshape(-1, 1))
        columns.append(ColumnInfo(feat.name, "missing_indicator"))
        blocks.append(missing.astype(float).reshape(-1, 1))

    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    if not np.isfinite(X).all():
        raise NonFinite("encoded matrix contains non-finite entries")

    if fitting:
        stats = EncodingStats(
            class_names=names,
            per_feature=per_feature_stats,
            fitted_column_means=X.mean(axis=0) if n else np.zeros(X.shape[1]),
        )
    else:
        stats = fit_stats
        if X.shape[1] != stats.fitted_column_means.shape[0]:
            raise ShapeMismatch(
                f"transform produced {X.shape[1]} columns, fit had {stats.fitted_column_means.shape[0]}"
            )
    return EncodedMatrix(
        columns=tuple(columns),
        X=X,
        y=y,
        class_names=names,
        example_ids=tuple(r.example_id for r in rows),
        stats=stats,
    )


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    class_names: tuple[str, ...]
    weights: np.ndarray  # (C, p)
    bias: np.ndarray  # (C,)
    l2: float
    final_grad_norm: float
    iterations: int
    converged: bool
    loss_history: tuple[float, ...]


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    shifted = Z - Z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logreg_loss(X: np.ndarray, y: np.ndarray, W: np.ndarray, b: np.ndarray, l2: float) -> float:
    """Total cross-entropy plus (l2/2)*||W||^2; the bias is unregularized."""
    logp = _log_softmax(X @ W.T + b)
    ce = -logp[np.arange(len(y)), y].sum()
    return float(ce + 0.5 * l2 * np.sum(W * W))


def logreg_gradient(
    X: np.ndarray, y: np.ndarray, W: np.ndarray, b: np.ndarray, l2: float
) -> tuple[np.ndarray, np.ndarray]:
    logp = _log_softmax(X @ W.T + b)
    P = np.exp(logp)
    D = P.copy()
    D[np.arange(len(y)), y] -= 1.0
    grad_W = D.T @ X + l2 * W
    grad_b = D.sum(axis=0)
    return grad_W, grad_b


def train_logreg(
    enc: EncodedMatrix,
    l2: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 1000,
) -> ClassifierModel:
    """Fit a multinomial softmax model by full-batch first-order descent.

    The objective is mean cross-entropy plus (l2/2)*||W||^2 with the bias
    unregularized. Steps use a Barzilai-Borwein trial length with Armijo
    backtracking, so the recorded loss history is non-increasing. Converged
    when the gradient infinity-norm drops below tol.

    Raises:
        NonFinite: if the loss or gradient leaves the finite range.
    """
    n, p = enc.X.shape
    C = len(enc.class_names)
    if not (n >= C >= 2):
        raise ValueError(f"need n >= C >= 2, got n={n}, C={C}")

    X, y = enc.X, enc.y
    W = np.zeros((C, p))
    b = np.zeros(C)
    loss = logreg_loss(X, y, W, b, l2)
    history = [loss]
    grad_W, grad_b = logreg_gradient(X, y, W, b, l2)
    prev: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None
    grad_norm = float("inf")
    it = 0

    for it in range(1, max_iter + 1):
        grad_norm = max(
            float(np.abs(grad_W).max(initial=0.0)), float(np.abs(grad_b).max(initial=0.0))
        )
        if not math.isfinite(loss) or not math.isfinite(grad_norm):
            raise NonFinite("logistic regression diverged")
        if grad_norm < tol:
            break

        step = 1.0
        if prev is not None:
            s = np.concatenate([(W - prev[0]).ravel(), (b - prev[1]).ravel()])
            yv = np.concatenate([(grad_W - prev[2]).ravel(), (grad_b - prev[3]).ravel()])
            sy = float(s @ yv)
            if sy > 1e-18:
                step = min(max(float(s @ s) / sy, 1e-10), 1e10)

        g_sq = float(np.sum(grad_W * grad_W) + np.sum(grad_b * grad_b))
        accepted = False
        for _ in range(60):
            W_new = W - step * grad_W
            b_new = b - step * grad_b
            loss_new = logreg_loss(X, y, W_new, b_new, l2)
            if math.isfinite(loss_new) and loss_new <= loss - 1e-4 * step * g_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # no numerically distinguishable descent step exists

        prev = (W, b, grad_W, grad_b)
        W, b, loss = W_new, b_new, loss_new
        history.append(loss)
        grad_W, grad_b = logreg_gradient(X, y, W, b, l2)

    grad_norm = max(float(np.abs(grad_W).max(initial=0.0)), float(np.abs(grad_b).max(initial=0.0)))
    if not np.isfinite(W).all() or not np.isfinite(b).all():
        raise NonFinite("logistic regression produced non-finite weights")
    return ClassifierModel(
        class_names=enc.class_names,
        weights=W,
        bias=b,
        l2=l2,
        final_grad_norm=grad_norm,
        iterations=it,
        converged=grad_norm < tol,
        loss_history=tuple(history),
    )


def predict_proba(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(X @ model.weights.T + model.bias))


def predict(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    return np.argmax(X @ model.weights.T + model.bias, axis=1)


def macro_f1_from_confusion(cm: np.ndarray) -> float:
    """Macro F1 over all classes; classes with empty denominators score 0."""
    scores = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def _fold_of(example_id: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{example_id}".encode("utf-8")).hexdigest()
    return int(digest[:12], 16)


@dataclass(frozen=True, eq=False)
class FoldDetail:
    fold_index: int
    model: ClassifierModel
    enc_val: EncodedMatrix


@dataclass(frozen=True, eq=False)
class CvResult:
    macro_f1: float
    confusion: np.ndarray
    folds: tuple[FoldDetail, ...]
    class_names: tuple[str, ...]


def cross_validated_f1(
    matrix: FeatureMatrix,
    k_folds: int = 5,
    l2: float = 1.0,
    seed: int = 0,
    class_names: Sequence[str] | None = None,
    tol: float = 1e-6,
    max_iter: int = 1000,
) -> CvResult:
    """Stratified k-fold CV: encode on each train fold, score its validation
    fold, pool all predictions, then compute macro-F1 once on the pool.

    Fold assignment hashes (seed, example id), so membership is independent
    of row order.

    Raises:
        TooFewPerClass: if any class has fewer than k_folds members.
        DegenerateLabels: if fewer than 2 classes are present.
    """
    rows = matrix.rows
    labels_present = sorted({r.label for r in rows})
    if len(labels_present) < 2:
        raise DegenerateLabels(f"only one class present: {labels_present}")
    names = tuple(class_names) if class_names is not None else tuple(labels_present)
    counts = Counter(r.label for r in rows)
    lacking = sorted(c for c in counts if counts[c] < k_folds)
    if lacking:
        raise TooFewPerClass(
            f"classes {lacking} have fewer than k_folds={k_folds} members"
        )

    fold_of_row: dict[str, int] = {}
    by_class: dict[str, list[MatrixRow]] = {}
    for r in rows:
        by_class.setdefault(r.label, []).append(r)
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda r: (_fold_of(r.example_id, seed), r.example_id))
        for rank, r in enumerate(members):
            fold_of_row[r.example_id] = rank % k_folds

    class_index = {c: i for i, c in enumerate(names)}
    cm = np.zeros((len(names), len(names)), dtype=int)
    folds: list[FoldDetail] = []
    for f in range(k_folds):
        train_rows = tuple(r for r in rows if fold_of_row[r.example_id] != f)
        val_rows = tuple(r for r in rows if fold_of_row[r.example_id] == f)
        sub_train = FeatureMatrix(matrix.feature_set, train_rows)
        sub_val = FeatureMatrix(matrix.feature_set, val_rows)
        enc_train = encode(sub_train, class_names=names)
        enc_val = encode(sub_val, fit_stats=enc_train.stats)
        model = train_logreg(enc_train, l2=l2, tol=tol, max_iter=max_iter)
        preds = predict(model, enc_val.X)
        for r, pred in zip(val_rows, preds):
            cm[class_index[r.label], pred] += 1
        folds.append(FoldDetail(f, model, enc_val))

    return CvResult(
        macro_f1=macro_f1_from_confusion(cm),
        confusion=cm,
        folds=tuple(folds),
        class_names=names,
    )


def linear_shap(model: ClassifierModel, enc: EncodedMatrix) -> dict[str, float]:
    """Exact SHAP attributions for a linear model with an independence baseline.

    Per sample i, class c, column j the attribution is W[c,j]*(x[i,j]-mean_j)
    with the fitted-fold column means as baseline; column attributions are
    summed within each source feature's column group and the reported
    importance is the mean over samples and classes of the absolute group sum.

    Raises:
        ShapeMismatch: model and encoding disagree on column count.
    """
    W = model.weights
    if W.shape[1] != enc.X.shape[1]:
        raise ShapeMismatch(
            f"model has {W.shape[1]} columns, encoded matrix has {enc.X.shape[1]}"
        )
    diff = enc.X - enc.stats.fitted_column_means  # (n, p)
    contrib = diff[:, None, :] * W[None, :, :]  # (n, C, p)
    importances: dict[str, float] = {}
    for feature, cols in enc.group_indices().items():
        group_sum = contrib[:, :, cols].sum(axis=2)  # (n, C)
        importances[feature] = float(np.abs(group_sum).mean()) if group_sum.size else 0.0
    return importances


def shap_local_accuracy_residual(model: ClassifierModel, enc: EncodedMatrix) -> float:
    """Max |sum_j phi_icj - ((W x_i)_c - (W xbar)_c)| over all samples/classes."""
    W = model.weights
    diff = enc.X - enc.stats.fitted_column_means
    total = (diff[:, None, :] * W[None, :, :]).sum(axis=2)
    direct = enc.X @ W.T - enc.stats.fitted_column_means @ W.T
    return float(np.abs(total - direct).max(initial=0.0))


def discrete_mutual_information(xs: Sequence, ys: Sequence) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    if len(xs) != len(ys):
        raise ShapeMismatch("sequences must have equal length")
    n = len(xs)
    if n == 0:
        return 0.0
    joint = Counter(zip(xs, ys))
    px = Counter(xs)
    py = Counter(ys)
    mi = 0.0
    for (x, y_), nxy in joint.items():
        ratio = (nxy * n) / (px[x] * py[y_])
        mi += (nxy / n) * math.log(ratio)
    # plug-in MI is non-negative; guard against float rounding only
    return max(mi, 0.0)


def discrete_entropy(xs: Sequence) -> float:
    n = len(xs)
    if n == 0:
        return 0.0
    return -sum((c / n) * math.log(c / n) for c in Counter(xs).values())


def discretize_feature(matrix: FeatureMatrix, feature: str, max_bins: int = 8) -> list[str]:
    """Map one feature column to discrete buckets for MI estimation.

    Boolean/Categorical use their values plus a MISSING bucket; Integer/Real
    use equal-frequency binning into min(max_bins, #distinct observed) bins
    with Missing as its own bucket.
    """
    idx = matrix.feature_set.names().index(feature)
    kind = matrix.feature_set[idx].value_type.kind
    values = [r.values[idx] for r in matrix.rows]
    if kind in (FeatureKind.BOOLEAN, FeatureKind.CATEGORICAL):
        out = []
        for v in values:
            if v.is_missing:
                out.append(MISSING_BUCKET)
            elif kind is FeatureKind.BOOLEAN:
                out.append("true" if v.value else "false")
            else:
                out.append(str(v.value))
        return out
    observed = np.array([float(v.value) for v in values if not v.is_missing])
    if observed.size == 0:
        return [MISSING_BUCKET] * len(values)
    n_bins = min(max_bins, len(np.unique(observed)))
    if n_bins <= 1:
        return [MISSING_BUCKET if v.is_missing else "bin0" for v in values]
    edges = np.quantile(observed, [k / n_bins for k in range(1, n_bins)])
    out = []
    for v in values:
        if v.is_missing:
            out.append(MISSING_BUCKET)
        else:
            out.append(f"bin{int(np.searchsorted(edges, float(v.value), side='right'))}")
    return out


def mutual_information(matrix: FeatureMatrix, feature: str, max_bins: int = 8) -> float:
    """Plug-in MI (nats) between a discretized feature column and the labels."""
    return discrete_mutual_information(
        discretize_feature(matrix, feature, max_bins), matrix.labels()
    )


def coverage(matrix: FeatureMatrix) -> tuple[dict[str, float], float]:
    """Per-feature fraction of rows whose value is not Missing, plus the mean."""
    if not matrix.rows:
        raise ValueError("matrix has no rows")
    n = len(matrix.rows)
    per: dict[str, float] = {}
    for fi, feat in enumerate(matrix.feature_set.features):
        ok = sum(1 for r in matrix.rows if not r.values[fi].is_missing)
        per[feat.name] = ok / n
    return per, float(np.mean(list(per.values())))


def _name_tokens(text: str) -> set[str]:
    return {t for t in re.split(r"[^a-z0-9]+", text.lower()) if t}


@dataclass(frozen=True)
class LeakageFlag:
    feature: str
    reasons: tuple[str, ...]


def detect_leakage(
    matrix: FeatureMatrix,
    class_names: Sequence[str],
    mi_threshold: float = 0.95,
    min_rows_for_mi: int = 20,
    name_tokens: Sequence[str] = ("label",),
) -> list[LeakageFlag]:
    """Deterministic complement to the LM interpretability scorer.

    Flags a feature when (a) its snake_case name, split on underscores,
    contains the token "label" or any class-name token, or (b) — with at
    least min_rows_for_mi rows — its normalized MI against the labels,
    MI(f;Y)/H(Y), reaches mi_threshold.
    """
    suspicious = set(name_tokens)
    for cls in class_names:
        suspicious |= _name_tokens(cls)
    labels = matrix.labels()
    h_y = discrete_entropy(labels)
    use_mi = len(matrix.rows) >= min_rows_for_mi and h_y > 0

    flags: list[LeakageFlag] = []
    for feat in matrix.feature_set.features:
        reasons: list[str] = []
        hits = sorted(set(feat.name.split("_")) & suspicious)
        for token in hits:
            reasons.append(f"name-token:{token}")
        if use_mi:
            ratio = mutual_information(matrix, feat.name) / h_y
            if ratio >= mi_threshold:
                reasons.append(f"normalized-mi:{ratio:.3f}")
        if reasons:
            flags.append(LeakageFlag(feat.name, tuple(reasons)))
    return flags


@dataclass(frozen=True)
class PerFeatureMetrics:
    shap_importance: float
    mutual_information: float
    coverage: float
    leakage_flag: bool
    leakage_reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class MetricsBundle:
    macro_f1: float
    per_feature: dict[str, PerFeatureMetrics]
    confusion: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...]
    fold_count: int
    note: str = ""

    def to_doc(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "per_feature": {
                name: {
                    "shap_importance": m.shap_importance,
                    "mutual_information": m.mutual_information,
                    "coverage": m.coverage,
                    "leakage_flag": m.leakage_flag,
                    "leakage_reasons": list(m.leakage_reasons),
                }
                for name, m in self.per_feature.items()
            },
            "confusion": [list(row) for row in self.confusion],
            "class_names": list(self.class_names),
            "fold_count": self.fold_count,
            "note": self.note,
        }

    def to_canonical_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_doc(cls, doc: dict) -> "MetricsBundle":
        return cls(
            macro_f1=doc["macro_f1"],
            per_feature={
                name: PerFeatureMetrics(
                    shap_importance=m["shap_importance"],
                    mutual_information=m["mutual_information"],
                    coverage=m["coverage"],
                    leakage_flag=m["leakage_flag"],
                    leakage_reasons=tuple(m.get("leakage_reasons", ())),
                )
                for name, m in doc["per_feature"].items()
            },
            confusion=tuple(tuple(row) for row in doc["confusion"]),
            class_names=tuple(doc["class_names"]),
            fold_count=doc["fold_count"],
            note=doc.get("note", ""),
        )

    def leakage_hints(self) -> list[str]:
        return [name for name, m in self.per_feature.items() if m.leakage_flag]


@dataclass(frozen=True)
class MetricsConfig:
    k_folds: int = 5
    l2: float = 1.0
    tol: float = 1e-6
    max_iter: int = 1000
    seed: int = 0
    mi_max_bins: int = 8
    leakage_mi_threshold: float = 0.95
    leakage_min_rows: int = 20


def compute_metrics(
    matrix: FeatureMatrix,
    config: MetricsConfig = MetricsConfig(),
    class_names: Sequence[str] | None = None,
) -> MetricsBundle:
    """Score one realized feature matrix: cross-validated macro-F1 with SHAP
    importances averaged across fold models on their validation rows, MI,
    coverage, and the deterministic leakage guard.

    Degenerate inputs (one class, classes smaller than k_folds, all values
    missing) degrade to a zero-score bundle with an explanatory note instead
    of raising, so a bad candidate survives as a recorded failure.
    """
    cov, _ = coverage(matrix)
    mi = {name: mutual_information(matrix, name, config.mi_max_bins) for name in cov}
    flags = {
        f.feature: f.reasons
        for f in detect_leakage(
            matrix,
            class_names or sorted({r.label for r in matrix.rows}),
            mi_threshold=config.leakage_mi_threshold,
            min_rows_for_mi=config.leakage_min_rows,
        )
    }

    def bundle(f1, shap, confusion, names, fold_count, note=""):
        return MetricsBundle(
            macro_f1=f1,
            per_feature={
                name: PerFeatureMetrics(
                    shap_importance=shap.get(name, 0.0),
                    mutual_information=mi[name],
                    coverage=cov[name],
                    leakage_flag=name in flags,
                    leakage_reasons=flags.get(name, ()),
                )
                for name in matrix.feature_set.names()
            },
            confusion=confusion,
            class_names=names,
            fold_count=fold_count,
            note=note,
        )

    names = tuple(class_names) if class_names is not None else tuple(sorted({r.label for r in matrix.rows}))
    empty_cm = tuple(tuple(0 for _ in names) for _ in names)
    if all(v.is_missing for r in matrix.rows for v in r.values):
        return bundle(0.0, {}, empty_cm, names, 0, note="all feature values missing")

    try:
        cv = cross_validated_f1(
            matrix,
            k_folds=config.k_folds,
            l2=config.l2,
            seed=config.seed,
            class_names=class_names,
            tol=config.tol,
            max_iter=config.max_iter,
        )
    except (DegenerateLabels, TooFewPerClass) as err:
        return bundle(0.0, {}, empty_cm, names, 0, note=str(err))

    total_rows = sum(len(fd.enc_val.example_ids) for fd in cv.folds)
    shap_sum: dict[str, float] = {name: 0.0 for name in matrix.feature_set.names()}
    for fd in cv.folds:
        fold_imp = linear_shap(fd.model, fd.enc_val)
        weight = len(fd.enc_val.example_ids)
        for name, imp in fold_imp.items():
            shap_sum[name] += imp * weight
    shap_avg = {name: s / total_rows for name, s in shap_sum.items()}

    return bundle(
        cv.macro_f1,
        shap_avg,
        tuple(tuple(int(x) for x in row) for row in cv.confusion),
        cv.class_names,
        len(cv.folds),
    )
