"""Model validation: QWK agreement, cross-validation, and AIC comparison.

Two complementary questions, kept separate in the report: which predictor
set best fits the ordinal trait scores (full-data fit, compared by AIC),
and how well each set predicts held-out scores (k-fold cross-validated
quadratic weighted kappa). Feature sets are named column selections over
an assembled per-essay table of flow metrics, linguistic counts, and
judge scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FEATURE_COLUMNS
from .ordinal import DegenerateLabelsError, OrderedLogit


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Quadratic weighted kappa
# ---------------------------------------------------------------------------


def qwk(y_true, y_pred, levels) -> float:
    """Quadratic weighted kappa over an ordered level set.

    kappa = 1 - sum(w * O) / sum(w * E), with w_ij = (i - j)^2 / (K - 1)^2,
    O the observed confusion matrix and E the outer product of its
    marginals scaled to n. Perfect agreement with a degenerate expected
    matrix returns 1.0.
    """
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise EvaluationError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    if not y_true:
        raise EvaluationError("need at least one pair")
    levels = [float(v) for v in levels]
    index = {v: i for i, v in enumerate(levels)}
    K = len(levels)
    observed = np.zeros((K, K))
    for t, p in zip(y_true, y_pred):
        ti = index.get(float(t))
        pi = index.get(float(p))
        if ti is None or pi is None:
            raise EvaluationError(f"label pair ({t}, {p}) outside levels {levels}")
        observed[ti, pi] += 1.0

    n = len(y_true)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    idx = np.arange(K)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (K - 1) ** 2

    denom = float((weights * expected).sum())
    num = float((weights * observed).sum())
    if denom == 0.0:
        return 1.0
    return 1.0 - num / denom


# ---------------------------------------------------------------------------
# Fold construction
# ---------------------------------------------------------------------------


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Partition 0..n-1 into k disjoint folds with sizes differing by <= 1.

    Deterministic per seed; order within folds is ascending.
    """
    if k < 2:
        raise EvaluationError("k must be >= 2")
    if n < k:
        raise EvaluationError(f"cannot split {n} rows into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


def stratified_kfold_split(n: int, k: int, seed: int, labels) -> list[np.ndarray]:
    """Label-stratified variant: each label's rows are spread round-robin
    over folds after a seeded shuffle."""
    if k < 2:
        raise EvaluationError("k must be >= 2")
    if n < k:
        raise EvaluationError(f"cannot split {n} rows into {k} folds")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for lv in np.unique(labels):
        rows = np.where(labels == lv)[0]
        rows = rows[rng.permutation(len(rows))]
        for j, row in enumerate(rows):
            buckets[(offset + j) % k].append(int(row))
        offset += len(rows)
    return [np.sort(np.array(b, dtype=int)) for b in buckets]


# ---------------------------------------------------------------------------
# Feature table and feature sets
# ---------------------------------------------------------------------------

SEQUENTIALITY_COLUMNS = ["mean_nll_topic", "mean_nll_context", "mean_delta"]
JUDGE_COLUMN = "judge_score"

STANDARD_FEATURE_SETS = {
    "seq": ["mean_delta"],
    "topic": ["mean_nll_topic"],
    "context": ["mean_nll_context"],
    "both": ["mean_nll_topic", "mean_nll_context"],
    "ling": list(FEATURE_COLUMNS),
    "ling+seq": list(FEATURE_COLUMNS) + ["mean_delta"],
    "ling+topic": list(FEATURE_COLUMNS) + ["mean_nll_topic"],
    "ling+context": list(FEATURE_COLUMNS) + ["mean_nll_context"],
    "llm_score": [JUDGE_COLUMN],
    "ling+llm_score": list(FEATURE_COLUMNS) + [JUDGE_COLUMN],
}


@dataclass(frozen=True)
class FeatureSetSpec:
    name: str
    columns: tuple[str, ...]

    @classmethod
    def standard(cls, name: str) -> "FeatureSetSpec":
        if name not in STANDARD_FEATURE_SETS:
            raise EvaluationError(
                f"unknown feature set {name!r}; known: {sorted(STANDARD_FEATURE_SETS)}"
            )
        return cls(name, tuple(STANDARD_FEATURE_SETS[name]))


def standard_feature_sets(names) -> list[FeatureSetSpec]:
    return [FeatureSetSpec.standard(name) for name in names]


@dataclass
class FeatureTable:
    """Per-essay predictor columns plus the trait labels to explain."""

    dataset_name: str
    trait: str
    essay_ids: list[str]
    columns: dict[str, np.ndarray]
    y: np.ndarray
    levels: tuple[float, ...]

    def design(self, spec: FeatureSetSpec) -> np.ndarray:
        missing = [c for c in spec.columns if c not in self.columns]
        if missing:
            raise EvaluationError(f"feature set {spec.name!r} needs absent columns {missing}")
        X = np.column_stack([self.columns[c] for c in spec.columns])
        if not np.all(np.isfinite(X)):
            raise EvaluationError(f"non-finite values in columns for {spec.name!r}")
        return X

    @property
    def n(self) -> int:
        return len(self.essay_ids)


def assemble_table(
    dataset,
    trait: str,
    sequentiality_rows=None,
    feature_rows: dict[str, dict[str, float]] | None = None,
    judge_scores: dict[str, float] | None = None,
) -> FeatureTable:
    """Join per-essay artifacts into one aligned table.

    Only essays present in every supplied source and carrying the trait
    score are kept; order follows the dataset.
    """
    seq_by_id = {r.essay_id: r for r in sequentiality_rows} if sequentiality_rows else None
    ids, rows = [], []
    for essay in dataset.essays:
        if trait not in essay.scores:
            continue
        if seq_by_id is not None and essay.essay_id not in seq_by_id:
            continue
        if feature_rows is not None and essay.essay_id not in feature_rows:
            continue
        if judge_scores is not None and essay.essay_id not in judge_scores:
            continue
        ids.append(essay.essay_id)
        rows.append(essay)

    columns: dict[str, np.ndarray] = {}
    if seq_by_id is not None:
        for col in SEQUENTIALITY_COLUMNS:
            columns[col] = np.array([getattr(seq_by_id[i], col) for i in ids], dtype=float)
    if feature_rows is not None:
        for col in FEATURE_COLUMNS:
            columns[col] = np.array([feature_rows[i][col] for i in ids], dtype=float)
    if judge_scores is not None:
        columns[JUDGE_COLUMN] = np.array([judge_scores[i] for i in ids], dtype=float)

    y = np.array([rows[j].scores[trait] for j in range(len(ids))], dtype=float)
    levels = dataset.scale_for(trait).levels
    return FeatureTable(dataset.name, trait, ids, columns, y, levels)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def _merge_missing_levels(y_train, levels):
    """Reduce the level set to the categories present in the training fold.

    A level absent from the fold is merged into its nearest present
    neighbor (ties toward the lower level): it disappears from the fitted
    scale, and predictions that would have landed there fall to the
    neighbor. Returns (y, reduced levels, merge map) for reporting.
    """
    present = sorted({float(v) for v in y_train})
    merges = {}
    if len(present) == len(levels):
        return np.asarray(y_train, dtype=float), list(levels), merges
    for lv in levels:
        if lv in present:
            continue
        nearest = min(present, key=lambda c: (abs(c - lv), c))
        merges[lv] = nearest
    return np.asarray(y_train, dtype=float), present, merges


@dataclass
class FoldResult:
    fold: int
    qwk: float
    n_train: int
    n_test: int
    merged_levels: dict[float, float] = field(default_factory=dict)
    standardization: dict | None = None


def cross_validate(
    table: FeatureTable,
    spec: FeatureSetSpec,
    k: int = 5,
    seed: int = 0,
    stratified: bool = False,
    model_params: dict | None = None,
) -> tuple[float, list[FoldResult]]:
    """k-fold CV: fit on k-1 folds (training-fold standardization inside
    the model), predict the held-out fold, score QWK against the full
    declared level set. Returns (mean_qwk, per-fold results)."""
    X = table.design(spec)
    y = table.y
    n = table.n
    if stratified:
        folds = stratified_kfold_split(n, k, seed, y)
    else:
        folds = kfold_split(n, k, seed)

    params = {"standardize": True}
    params.update(model_params or {})
    results = []
    for fold_id, test_idx in enumerate(folds):
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        X_train, y_train = X[mask], y[mask]
        X_test, y_test = X[test_idx], y[test_idx]

        y_fit, fit_levels, merges = _merge_missing_levels(y_train, table.levels)
        model = OrderedLogit(levels=fit_levels, **params).fit(X_train, y_fit)
        y_pred = model.predict(X_test)
        results.append(
            FoldResult(
                fold=fold_id,
                qwk=qwk(y_test, y_pred, table.levels),
                n_train=int(mask.sum()),
                n_test=len(test_idx),
                merged_levels=merges,
                standardization={
                    "mean": model.mean_.tolist(),
                    "scale": model.scale_.tolist(),
                },
            )
        )
    mean_qwk = float(np.mean([r.qwk for r in results]))
    return mean_qwk, results


# ---------------------------------------------------------------------------
# Variant comparison report
# ---------------------------------------------------------------------------


@dataclass
class VariantResult:
    name: str
    columns: list[str]
    aic: float | None
    loglik: float | None
    mean_qwk: float | None
    per_fold_qwk: list[float]
    coefficients: dict[str, dict[str, float]]
    converged: bool | None
    merged_level_events: int
    error: str | None = None


@dataclass
class EvalReport:
    dataset_name: str
    trait: str
    k: int
    seed: int
    variants: list[VariantResult]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "trait": self.trait,
            "k": self.k,
            "seed": self.seed,
            "variants": [
                {
                    "name": v.name,
                    "columns": v.columns,
                    "aic": v.aic,
                    "loglik": v.loglik,
                    "mean_qwk": v.mean_qwk,
                    "per_fold_qwk": v.per_fold_qwk,
                    "coefficients": v.coefficients,
                    "converged": v.converged,
                    "merged_level_events": v.merged_level_events,
                    "error": v.error,
                }
                for v in self.variants
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render_text(self) -> str:
        """Plain-text AIC/QWK table, one row per variant."""
        lines = [
            f"dataset: {self.dataset_name}   trait: {self.trait}   "
            f"(k={self.k}, seed={self.seed})",
            f"{'variant':<16}{'AIC':>12}{'mean QWK':>12}",
        ]
        best = min((v.aic for v in self.variants if v.aic is not None), default=None)
        for v in self.variants:
            if v.error:
                lines.append(f"{v.name:<16}{'failed':>12}{'-':>12}  ({v.error})")
                continue
            marker = " *" if best is not None and v.aic == best else ""
            q = f"{v.mean_qwk:.4f}" if v.mean_qwk is not None else "-"
            lines.append(f"{v.name:<16}{v.aic:>12.2f}{q:>12}{marker}")
        if best is not None:
            lines.append("(* lowest AIC)")
        return "\n".join(lines) + "\n"

    def qwk_csv(self) -> str:
        """CSV of mean and per-fold QWK per feature set."""
        header = ["feature_set", "mean_qwk"] + [f"fold_{i}" for i in range(self.k)]
        rows = [",".join(header)]
        for v in self.variants:
            if v.error or v.mean_qwk is None:
                continue
            cells = [v.name, f"{v.mean_qwk!r}"] + [f"{q!r}" for q in v.per_fold_qwk]
            rows.append(",".join(cells))
        return "\n".join(rows) + "\n"


def compare_variants(
    table: FeatureTable,
    variants: list[FeatureSetSpec],
    k: int = 5,
    seed: int = 0,
    stratified: bool = False,
    model_params: dict | None = None,
) -> EvalReport:
    """Full-data AIC fit plus cross-validated QWK for each feature set.

    A failing variant is recorded with its error and does not abort the
    others. Coefficients are reported in raw and standardized units.
    """
    params = {"standardize": True}
    params.update(model_params or {})
    rows = []
    for spec in variants:
        try:
            X = table.design(spec)
            model = OrderedLogit(levels=list(table.levels), **params).fit(X, table.y)
            mean_qwk, folds = cross_validate(
                table, spec, k=k, seed=seed, stratified=stratified, model_params=model_params
            )
            rows.append(
                VariantResult(
                    name=spec.name,
                    columns=list(spec.columns),
                    aic=model.aic_,
                    loglik=model.loglik_,
                    mean_qwk=mean_qwk,
                    per_fold_qwk=[r.qwk for r in folds],
                    coefficients={
                        "raw": dict(zip(spec.columns, model.coef_.tolist())),
                        "standardized": dict(zip(spec.columns, model.coef_std_.tolist())),
                    },
                    converged=model.converged_,
                    merged_level_events=sum(1 for r in folds if r.merged_levels),
                )
            )
        except (EvaluationError, DegenerateLabelsError, ValueError) as exc:
            rows.append(
                VariantResult(
                    name=spec.name,
                    columns=list(spec.columns),
                    aic=None,
                    loglik=None,
                    mean_qwk=None,
                    per_fold_qwk=[],
                    coefficients={},
                    converged=None,
                    merged_level_events=0,
                    error=str(exc),
                )
            )
    return EvalReport(table.dataset_name, table.trait, k, seed, rows)
