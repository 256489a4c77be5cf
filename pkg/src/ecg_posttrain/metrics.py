"""Per-class and macro AUROC / AUPRC with percentile bootstrap intervals.

Undefined per-class values (a class with no positives, or for AUROC no
negatives) are ``nan`` and skipped by the macro average.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError(f"shape mismatch: {s.shape} vs {y.shape}")
    if s.shape[0] < 1:
        raise MetricError("need at least one sample")
    if np.isnan(s).any():
        raise MetricError("scores contain NaN")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be binary")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties; nan if a class is absent."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-interpolated average precision; tied scores form one threshold."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each tied group
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp_at = tp[ends]
    precision = tp_at / (ends + 1.0)
    d_recall = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(precision * d_recall))


def _column_auroc(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized AUROC over the columns of ``[n, K]`` matrices."""
    y = labels.astype(bool)
    n_pos = y.sum(axis=0)
    n_neg = y.shape[0] - n_pos
    ranks = rankdata(scores, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = ((ranks * y).sum(axis=0) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    out[(n_pos == 0) | (n_neg == 0)] = np.nan
    return out


def per_class(scores, labels, fn: Callable) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape != y.shape:
        raise MetricError(f"expected matching [n, K] matrices, got {s.shape} and {y.shape}")
    if fn is auroc:
        _check(s, y)
        return _column_auroc(s, y)
    return np.array([fn(s[:, k], y[:, k]) for k in range(s.shape[1])])


def macro(values) -> tuple[float, list[int]]:
    """Unweighted mean over defined entries and the indices that were skipped."""
    v = np.asarray(values, dtype=np.float64)
    skipped = np.flatnonzero(np.isnan(v)).tolist()
    if len(skipped) == v.size:
        raise MetricError("all classes undefined")
    return float(np.mean(v[~np.isnan(v)])), skipped


def macro_auroc(scores, labels) -> float:
    return macro(per_class(scores, labels, auroc))[0]


def macro_auprc(scores, labels) -> float:
    return macro(per_class(scores, labels, auprc))[0]


def bootstrap_ci(scores, labels, metric: Callable = macro_auroc, n_rep: int = 1000,
                 alpha: float = 0.05, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of ``metric`` over row resamples drawn with replacement.

    Classes that become degenerate inside a replicate are skipped by the
    macro average; replicates where every class is degenerate are dropped.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n = s.shape[0]
    if n < 2:
        raise MetricError("bootstrap needs at least two records")
    rng = np.random.default_rng(seed)
    values = []
    failed = 0
    for _ in range(n_rep):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric(s[idx], y[idx]))
        except MetricError:
            failed += 1
    if failed > n_rep / 2:
        raise MetricError(f"metric undefined in {failed} of {n_rep} bootstrap replicates")
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_auroc: list[float | None]
    per_class_auprc: list[float | None]
    macro_auroc: float
    macro_auprc: float
    auroc_ci: tuple[float, float] | None
    auprc_ci: tuple[float, float] | None
    n_bootstrap: int
    skipped_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "auroc", "auprc", "defined"])
        for name, a, p in zip(self.class_names, self.per_class_auroc, self.per_class_auprc):
            w.writerow([name, "" if a is None else repr(a), "" if p is None else repr(p),
                        int(a is not None and p is not None)])
        return buf.getvalue()


def evaluate(scores, labels, class_names=None, n_bootstrap: int = 1000, seed: int = 0,
             alpha: float = 0.05) -> EvalReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    names = list(class_names) if class_names is not None else [str(k) for k in range(s.shape[1])]
    roc = per_class(s, y, auroc)
    pr = per_class(s, y, auprc)
    m_roc, skip_roc = macro(roc)
    m_pr, skip_pr = macro(pr)
    if n_bootstrap > 0:
        roc_ci = bootstrap_ci(s, y, macro_auroc, n_bootstrap, alpha, seed)
        pr_ci = bootstrap_ci(s, y, macro_auprc, n_bootstrap, alpha, seed)
    else:
        roc_ci = pr_ci = None
    as_list = lambda v: [None if np.isnan(x) else float(x) for x in v]  # noqa: E731
    return EvalReport(
        class_names=names,
        per_class_auroc=as_list(roc),
        per_class_auprc=as_list(pr),
        macro_auroc=m_roc,
        macro_auprc=m_pr,
        auroc_ci=roc_ci,
        auprc_ci=pr_ci,
        n_bootstrap=n_bootstrap,
        skipped_classes=[names[k] for k in sorted(set(skip_roc) | set(skip_pr))],
    )
