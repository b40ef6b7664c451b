"""Matching metrics and easy/hard evaluation reports.

Per-pair: M-Score (correct / ground-truth-possible), MMA (correct /
proposed), localization error (mean pixel distance of correct matches to
ground truth), and mAP over single-positive descriptor rankings. Dataset
reports aggregate per-difficulty means, pose failure rates, and
orientation-error percentiles computed with failures treated as infinitely
large errors (nearest-rank estimator; a percentile landing on the failure
block is emitted blank, as in the result tables this mirrors).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .features import MatchSet, SparseFeatures
from .losses import ap_exact


@dataclass(frozen=True)
class PairMetrics:
    m_score: float
    mma: float
    map: float
    le_px: float
    proposed: int
    possible: int
    correct: int


def compute_pair_metrics(
    m: MatchSet,
    fa: SparseFeatures | None = None,
    fb: SparseFeatures | None = None,
    corr: np.ndarray | None = None,
    tol: float = 5.0,
) -> PairMetrics | None:
    """Metrics of a labeled match set; None when no match was possible.

    mAP is computed when features and the correspondence field are supplied:
    each possible proposed match forms a query ranking all second-image
    features by descriptor similarity, with the feature nearest the
    ground-truth location (within ``tol``) as the single positive.
    """
    if m.possible is None or m.correct is None:
        raise ValueError("match set must be labeled first")
    if m.possible_total == 0:
        return None

    correct = int(np.sum(m.correct))
    m_score = correct / m.possible_total
    mma = correct / m.proposed if m.proposed > 0 else 0.0
    if correct > 0:
        le = float(np.mean(m.gt_dist[m.correct]))
    else:
        le = float("nan")

    map_value = float("nan")
    if fa is not None and fb is not None and corr is not None and m.proposed > 0:
        queries = _build_map_queries(m, fa, fb, corr, tol)
        if queries:
            map_value = mean_ap(queries)

    return PairMetrics(m_score, mma, map_value, le, m.proposed, m.possible_total, correct)


def _build_map_queries(
    m: MatchSet, fa: SparseFeatures, fb: SparseFeatures, corr: np.ndarray, tol: float
) -> list[tuple[np.ndarray, int]]:
    corr = np.asarray(corr, dtype=np.float64)
    h, w = corr.shape[:2]
    queries = []
    for k in range(m.proposed):
        if not m.possible[k]:
            continue
        ia = m.index_a[k]
        x, y = fa.xy[ia]
        gt = corr[min(max(round(y), 0), h - 1), min(max(round(x), 0), w - 1)]
        if not np.all(np.isfinite(gt)):
            continue
        d = np.hypot(fb.xy[:, 0] - gt[0], fb.xy[:, 1] - gt[1])
        positive = int(np.argmin(d))
        if d[positive] > tol:
            continue
        sims = fb.descriptors @ fa.descriptors[ia]
        queries.append((sims, positive))
    return queries


def mean_ap(queries: list[tuple[np.ndarray, int]]) -> float:
    """Mean over queries of single-positive AP (stable-sorted cumulative sum)."""
    if not queries:
        raise ValueError("empty query set")
    return float(np.mean([ap_exact(s, p) for s, p in queries]))


# ---------------------------------------------------------------------------
# Dataset aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairResult:
    metrics: PairMetrics | None
    failed: bool
    orientation_error: float     # degrees; ignored when failed
    difficulty: str              # "easy" | "hard"


@dataclass(frozen=True)
class SubsetStats:
    subset: str
    m_score: float       # mean over pairs with defined metrics
    fail_pct: float
    p50: float | None    # None = percentile falls on the failure block
    p85: float | None
    n: int


@dataclass(frozen=True)
class DatasetReport:
    subsets: tuple[SubsetStats, ...]

    def subset(self, name: str) -> SubsetStats | None:
        for s in self.subsets:
            if s.subset == name:
                return s
        return None


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th order statistic."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def aggregate_report(results: list[PairResult]) -> DatasetReport:
    """Aggregate per-pair outcomes into per-difficulty statistics.

    Orientation errors of failed pairs enter the percentile computation as
    +inf; a percentile that lands there is reported as None (blank).
    """
    if not results:
        raise ValueError("no results to aggregate")
    subsets = []
    for name in ("easy", "hard"):
        group = [r for r in results if r.difficulty == name]
        if not group:
            continue
        n = len(group)
        scores = [r.metrics.m_score for r in group if r.metrics is not None]
        mean_score = float(np.mean(scores)) if scores else float("nan")
        failed = sum(1 for r in group if r.failed)
        errors = np.array(
            [math.inf if r.failed else r.orientation_error for r in group], dtype=np.float64
        )
        p50 = nearest_rank_percentile(errors, 50.0)
        p85 = nearest_rank_percentile(errors, 85.0)
        subsets.append(
            SubsetStats(
                subset=name,
                m_score=mean_score,
                fail_pct=100.0 * failed / n,
                p50=None if math.isinf(p50) else p50,
                p85=None if math.isinf(p85) else p85,
                n=n,
            )
        )
    return DatasetReport(tuple(subsets))


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

REPORT_FIELDS = ["method", "subset", "m_score", "fail_pct", "p50", "p85", "n"]


def report_rows(method: str, report: DatasetReport) -> list[dict]:
    rows = []
    for s in report.subsets:
        row = {"method": method, **asdict(s)}
        rows.append({k: row[k] for k in REPORT_FIELDS})
    return rows


def write_report_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            out = {k: ("" if row[k] is None else row[k]) for k in REPORT_FIELDS}
            writer.writerow(out)


def write_report_json(path: str | Path, rows: list[dict], extra: dict | None = None) -> None:
    payload = {"rows": rows}
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
