"""Impression-level ranking metrics, whole-run evaluation, rank inspection.

An impression is scoreable only if it carries both a clicked and an
unclicked candidate (AUC is undefined otherwise); single-class
impressions are excluded from every mean and from ``n_impressions``.
Ties in metric ranking break by ascending candidate position; the
inspection view breaks ties by news id instead so its output is stable
under candidate reordering.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .data import ImpressionLog, NewsArticle, build_eval_batch, parse_behaviors
from .encoders import ModelParams, encode_batch
from .errors import ContractError, DataError
from .objectives import click_scores
from .training import VARIANTS, TrainConfig, TrainResult, Variant, train


def _as_score_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores/labels must be equal-length vectors, got {s.shape}/{y.shape}")
    return s, y


def auc(scores, labels) -> float | None:
    """Fraction of (positive, negative) pairs ranked correctly; ties count 0.5.

    Returns ``None`` for single-class impressions (the skip signal).
    """
    s, y = _as_score_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and sorted_s[j] == sorted_s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # midrank, 1-based
        i = j
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _descending_order(s: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending original index."""
    return np.lexsort((np.arange(len(s)), -s))


def mrr(scores, labels) -> float | None:
    """Mean reciprocal rank over every positive in the impression."""
    s, y = _as_score_arrays(scores, labels)
    if not (y == 1).any():
        return None
    order = _descending_order(s)
    ranks = np.empty(len(s), dtype=np.float64)
    ranks[order] = np.arange(1, len(s) + 1)
    return float((1.0 / ranks[y == 1]).mean())


def ndcg_at_k(scores, labels, k: int) -> float | None:
    """Discounted cumulative gain at ``k`` over the ideal ordering."""
    s, y = _as_score_arrays(scores, labels)
    if not (y == 1).any():
        return None
    order = _descending_order(s)
    top = y[order[:k]].astype(np.float64)
    discounts = 1.0 / np.log2(np.arange(2, len(top) + 2))
    dcg = float((top * discounts).sum())
    ideal = np.sort(y)[::-1][:k].astype(np.float64)
    idcg = float((ideal * (1.0 / np.log2(np.arange(2, len(ideal) + 2)))).sum())
    return dcg / idcg


@dataclass
class ImpressionResult:
    impression_id: str
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    ranked_ids: list[str]


@dataclass
class MetricsReport:
    """Unweighted means over scoreable impressions, plus optional detail rows."""

    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_impressions: int
    rows: list[ImpressionResult] | None = None

    def csv_row(self, variant: str) -> str:
        return ",".join(
            [variant]
            + [repr(float(v)) for v in (self.auc, self.mrr, self.ndcg5, self.ndcg10)]
            + [str(self.n_impressions)]
        )


REPORT_HEADER = "variant,auc,mrr,ndcg5,ndcg10,n_impressions"
DETAIL_HEADER = "impression_id,auc,mrr,ndcg5,ndcg10"
RANKING_HEADER = "rank,news_id,score,flag"


def model_scorer(
    params: ModelParams, articles: dict[str, NewsArticle], variant: Variant
) -> Callable[[ImpressionLog], np.ndarray]:
    """Score every candidate of an impression with the trained encoders."""
    plan = variant.plan()

    def scorer(imp: ImpressionLog) -> np.ndarray:
        try:
            history = [articles[nid] for nid in imp.history]
            cands = [articles[nid] for nid, _ in imp.candidates]
        except KeyError as exc:
            raise DataError(
                f"impression {imp.impression_id}: unresolved news id {exc.args[0]!r}"
            ) from exc
        batch = build_eval_batch(history, cands, plan)
        with dc.no_grad():
            enc = encode_batch(params, batch, use_mfke=variant.use_mfke)
            scores = click_scores(enc.user, enc.cands)
        return scores.data[0].astype(np.float64)

    return scorer


def evaluate(
    params: ModelParams,
    articles: dict[str, NewsArticle],
    impressions: Sequence[ImpressionLog],
    variant: Variant,
    *,
    with_rows: bool = False,
    scorer: Callable[[ImpressionLog], np.ndarray] | None = None,
) -> MetricsReport:
    """Score and rank every two-class impression; average the four metrics."""
    if scorer is None:
        scorer = model_scorer(params, articles, variant)
    rows: list[ImpressionResult] = []
    sums = np.zeros(4, dtype=np.float64)
    scored = 0
    for imp in impressions:
        labels = np.array([label for _, label in imp.candidates], dtype=np.int64)
        if len(labels) == 0 or labels.min() == labels.max():
            continue  # single-class: skipped, excluded from means
        scores = scorer(imp)
        values = (
            auc(scores, labels),
            mrr(scores, labels),
            ndcg_at_k(scores, labels, 5),
            ndcg_at_k(scores, labels, 10),
        )
        sums += np.array(values, dtype=np.float64)
        scored += 1
        if with_rows:
            order = _descending_order(scores)
            rows.append(
                ImpressionResult(
                    impression_id=imp.impression_id,
                    auc=values[0],
                    mrr=values[1],
                    ndcg5=values[2],
                    ndcg10=values[3],
                    ranked_ids=[imp.candidates[i][0] for i in order],
                )
            )
    if scored == 0:
        raise ContractError("no scoreable impression (every one was single-class)")
    means = sums / scored
    return MetricsReport(
        auc=float(means[0]),
        mrr=float(means[1]),
        ndcg5=float(means[2]),
        ndcg10=float(means[3]),
        n_impressions=scored,
        rows=rows if with_rows else None,
    )


def run_ablation(
    variant_name: str,
    config: TrainConfig,
    news_lines: Sequence[str],
    train_behavior_lines: Sequence[str],
    eval_behavior_lines: Sequence[str],
    *,
    with_rows: bool = False,
) -> tuple[MetricsReport, TrainResult]:
    """Train one variant and evaluate it on the held-out impressions."""
    if variant_name not in VARIANTS:
        raise ContractError(f"unknown variant {variant_name!r}")
    cfg = dataclasses.replace(config, variant=variant_name)
    cfg.validate()
    result = train(cfg, news_lines, train_behavior_lines)
    held = parse_behaviors(eval_behavior_lines, max_history=cfg.max_history)
    report = evaluate(
        result.params, result.articles, held, VARIANTS[variant_name], with_rows=with_rows
    )
    return report, result


@dataclass
class RankedRow:
    rank: int
    news_id: str
    score: float
    flag: str

    def csv_row(self) -> str:
        return f"{self.rank},{self.news_id},{repr(self.score)},{self.flag}"


def inspect_ranking(
    params: ModelParams,
    impression: ImpressionLog,
    articles: dict[str, NewsArticle],
    variant: Variant,
    flags: dict[str, str] | None = None,
) -> tuple[list[RankedRow], list[str]]:
    """Rank one impression's candidates, attaching clicked/clickbait flags.

    Returns the ranked rows plus the flagged ids that were not among the
    candidates (reported as warnings by callers, never a failure).
    """
    flags = flags or {}
    scorer = model_scorer(params, articles, variant)
    scores = scorer(impression)
    ids = [nid for nid, _ in impression.candidates]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    rows = [
        RankedRow(
            rank=pos + 1,
            news_id=ids[i],
            score=float(scores[i]),
            flag=flags.get(ids[i], "none"),
        )
        for pos, i in enumerate(order)
    ]
    missing = [nid for nid in flags if nid not in set(ids)]
    return rows, missing


def report_csv_lines(rows: Iterable[tuple[str, MetricsReport]]) -> list[str]:
    return [REPORT_HEADER] + [report.csv_row(variant) for variant, report in rows]


def detail_csv_lines(report: MetricsReport) -> list[str]:
    lines = [DETAIL_HEADER]
    for row in report.rows or []:
        lines.append(
            ",".join(
                [row.impression_id]
                + [repr(float(v)) for v in (row.auc, row.mrr, row.ndcg5, row.ndcg10)]
            )
        )
    return lines


def ranking_csv_lines(rows: Iterable[RankedRow]) -> list[str]:
    return [RANKING_HEADER] + [row.csv_row() for row in rows]
