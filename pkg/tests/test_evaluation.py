import math

import numpy as np
import pytest

import properties
from conftest import tiny_config
from newsrec.data import ImpressionLog, SyntheticConfig, generate_synthetic_corpus, parse_behaviors
from newsrec.errors import ContractError
from newsrec.evaluation import (
    MetricsReport,
    auc,
    evaluate,
    inspect_ranking,
    mrr,
    ndcg_at_k,
    ranking_csv_lines,
    report_csv_lines,
    run_ablation,
)
from newsrec.training import VARIANTS, train


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties_half(self):
        assert auc([0.5, 0.5, 0.5], [1, 0, 0]) == 0.5

    def test_pairwise_counting_case(self):
        assert auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75

    def test_single_class_skip_signal(self):
        assert auc([0.2, 0.4], [1, 1]) is None
        assert auc([0.2, 0.4], [0, 0]) is None


class TestMrr:
    def test_top_rank(self):
        assert mrr([0.9, 0.2], [1, 0]) == 1.0

    def test_second_rank(self):
        assert mrr([0.9, 0.2], [0, 1]) == 0.5

    def test_multiple_positives_full_sort(self):
        assert mrr([0.3, 0.9, 0.5], [1, 0, 1]) == pytest.approx(5.0 / 12.0, abs=1e-12)

    def test_no_positive_skip_signal(self):
        assert mrr([0.3, 0.4], [0, 0]) is None


class TestNdcg:
    def test_top_rank(self):
        assert ndcg_at_k([0.9, 0.2], [1, 0], 5) == 1.0

    def test_positive_below_cutoff(self):
        scores = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
        labels = [0, 0, 0, 0, 0, 1]
        assert ndcg_at_k(scores, labels, 5) == 0.0

    def test_ranks_two_and_four_of_five(self):
        scores = [5.0, 4.0, 3.0, 2.0, 1.0]
        labels = [0, 1, 0, 1, 0]
        expected = (1 / math.log2(3) + 1 / math.log2(5)) / (1 + 1 / math.log2(3))
        assert ndcg_at_k(scores, labels, 5) == pytest.approx(expected, abs=1e-12)


def _stub_impressions():
    imps = [
        ImpressionLog("a", "u1", [], [("N1", 1), ("N2", 0)]),
        ImpressionLog("b", "u2", [], [("N1", 1), ("N2", 0), ("N3", 0)]),
        ImpressionLog("c", "u3", [], [("N1", 1), ("N2", 1)]),  # single-class: skipped
    ]
    table = {
        "a": np.array([1.0, 0.0]),
        "b": np.array([0.5, 1.0, 0.0]),  # positive ranked 2nd of 3: AUC 0.5
        "c": np.array([1.0, 0.0]),
    }
    return imps, lambda imp: table[imp.impression_id]


class TestEvaluate:
    def test_single_impression_report(self):
        imps, scorer = _stub_impressions()
        report = evaluate(None, {}, imps[:1], VARIANTS["full"], scorer=scorer)
        assert report.auc == 1.0 and report.n_impressions == 1

    def test_mean_of_two_impressions(self):
        imps, scorer = _stub_impressions()
        report = evaluate(None, {}, imps[:2], VARIANTS["full"], scorer=scorer)
        assert report.auc == pytest.approx(0.75)
        assert report.n_impressions == 2

    def test_single_class_impressions_skipped(self):
        imps, scorer = _stub_impressions()
        report = evaluate(None, {}, imps, VARIANTS["full"], scorer=scorer, with_rows=True)
        assert report.n_impressions == 2
        assert [r.impression_id for r in report.rows] == ["a", "b"]

    def test_all_single_class_rejected(self):
        imps, scorer = _stub_impressions()
        with pytest.raises(ContractError):
            evaluate(None, {}, imps[2:], VARIANTS["full"], scorer=scorer)

    def test_deterministic(self):
        corpus = generate_synthetic_corpus(
            SyntheticConfig(n_users=4, n_news=16, n_topics=2, seed=3)
        )
        cfg = tiny_config(epochs=2)
        result = train(cfg, corpus.news_lines, corpus.behavior_lines)
        imps = parse_behaviors(corpus.behavior_lines)
        a = evaluate(result.params, result.articles, imps, VARIANTS["full"])
        b = evaluate(result.params, result.articles, imps, VARIANTS["full"])
        assert a == b


class TestRunAblation:
    def _data(self):
        corpus = generate_synthetic_corpus(
            SyntheticConfig(n_users=5, n_news=20, n_topics=2, clickbait_rate=0.3, seed=4)
        )
        lines = corpus.behavior_lines
        return corpus.news_lines, lines[:14], lines[14:]

    def test_full_equals_plain_train_plus_evaluate(self):
        news, train_lines, eval_lines = self._data()
        cfg = tiny_config(epochs=2)
        report, _ = run_ablation("full", cfg, news, train_lines, eval_lines)
        result = train(cfg, news, train_lines)
        manual = evaluate(
            result.params, result.articles, parse_behaviors(eval_lines), VARIANTS["full"]
        )
        assert report == manual

    def test_no_c2_trains_without_contrastive_term(self):
        news, train_lines, eval_lines = self._data()
        report, result = run_ablation("no_c2", tiny_config(epochs=1), news, train_lines,
                                      eval_lines)
        assert result.state.config.variant == "no_c2"
        assert all(row.l_cl == 0.0 for row in result.log)
        assert report.n_impressions >= 1

    def test_unknown_variant_rejected(self):
        news, train_lines, eval_lines = self._data()
        with pytest.raises(ContractError):
            run_ablation("nope", tiny_config(), news, train_lines, eval_lines)


class TestInspectRanking:
    def _trained(self):
        corpus = generate_synthetic_corpus(
            SyntheticConfig(n_users=4, n_news=16, n_topics=2, seed=6)
        )
        cfg = tiny_config(epochs=2)
        result = train(cfg, corpus.news_lines, corpus.behavior_lines)
        imps = parse_behaviors(corpus.behavior_lines)
        return result, imps[0]

    def test_flag_lands_on_its_news(self):
        result, imp = self._trained()
        plain, _ = inspect_ranking(result.params, imp, result.articles, VARIANTS["full"])
        top_id = plain[0].news_id
        rows, missing = inspect_ranking(
            result.params, imp, result.articles, VARIANTS["full"], {top_id: "clicked"}
        )
        assert rows[0].flag == "clicked" and rows[0].rank == 1
        assert missing == []

    def test_empty_flags_plain_ranking(self):
        result, imp = self._trained()
        rows, missing = inspect_ranking(result.params, imp, result.articles, VARIANTS["full"])
        assert [r.rank for r in rows] == list(range(1, len(imp.candidates) + 1))
        assert all(r.flag == "none" for r in rows)
        assert missing == []
        assert sorted((r.score for r in rows), reverse=True) == [r.score for r in rows]

    def test_unknown_flagged_id_warns_not_fails(self):
        result, imp = self._trained()
        rows, missing = inspect_ranking(
            result.params, imp, result.articles, VARIANTS["full"], {"NOPE": "clickbait"}
        )
        assert missing == ["NOPE"]
        assert len(rows) == len(imp.candidates)

    def test_csv_shape(self):
        result, imp = self._trained()
        rows, _ = inspect_ranking(result.params, imp, result.articles, VARIANTS["full"])
        lines = ranking_csv_lines(rows)
        assert lines[0] == "rank,news_id,score,flag"
        assert len(lines) == len(rows) + 1


class TestReportCsv:
    def test_header_and_row_format(self):
        report = MetricsReport(auc=0.75, mrr=0.5, ndcg5=0.25, ndcg10=0.125, n_impressions=4)
        lines = report_csv_lines([("full", report)])
        assert lines[0] == "variant,auc,mrr,ndcg5,ndcg10,n_impressions"
        assert lines[1] == "full,0.75,0.5,0.25,0.125,4"


class TestInvariantSuites:
    def test_oracle_agreement(self):
        properties.check_metrics_match_bruteforce(0, 200)

    def test_monotone_invariance(self):
        properties.check_metrics_monotone_invariant(0, 100)

    def test_auc_complement(self):
        properties.check_auc_complement(0, 100)

    def test_permutation_invariance(self):
        properties.check_metrics_permutation_invariant(0, 100)
