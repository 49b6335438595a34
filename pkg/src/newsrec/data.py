"""News/behavior table parsing, tokenization, batching, and synthetic corpora.

The on-disk formats follow the common tab-separated news-recommendation
layout: a news table with columns ``news_id, category, subcategory,
title, abstract, url, title_entities, abstract_entities`` (columns 6-8
ignored, optional 9th column with a precomputed generated title), and a
behaviors table with columns ``impression_id, user_id, time, history,
impressions`` where candidates carry ``-0``/``-1`` click suffixes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, DuplicateIdError, ParseError

PAD_ID = 0
UNK_ID = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class NewsArticle:
    """One news item with all token views used by the encoders."""

    news_id: str
    category: str
    subcategory: str
    title_tokens: list[int]
    abstract_tokens: list[int]
    gen_title_tokens: list[int]
    cats_tokens: list[int]


@dataclass
class ImpressionLog:
    """One behavior record: click history plus labeled candidates."""

    impression_id: str
    user_id: str
    history: list[str]
    candidates: list[tuple[str, int]]


@dataclass
class TrainingSample:
    """One positive candidate with its sampled negatives and user history."""

    history: list[NewsArticle]
    positive: NewsArticle
    negatives: list[NewsArticle]


class Vocabulary:
    """Token-id mapping with id 0 reserved for padding and id 1 for unknowns."""

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token = ["<pad>", "<unk>", *tokens]
        self._token_to_id = {tok: i + 2 for i, tok in enumerate(tokens)}
        if len(self._token_to_id) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def lookup(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order (ids 2..)."""
        return self._id_to_token[2:]


def split_words(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric run."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, max_len: int, vocab: Vocabulary) -> list[int]:
    """Map text to at most ``max_len`` token ids (unknown words map to 1)."""
    return [vocab.lookup(w) for w in split_words(text)[:max_len]]


def build_prompt(category: str, subcategory: str) -> str:
    """Join category and subcategory into one text field.

    An empty subcategory yields the category alone; an empty category is
    rejected.
    """
    if not category:
        raise ContractError("category must be non-empty")
    if not subcategory:
        return category
    return f"{category} about {subcategory}"


# -- raw table parsing ----------------------------------------------------


def _split_news_line(line: str, line_no: int) -> tuple[str, str, str, str, str, str | None]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 5:
        raise ParseError(line_no, f"expected >=5 tab-separated columns, got {len(parts)}")
    gen_title = parts[8] if len(parts) >= 9 else None
    return parts[0], parts[1], parts[2], parts[3], parts[4], gen_title


def build_vocabulary(
    news_lines: Iterable[str],
    min_freq: int = 1,
    *,
    use_gen_column: bool = False,
    cap: int | None = None,
) -> Vocabulary:
    """Count tokens over titles, abstracts, generated titles and prompts.

    Ids are assigned by (frequency desc, token asc) starting at 2, keeping
    tokens with frequency >= ``min_freq``; ``cap`` optionally bounds the
    number of retained tokens.
    """
    if min_freq < 1:
        raise ContractError("min_freq must be >= 1")
    counts: dict[str, int] = {}
    saw_any = False
    for line_no, line in enumerate(news_lines, start=1):
        if not line.strip():
            continue
        saw_any = True
        _, category, subcategory, title, abstract, gen_title = _split_news_line(line, line_no)
        if not category:
            raise ParseError(line_no, "empty category")
        title_words = split_words(title)
        abstract_words = split_words(abstract) or title_words
        if use_gen_column and gen_title:
            gen_words = split_words(gen_title) or abstract_words
        else:
            gen_words = abstract_words
        for word in (
            title_words
            + abstract_words
            + gen_words
            + split_words(build_prompt(category, subcategory))
        ):
            counts[word] = counts.get(word, 0) + 1
    if not saw_any:
        raise ContractError("cannot build a vocabulary from an empty news table")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    if cap is not None:
        kept = kept[: max(cap, 0)]
    return Vocabulary(kept)


def parse_news_table(
    news_lines: Iterable[str],
    vocab: Vocabulary,
    *,
    max_title: int = 20,
    max_abstract: int = 50,
    max_gen_title: int = 25,
    max_cats: int = 10,
    use_gen_column: bool = False,
) -> list[NewsArticle]:
    """Parse one article per line, tokenizing every field.

    An empty abstract falls back to the title; a missing generated title
    defaults to the first ``max_gen_title`` tokens of the abstract.
    """
    articles: list[NewsArticle] = []
    seen: set[str] = set()
    for line_no, line in enumerate(news_lines, start=1):
        if not line.strip():
            continue
        news_id, category, subcategory, title, abstract, gen_title = _split_news_line(
            line, line_no
        )
        if not news_id:
            raise ParseError(line_no, "empty news id")
        if news_id in seen:
            raise DuplicateIdError(f"duplicate news id {news_id!r} at line {line_no}")
        seen.add(news_id)
        if not category:
            raise ParseError(line_no, "empty category")
        title_tokens = tokenize(title, max_title, vocab)
        abstract_tokens = tokenize(abstract, max_abstract, vocab)
        if not abstract_tokens:
            abstract_tokens = list(title_tokens)
        if use_gen_column and gen_title:
            gen_tokens = tokenize(gen_title, max_gen_title, vocab)
        else:
            gen_tokens = []
        if not gen_tokens:
            gen_tokens = abstract_tokens[:max_gen_title]
        articles.append(
            NewsArticle(
                news_id=news_id,
                category=category,
                subcategory=subcategory,
                title_tokens=title_tokens,
                abstract_tokens=abstract_tokens,
                gen_title_tokens=gen_tokens,
                cats_tokens=tokenize(build_prompt(category, subcategory), max_cats, vocab),
            )
        )
    return articles


def parse_behaviors(
    behavior_lines: Iterable[str],
    *,
    max_history: int = 25,
) -> list[ImpressionLog]:
    """Parse impression logs, keeping the most recent ``max_history`` clicks."""
    logs: list[ImpressionLog] = []
    for line_no, line in enumerate(behavior_lines, start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 5:
            raise ParseError(line_no, f"expected >=5 tab-separated columns, got {len(parts)}")
        impression_id, user_id, _time, history_col, cand_col = parts[:5]
        history = history_col.split()
        if max_history >= 0:
            history = history[-max_history:] if max_history else []
        candidates: list[tuple[str, int]] = []
        for token in cand_col.split():
            news_id, dash, label = token.rpartition("-")
            if not dash or label not in ("0", "1") or not news_id:
                raise ParseError(line_no, f"candidate {token!r} lacks a -0/-1 click suffix")
            candidates.append((news_id, int(label)))
        logs.append(
            ImpressionLog(
                impression_id=impression_id,
                user_id=user_id,
                history=history,
                candidates=candidates,
            )
        )
    return logs


def news_index(articles: Iterable[NewsArticle]) -> dict[str, NewsArticle]:
    return {a.news_id: a for a in articles}


def validate_references(
    impressions: Iterable[ImpressionLog], index: dict[str, NewsArticle]
) -> None:
    """Every news id referenced by an impression must resolve."""
    for imp in impressions:
        for news_id in imp.history:
            if news_id not in index:
                raise DataError(
                    f"impression {imp.impression_id}: history id {news_id!r} not in news table"
                )
        for news_id, _label in imp.candidates:
            if news_id not in index:
                raise DataError(
                    f"impression {imp.impression_id}: candidate id {news_id!r} not in news table"
                )


def split_impressions(
    impressions: Sequence, eval_fraction: float, seed: int
) -> tuple[list, list]:
    """Deterministic (train, eval) split; both halves keep source order.

    Works on any sequence (parsed impressions or raw behavior lines).
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ContractError("eval_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(impressions)
    n_eval = min(max(int(round(eval_fraction * n)), 1), max(n - 1, 1))
    chosen = set(rng.permutation(n)[:n_eval].tolist())
    train = [imp for i, imp in enumerate(impressions) if i not in chosen]
    held = [imp for i, imp in enumerate(impressions) if i in chosen]
    return train, held


# -- training instances and batches ----------------------------------------


def sample_training_instances(
    imp: ImpressionLog,
    k: int,
    rng: np.random.Generator,
    index: dict[str, NewsArticle],
) -> list[TrainingSample]:
    """One sample per clicked candidate, pairing it with ``k`` unclicked ones.

    Negatives are drawn uniformly without replacement from the same
    impression, falling back to replacement when fewer than ``k`` exist;
    impressions without any unclicked candidate contribute nothing.
    """
    if k < 1:
        raise ContractError("negative ratio k must be >= 1")
    positives = [nid for nid, label in imp.candidates if label == 1]
    negatives = [nid for nid, label in imp.candidates if label == 0]
    if not positives or not negatives:
        return []
    try:
        history = [index[nid] for nid in imp.history]
        samples = []
        for pos in positives:
            replace = len(negatives) < k
            picks = rng.choice(len(negatives), size=k, replace=replace)
            samples.append(
                TrainingSample(
                    history=history,
                    positive=index[pos],
                    negatives=[index[negatives[i]] for i in picks],
                )
            )
    except KeyError as exc:
        raise DataError(
            f"impression {imp.impression_id}: unresolved news id {exc.args[0]!r}"
        ) from exc
    return samples


FieldPlan = tuple[tuple[str, str], ...]


def make_field_plan(
    fields: Sequence[str] = ("cats", "title", "abs"),
    abs_attr: str = "gen_title_tokens",
) -> FieldPlan:
    """Map encoder field names to the article attribute supplying their tokens.

    The ``abs`` field reads ``abs_attr`` (the generated-title view by
    default, the raw abstract in the long-abstract variant).
    """
    attr_for = {"cats": "cats_tokens", "title": "title_tokens", "abs": abs_attr}
    unknown = [f for f in fields if f not in attr_for]
    if unknown:
        raise ContractError(f"unknown field names: {unknown}")
    return tuple((f, attr_for[f]) for f in fields)


@dataclass
class Batch:
    """Fixed-shape padded arrays for one batch of samples or one impression.

    ``field_tokens[f]`` is ``(P, L_f)`` over the deduplicated news pool;
    ``hist_index``/``cand_index`` map each sample's history/candidate slots
    into the pool.  ``sample_pools`` lists each sample's own deduplicated
    pool rows (used when the contrastive pool is per impression).
    """

    fields: tuple[str, ...]
    pool_ids: list[str]
    field_tokens: dict[str, np.ndarray]
    field_masks: dict[str, np.ndarray]
    hist_index: np.ndarray
    hist_mask: np.ndarray
    cand_index: np.ndarray
    sample_pools: list[np.ndarray] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.hist_index.shape[0]


def _pool_tokens(
    pool: list[NewsArticle], plan: FieldPlan
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    tokens: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for fname, attr in plan:
        lists = [getattr(a, attr) for a in pool]
        width = max(1, max((len(t) for t in lists), default=0))
        arr = np.full((len(pool), width), PAD_ID, dtype=np.int64)
        msk = np.zeros((len(pool), width), dtype=bool)
        for i, toks in enumerate(lists):
            arr[i, : len(toks)] = toks
            msk[i, : len(toks)] = True
        tokens[fname] = arr
        masks[fname] = msk
    return tokens, masks


def assemble_batch(samples: Sequence[TrainingSample], plan: FieldPlan) -> Batch:
    """Pad a list of samples into pool-indexed arrays.

    The pool is the deduplicated union of every sample's history, positive
    and negatives, in first-occurrence order.
    """
    if not samples:
        raise ContractError("cannot assemble an empty batch")
    k = len(samples[0].negatives)
    for s in samples:
        if len(s.negatives) != k:
            raise ContractError("all samples in a batch must share the negative count")

    pool: dict[str, NewsArticle] = {}
    for s in samples:
        for a in [*s.history, s.positive, *s.negatives]:
            pool.setdefault(a.news_id, a)
    pool_ids = list(pool)
    where = {nid: i for i, nid in enumerate(pool_ids)}

    b = len(samples)
    j = max(1, max(len(s.history) for s in samples))
    hist_index = np.zeros((b, j), dtype=np.int64)
    hist_mask = np.zeros((b, j), dtype=bool)
    cand_index = np.zeros((b, 1 + k), dtype=np.int64)
    sample_pools: list[np.ndarray] = []
    for i, s in enumerate(samples):
        ids = [a.news_id for a in s.history]
        hist_index[i, : len(ids)] = [where[nid] for nid in ids]
        hist_mask[i, : len(ids)] = True
        cand_ids = [s.positive.news_id] + [a.news_id for a in s.negatives]
        cand_index[i] = [where[nid] for nid in cand_ids]
        own = dict.fromkeys(ids + cand_ids)
        sample_pools.append(np.array([where[nid] for nid in own], dtype=np.int64))

    tokens, masks = _pool_tokens(list(pool.values()), plan)
    return Batch(
        fields=tuple(f for f, _ in plan),
        pool_ids=pool_ids,
        field_tokens=tokens,
        field_masks=masks,
        hist_index=hist_index,
        hist_mask=hist_mask,
        cand_index=cand_index,
        sample_pools=sample_pools,
    )


def build_eval_batch(
    history: Sequence[NewsArticle],
    candidates: Sequence[NewsArticle],
    plan: FieldPlan,
) -> Batch:
    """Single-impression batch: one history row plus an arbitrary candidate list."""
    pool: dict[str, NewsArticle] = {}
    for a in [*history, *candidates]:
        pool.setdefault(a.news_id, a)
    if not pool:
        raise ContractError("cannot build a batch with no news")
    pool_ids = list(pool)
    where = {nid: i for i, nid in enumerate(pool_ids)}

    j = max(1, len(history))
    hist_index = np.zeros((1, j), dtype=np.int64)
    hist_mask = np.zeros((1, j), dtype=bool)
    for i, a in enumerate(history):
        hist_index[0, i] = where[a.news_id]
        hist_mask[0, i] = True
    cand_index = np.array([[where[a.news_id] for a in candidates]], dtype=np.int64)

    tokens, masks = _pool_tokens(list(pool.values()), plan)
    return Batch(
        fields=tuple(f for f, _ in plan),
        pool_ids=pool_ids,
        field_tokens=tokens,
        field_masks=masks,
        hist_index=hist_index,
        hist_mask=hist_mask,
        cand_index=cand_index,
        sample_pools=[np.arange(len(pool_ids), dtype=np.int64)],
    )


# -- synthetic clickbait corpus --------------------------------------------


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic clickbait corpus generator."""

    n_users: int = 50
    n_news: int = 200
    n_topics: int = 4
    clickbait_rate: float = 0.0
    seed: int = 0
    impressions_per_user: int = 4
    candidates_per_impression: int = 10
    topical_per_impression: int = 2
    bait_per_impression: int = 2
    history_min: int = 4
    history_max: int = 12
    title_len: tuple[int, int] = (4, 6)
    abstract_len: tuple[int, int] = (15, 30)
    topic_vocab: int = 25
    filler_vocab: int = 30
    filler_share: float = 0.3
    # Abstracts are lede-first: an optional low-signal tail models the
    # trailing detail text that dilutes a long abstract view.
    tail_len: tuple[int, int] = (0, 0)
    tail_filler: float = 0.85
    # "shared": titles reuse the abstract topic words; "headline": titles
    # draw from a per-topic headline vocabulary disjoint from abstracts.
    title_vocab: str = "shared"
    # Fraction of abstract topic words borrowed from the ring-neighbor
    # topic, giving candidates graded (not all-or-nothing) relevance.
    topic_overlap: float = 0.0

    def validate(self) -> None:
        for name in ("n_users", "n_news", "n_topics", "impressions_per_user",
                     "candidates_per_impression"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.clickbait_rate <= 1.0:
            raise ContractError("clickbait_rate must lie in [0, 1]")
        if self.n_topics < 2 and self.clickbait_rate > 0:
            raise ContractError("corrupting titles needs at least 2 topics")
        if self.title_vocab not in ("shared", "headline"):
            raise ContractError("title_vocab must be 'shared' or 'headline'")
        if not 0.0 <= self.topic_overlap <= 1.0:
            raise ContractError("topic_overlap must lie in [0, 1]")


@dataclass
class SyntheticCorpus:
    """Generated tables plus the ground truth the generator used."""

    config: SyntheticConfig
    news_lines: list[str]
    behavior_lines: list[str]
    news_topics: dict[str, int]
    clickbait_ids: list[str]
    user_topics: dict[str, int]

    def provenance_lines(self) -> list[str]:
        cfg = self.config
        return [
            "generator=synthetic-clickbait-corpus",
            f"n_users={cfg.n_users}",
            f"n_news={cfg.n_news}",
            f"n_topics={cfg.n_topics}",
            f"clickbait_rate={cfg.clickbait_rate}",
            f"seed={cfg.seed}",
            f"impressions_per_user={cfg.impressions_per_user}",
            f"candidates_per_impression={cfg.candidates_per_impression}",
            f"n_impressions={len(self.behavior_lines)}",
            "clickbait_news=" + ",".join(self.clickbait_ids),
        ]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "news": out / "news.tsv",
            "behaviors": out / "behaviors.tsv",
            "provenance": out / "provenance.txt",
        }
        paths["news"].write_text("\n".join(self.news_lines) + "\n", encoding="utf-8")
        paths["behaviors"].write_text("\n".join(self.behavior_lines) + "\n", encoding="utf-8")
        paths["provenance"].write_text(
            "\n".join(self.provenance_lines()) + "\n", encoding="utf-8"
        )
        return paths


def generate_synthetic_corpus(cfg: SyntheticConfig) -> SyntheticCorpus:
    """Build a topic-driven corpus where some titles lie about their topic.

    Every news item has a latent topic; its abstract is a faithful mix of
    topic words and shared filler words.  With probability
    ``clickbait_rate`` the title is drawn from a *different* topic's
    vocabulary.  Users prefer one topic and click exactly the candidates
    whose abstract topic matches; candidate lists are salted with
    corrupted-title items whose title matches the user's topic so that a
    title-reliant ranker is actively misled.  Categories are constant so
    the only learnable signal lives in the text fields.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    topic_words = [
        [f"topic{t}word{i:02d}" for i in range(cfg.topic_vocab)] for t in range(cfg.n_topics)
    ]
    if cfg.title_vocab == "headline":
        title_words = [
            [f"head{t}word{i:02d}" for i in range(cfg.topic_vocab)]
            for t in range(cfg.n_topics)
        ]
    else:
        title_words = topic_words
    filler_words = [f"filler{i:02d}" for i in range(cfg.filler_vocab)]

    news_lines: list[str] = []
    news_topics: dict[str, int] = {}
    title_topics: dict[str, int] = {}
    clickbait_ids: list[str] = []
    by_topic: dict[int, list[str]] = {t: [] for t in range(cfg.n_topics)}
    faithful_by_topic: dict[int, list[str]] = {t: [] for t in range(cfg.n_topics)}
    bait_by_title_topic: dict[int, list[str]] = {t: [] for t in range(cfg.n_topics)}

    for i in range(cfg.n_news):
        news_id = f"N{i:05d}"
        topic = int(rng.integers(cfg.n_topics))
        corrupted = bool(rng.random() < cfg.clickbait_rate)
        if corrupted:
            title_topic = int((topic + 1 + rng.integers(cfg.n_topics - 1)) % cfg.n_topics)
        else:
            title_topic = topic
        n_title = int(rng.integers(cfg.title_len[0], cfg.title_len[1] + 1))
        title = " ".join(rng.choice(title_words[title_topic], size=n_title))

        neighbor = (topic + 1) % cfg.n_topics

        def content_word() -> str:
            src = neighbor if rng.random() < cfg.topic_overlap else topic
            return str(rng.choice(topic_words[src]))

        def mixed_words(count: int, filler_p: float) -> list[str]:
            return [
                str(rng.choice(filler_words)) if rng.random() < filler_p else content_word()
                for _ in range(count)
            ]

        n_lede = int(rng.integers(cfg.abstract_len[0], cfg.abstract_len[1] + 1))
        n_tail = int(rng.integers(cfg.tail_len[0], cfg.tail_len[1] + 1))
        abstract_words = mixed_words(n_lede, cfg.filler_share) + mixed_words(
            n_tail, cfg.tail_filler
        )
        abstract = " ".join(abstract_words)
        news_lines.append(f"{news_id}\tnews\tdaily\t{title}\t{abstract}\t\t\t")
        news_topics[news_id] = topic
        title_topics[news_id] = title_topic
        by_topic[topic].append(news_id)
        if corrupted:
            clickbait_ids.append(news_id)
            bait_by_title_topic[title_topic].append(news_id)
        else:
            faithful_by_topic[topic].append(news_id)

    all_ids = list(news_topics)
    behavior_lines: list[str] = []
    user_topics: dict[str, int] = {}
    imp_no = 0
    time_stamp = "11/15/2019 8:55:22 AM"
    for u in range(cfg.n_users):
        user_id = f"U{u:04d}"
        pref = int(rng.integers(cfg.n_topics))
        user_topics[user_id] = pref
        topical = by_topic[pref] or all_ids
        n_hist = int(rng.integers(cfg.history_min, cfg.history_max + 1))
        n_hist = min(n_hist, len(topical))
        history = [topical[i] for i in rng.choice(len(topical), size=n_hist, replace=False)]

        for _ in range(cfg.impressions_per_user):
            imp_no += 1
            chosen: dict[str, None] = {}

            def draw(source: list[str], count: int) -> None:
                for _ in range(count):
                    if not source:
                        return
                    chosen.setdefault(str(source[rng.integers(len(source))]), None)

            # Guaranteed exposure: faithful topical matches, then bait whose
            # title matches the user's topic but whose content does not.
            draw(faithful_by_topic[pref] or topical, cfg.topical_per_impression)
            bait = [
                nid for nid in bait_by_title_topic[pref] if news_topics[nid] != pref
            ]
            draw(bait, cfg.bait_per_impression)
            while len(chosen) < cfg.candidates_per_impression:
                chosen.setdefault(str(all_ids[rng.integers(len(all_ids))]), None)
            order = rng.permutation(len(chosen))
            ids = list(chosen)
            cands = [
                f"{ids[i]}-{1 if news_topics[ids[i]] == pref else 0}" for i in order
            ]
            behavior_lines.append(
                f"{imp_no}\t{user_id}\t{time_stamp}\t{' '.join(history)}\t{' '.join(cands)}"
            )

    return SyntheticCorpus(
        config=cfg,
        news_lines=news_lines,
        behavior_lines=behavior_lines,
        news_topics=news_topics,
        clickbait_ids=clickbait_ids,
        user_topics=user_topics,
    )
