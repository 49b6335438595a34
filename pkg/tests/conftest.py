import dataclasses

import numpy as np
import pytest

from newsrec.data import NewsArticle, TrainingSample, assemble_batch, make_field_plan
from newsrec.diffcore import Tensor
from newsrec.encoders import encode_batch, project_for_contrast
from newsrec.objectives import (
    click_scores,
    contrastive_loss,
    recommendation_loss,
    total_loss,
)
from newsrec.training import TrainConfig, init_params


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        d=4,
        heads=2,
        attn_hidden=4,
        max_title_len=6,
        max_gen_title_len=6,
        max_abstract_len=8,
        max_cats_len=4,
        max_history=5,
        negatives=2,
        lr=0.05,
        batch_size=8,
        epochs=2,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_params(config: TrainConfig | None = None, vocab_size: int = 12, seed: int = 0):
    return init_params(config or tiny_config(), vocab_size, seed)


def article(news_id: str, title, abstract=None, gen=None, cats=None) -> NewsArticle:
    title = list(title)
    abstract = list(abstract) if abstract is not None else list(title)
    return NewsArticle(
        news_id=news_id,
        category="news",
        subcategory="daily",
        title_tokens=title,
        abstract_tokens=abstract,
        gen_title_tokens=list(gen) if gen is not None else abstract[:6],
        cats_tokens=list(cats) if cats is not None else [2],
    )


def random_article(rng: np.random.Generator, news_id: str, vocab_size: int = 12) -> NewsArticle:
    def ids(lo, hi):
        n = int(rng.integers(lo, hi + 1))
        return rng.integers(2, vocab_size, size=n).tolist()

    return article(news_id, ids(2, 5), abstract=ids(3, 7), gen=ids(2, 5), cats=ids(1, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def full_model_probe():
    """Builds (loss_fn_of_embedding, embedding_leaf) for gradient verification."""

    def build(
        n_samples: int = 2,
        seed: int = 0,
        k: int = 2,
        dtype=np.float32,
        use_mfke: bool = True,
        lambda_cl: float = 0.1,
    ):
        rng = np.random.default_rng(seed)
        cfg = tiny_config(negatives=k)
        vocab_size = 10
        params = init_params(cfg, vocab_size, seed)
        arts = [random_article(rng, f"N{i}", vocab_size=vocab_size) for i in range(8)]
        samples = []
        for _ in range(n_samples):
            picks = rng.choice(len(arts), size=3 + k, replace=False)
            samples.append(
                TrainingSample(
                    history=[arts[i] for i in picks[:2]],
                    positive=arts[picks[2]],
                    negatives=[arts[i] for i in picks[3:]],
                )
            )
        batch = assemble_batch(samples, make_field_plan())

        def f(emb: Tensor) -> Tensor:
            swapped = dataclasses.replace(params, embedding=emb)
            enc = encode_batch(swapped, batch, use_mfke=use_mfke)
            l_rec = recommendation_loss(click_scores(enc.user, enc.cands), 0.25, 2.0)
            t_proj = project_for_contrast(enc.pool_fields["title"], swapped.proj_title)
            a_proj = project_for_contrast(enc.pool_fields["abs"], swapped.proj_abs)
            l_cl = contrastive_loss(t_proj, a_proj, 0.1)
            return total_loss(l_rec, l_cl, lambda_cl)

        emb = Tensor(params.embedding.data.astype(dtype))
        return f, emb

    return build
