"""Field encoders, attention pooling, history contextualization, projections.

A news item is encoded per field (category prompt, title, abstract view)
by mean-pooled token embeddings; candidate news merge their fields with
additive attention.  On the user side, each field's history sequence is
first contextualized by per-field multi-head self-attention before the
per-news merge and the final user-level attention pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import Batch, NewsArticle, build_eval_batch, make_field_plan
from .diffcore import Tensor
from .errors import ConfigError, ShapeError

FIELD_CATS = "cats"
FIELD_TITLE = "title"
FIELD_ABS = "abs"
DEFAULT_FIELDS = (FIELD_CATS, FIELD_TITLE, FIELD_ABS)


@dataclass
class AdditiveAttentionParams:
    """Projection, bias and context vector of one additive-attention pooler."""

    w: Tensor  # (d, hidden)
    b: Tensor  # (hidden,)
    e: Tensor  # (hidden, 1)


@dataclass
class MhsaParams:
    """Per-head query/key/value maps plus the output map of one MHSA block."""

    wq: Tensor  # (heads, d, d // heads)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (d, d)

    def __post_init__(self) -> None:
        h, d, dk = self.wq.shape
        if h < 1 or h * dk != d:
            raise ConfigError(f"head count {h} must divide the model dimension {d}")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != (h, d, dk):
                raise ConfigError(f"{name} shape {getattr(self, name).shape} != {(h, d, dk)}")
        if self.wo.shape != (d, d):
            raise ConfigError(f"wo shape {self.wo.shape} != {(d, d)}")


@dataclass
class ProjectionHead:
    """One-layer tanh feed-forward map used for the contrastive views."""

    w: Tensor  # (d, d)
    b: Tensor  # (d,)


@dataclass
class ModelParams:
    """All trainable parameters, keyed for the checkpoint manifest."""

    embedding: Tensor  # (vocab, d); row 0 is padding and stays zero
    mhsa: dict[str, MhsaParams]
    cand_merge: AdditiveAttentionParams
    news_merge: AdditiveAttentionParams
    user_merge: AdditiveAttentionParams
    proj_title: ProjectionHead
    proj_abs: ProjectionHead

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {"embedding": self.embedding}
        for fname in DEFAULT_FIELDS:
            block = self.mhsa[fname]
            for part in ("wq", "wk", "wv", "wo"):
                named[f"mhsa.{fname}.{part}"] = getattr(block, part)
        for group, attn in (
            ("cand_merge", self.cand_merge),
            ("news_merge", self.news_merge),
            ("user_merge", self.user_merge),
        ):
            for part in ("w", "b", "e"):
                named[f"{group}.{part}"] = getattr(attn, part)
        for group, head in (("proj_title", self.proj_title), ("proj_abs", self.proj_abs)):
            named[f"{group}.w"] = head.w
            named[f"{group}.b"] = head.b
        return named


# -- primitives -------------------------------------------------------------


def encode_field_tokens(tokens: Sequence[int], params: ModelParams) -> Tensor:
    """Mean of embedding rows over non-padding positions; empty input -> zeros."""
    ids = np.asarray(list(tokens), dtype=np.int64)
    rows = dc.take_rows(params.embedding, ids)
    return dc.mean_pool(rows, ids != 0)


def additive_attention(seq, mask, params: AdditiveAttentionParams) -> tuple[Tensor, Tensor]:
    """Score rows with ``e . tanh(seq W + b)``, softmax, and pool.

    ``seq`` is ``(..., n, d)`` and ``mask`` a boolean ``(..., n)`` (``None``
    for all-live).  Returns (weights ``(..., n)``, pooled ``(..., d)``).
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    if seq.ndim < 2:
        raise ShapeError(f"additive attention needs (..., n, d) input, got {seq.shape}")
    if seq.shape[-1] != params.w.shape[0]:
        raise ShapeError(
            f"input dim {seq.shape[-1]} does not match attention params {params.w.shape}"
        )
    hidden = dc.tanh(dc.add(dc.matmul(seq, params.w), params.b))
    scores = dc.reshape(dc.matmul(hidden, params.e), seq.shape[:-1])
    weights = dc.softmax_masked(scores, mask)
    lead = seq.shape[:-2]
    n, d = seq.shape[-2:]
    pooled = dc.reshape(
        dc.matmul(dc.reshape(weights, (*lead, 1, n)), seq), (*lead, d)
    )
    return weights, pooled


def mfke_field_sequence(seq, mask, params: MhsaParams) -> Tensor:
    """Contextualize one field's history sequence with multi-head attention.

    ``seq`` is ``(..., J, d)``; masked key positions are excluded from the
    attention softmax and masked output rows are zeroed.
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    heads, d, dk = params.wq.shape
    if seq.shape[-1] != d:
        raise ShapeError(f"sequence dim {seq.shape[-1]} does not match params dim {d}")
    j = seq.shape[-2]
    lead = seq.shape[:-2]
    if mask is None:
        mask_b = np.ones((*lead, j), dtype=bool)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), (*lead, j))

    x = dc.reshape(seq, (*lead, 1, j, d))
    q = dc.matmul(x, params.wq)  # (..., heads, J, dk)
    k = dc.matmul(x, params.wk)
    v = dc.matmul(x, params.wv)
    scores = dc.scale(dc.matmul(q, dc.swap_last(k)), 1.0 / math.sqrt(dk))
    key_mask = mask_b[..., None, None, :]
    attn = dc.softmax_masked(scores, key_mask)
    ctx = dc.matmul(attn, v)  # (..., heads, J, dk)
    nd = ctx.ndim
    ctx = dc.transpose(ctx, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    merged = dc.reshape(ctx, (*lead, j, d))
    out = dc.matmul(merged, params.wo)
    return dc.mul(out, Tensor(mask_b[..., None].astype(np.float32)))


def project_for_contrast(vec, head: ProjectionHead) -> Tensor:
    """Feed-forward + tanh + unit normalization of one or many field vectors."""
    v = vec if isinstance(vec, Tensor) else Tensor(vec)
    flat = v.ndim == 1
    if flat:
        v = dc.reshape(v, (1, v.shape[0]))
    out = dc.l2_normalize(dc.tanh(dc.add(dc.matmul(v, head.w), head.b)))
    return dc.reshape(out, (out.shape[-1],)) if flat else out


# -- batched composition -----------------------------------------------------


@dataclass
class BatchEncoding:
    """Encoded views of one batch: user vectors, candidate vectors, pool fields."""

    user: Tensor  # (B, d)
    cands: Tensor  # (B, C, d)
    pool_fields: dict[str, Tensor]  # field -> (P, d)


def encode_batch(params: ModelParams, batch: Batch, use_mfke: bool = True) -> BatchEncoding:
    """Encode every pooled news once, then compose candidates and users."""
    pool_fields: dict[str, Tensor] = {}
    for fname in batch.fields:
        rows = dc.take_rows(params.embedding, batch.field_tokens[fname])
        pool_fields[fname] = dc.mean_pool(rows, batch.field_masks[fname])

    cand_parts = [dc.take_rows(pool_fields[f], batch.cand_index) for f in batch.fields]
    cand_seq = dc.stack(cand_parts, axis=-2)  # (B, C, F, d)
    _, cand_vecs = additive_attention(cand_seq, None, params.cand_merge)

    hist_mask = batch.hist_mask
    has_any = hist_mask.any(axis=-1)
    # Rows with an empty history keep one live slot through the softmaxes
    # (pointing at zeroed vectors) and are zeroed out at the end.
    safe_mask = hist_mask.copy()
    safe_mask[~has_any, 0] = True
    maskf = Tensor(hist_mask[..., None].astype(np.float32))

    news_parts = []
    for fname in batch.fields:
        rows = dc.take_rows(pool_fields[fname], batch.hist_index)  # (B, J, d)
        rows = dc.mul(rows, maskf)
        if use_mfke:
            rows = mfke_field_sequence(rows, safe_mask, params.mhsa[fname])
        news_parts.append(rows)
    news_seq = dc.stack(news_parts, axis=-2)  # (B, J, F, d)
    _, news_vecs = additive_attention(news_seq, None, params.news_merge)
    _, user = additive_attention(news_vecs, safe_mask, params.user_merge)
    user = dc.mul(user, Tensor(has_any[:, None].astype(np.float32)))
    return BatchEncoding(user=user, cands=cand_vecs, pool_fields=pool_fields)


# -- single-item wrappers ----------------------------------------------------


def encode_candidate_news(
    article: NewsArticle,
    params: ModelParams,
    *,
    fields: tuple[str, ...] = DEFAULT_FIELDS,
    abs_attr: str = "gen_title_tokens",
) -> Tensor:
    """Field-encode one candidate and merge its fields into a d-vector."""
    plan = make_field_plan(fields, abs_attr)
    batch = build_eval_batch([], [article], plan)
    enc = encode_batch(params, batch, use_mfke=False)
    return dc.reshape(enc.cands, (params.dim,))


def encode_user(
    history: Sequence[NewsArticle],
    params: ModelParams,
    *,
    fields: tuple[str, ...] = DEFAULT_FIELDS,
    abs_attr: str = "gen_title_tokens",
    use_mfke: bool = True,
) -> Tensor:
    """Encode a click history into the user interest vector; empty -> zeros."""
    if not history:
        return Tensor(np.zeros(params.dim, dtype=np.float32))
    plan = make_field_plan(fields, abs_attr)
    batch = build_eval_batch(history, [], plan)
    enc = encode_batch(params, batch, use_mfke=use_mfke)
    return dc.reshape(enc.user, (params.dim,))
