"""Click scoring and every loss term.

The probability/loss reductions are fused tape ops that accumulate in
float64 and keep float64 scalars, so closed-form values survive to full
precision while the rest of the model stays float32.  All softmax-style
terms are max-shifted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, make_node
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    """Focal and contrastive hyperparameters with their valid ranges."""

    alpha: float = 0.25
    gamma: float = 2.0
    temperature: float = 0.1
    lambda_cl: float = 0.1
    negatives: int = 4

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lambda_cl < 0.0:
            raise ConfigError(f"lambda_cl must be >= 0, got {self.lambda_cl}")
        if self.negatives < 1:
            raise ConfigError(f"negatives must be >= 1, got {self.negatives}")


def click_score(user, news) -> Tensor:
    """Inner product of a user vector and a news vector."""
    user = user if isinstance(user, Tensor) else Tensor(user)
    news = news if isinstance(news, Tensor) else Tensor(news)
    if user.shape != news.shape:
        raise ShapeError(f"click_score dimensions disagree: {user.shape} vs {news.shape}")
    return dc.mul(user, news).sum()


def click_scores(user_vecs: Tensor, cand_vecs: Tensor) -> Tensor:
    """Batched scores: ``(B, d)`` users against ``(B, C, d)`` candidates -> ``(B, C)``."""
    b, d = user_vecs.shape
    expanded = dc.reshape(user_vecs, (b, 1, d))
    return dc.mul(expanded, cand_vecs).sum(axis=-1)


def _softmax_first_prob(scores: Tensor) -> Tensor:
    """Probability mass of column 0 under a per-row softmax; float64 output."""
    s = scores.data.astype(np.float64)
    shifted = s - s.max(axis=-1, keepdims=True)
    z = np.exp(shifted)
    sigma = z / z.sum(axis=-1, keepdims=True)
    p = sigma[..., 0]

    def backward(g: np.ndarray) -> None:
        gs = (g * p)[..., None] * (-sigma)
        gs[..., 0] += g * p
        dc._add_grad(scores, gs)

    return make_node(p, (scores,), backward)


def positive_probability(pos, negs) -> Tensor:
    """Softmax probability of the positive score against its sampled negatives.

    Shift-invariant by construction (max-subtraction).  Accepts plain
    floats or tensors; differentiable when given tensors.
    """
    pos_t = pos if isinstance(pos, Tensor) else Tensor(np.float32(pos))
    if isinstance(negs, Tensor):
        negs_t = negs
    elif negs and isinstance(negs[0], Tensor):
        negs_t = dc.stack(list(negs))
    else:
        negs_t = Tensor(np.asarray(list(negs), dtype=np.float32))
    if negs_t.ndim != 1 or negs_t.shape[0] < 1:
        raise ContractError("negs must be a non-empty vector of scores")
    row = dc.concat_last([dc.reshape(pos_t, (1,)), negs_t])
    return dc.reshape(_softmax_first_prob(dc.reshape(row, (1, -1))), ())


def focal_loss(p, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """``-alpha * (1 - p)**gamma * log(p)`` with p clamped to >= 1e-12.

    Elementwise over ``p`` (scalar or vector); rejects p > 1.
    """
    p = p if isinstance(p, Tensor) else Tensor(np.float64(p))
    if np.any(p.data > 1.0):
        raise ContractError("focal loss probabilities must not exceed 1")
    pc = np.maximum(p.data.astype(np.float64), 1e-12)
    one_minus = 1.0 - pc
    weight = one_minus**gamma
    logp = np.log(pc)
    data = -alpha * weight * logp

    def backward(g: np.ndarray) -> None:
        # dL/dp = alpha*gamma*(1-p)^(gamma-1)*log(p) - alpha*(1-p)^gamma/p,
        # which tends to 0 as p -> 1 for any gamma > 0.
        if gamma > 0.0:
            pw = np.power(one_minus, gamma - 1.0, where=one_minus > 0.0, out=np.zeros_like(pc))
            term1 = gamma * pw * logp
        else:
            term1 = np.zeros_like(pc)
        dloss = alpha * term1 - alpha * weight / pc
        dloss = np.where(p.data.astype(np.float64) < 1e-12, 0.0, dloss)
        dc._add_grad(p, g * dloss)

    return make_node(data, (p,), backward)


def recommendation_loss(scores: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean focal loss over a batch of score rows (column 0 is the positive)."""
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 2:
        raise ContractError(
            f"recommendation loss needs a non-empty (B, 1+K) score matrix, got {scores.shape}"
        )
    p = _softmax_first_prob(scores)
    return focal_loss(p, alpha, gamma).mean()


def contrastive_loss(title_projs, abs_projs, temperature: float) -> Tensor:
    """In-batch InfoNCE between the two views of each pooled news item.

    Both inputs are ``(n, d)`` unit-row matrices; row i of each side is a
    view of the same news.  Computed fused in float64 for headroom at
    small temperatures.
    """
    t = title_projs if isinstance(title_projs, Tensor) else Tensor(title_projs)
    a = abs_projs if isinstance(abs_projs, Tensor) else Tensor(abs_projs)
    if t.ndim != 2 or a.ndim != 2 or t.shape != a.shape:
        raise ShapeError(f"contrastive views disagree: {t.shape} vs {a.shape}")
    n = t.shape[0]
    if n < 1:
        raise ContractError("contrastive loss needs at least one pair")
    if temperature <= 0.0:
        raise ContractError("temperature must be > 0")
    for name, side in (("title", t), ("abs", a)):
        norms = np.linalg.norm(side.data.astype(np.float64), axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ContractError(f"{name} projections must be unit-norm within 1e-4")

    t64 = t.data.astype(np.float64)
    a64 = a.data.astype(np.float64)
    sim = (t64 @ a64.T) / temperature
    shifted = sim - sim.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + sim.max(axis=-1)
    per_row = lse - np.diagonal(sim)
    data = per_row.mean()

    def backward(g: np.ndarray) -> None:
        soft = np.exp(shifted)
        soft /= soft.sum(axis=-1, keepdims=True)
        gs = (soft - np.eye(n)) * (float(g) / (n * temperature))
        dc._add_grad(t, gs @ a64)
        dc._add_grad(a, gs.T @ t64)

    return make_node(np.float64(data), (t, a), backward)


def total_loss(l_rec: Tensor, l_cl: Tensor, lambda_cl: float) -> Tensor:
    """Weighted sum of the recommendation and contrastive terms."""
    return dc.add(l_rec, dc.scale(l_cl, lambda_cl))
