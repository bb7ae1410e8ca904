"""Future-window bag-of-words targets and the combined token + idea loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 20


@dataclass
class IdeaTarget:
    y: np.ndarray  # multi-hot, shape [V]
    valid: bool


@dataclass
class LossWeights:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("idea loss weight must be >= 0")


class Losses(NamedTuple):
    total: Tensor
    token: Tensor
    idea: Tensor


def build_targets(tokens: Sequence[int], K: int, V: int) -> list[IdeaTarget]:
    """Per position ``t`` in ``[0, T-2]``, mark every id among ``tokens[t+1 : t+K+1]``.

    The window is clipped at the end of the sequence. Sequences shorter than two
    tokens have no positions.
    """
    if K < 1:
        raise ValueError("window size K must be >= 1")
    ids = np.asarray(tokens, dtype=np.int64)
    T = len(ids)
    out = []
    for t in range(T - 1):
        y = np.zeros(V, dtype=np.float32)
        window = ids[t + 1: min(t + K, T - 1) + 1]
        y[window] = 1.0
        out.append(IdeaTarget(y, len(window) > 0))
    return out


def target_matrix(batch: np.ndarray, K: int, V: int) -> np.ndarray:
    """Dense targets for a ``[B, L]`` id batch: ``[B, L-1, V]``, row ``t`` covers ids ``t+1..t+K``."""
    batch = np.asarray(batch, dtype=np.int64)
    B, L = batch.shape
    T = L - 1
    y = np.zeros((B, T, V), dtype=np.float32)
    bi = np.arange(B)[:, None]
    for k in range(1, K + 1):
        n = L - k  # positions t with t + k <= L - 1
        if n <= 0:
            break
        ti = np.arange(min(n, T))
        y[bi, ti[None, :], batch[:, ti + k]] = 1.0
    return y


def total_loss(
    z_final: Tensor,
    z_idea: Tensor | None,
    next_tokens,
    targets: np.ndarray | None,
    idea_mask: np.ndarray | None,
    weights: LossWeights,
    valid: np.ndarray | None = None,
) -> Losses:
    """``L_total = L_token + lam * L_idea``.

    ``z_final`` and ``z_idea`` are ``[N, V]`` (flattened positions). ``L_token`` is
    cross-entropy of ``z_final`` against ``next_tokens``; ``L_idea`` is the masked
    BCE of ``z_idea`` against ``targets`` averaged over valid positions.
    """
    V = z_final.shape[-1]
    zf = z_final if z_final.ndim == 2 else tt.reshape(z_final, (-1, V))
    nxt = np.asarray(next_tokens, dtype=np.int64).reshape(-1)
    l_token = tt.softmax_cross_entropy(zf, nxt)

    zero = Tensor(np.float32(0.0))
    if z_idea is None or targets is None:
        return Losses(l_token, l_token, zero)

    zi = z_idea if z_idea.ndim == 2 else tt.reshape(z_idea, (-1, V))
    y = np.asarray(targets, dtype=np.float32).reshape(-1, V)
    ok = np.ones(len(y), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    if not ok.any():
        log.warning("no valid idea-target positions; idea loss set to 0")
        return Losses(l_token, l_token, zero)
    mask = np.ones(V, dtype=np.float32) if idea_mask is None else idea_mask
    l_idea = tt.bce_with_logits(zi, y, mask, row_valid=ok)
    if weights.lam == 0:
        return Losses(l_token, l_token, l_idea)
    return Losses(l_token + tt.mul(l_idea, weights.lam), l_token, l_idea)
