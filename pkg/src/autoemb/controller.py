"""Controller networks that weight the N embedding spaces per user/item.

Feature layout (length ``feature_size``, 38 by default)::

    [count, log1p(count), prev_weights (N), prev_loss, prev_loss_ema, 0 ...]

The trailing slots are reserved and always zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import TransformedBatch, xavier_uniform
from .errors import ContractError

FEATURE_LAYOUT = ("count", "log1p_count", "prev_weights", "prev_loss", "prev_loss_ema", "reserved")
LOSS_EMA_DECAY = 0.9


class ContextCache:
    """Last emitted weights and last observed per-example loss for each entity."""

    def __init__(self, entity_count: int, n_spaces: int):
        self.prev_weights = np.zeros((entity_count, n_spaces))
        self.prev_loss = np.zeros(entity_count)
        self.loss_ema = np.zeros(entity_count)

    def update(self, ids, weights: np.ndarray, losses: np.ndarray) -> None:
        # duplicates inside a batch: the last occurrence wins for weights/loss
        ids = np.asarray(ids, dtype=np.int64)
        self.prev_weights[ids] = weights
        self.prev_loss[ids] = losses
        self.loss_ema[ids] = LOSS_EMA_DECAY * self.loss_ema[ids] + (1 - LOSS_EMA_DECAY) * losses


def min_feature_size(n_spaces: int) -> int:
    return 4 + n_spaces


def build_features(ids, counts, cache: ContextCache | None, feature_size: int = 38, n_spaces: int = 3) -> np.ndarray:
    """Encode popularity plus context as controller input.

    Scalar ``ids``/``counts`` give a single vector of length ``feature_size``;
    arrays give a ``B x feature_size`` matrix.  Entities never seen by the
    cache (or ``cache=None``) get zero context.
    """
    scalar = np.ndim(ids) == 0
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    counts = np.atleast_1d(np.asarray(counts, dtype=np.float64))
    if np.any(counts < 0):
        raise ContractError("popularity counts must be non-negative")
    if cache is not None:
        n_spaces = cache.prev_weights.shape[1]
    if feature_size < min_feature_size(n_spaces):
        raise ContractError(f"feature_size {feature_size} too small for {n_spaces} spaces")
    feats = np.zeros((ids.size, feature_size))
    feats[:, 0] = counts
    feats[:, 1] = np.log1p(counts)
    if cache is not None:
        feats[:, 2:2 + n_spaces] = cache.prev_weights[ids]
        feats[:, 2 + n_spaces] = cache.prev_loss[ids]
        feats[:, 3 + n_spaces] = cache.loss_ema[ids]
    return feats[0] if scalar else feats


class ControllerNet:
    """MLP ``F -> H -> ... -> N``: tanh hidden layers, softmax output.

    The output layer starts at zero so every entity begins from uniform
    weights; popularity dependence is then entirely learned.
    """

    def __init__(self, feature_size: int, hidden, n_spaces: int, rng: np.random.Generator | None = None,
                 zero_output: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        if isinstance(hidden, int):
            hidden = [hidden, hidden]
        self.feature_size = int(feature_size)
        self.n_spaces = int(n_spaces)
        widths = [self.feature_size, *hidden, self.n_spaces]
        self.layers = [
            (ad.parameter(xavier_uniform(rng, a, b)), ad.parameter(np.zeros(b))) for a, b in zip(widths, widths[1:])
        ]
        if zero_output:
            self.layers[-1][0].data[...] = 0.0

    def parameters(self) -> list:
        return [p for wb in self.layers for p in wb]

    def forward(self, features) -> Tensor:
        x = np.asarray(features, dtype=np.float64)
        single = x.ndim == 1
        if x.shape[-1] != self.feature_size:
            raise ContractError(f"controller expects {self.feature_size} features, got {x.shape[-1]}")
        h = Tensor(x.reshape(1, -1) if single else x)
        for w, b in self.layers[:-1]:
            h = ad.tanh(ad.linear(h, w, b))
        w, b = self.layers[-1]
        out = ad.softmax(ad.linear(h, w, b))
        return ad.reshape(out, (self.n_spaces,)) if single else out

    __call__ = forward


def select_hard(weights) -> np.ndarray | int:
    """Index of the largest weight; ties go to the smaller index (smaller dim)."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    idx = np.argmax(w, axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx


def combine_soft(weights: Tensor, candidates: TransformedBatch) -> Tensor:
    """``(1/N) * sum_n w_n * candidate_n``; ``weights`` is ``N`` or ``B x N``."""
    n = candidates.n_spaces
    if weights.shape[-1] != n:
        raise ContractError(f"weights length {weights.shape[-1]} != {n} candidates")
    if weights.data.ndim == 1:
        weights = ad.reshape(weights, (1, n))
    total = None
    for k, cand in enumerate(candidates.candidates):
        term = ad.mul(ad.slice_cols(weights, k, k + 1), cand)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / n)
