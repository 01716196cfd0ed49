"""The enhanced DLRS wired to its embedding banks and weight generators.

One class covers the four training modes:

* ``autoemb`` / ``sam``: controller networks produce per-entity weights over
  the N embedding spaces;
* ``darts_weights``: free per-entity logit tables replace the controllers;
* ``fse``: one fixed-width table per entity class, no transforms, no weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as dlrs
from .autodiff import Tensor
from .controller import ContextCache, ControllerNet, build_features, combine_soft
from .embedding import EmbeddingBank
from .errors import ConfigError

MODES = ("fse", "sam", "darts_weights", "autoemb")


@dataclass
class Batch:
    """One mini-batch.  ``user_pop``/``item_pop`` are popularity counts before it."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    user_pop: np.ndarray
    item_pop: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Output:
    pred: dlrs.Prediction
    alpha: Tensor | None
    beta: Tensor | None


class AutoEmbModel:
    def __init__(
        self,
        n_users: int,
        n_items: int,
        mode: str = "autoemb",
        task: str = "regression",
        dims=(2, 16, 128),
        hidden=(512, 512),
        controller_hidden=(512, 512),
        feature_size: int = 38,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
        seed: int = 0,
    ):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng(seed)
        self.mode, self.task = mode, task
        self.dims = [int(d) for d in dims]
        self.n_spaces = len(self.dims)
        self.feature_size = int(feature_size)
        self.user_bank = self.item_bank = None
        self.user_table = self.item_table = None
        self.user_controller = self.item_controller = None
        self.user_logits = self.item_logits = None
        self.user_context = self.item_context = None
        if mode == "fse":
            width = sum(self.dims)
            self.user_table = ad.parameter(rng.uniform(-0.01, 0.01, (n_users, width)))
            self.item_table = ad.parameter(rng.uniform(-0.01, 0.01, (n_items, width)))
            in_width = 2 * width
        else:
            self.user_bank = EmbeddingBank(n_users, self.dims, rng, bn_eps, bn_momentum)
            self.item_bank = EmbeddingBank(n_items, self.dims, rng, bn_eps, bn_momentum)
            if mode == "darts_weights":
                self.user_logits = ad.parameter(np.zeros((n_users, self.n_spaces)))
                self.item_logits = ad.parameter(np.zeros((n_items, self.n_spaces)))
            else:
                self.user_controller = ControllerNet(feature_size, controller_hidden, self.n_spaces, rng)
                self.item_controller = ControllerNet(feature_size, controller_hidden, self.n_spaces, rng)
                self.user_context = ContextCache(n_users, self.n_spaces)
                self.item_context = ContextCache(n_items, self.n_spaces)
            in_width = 2 * self.dims[-1]
        self.dlrs = dlrs.DlrsParams(in_width, list(hidden), task, rng)

    @property
    def embedding_width(self) -> int:
        return self.user_table.shape[1] if self.mode == "fse" else self.dims[-1]

    def weight_params(self) -> list:
        """DLRS parameters W: embeddings, unification transforms, MLP."""
        if self.mode == "fse":
            return [self.user_table, self.item_table] + self.dlrs.parameters()
        return self.user_bank.parameters() + self.item_bank.parameters() + self.dlrs.parameters()

    def arch_params(self) -> list:
        """Weight-generator parameters Theta (empty for FSE)."""
        if self.mode == "fse":
            return []
        if self.mode == "darts_weights":
            return [self.user_logits, self.item_logits]
        return self.user_controller.parameters() + self.item_controller.parameters()

    def parameters(self) -> list:
        return self.weight_params() + self.arch_params()

    def user_features(self, batch: Batch) -> np.ndarray:
        return build_features(batch.users, batch.user_pop, self.user_context, self.feature_size)

    def item_features(self, batch: Batch) -> np.ndarray:
        return build_features(batch.items, batch.item_pop, self.item_context, self.feature_size)

    def space_weights(self, batch: Batch) -> tuple:
        if self.mode == "darts_weights":
            return (ad.softmax(ad.gather_rows(self.user_logits, batch.users)),
                    ad.softmax(ad.gather_rows(self.item_logits, batch.items)))
        return self.user_controller(self.user_features(batch)), self.item_controller(self.item_features(batch))

    def forward(self, batch: Batch, bn_mode: str = "train", update_stats: bool = False) -> Output:
        if self.mode == "fse":
            u = ad.gather_rows(self.user_table, batch.users)
            v = ad.gather_rows(self.item_table, batch.items)
            return Output(dlrs.forward(u, v, self.dlrs), None, None)
        cu = self.user_bank.forward(batch.users, bn_mode, update_stats)
        cv = self.item_bank.forward(batch.items, bn_mode, update_stats)
        alpha, beta = self.space_weights(batch)
        u = combine_soft(alpha, cu)
        v = combine_soft(beta, cv)
        return Output(dlrs.forward(u, v, self.dlrs), alpha, beta)

    def loss(self, batch: Batch, bn_mode: str = "train", update_stats: bool = False) -> Tensor:
        return dlrs.loss(self.forward(batch, bn_mode, update_stats).pred, batch.labels)

    def update_context(self, batch: Batch, out: Output, losses: np.ndarray) -> None:
        if self.user_context is None:
            return
        self.user_context.update(batch.users, out.alpha.data, losses)
        self.item_context.update(batch.items, out.beta.data, losses)
