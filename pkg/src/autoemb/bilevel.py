"""Alternating validation/training updates (DARTS-style) plus the baseline step rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as dlrs
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .framework import MODES, AutoEmbModel, Batch

FD_SCALE = 0.01


@dataclass
class OptimizerConfig:
    """``xi=None`` resolves to ``lr_w`` for second-order runs and 0 otherwise."""

    mode: str = "autoemb"
    lr_w: float = 0.01
    lr_theta: float = 0.001
    xi: float | None = None
    second_order: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_w < 0:
            raise ConfigError("lr_w must be >= 0")
        if self.mode == "fse":
            return
        if self.lr_theta < 0:
            raise ConfigError("lr_theta must be >= 0")
        if self.xi is None:
            self.xi = self.lr_w if self.second_order else 0.0
        if self.xi < 0:
            raise ConfigError("xi must be >= 0")
        if self.second_order and self.xi == 0:
            raise ConfigError("second_order requires xi > 0")
        if not self.second_order and self.xi != 0:
            raise ConfigError("xi > 0 requires second_order=True")


def _grads(params: Sequence[Tensor]) -> list:
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def hypergradient(
    train_loss: Callable[[], Tensor],
    val_loss: Callable[[], Tensor],
    w_params: Sequence[Tensor],
    theta_params: Sequence[Tensor],
    xi: float = 0.0,
) -> list:
    """Gradient of ``L_val(W - xi * dL_train/dW, Theta)`` with respect to Theta.

    ``xi == 0`` is the first-order approximation (plain dL_val/dTheta at the
    current W).  Otherwise the mixed second-derivative term is estimated by a
    central difference of dL_train/dTheta at ``W +/- r * dL_val/dW'`` with
    ``r = 0.01 / ||dL_val/dW'||``.  W is restored bitwise before returning.
    """
    every = list(w_params) + list(theta_params)
    ad.zero_grad(every)
    if xi == 0:
        val_loss().backward()
        out = _grads(theta_params)
        ad.zero_grad(every)
        return out

    backup = [w.data.copy() for w in w_params]
    try:
        train_loss().backward()
        gw = _grads(w_params)
        for w, w0, g in zip(w_params, backup, gw):
            w.data[...] = w0 - xi * g
        ad.zero_grad(every)
        val_loss().backward()
        g_theta = _grads(theta_params)
        dw = _grads(w_params)
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dw))
        if norm == 0.0:
            return g_theta
        r = FD_SCALE / norm
        sides = []
        for sign in (1.0, -1.0):
            for w, w0, d in zip(w_params, backup, dw):
                w.data[...] = w0 + sign * r * d
            ad.zero_grad(every)
            train_loss().backward()
            sides.append(_grads(theta_params))
        return [g - xi * (gp - gm) / (2 * r) for g, gp, gm in zip(g_theta, *sides)]
    finally:
        for w, w0 in zip(w_params, backup):
            w.data[...] = w0
        ad.zero_grad(every)


def apply_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        p.grad = g
    ad.sgd_step(params, lr)
    ad.zero_grad(params)


class BilevelOptimizer:
    """Owns the update rules for one :class:`AutoEmbModel`.

    Every mode exposes :meth:`step`, so the streaming harness never branches on
    the mode.
    """

    def __init__(self, model: AutoEmbModel, config: OptimizerConfig):
        if model.mode != config.mode:
            raise ConfigError(f"model mode {model.mode!r} != optimizer mode {config.mode!r}")
        self.model = model
        self.config = config

    def step(self, val_batch: Batch | None, train_batch: Batch) -> float:
        mode = self.config.mode
        if mode == "fse":
            return self.baseline_fse_step(train_batch)
        if mode == "sam":
            return self.baseline_sam_step(train_batch)
        if val_batch is not None and len(val_batch):
            self.controller_step(val_batch, train_batch)
        return self.train_step(train_batch)

    def controller_step(self, val_batch: Batch, train_batch: Batch) -> None:
        """One descent step on Theta using the validation loss."""
        if self.config.mode not in ("autoemb", "darts_weights"):
            raise ContractError(f"controller_step is not defined for mode {self.config.mode!r}")
        if not len(val_batch) or not len(train_batch):
            raise ContractError("controller_step needs non-empty batches")
        m = self.model
        theta = m.arch_params()
        grads = hypergradient(
            lambda: m.loss(train_batch),
            lambda: m.loss(val_batch),
            m.weight_params(),
            theta,
            self.config.xi if self.config.second_order else 0.0,
        )
        apply_update(theta, grads, self.config.lr_theta)

    def _supervised(self, batch: Batch, lr_theta: float | None) -> float:
        m = self.model
        if not len(batch):
            raise ContractError("empty training batch")
        ad.zero_grad(m.parameters())
        out = m.forward(batch, "train", update_stats=True)
        loss = dlrs.loss(out.pred, batch.labels)
        loss.backward()
        ad.sgd_step(m.weight_params(), self.config.lr_w)
        if lr_theta is not None:
            ad.sgd_step(m.arch_params(), lr_theta)
        ad.zero_grad(m.parameters())
        m.update_context(batch, out, dlrs.per_example_loss(out.pred, batch.labels))
        return loss.item()

    def train_step(self, batch: Batch) -> float:
        """One descent step on W with Theta frozen; returns the batch loss."""
        return self._supervised(batch, None)

    def baseline_fse_step(self, batch: Batch) -> float:
        if self.config.mode != "fse":
            raise ContractError("baseline_fse_step requires mode='fse'")
        return self._supervised(batch, None)

    def baseline_sam_step(self, batch: Batch) -> float:
        """W and Theta both descend L_train on the same batch."""
        if self.config.mode != "sam":
            raise ContractError("baseline_sam_step requires mode='sam'")
        return self._supervised(batch, self.config.lr_theta)
