"""The DLRS head: concat user/item representations, tanh MLP, sigmoid or softmax output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import xavier_uniform
from .errors import ContractError

TASKS = ("regression", "classification")
N_CLASSES = 5
THRESHOLD = 0.5


@dataclass
class Prediction:
    """``raw`` is the pre-activation head output, ``value`` the activated one.

    Regression: ``value`` is ``B x 1`` in (0, 1).  Classification: ``raw`` holds
    logits and ``value`` the ``B x 5`` probability rows.
    """

    task: str
    raw: Tensor
    value: Tensor

    @property
    def scores(self) -> np.ndarray:
        return self.value.data[:, 0] if self.task == "regression" else self.value.data


class DlrsParams:
    def __init__(self, in_width: int, hidden, task: str = "regression", rng: np.random.Generator | None = None):
        if task not in TASKS:
            raise ContractError(f"unknown task {task!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.task = task
        self.in_width = int(in_width)
        widths = [self.in_width, *hidden]
        self.hidden = [
            (ad.parameter(xavier_uniform(rng, a, b)), ad.parameter(np.zeros(b))) for a, b in zip(widths, widths[1:])
        ]
        n_out = 1 if task == "regression" else N_CLASSES
        self.output = (ad.parameter(xavier_uniform(rng, widths[-1], n_out)), ad.parameter(np.zeros(n_out)))

    def parameters(self) -> list:
        return [p for wb in self.hidden for p in wb] + list(self.output)


def forward(u: Tensor, v: Tensor, params: DlrsParams) -> Prediction:
    if u.shape[0] != v.shape[0]:
        raise ContractError(f"user batch {u.shape[0]} != item batch {v.shape[0]}")
    if u.shape[1] + v.shape[1] != params.in_width:
        raise ContractError(f"input width {u.shape[1]}+{v.shape[1]} != {params.in_width}")
    h = ad.concat([u, v], axis=1)
    for w, b in params.hidden:
        h = ad.tanh(ad.linear(h, w, b))
    raw = ad.linear(h, *params.output)
    value = ad.sigmoid(raw) if params.task == "regression" else ad.softmax(raw)
    return Prediction(params.task, raw, value)


def _check_labels(pred: Prediction, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (pred.raw.shape[0],):
        raise ContractError(f"labels shape {labels.shape} does not match batch {pred.raw.shape[0]}")
    if pred.task == "regression":
        if np.any((labels < 0) | (labels > 1)):
            raise ContractError("regression labels must lie in [0, 1]")
        return labels.astype(np.float64)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("classification labels must be integer class indices")
    return labels.astype(np.int64)


def loss(pred: Prediction, labels) -> Tensor:
    """Mean MSE (regression) or mean cross-entropy (classification)."""
    labels = _check_labels(pred, labels)
    if pred.task == "regression":
        return ad.mse(pred.value, labels)
    return ad.cross_entropy(pred.raw, labels)


def per_example_loss(pred: Prediction, labels) -> np.ndarray:
    labels = _check_labels(pred, labels)
    if pred.task == "regression":
        return (pred.value.data[:, 0] - labels) ** 2
    z = pred.raw.data - pred.raw.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def correct(pred: Prediction, labels) -> np.ndarray:
    """Per-example hit mask; a regression score of exactly 0.5 counts as label 1."""
    labels = _check_labels(pred, labels)
    if pred.task == "regression":
        return (pred.value.data[:, 0] >= THRESHOLD).astype(np.int64) == labels.astype(np.int64)
    return np.argmax(pred.value.data, axis=1) == labels


def accuracy(pred: Prediction, labels) -> float:
    return float(np.mean(correct(pred, labels)))
