"""Training criterion: pair hinge loss, attribute-prediction loss, weight
penalty, and their analytic gradients.

For a batch of triplets the criterion is::

    sum_i max(0, 1 - z_i (tau - S_i^2))
      + lam * sum_i max(0, z_i) * ||y_i - embed(x_i)||^2
      + mu * (||w_x||^2 + ||b_x||^2 + ||w_a||^2)

The penalty enters once per evaluation, whatever the batch size. tau is
not penalized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .model import Model, as_batch


@dataclass(frozen=True)
class HyperParams:
    lam: float = 0.3
    mu: float = 0.1
    m: int = 8
    learning_rate: float = 1e-2
    batch_size: int = 100
    epochs: int = 200
    restarts: int = 5
    seed: int = 0
    momentum: float = 0.0
    standardize: bool = True
    # w_a fixed to the p x p identity and never updated (Euclidean ablation)
    identity_metric: bool = False
    finetune_epochs: int = 50
    # 0 disables early stopping on validation accuracy
    early_stopping_patience: int = 0

    def __post_init__(self):
        problems = []
        if not self.lam >= 0:
            problems.append(f"lam must be >= 0 (got {self.lam})")
        if not self.mu >= 0:
            problems.append(f"mu must be >= 0 (got {self.mu})")
        if self.m < 1:
            problems.append(f"m must be >= 1 (got {self.m})")
        if not self.learning_rate >= 0:
            problems.append(f"learning_rate must be >= 0 (got {self.learning_rate})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.restarts < 1:
            problems.append(f"restarts must be >= 1 (got {self.restarts})")
        if not 0 <= self.seed < 2**64:
            problems.append(f"seed must fit in an unsigned 64-bit integer (got {self.seed})")
        if not 0 <= self.momentum < 1:
            problems.append(f"momentum must be in [0, 1) (got {self.momentum})")
        if self.finetune_epochs < 0:
            problems.append(f"finetune_epochs must be >= 0 (got {self.finetune_epochs})")
        if self.early_stopping_patience < 0:
            problems.append("early_stopping_patience must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "HyperParams":
        return HyperParams(**{**asdict(self), **changes})

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class Gradients(NamedTuple):
    d_w_x: np.ndarray
    d_b_x: np.ndarray
    d_w_a: np.ndarray
    d_tau: float


def _check(batch, model):
    if len(batch) == 0:
        raise DataError("empty batch")
    if batch.x.shape[1] != model.d:
        raise DimensionError("feature vector", model.d, batch.x.shape[1])
    if batch.y.shape[1] != model.p:
        raise DimensionError("attribute vector", model.p, batch.y.shape[1])


def _forward(triplets, model):
    batch = as_batch(triplets)
    _check(batch, model)
    return model.prepare(batch.x), batch.y, batch.z.astype(np.float64)


def hinge_margins(xs, y, z, w_x, b_x, w_a, tau):
    """Pre-activations, ``embed - y``, ``(embed - y) @ w_a`` and ``1 - z (tau - S^2)``."""
    pre = xs @ w_x + b_x
    diff = np.maximum(0.0, pre) - y
    proj = diff @ w_a
    s2 = np.einsum("ij,ij->i", proj, proj)
    return pre, diff, proj, 1.0 - z * (tau - s2)


def criterion(xs, y, z, w_x, b_x, w_a, tau, lam, mu, with_grad=True):
    """Array-level criterion on already standardized features ``xs``.

    Returns ``(loss, (d_w_x, d_b_x, d_w_a, d_tau))``, or ``(loss, None)``.
    Subgradient conventions: the ReLU and the hinge both use 0 at their kink.
    """
    pre, diff, proj, margin = hinge_margins(xs, y, z, w_x, b_x, w_a, tau)
    pos = (z > 0).astype(np.float64)
    penalty = np.sum(w_x * w_x) + np.sum(b_x * b_x) + np.sum(w_a * w_a)
    loss = float(np.sum(np.maximum(0.0, margin))
                 + lam * np.dot(pos, np.einsum("ij,ij->i", diff, diff)) + mu * penalty)
    if not with_grad:
        return loss, None
    # d hinge / d S^2 per sample
    c = z * (margin > 0)
    d_w_a = 2.0 * (diff * c[:, None]).T @ proj + 2.0 * mu * w_a
    d_diff = 2.0 * c[:, None] * (proj @ w_a.T) + 2.0 * lam * pos[:, None] * diff
    d_pre = d_diff * (pre > 0)
    d_w_x = xs.T @ d_pre + 2.0 * mu * w_x
    d_b_x = d_pre.sum(axis=0) + 2.0 * mu * b_x
    return loss, (d_w_x, d_b_x, d_w_a, -float(np.sum(c)))


def _terms(triplet, model):
    xs, y, z = _forward(triplet, model)
    _, diff, _, margin = hinge_margins(xs, y, z, model.w_x, model.b_x, model.w_a, model.tau)
    return diff, margin, z


def hinge_loss(triplet, model: Model) -> float:
    """``max(0, 1 - z (tau - S^2))`` for a single triplet."""
    _, margin, _ = _terms(triplet, model)
    return float(np.maximum(0.0, margin[0]))


def attribute_loss(triplet, model: Model) -> float:
    diff, _, z = _terms(triplet, model)
    return float(max(0.0, z[0]) * np.sum(diff[0] ** 2))


def regularizer(model: Model) -> float:
    return float(np.sum(model.w_x ** 2) + np.sum(model.b_x ** 2) + np.sum(model.w_a ** 2))


def total_loss(batch, model: Model, hp: HyperParams) -> float:
    xs, y, z = _forward(batch, model)
    return criterion(xs, y, z, model.w_x, model.b_x, model.w_a, model.tau,
                     hp.lam, hp.mu, with_grad=False)[0]


def loss_and_gradients(batch, model: Model, hp: HyperParams):
    """Criterion value and its (sub)gradient from one forward pass."""
    xs, y, z = _forward(batch, model)
    loss, g = criterion(xs, y, z, model.w_x, model.b_x, model.w_a, model.tau, hp.lam, hp.mu)
    return loss, Gradients(*g)


def gradients(batch, model: Model, hp: HyperParams) -> Gradients:
    return loss_and_gradients(batch, model, hp)[1]


def kink_margins(batch, model: Model):
    """Smallest |pre-activation| and smallest |hinge argument| over the batch.

    Central differences are only meaningful when both are well away from 0.
    """
    xs, y, z = _forward(batch, model)
    pre, _, _, margin = hinge_margins(xs, y, z, model.w_x, model.b_x, model.w_a, model.tau)
    return float(np.min(np.abs(pre))), float(np.min(np.abs(margin)))
