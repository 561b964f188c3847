"""Cross-batch first-order meta-optimization.

Every task pairs a support batch with a disjoint query batch. The learner
takes one virtual gradient step on the support batch (fast weights), is
evaluated on the query batch at those fast weights, and the outer update
combines both gradients::

    theta <- theta - beta * sum_i (grad L_S_i(theta) + delta * grad L_Q_i(theta_i'))
    theta_i' = theta - alpha * grad L_S_i(theta)

All functions accept an optional ``loss_fn(params, batch, classifier) ->
(loss, grad)`` so the same machinery runs on closed-form surrogates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Batch, SimilarityClassifier, central_difference, loss_and_grad
from .errors import ConfigError, LayoutError
from .params import ParamVector

LossFn = Callable[[ParamVector, object, object], tuple]


@dataclass(frozen=True)
class MetaTask:
    support: Batch
    query: Batch

    def __post_init__(self):
        overlap = np.intersect1d(self.support.sample_ids, self.query.sample_ids)
        if overlap.size:
            raise LayoutError(
                f"support and query share {overlap.size} sample ids (first: {int(overlap[0])})"
            )


@dataclass(frozen=True)
class MetaStepConfig:
    alpha: float
    beta: float
    delta: float = 1.0
    tasks_per_step: int = 4

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ConfigError("alpha and beta must be positive")
        if not self.delta >= 0:
            raise ConfigError("delta must be non-negative")
        if self.tasks_per_step < 1:
            raise ConfigError("tasks_per_step must be at least 1")


@dataclass
class StepReport:
    support_losses: list[float]
    query_losses: list[float]
    grad: ParamVector

    @property
    def mean_support_loss(self) -> float:
        return float(np.mean(self.support_losses))

    @property
    def mean_query_loss(self) -> float:
        return float(np.mean(self.query_losses))


@dataclass
class Adam:
    """Adaptive-moment outer optimizer (no weight decay by default).

    Holds mutable moment estimates; one instance per training run.
    """

    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    t: int = 0

    def step(self, theta: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
        if grad.layout != theta.layout:
            raise LayoutError("gradient layout differs from parameter layout")
        g = grad.values
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        x = theta.values * (1 - lr * self.weight_decay)
        return theta.with_values(x - lr * m_hat / (np.sqrt(v_hat) + self.eps))


def inner_update(theta: ParamVector, support, alpha: float, classifier, loss_fn: LossFn = loss_and_grad):
    """One gradient step on the support batch.

    Returns:
        ``(theta_fast, support_loss, support_grad)``; ``theta`` is untouched.
    """
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    loss, grad = loss_fn(theta, support, classifier)
    if alpha == 0:
        return theta, loss, grad
    return theta.axpy(-alpha, grad), loss, grad


def query_loss(theta_fast: ParamVector, query, classifier, loss_fn: LossFn = loss_and_grad):
    """Query loss and its gradient taken at the fast weights."""
    return loss_fn(theta_fast, query, classifier)


def meta_objective(theta: ParamVector, task: MetaTask, alpha: float, classifier, loss_fn: LossFn = loss_and_grad) -> float:
    fast, s_loss, _ = inner_update(theta, task.support, alpha, classifier, loss_fn)
    q_loss, _ = loss_fn(fast, task.query, classifier)
    return s_loss + q_loss


def second_order_meta_grad(theta: ParamVector, task: MetaTask, alpha: float, classifier,
                           h: float = 1e-5, loss_fn: LossFn = loss_and_grad) -> ParamVector:
    """Exact meta-gradient, by central differences of :func:`meta_objective`.

    Differentiates through the inner step, curvature included. Used only as
    a reference for the first-order update.
    """
    return central_difference(lambda p: meta_objective(p, task, alpha, classifier, loss_fn), theta, h)


def first_order_meta_grad(theta: ParamVector, tasks: Sequence[MetaTask], alpha: float, delta: float,
                          classifier, loss_fn: LossFn = loss_and_grad):
    """Combined first-order gradient summed over tasks in index order.

    Returns:
        ``(grad, support_losses, query_losses)``.
    """
    if not tasks:
        raise ConfigError("empty task list")
    total = None
    s_losses, q_losses = [], []
    for task in tasks:
        fast, s_loss, s_grad = inner_update(theta, task.support, alpha, classifier, loss_fn)
        q_loss, q_grad = query_loss(fast, task.query, classifier, loss_fn)
        if s_grad.layout != theta.layout or q_grad.layout != theta.layout:
            raise LayoutError("task gradient layout differs from parameter layout")
        term = s_grad.values + delta * q_grad.values
        total = term if total is None else total + term
        s_losses.append(s_loss)
        q_losses.append(q_loss)
    return theta.with_values(total), s_losses, q_losses


def fomaml_step(theta: ParamVector, tasks: Sequence[MetaTask], cfg: MetaStepConfig, classifier,
                optimizer: Optional[Adam] = None, loss_fn: LossFn = loss_and_grad):
    """One outer update over ``cfg.tasks_per_step`` tasks.

    With ``optimizer=None`` the update is plain descent with step ``cfg.beta``;
    otherwise the combined gradient is handed to ``optimizer.step``.
    """
    if not tasks:
        raise ConfigError("empty task list")
    if len(tasks) != cfg.tasks_per_step:
        raise ConfigError(f"expected {cfg.tasks_per_step} tasks, got {len(tasks)}")
    grad, s_losses, q_losses = first_order_meta_grad(theta, tasks, cfg.alpha, cfg.delta, classifier, loss_fn)
    if optimizer is None:
        new = theta.axpy(-cfg.beta, grad)
    else:
        new = optimizer.step(theta, grad, cfg.beta)
    return new, StepReport(s_losses, q_losses, grad)


def plain_step(theta: ParamVector, batch, lr: float, classifier, optimizer: Optional[Adam] = None,
               loss_fn: LossFn = loss_and_grad) -> ParamVector:
    """Standard fine-tuning step on one batch."""
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    _, grad = loss_fn(theta, batch, classifier)
    if optimizer is not None:
        return optimizer.step(theta, grad, lr)
    if lr == 0:
        return theta
    return theta.axpy(-lr, grad)
