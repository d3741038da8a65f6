"""Optimizers (SGD, Adam, SAM), a minibatch training loop, the full-batch hinge
trainer for linear models, and the gradient-direction diagnostic."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Augmentation, Dataset, augment, sample_augmentation
from .nn import Model, ParamMask, forward, predict
from .tensor import NonFiniteError, Tensor

LossFn = Callable[[Model], Tensor]


def _gradients(model: Model, loss_fn: LossFn, names: list[str]) -> tuple[float, dict[str, np.ndarray]]:
    leafy, leaves = model.as_leaves(names)
    loss = loss_fn(leafy)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss")
    grads = T.grad(loss, [leaves[n] for n in names])
    return loss.item(), {n: g.data for n, g in zip(names, grads)}


@dataclass
class OptimizerState:
    kind: str
    lr: float
    weight_decay: float = 0.0
    rho: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "sam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.rho < 0:
            raise ValueError("SAM radius must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


class Optimizer:
    """Base class: subclasses turn (params, grads) into new params."""

    def __init__(self, state: OptimizerState, mask: ParamMask | None = None):
        self.state = state
        self.mask = mask
        self.last_loss = float("nan")

    def _names(self, model: Model) -> list[str]:
        return (self.mask or ParamMask.full(model)).names(model)

    def _decayed(self, model: Model, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        d = self.state.weight_decay
        if d == 0:
            return grads
        return {n: g + d * model.params[n].data for n, g in grads.items()}

    def step(self, model: Model, loss_fn: LossFn) -> Model:
        names = self._names(model)
        self.last_loss, grads = _gradients(model, loss_fn, names)
        self.state.step_count += 1
        return model.with_params(self._update(model, self._decayed(model, grads)))

    def _update(self, model, grads):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, lr: float, weight_decay: float = 0.0, mask: ParamMask | None = None):
        super().__init__(OptimizerState("sgd", lr, weight_decay), mask)

    def _update(self, model, grads):
        lr = self.state.lr
        return {n: model.params[n].data - lr * g for n, g in grads.items()}


class Adam(Optimizer):
    def __init__(self, lr: float = 1e-3, weight_decay: float = 0.0, mask: ParamMask | None = None):
        super().__init__(OptimizerState("adam", lr, weight_decay), mask)

    def _update(self, model, grads):
        s = self.state
        t = s.step_count
        out = {}
        for n, g in grads.items():
            m, v = s.moments.get(n, (np.zeros_like(g), np.zeros_like(g)))
            m = s.beta1 * m + (1 - s.beta1) * g
            v = s.beta2 * v + (1 - s.beta2) * g * g
            s.moments[n] = (m, v)
            m_hat = m / (1 - s.beta1 ** t)
            v_hat = v / (1 - s.beta2 ** t)
            out[n] = model.params[n].data - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
        return out


class SAM(Optimizer):
    """Sharpness-aware minimisation around an inner SGD step.

    The gradient is re-evaluated at ``theta + rho * g / ||g||_2`` (global norm
    over the trainable parameters) and that gradient drives the SGD update
    from the original ``theta``.
    """

    def __init__(self, inner: SGD, rho: float = 1e-4):
        state = OptimizerState("sam", inner.state.lr, inner.state.weight_decay, rho=rho)
        super().__init__(state, inner.mask)
        self.inner = inner

    def step(self, model: Model, loss_fn: LossFn) -> Model:
        names = self._names(model)
        self.last_loss, grads = _gradients(model, loss_fn, names)
        grads = self._decayed(model, grads)
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = self.state.rho / norm if norm > 0 else 0.0
        perturbed = model.with_params({n: model.params[n].data + scale * g for n, g in grads.items()})
        _, sharp = _gradients(perturbed, loss_fn, names)
        # weight decay is evaluated at the perturbed point as part of the SAM objective
        sharp = self._decayed(perturbed, sharp)
        self.state.step_count += 1
        self.inner.state.step_count += 1
        return model.with_params(self.inner._update(model, sharp))


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0, rho: float = 1e-4,
                   mask: ParamMask | None = None) -> Optimizer:
    if kind == "sgd":
        return SGD(lr, weight_decay, mask)
    if kind == "adam":
        return Adam(lr, weight_decay, mask)
    if kind == "sam":
        return SAM(SGD(lr, weight_decay, mask), rho)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy, shape (batch,)."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return T.sub(T.log_sum_exp(logits, axis=1), T.sum(T.mul(logits, onehot), axis=1))


# Margins within this distance of 1 count as sitting on the hinge kink.
HINGE_KINK_TOL = 1e-4


def hinge(logits: Tensor, labels) -> Tensor:
    """Per-sample hinge loss on the score of a tied binary model (logits [s, -s]).

    At the kink the subdifferential contains ``-y x~``; this branch is used for
    every margin up to ``1 + HINGE_KINK_TOL`` so that support vectors of an
    iteratively trained model (margins like 1.00002) stay active.  The value
    there is the tiny negative slack, never below ``-HINGE_KINK_TOL``.
    """
    if logits.shape[1] != 2:
        raise ValueError("hinge loss needs a binary model")
    sign = np.where(np.asarray(labels) == 0, 1.0, -1.0)
    score = T.mul(T.matmul(logits, Tensor([[0.5], [-0.5]])), sign[:, None])
    slack = T.sub(1.0, T.reshape(score, (-1,)))
    return T.mul(slack, (slack.data >= -HINGE_KINK_TOL).astype(np.float64))


LOSSES = {"ce": cross_entropy, "hinge": hinge}


def batch_loss(model: Model, x, y, loss: str = "ce") -> Tensor:
    return T.mean(LOSSES[loss](forward(model, x), y))


# ---------------------------------------------------------------- training

@dataclass
class TrainLog:
    epoch: int
    loss: float
    train_accuracy: float


def train(model: Model, data: Dataset, opt: Optimizer, epochs: int, batch_size: int = 32,
          seed: int = 0, augmentations: tuple[Augmentation, ...] = (), loss: str = "ce",
          log: Callable[[TrainLog], None] | None = None) -> tuple[Model, list[TrainLog]]:
    """Minibatch training.  With ``augmentations`` one member is drawn per batch."""
    rng = np.random.default_rng(seed)
    history = []
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb, yb = data.x[idx], data.y[idx]
            if augmentations:
                with T.no_grad():
                    xb = augment(xb, sample_augmentation(augmentations, rng)).data
            model = opt.step(model, lambda m: batch_loss(m, xb, yb, loss))
            losses.append(opt.last_loss)
        entry = TrainLog(epoch, float(np.mean(losses)), accuracy(model, data))
        history.append(entry)
        if log is not None:
            log(entry)
    return model, history


def train_full_batch(model: Model, data: Dataset, opt: Optimizer, steps: int,
                     loss: str = "ce") -> Model:
    for _ in range(steps):
        model = opt.step(model, lambda m: batch_loss(m, data.x, data.y, loss))
    return model


def accuracy(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float((predict(model, data.x) == data.y).mean())


def class_accuracy(model: Model, data: Dataset) -> np.ndarray:
    pred = predict(model, data.x)
    return np.array([(pred[data.y == c] == c).mean() if (data.y == c).any() else np.nan
                     for c in range(data.num_classes)])


# ---------------------------------------------------------------- linear hinge

def augment_bias(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.hstack([x, np.ones((len(x), 1))])


def hinge_gradient(w_tilde: np.ndarray, x_tilde: np.ndarray, y_signed: np.ndarray) -> np.ndarray:
    """Mean hinge subgradient: -y x~ where y w~.x~ <= 1, else 0."""
    active = y_signed * (x_tilde @ w_tilde) <= 1.0
    return -(y_signed[:, None] * x_tilde * active[:, None]).mean(axis=0)


def train_hinge_linear(x, y_signed, lr: float, steps: int, weight_decay: float = 0.0) -> np.ndarray:
    """Full-batch subgradient descent on the mean hinge loss from w~ = 0.

    Returns ``w~ = [w; b]``.  With ``weight_decay`` d > 0 the objective becomes
    the soft-margin primal ``d/2 ||w~||^2 + mean hinge`` and the step decays as
    ``lr / (1 + lr d t)``, which converges to the folded-bias hard-margin
    solution whenever ``1 / (d n)`` exceeds every hard-margin dual.
    """
    xt = augment_bias(x)
    y_signed = np.asarray(y_signed, dtype=np.float64)
    w = np.zeros(xt.shape[1])
    for t in range(steps):
        g = hinge_gradient(w, xt, y_signed) + weight_decay * w
        w = w - lr / (1.0 + lr * weight_decay * t) * g
    return w


def linear_model_from_w(arch, w_tilde: np.ndarray) -> Model:
    """Tied binary linear model whose score is ``w~ . [x; 1]``."""
    return Model(arch, {"w": Tensor(w_tilde[:-1]), "b": Tensor(w_tilde[-1])})


# ---------------------------------------------------------------- diagnostics

@dataclass
class DirectionTrace:
    steps: list[int]
    cosines: list[float]
    skipped: list[int]
    model: Model


def grad_direction_trace(model: Model, data: Dataset, opt: Optimizer, steps: int,
                         probe_interval: int = 1) -> DirectionTrace:
    """Cosine between probed full-batch gradients and the last probed gradient.

    Zero-gradient probes are skipped and listed in ``skipped``.
    """
    names = opt._names(model)
    probes: list[tuple[int, np.ndarray]] = []
    skipped = []
    loss_fn = lambda m: batch_loss(m, data.x, data.y)  # noqa: E731
    for t in range(steps + 1):
        if t % probe_interval == 0 or t == steps:
            _, g = _gradients(model, loss_fn, names)
            vec = np.concatenate([g[n].ravel() for n in names])
            if np.linalg.norm(vec) == 0:
                skipped.append(t)
            else:
                probes.append((t, vec / np.linalg.norm(vec)))
        if t < steps:
            model = opt.step(model, loss_fn)
    if not probes:
        return DirectionTrace([], [], skipped, model)
    final = probes[-1][1]
    return DirectionTrace([t for t, _ in probes], [float(v @ final) for _, v in probes], skipped, model)
