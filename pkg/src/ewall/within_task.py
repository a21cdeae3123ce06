"""Within-task online learners: projected online gradient and exponential weights.

Every learner follows the same contract, consumed by the meta algorithms::

    record = learner.run(task, representation, trace_hypotheses=False)

where ``representation`` maps an (m, d) input array to an (m, p) feature
array.  With ``trace_hypotheses=True`` the record also carries the hypothesis
used to predict each round; ``learner.predict(hypothesis, features)`` turns
such a hypothesis into predictions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from ewall.core import (
    InputError,
    LossFunction,
    NumericError,
    TaskDataset,
    TaskRunRecord,
)

Representation = Callable[[np.ndarray], np.ndarray]


class WithinTaskLearner(Protocol):
    loss: LossFunction

    def run(self, task: TaskDataset, representation: Representation, *,
            trace_hypotheses: bool = False) -> TaskRunRecord: ...

    def predict(self, hypothesis, features: np.ndarray) -> np.ndarray: ...


class LinearRepresentation:
    """``x -> M^T x`` for a (d, p) matrix ``M``; applied row-wise as ``X @ M``."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise InputError("representation matrix must be 2-D")

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.matrix

    def __repr__(self):
        return f"LinearRepresentation(shape={self.matrix.shape})"


def identity_representation(X):
    return np.asarray(X, dtype=float)


def features(task: TaskDataset, representation: Representation, p: Optional[int] = None):
    Z = np.asarray(representation(task.X), dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    if Z.shape[0] != task.m:
        raise InputError(f"representation returned {Z.shape[0]} rows for {task.m} inputs")
    if p is not None and Z.shape[1] != p:
        raise InputError(f"representation output dimension {Z.shape[1]} != {p}")
    return Z


def average_losses(learner, tasks: Sequence[TaskDataset], representation) -> np.ndarray:
    """Average loss of ``learner`` on each task, using a batched path if offered."""
    batched = getattr(learner, "average_losses", None)
    if batched is not None:
        return batched(tasks, representation)
    return np.array([learner.run(t, representation).average_loss for t in tasks])


# --------------------------------------------------------------------------
# Online gradient


@dataclass(frozen=True)
class LinearHypothesisClass:
    """``{z -> <theta, z> : ||theta||_2 <= norm_bound}`` in dimension ``dimension``."""

    dimension: int
    norm_bound: float

    def __post_init__(self):
        if self.dimension < 1:
            raise InputError("dimension must be >= 1")
        if not self.norm_bound > 0:
            raise InputError("norm_bound must be positive")


def project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row of ``theta`` onto the ``radius`` ball."""
    norms = np.linalg.norm(theta, axis=-1, keepdims=True)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return theta * scale


def oga_default_step(B: float, L: float, m: int) -> float:
    """B / (L sqrt(2m))."""
    if m < 1:
        raise InputError("m must be >= 1")
    if not (B > 0 and L > 0):
        raise InputError("B and L must be positive")
    return B / (L * math.sqrt(2.0 * m))


def oga_lambda_step(B: float, L: float, m: int, K: int, Lambda: float) -> float:
    """B / (L sqrt(2 m K Lambda)), the step under a known lambda_max budget."""
    if not Lambda > 0:
        raise InputError("Lambda must be positive")
    if m < 1 or K < 1:
        raise InputError("m and K must be >= 1")
    if not (B > 0 and L > 0):
        raise InputError("B and L must be positive")
    return B / (L * math.sqrt(2.0 * m * K * Lambda))


def _oga_core(Z, y, steps, radius, loss, trace=False):
    """Run projected OGA on n tasks of equal length at once.

    Z: (n, m, p) features, y: (n, m) labels, steps: (n,) step sizes.
    Returns clipped predictions (n, m), losses (n, m) and, if ``trace``,
    the pre-round parameters (n, m, p).
    """
    n, m, p = Z.shape
    theta = np.zeros((n, p))
    preds = np.empty((n, m))
    losses = np.empty((n, m))
    thetas = np.empty((n, m, p)) if trace else None
    for i in range(m):
        z = Z[:, i, :]
        if trace:
            thetas[:, i, :] = theta
        a = loss.clip(np.einsum("np,np->n", theta, z))
        preds[:, i] = a
        losses[:, i] = loss.value(a, y[:, i])
        grad = loss.derivative(a, y[:, i])[:, None] * z
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient at round {i + 1}")
        theta = project_ball(theta - steps[:, None] * grad, radius)
    return preds, losses, thetas


class OnlineGradient:
    """Projected online gradient over a norm-bounded linear class, theta_1 = 0.

    ``step_size`` fixes the step; otherwise ``B / (L sqrt(2 m_t))`` is used
    with ``grad_lipschitz`` as L (falling back to ``loss.lipschitz_const``
    times ``feature_norm_bound``).
    """

    def __init__(self, hypothesis_class: LinearHypothesisClass, loss: LossFunction,
                 step_size: Optional[float] = None,
                 grad_lipschitz: Optional[float] = None,
                 feature_norm_bound: float = 1.0):
        if step_size is not None and not step_size > 0:
            raise InputError("step_size must be positive")
        self.hypothesis_class = hypothesis_class
        self.loss = loss
        self.step_size = step_size
        if grad_lipschitz is None and loss.lipschitz_const is not None:
            grad_lipschitz = loss.lipschitz_const * feature_norm_bound
        self.grad_lipschitz = grad_lipschitz

    def step_for(self, m: int) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.grad_lipschitz is None:
            raise InputError("no step_size and no Lipschitz constant to derive one")
        return oga_default_step(self.hypothesis_class.norm_bound, self.grad_lipschitz, m)

    def run(self, task, representation, *, trace_hypotheses=False):
        Z = features(task, representation, self.hypothesis_class.dimension)
        preds, losses, thetas = _oga_core(
            Z[None], task.y[None], np.array([self.step_for(task.m)]),
            self.hypothesis_class.norm_bound, self.loss, trace=trace_hypotheses)
        hyps = list(thetas[0]) if trace_hypotheses else None
        return TaskRunRecord.from_losses(task.task_index, preds[0], losses[0], hyps)

    def average_losses(self, tasks, representation):
        """Average loss per task; tasks of equal length are run as one batch."""
        out = np.empty(len(tasks))
        by_len: dict[int, list[int]] = {}
        for j, t in enumerate(tasks):
            by_len.setdefault(t.m, []).append(j)
        p = self.hypothesis_class.dimension
        for m, idx in by_len.items():
            X = np.stack([tasks[j].X for j in idx])
            n, _, d = X.shape
            Z = np.asarray(representation(X.reshape(n * m, d)), dtype=float)
            if Z.ndim == 1:
                Z = Z.reshape(-1, 1)
            if Z.shape[1] != p:
                raise InputError(f"representation output dimension {Z.shape[1]} != {p}")
            Z = Z.reshape(n, m, p)
            Y = np.stack([tasks[j].y for j in idx])
            _, losses, _ = _oga_core(Z, Y, np.full(n, self.step_for(m)),
                                     self.hypothesis_class.norm_bound, self.loss)
            out[idx] = losses.mean(axis=1)
        return out

    def predict(self, hypothesis, features):
        return self.loss.clip(np.asarray(features, dtype=float) @ np.asarray(hypothesis))


def oga_run(task: TaskDataset, representation: Representation,
            hypothesis_class: LinearHypothesisClass, loss: LossFunction,
            step_size: float, *, trace_hypotheses: bool = False) -> TaskRunRecord:
    if not step_size > 0:
        raise InputError("step_size must be positive")
    learner = OnlineGradient(hypothesis_class, loss, step_size)
    return learner.run(task, representation, trace_hypotheses=trace_hypotheses)


# --------------------------------------------------------------------------
# Exponentially weighted aggregation over a finite class


class FiniteHypothesisClass:
    """A finite list of maps from features (m, p) to predictions (m,)."""

    def __init__(self, hypotheses: Sequence[Callable[[np.ndarray], np.ndarray]]):
        self.hypotheses = list(hypotheses)
        if not self.hypotheses:
            raise InputError("hypothesis class must be nonempty")
        self._linear = None

    @classmethod
    def linear(cls, thetas) -> "FiniteHypothesisClass":
        """Class of linear maps ``z -> <theta_j, z>``, one per row of ``thetas``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        obj = cls([(lambda Z, th=th: np.asarray(Z) @ th) for th in thetas])
        obj._linear = thetas
        return obj

    @classmethod
    def constants(cls, values) -> "FiniteHypothesisClass":
        values = np.asarray(values, dtype=float).reshape(-1)
        return cls([(lambda Z, c=c: np.full(np.shape(Z)[0], c)) for c in values])

    @classmethod
    def signs(cls, thetas) -> "FiniteHypothesisClass":
        """Linear classifiers ``z -> sign(<theta_j, z>)`` with sign(0) = +1."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return cls([(lambda Z, th=th: np.where(np.asarray(Z) @ th >= 0, 1.0, -1.0))
                    for th in thetas])

    @property
    def size(self) -> int:
        return len(self.hypotheses)

    def __len__(self):
        return self.size

    def outputs(self, Z) -> np.ndarray:
        """Matrix of hypothesis outputs, shape (m, |H|)."""
        if self._linear is not None:
            return np.asarray(Z, dtype=float) @ self._linear.T
        return np.column_stack([np.asarray(h(Z), dtype=float).reshape(-1)
                                for h in self.hypotheses])


def _normalized(log_w: np.ndarray) -> np.ndarray:
    w = np.exp(log_w - np.max(log_w))
    return w / w.sum()


def ewa_default_rate(loss: LossFunction, hypothesis_class: FiniteHypothesisClass,
                     m: int) -> float:
    """zeta_0 if the loss is exp-concave, else (2/B) sqrt(2 ln|H| / m)."""
    if m < 1:
        raise InputError("m must be >= 1")
    if loss.expconcavity is not None:
        return loss.expconcavity
    if loss.clip_bound is None:
        raise InputError("fallback rate needs a clip bound B")
    if hypothesis_class.size == 1:
        warnings.warn("|H| = 1: fallback EWA rate is 0 (log 1 = 0)", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return (2.0 / loss.clip_bound) * math.sqrt(2.0 * math.log(hypothesis_class.size) / m)


class ExponentialWeights:
    """Exponentially weighted aggregation over a finite class.

    Predicts the weight average of the (clipped) hypothesis outputs and
    reweights by ``exp(-rate * loss)``.  Weights are kept in log space.
    """

    def __init__(self, hypothesis_class: FiniteHypothesisClass, loss: LossFunction,
                 rate: Optional[float] = None, prior=None):
        if rate is not None and rate < 0:
            raise InputError("rate must be nonnegative")
        self.hypothesis_class = hypothesis_class
        self.loss = loss
        self.rate = rate
        if prior is None:
            prior = np.full(hypothesis_class.size, 1.0 / hypothesis_class.size)
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (hypothesis_class.size,):
            raise InputError("prior length must equal |H|")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise InputError("prior must be a probability vector")
        self.prior = prior

    def rate_for(self, m: int) -> float:
        if self.rate is not None:
            return self.rate
        return ewa_default_rate(self.loss, self.hypothesis_class, m)

    def run(self, task, representation, *, trace_hypotheses=False):
        Z = features(task, representation)
        out = self.loss.clip(self.hypothesis_class.outputs(Z))
        rate = self.rate_for(task.m)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.prior)
        preds = np.empty(task.m)
        losses = np.empty(task.m)
        hyps = [] if trace_hypotheses else None
        for i in range(task.m):
            w = _normalized(log_w)
            if not np.all(np.isfinite(w)):
                raise NumericError(f"EWA weights degenerate at round {i + 1}")
            if trace_hypotheses:
                hyps.append(w)
            a = float(w @ out[i])
            preds[i] = a
            losses[i] = self.loss.value(a, task.y[i])
            log_w = log_w - rate * self.loss.value(out[i], task.y[i])
        return TaskRunRecord.from_losses(task.task_index, preds, losses, hyps)

    def predict(self, hypothesis, features):
        out = self.loss.clip(self.hypothesis_class.outputs(features))
        return out @ np.asarray(hypothesis, dtype=float)


def ewa_within_run(task: TaskDataset, representation: Representation,
                   hypothesis_class: FiniteHypothesisClass, loss: LossFunction,
                   rate: float, prior=None, *, trace_hypotheses: bool = False
                   ) -> TaskRunRecord:
    learner = ExponentialWeights(hypothesis_class, loss, rate, prior)
    return learner.run(task, representation, trace_hypotheses=trace_hypotheses)
