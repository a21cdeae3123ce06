"""Batch settings: learning-to-learn by online-to-batch conversion, and EWA-TL
(tasks arrive sequentially, each dataset all at once)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ewall.core import (
    ContractError,
    InputError,
    LossFunction,
    TaskDataset,
    TaskRunRecord,
)
from ewall.meta import (
    FiniteRepresentationSet,
    LifelongRunResult,
    MetaConfig,
    _draw_index,
    ewa_ll_run,
    posterior_update,
)
from ewall.within_task import FiniteHypothesisClass, features


# --------------------------------------------------------------------------
# environments


@dataclass(frozen=True)
class DiscreteTaskDistribution:
    """A distribution over finitely many (x, y) pairs."""

    X: np.ndarray
    y: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (X.shape[0],) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise InputError("probabilities must be a distribution over the support")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(-1))
        object.__setattr__(self, "probabilities", p)

    def sample(self, m: int, rng, task_index: int = 1) -> TaskDataset:
        idx = rng.choice(self.X.shape[0], size=m, p=self.probabilities)
        return TaskDataset(self.X[idx], self.y[idx], task_index=task_index)

    def risk(self, predict: Callable[[np.ndarray], np.ndarray], loss: LossFunction
             ) -> float:
        """Exact expected loss of ``predict`` (a map from inputs to predictions)."""
        return float(self.probabilities @ loss.value(predict(self.X), self.y))


@dataclass(frozen=True)
class DiscreteEnvironment:
    """A meta-distribution Q over finitely many task distributions."""

    tasks: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.tasks),) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise InputError("environment weights must be a distribution over tasks")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "weights", w)

    def sample_tasks(self, T: int, m: int, rng) -> tuple[list[TaskDataset], list[int]]:
        """Draw P_1..P_T i.i.d. from Q, then m i.i.d. pairs from each."""
        which = rng.choice(len(self.tasks), size=T, p=self.weights)
        data = [self.tasks[j].sample(m, rng, task_index=t + 1)
                for t, j in enumerate(which)]
        return data, [int(j) for j in which]


# --------------------------------------------------------------------------
# learning-to-learn


@dataclass(frozen=True)
class LtlPredictor:
    """Frozen predictor ``x -> h(g(x))`` from the learning-to-learn strategy.

    ``task_draw`` and ``round_draw`` are the uniform draws (1-based).
    """

    representation: Callable
    hypothesis: object
    learner: object
    rep_index: int
    task_draw: int
    round_draw: int

    def predict(self, X) -> np.ndarray:
        Z = np.asarray(self.representation(np.atleast_2d(np.asarray(X, dtype=float))))
        return self.learner.predict(self.hypothesis, Z)


def learning_to_learn(training_tasks: Sequence[TaskDataset],
                      reps: FiniteRepresentationSet, learner, config: MetaConfig,
                      new_task: TaskDataset,
                      rng: Optional[np.random.Generator] = None) -> LtlPredictor:
    """Run EWA-LL on the training tasks, pick one of its draws uniformly, run the
    within-task learner on the new sample and pick one of its round hypotheses
    uniformly."""
    if new_task.m < 1:
        raise InputError("new task needs at least one round")
    d = training_tasks[0].dimension if training_tasks else None
    if d is None:
        raise InputError("need at least one training task")
    if any(t.dimension != d for t in training_tasks) or new_task.dimension != d:
        raise InputError("training tasks and new task must share dimension")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    result = ewa_ll_run(training_tasks, reps, learner, config, rng)
    T = len(training_tasks)
    t_draw = int(rng.integers(1, T + 1))
    k = result.drawn[t_draw - 1]
    record = learner.run(new_task, reps[k], trace_hypotheses=True)
    if record.hypotheses is None:
        raise ContractError("learner does not expose its per-round hypotheses")
    i_draw = int(rng.integers(1, new_task.m + 1))
    return LtlPredictor(reps[k], record.hypotheses[i_draw - 1], learner, k, t_draw,
                        i_draw)


# --------------------------------------------------------------------------
# EWA-TL


@dataclass(frozen=True)
class VcDeltaParams:
    vc_dim: int
    confidence: float = 0.05

    def __post_init__(self):
        if self.vc_dim < 1:
            raise InputError("vc_dim must be >= 1")
        if not 0 < self.confidence < 1:
            raise InputError("confidence must lie in (0, 1)")


def vc_delta(vc_dim: int, sample_size: int, confidence: float) -> float:
    """2 sqrt(2 (V ln(2 m e / V) + ln(4/eps)) / m)."""
    if vc_dim < 1:
        raise InputError("vc_dim must be >= 1")
    if sample_size < 1:
        raise InputError("sample_size must be >= 1")
    if not 0 < confidence < 1:
        raise InputError("confidence must lie in (0, 1)")
    V, m = vc_dim, sample_size
    inner = V * math.log(2.0 * m * math.e / V) + math.log(4.0 / confidence)
    return 2.0 * math.sqrt(2.0 * inner / m)


def erm_zero_one(task: TaskDataset, representation,
                 hypothesis_class: FiniteHypothesisClass) -> tuple[int, float]:
    """Empirical 0-1 risk minimizer over a finite class; ties go to the lowest index."""
    if hypothesis_class.size == 0:
        raise InputError("empty hypothesis class")
    out = hypothesis_class.outputs(features(task, representation))
    pred = np.where(out >= 0, 1.0, -1.0)
    risks = np.mean(pred != np.sign(task.y)[:, None], axis=0)
    j = int(np.argmin(risks))
    return j, float(risks[j])


def ewa_tl_run(tasks: Sequence[TaskDataset], reps: FiniteRepresentationSet,
               hypothesis_class: FiniteHypothesisClass, config: MetaConfig,
               vc: VcDeltaParams, rng: Optional[np.random.Generator] = None
               ) -> LifelongRunResult:
    """EWA-TL with the 0-1 ERM within tasks.

    The update penalizes each representation by its empirical risk plus the
    VC width at confidence ``eps / T``.  ``extras`` holds the (T, K) ERM
    indices, empirical risks and widths.
    """
    if not tasks:
        raise InputError("need at least one task")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    T = len(tasks)
    loss = LossFunction.zero_one()
    weights = config.initial_weights(reps.K)
    result = LifelongRunResult()
    erm_idx, risks, deltas = [], [], []
    for task in tasks:
        p = weights.probabilities
        k = _draw_index(p, rng.random())
        row_j, row_r, row_d = [], [], []
        for g in reps.representations:
            j, r = erm_zero_one(task, g, hypothesis_class)
            row_j.append(j)
            row_r.append(r)
            row_d.append(vc_delta(vc.vc_dim, task.m, vc.confidence / T))
        penal = np.array(row_r) + np.array(row_d)
        if np.any(penal > config.loss_bound * (1 + 1e-12)):
            raise ContractError(
                f"task {task.task_index}: risk + width {penal.max():.6g} exceeds "
                f"loss_bound {config.loss_bound}")
        out = hypothesis_class.outputs(features(task, reps[k]))[:, row_j[k]]
        pred = np.where(out >= 0, 1.0, -1.0)
        result.records.append(TaskRunRecord.from_losses(
            task.task_index, pred, loss.value(pred, task.y)))
        result.drawn.append(k)
        result.weights_used.append(p)
        erm_idx.append(row_j)
        risks.append(row_r)
        deltas.append(row_d)
        weights = posterior_update(weights, penal, config.eta)
        result.posteriors.append(weights.probabilities)
    result.extras["erm_index"] = np.array(erm_idx)
    result.extras["empirical_risk"] = np.array(risks)
    result.extras["delta"] = np.array(deltas)
    result.representation_losses = result.extras["empirical_risk"] + result.extras["delta"]
    return result

