"""Meta-level aggregation over a finite set of representations.

Randomized EWA-LL draws one representation per task from the current
posterior; the integrated variant averages the per-representation
predictions instead.  Both update the posterior with
``exp(-eta * average task loss)``.

Random draws come from a single generator in a fixed order: one uniform per
task for the representation draw, then (integrated Monte-Carlo variant only)
``n_samples`` draws for that task.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ewall.core import (
    ContractError,
    EwallError,
    InputError,
    TaskDataset,
    TaskRunRecord,
    average_loss,
)
from ewall.within_task import features


class LearnerFailure(EwallError):
    """A within-task run failed; carries the (task, representation) context."""

    def __init__(self, task_index, rep_index, cause):
        super().__init__(f"task {task_index}, representation {rep_index}: {cause}")
        self.task_index = task_index
        self.rep_index = rep_index


@dataclass
class FiniteRepresentationSet:
    representations: list
    labels: Optional[list] = None

    def __post_init__(self):
        self.representations = list(self.representations)
        if not self.representations:
            raise InputError("need at least one representation")
        if self.labels is None:
            self.labels = [f"g{k + 1}" for k in range(len(self.representations))]
        if len(self.labels) != len(self.representations):
            raise InputError("labels and representations differ in length")

    @property
    def K(self) -> int:
        return len(self.representations)

    def __len__(self):
        return self.K

    def __getitem__(self, k):
        return self.representations[k]


@dataclass(frozen=True, eq=False)
class RepresentationWeights:
    """Posterior over K representations, stored as log weights."""

    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        if lw.ndim != 1 or lw.size == 0:
            raise InputError("log_weights must be a nonempty vector")
        if np.any(np.isnan(lw)) or not np.any(np.isfinite(lw)):
            raise InputError("log_weights must contain a finite entry and no NaN")
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def uniform(cls, K: int) -> "RepresentationWeights":
        return cls(np.full(K, -math.log(K)))

    @classmethod
    def from_probabilities(cls, p) -> "RepresentationWeights":
        p = np.asarray(p, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InputError("prior must be a probability vector")
        with np.errstate(divide="ignore"):
            return cls(np.log(p))

    @property
    def K(self) -> int:
        return self.log_weights.size

    @property
    def probabilities(self) -> np.ndarray:
        w = np.exp(self.log_weights - np.max(self.log_weights))
        return w / w.sum()

    def normalized(self) -> "RepresentationWeights":
        lw = self.log_weights
        shift = np.max(lw) + np.log(np.sum(np.exp(lw - np.max(lw))))
        return RepresentationWeights(lw - shift)


def posterior_update(weights: RepresentationWeights, task_losses, eta: float
                     ) -> RepresentationWeights:
    """Multiply by ``exp(-eta * task_losses)`` and renormalize (in log space)."""
    task_losses = np.asarray(task_losses, dtype=float)
    if task_losses.shape != (weights.K,):
        raise InputError(f"expected {weights.K} task losses, got {task_losses.shape}")
    if not np.all(np.isfinite(task_losses)):
        raise InputError("task losses must be finite")
    if eta < 0:
        raise InputError("eta must be nonnegative")
    return RepresentationWeights(weights.log_weights - eta * task_losses).normalized()


@dataclass(frozen=True)
class MetaConfig:
    eta: float
    loss_bound: float
    prior: Optional[Sequence[float]] = None
    seed: int = 0

    def __post_init__(self):
        if not self.eta >= 0:
            raise InputError("eta must be nonnegative")
        if not self.loss_bound > 0:
            raise InputError("loss_bound must be positive")
        if self.prior is not None:
            p = np.asarray(self.prior, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise InputError("prior must be a probability vector")

    def initial_weights(self, K: int) -> RepresentationWeights:
        if self.prior is None:
            return RepresentationWeights.uniform(K)
        if len(self.prior) != K:
            raise InputError(f"prior has {len(self.prior)} entries for {K} representations")
        return RepresentationWeights.from_probabilities(self.prior)


@dataclass
class LifelongRunResult:
    """Trace of a lifelong run.

    ``weights_used[t]`` is the posterior each task was played with and
    ``posteriors[t]`` the posterior after that task's update.
    ``representation_losses`` is the (T, K) matrix fed to the updates.
    """

    records: list = field(default_factory=list)
    drawn: list = field(default_factory=list)
    weights_used: list = field(default_factory=list)
    posteriors: list = field(default_factory=list)
    representation_losses: Optional[np.ndarray] = None
    representation_records: Optional[list] = None
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.records)

    @property
    def task_losses(self) -> np.ndarray:
        return np.array([r.average_loss for r in self.records])

    @property
    def compound_average_loss(self) -> float:
        return average_loss(self.task_losses)

    def expected_loss(self) -> float:
        """(1/T) sum_t sum_k pi_t(k) L_t(g_k), the exact randomized expectation."""
        if self.representation_losses is None:
            raise ContractError("run has no per-representation losses")
        W = np.array(self.weights_used)
        return float(np.mean(np.sum(W * self.representation_losses, axis=1)))


def _draw_index(probabilities: np.ndarray, u: float) -> int:
    k = int(np.searchsorted(np.cumsum(probabilities), u, side="right"))
    return min(k, probabilities.size - 1)


def _run_all(learner, task, reps, trace=False):
    records = []
    for k, rep in enumerate(reps.representations):
        try:
            records.append(learner.run(task, rep, trace_hypotheses=trace))
        except EwallError as exc:
            raise LearnerFailure(task.task_index, k + 1, exc) from exc
        except (ValueError, ArithmeticError) as exc:
            raise LearnerFailure(task.task_index, k + 1, exc) from exc
    return records


def ewa_ll_run(tasks: Sequence[TaskDataset], reps: FiniteRepresentationSet, learner,
               config: MetaConfig, rng: Optional[np.random.Generator] = None,
               *, trace_hypotheses: bool = False) -> LifelongRunResult:
    """Randomized EWA-LL over a finite set.

    All K representations are run on every task so that the full loss
    vector is available for the update; the drawn one supplies the realized
    losses.
    """
    if not tasks:
        raise InputError("need at least one task")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    weights = config.initial_weights(reps.K)
    result = LifelongRunResult(representation_records=[])
    losses = []
    for task in tasks:
        p = weights.probabilities
        k = _draw_index(p, rng.random())
        recs = _run_all(learner, task, reps, trace_hypotheses)
        L = np.array([r.average_loss for r in recs])
        result.records.append(recs[k])
        result.drawn.append(k)
        result.weights_used.append(p)
        result.representation_records.append(recs)
        losses.append(L)
        weights = posterior_update(weights, L, config.eta)
        result.posteriors.append(weights.probabilities)
    result.representation_losses = np.array(losses)
    return result


def mc_integrated_predict(per_rep_predictions) -> float:
    """Mean of N predictions from representations sampled from the posterior."""
    arr = np.asarray(per_rep_predictions, dtype=float)
    if arr.size == 0:
        raise InputError("need at least one sampled prediction")
    return float(np.mean(arr))


def integrated_ewa_ll_run(tasks: Sequence[TaskDataset], reps: FiniteRepresentationSet,
                          learner, config: MetaConfig, *,
                          n_samples: Optional[int] = None,
                          rng: Optional[np.random.Generator] = None
                          ) -> LifelongRunResult:
    """Integrated EWA-LL: predict the posterior average of the K learners.

    With ``n_samples`` the exact average is replaced by the mean over
    ``n_samples`` representations drawn i.i.d. from the posterior once per task.
    """
    if not tasks:
        raise InputError("need at least one task")
    loss = learner.loss
    if not loss.is_convex:
        raise ContractError(f"{loss.kind.value} loss is not convex")
    if n_samples is not None:
        if n_samples < 1:
            raise InputError("n_samples must be >= 1")
        rng = np.random.default_rng(config.seed) if rng is None else rng
    weights = config.initial_weights(reps.K)
    result = LifelongRunResult(representation_records=[])
    losses = []
    for task in tasks:
        p = weights.probabilities
        recs = _run_all(learner, task, reps)
        P = np.array([r.predictions for r in recs])  # (K, m)
        if n_samples is None:
            preds = p @ P
            result.drawn.append(None)
        else:
            ks = np.array([_draw_index(p, u) for u in rng.random(n_samples)])
            preds = np.array([mc_integrated_predict(P[ks, i]) for i in range(task.m)])
            result.drawn.append(ks)
        result.records.append(TaskRunRecord.from_losses(
            task.task_index, preds, loss.value(preds, task.y)))
        L = np.array([r.average_loss for r in recs])
        result.weights_used.append(p)
        result.representation_records.append(recs)
        losses.append(L)
        weights = posterior_update(weights, L, config.eta)
        result.posteriors.append(weights.probabilities)
    result.representation_losses = np.array(losses)
    return result


def comparator_matrix(tasks: Sequence[TaskDataset], reps: FiniteRepresentationSet,
                      comparator: Callable[[TaskDataset, Any], float]) -> np.ndarray:
    """(T, K) matrix of best-in-hindsight average losses per (task, representation)."""
    return np.array([[comparator(t, g) for g in reps.representations] for t in tasks])


def compound_regret(result: LifelongRunResult, reps: FiniteRepresentationSet,
                    tasks: Sequence[TaskDataset],
                    comparator: Callable[[TaskDataset, Any], float]) -> float:
    """Realized average loss minus the best representation's comparator average."""
    comp = comparator_matrix(tasks, reps, comparator)
    return result.compound_average_loss - float(np.min(comp.mean(axis=0)))


def finite_class_comparator(hypothesis_class, loss):
    """inf over a finite class of the average loss, by enumeration."""
    def comparator(task, representation):
        out = hypothesis_class.outputs(features(task, representation))
        return float(np.min(np.mean(loss.value(out, task.y[:, None]), axis=0)))

    return comparator


def linear_grid_comparator(loss, norm_bound: float, pitch: float = 1e-3,
                           chunk: int = 200_000):
    """Grid-search inf over ``{||theta|| <= norm_bound}`` of the average loss.

    Practical for feature dimension 1 or 2 only.
    """
    def comparator(task, representation):
        Z = features(task, representation)
        grid = ball_grid(Z.shape[1], norm_bound, pitch)
        best = math.inf
        for s in range(0, grid.shape[0], chunk):
            G = grid[s:s + chunk]
            vals = np.mean(loss.value(Z @ G.T, task.y[:, None]), axis=0)
            best = min(best, float(vals.min()))
        return best

    return comparator


def ball_grid(p: int, radius: float, pitch: float) -> np.ndarray:
    """Points of the cubic lattice of spacing ``pitch`` inside the closed ball."""
    if p > 2:
        raise InputError("grid comparator supports dimension 1 or 2")
    n = int(math.floor(radius / pitch))
    axis = np.arange(-n, n + 1) * pitch
    if p == 1:
        return axis[:, None]
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return pts[np.sum(pts ** 2, axis=1) <= radius ** 2 * (1 + 1e-12)]


def write_posterior_csv(result: LifelongRunResult, path) -> None:
    """``task,rep_index,weight`` after each task's update; rep_index is 1-based."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "rep_index", "weight"])
            for rec, post in zip(result.records, result.posteriors):
                for k, p in enumerate(post, start=1):
                    w.writerow([rec.task_index, k, repr(float(p))])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_posterior_csv(path) -> dict[int, np.ndarray]:
    out: dict[int, list[float]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.setdefault(int(row["task"]), []).append(float(row["weight"]))
    return {t: np.array(v) for t, v in out.items()}
