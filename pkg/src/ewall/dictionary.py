"""EWA-LL for dictionary learning with a Metropolis-Hastings sampler.

A dictionary is a (d, K) matrix with unit-norm columns and acts on inputs as
``x -> D^T x`` (features in R^K).  The prior draws columns uniformly on the
unit sphere; the proposal adds Gaussian noise and renormalizes each column.

Random draws (single generator): the initial prior draw, then for every MH
step the proposal noise followed by one uniform for the accept test.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ewall.core import InputError, TaskDataset
from ewall.meta import LifelongRunResult
from ewall.within_task import average_losses


@dataclass(frozen=True, eq=False)
class Dictionary:
    matrix: np.ndarray

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if M.ndim != 2:
            raise InputError("dictionary must be a 2-D matrix")
        norms = np.linalg.norm(M, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise InputError("dictionary columns must have unit norm")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @classmethod
    def normalized(cls, matrix) -> "Dictionary":
        M = np.asarray(matrix, dtype=float)
        return cls(M / np.linalg.norm(M, axis=0, keepdims=True))

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def K(self) -> int:
        return self.matrix.shape[1]

    @property
    def fingerprint(self) -> bytes:
        return self.matrix.tobytes()

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.matrix

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self.fingerprint == other.fingerprint and self.matrix.shape == other.matrix.shape

    def __hash__(self):
        return hash(self.fingerprint)


@dataclass(frozen=True)
class MhConfig:
    n_steps: int = 10
    proposal_std: float = 0.1
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise InputError("n_steps must be >= 1")
        if not self.proposal_std > 0:
            raise InputError("proposal_std must be positive")
        if not self.eta >= 0:
            raise InputError("eta must be nonnegative")


def sample_sphere_prior(d: int, K: int, rng: np.random.Generator) -> Dictionary:
    """K i.i.d. columns uniform on the unit sphere of R^d."""
    if d < 1 or K < 1:
        raise InputError("d and K must be >= 1")
    G = rng.standard_normal((d, K))
    for j in range(K):
        while not np.linalg.norm(G[:, j]) > 0:
            G[:, j] = rng.standard_normal(d)
    return Dictionary.normalized(G)


def propose(current: Dictionary, proposal_std: float, rng: np.random.Generator
            ) -> Dictionary:
    """Gaussian perturbation of every entry, then per-column renormalization."""
    if proposal_std < 0:
        raise InputError("proposal_std must be nonnegative")
    G = current.matrix + proposal_std * rng.standard_normal(current.matrix.shape)
    for j in range(current.K):
        while not np.linalg.norm(G[:, j]) > 0:
            G[:, j] = current.matrix[:, j] + proposal_std * rng.standard_normal(current.d)
    return Dictionary.normalized(G)


def acceptance_probability(eta: float, cum_loss_current: float,
                           cum_loss_proposal: float) -> float:
    """min(1, exp(eta (current - proposal)))."""
    log_ratio = eta * (cum_loss_current - cum_loss_proposal)
    if log_ratio >= 0:
        return 1.0
    return math.exp(log_ratio)


class CumulativeLossCache:
    """Tasks seen so far plus memoized per-task average losses per dictionary.

    Entries are keyed by the exact bytes of the dictionary matrix and extended
    lazily when new tasks are appended.
    """

    def __init__(self, tasks: Sequence[TaskDataset] = ()):
        self.tasks: list[TaskDataset] = list(tasks)
        self.memo: dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def add_task(self, task: TaskDataset) -> None:
        self.tasks.append(task)

    def __len__(self):
        return len(self.tasks)

    def per_task_losses(self, candidate: Dictionary, learner) -> np.ndarray:
        key = candidate.fingerprint
        known = self.memo.get(key)
        n_known = 0 if known is None else known.size
        if n_known == len(self.tasks):
            self.hits += 1
            return known
        self.misses += 1
        fresh = average_losses(learner, self.tasks[n_known:], candidate)
        full = fresh if known is None else np.concatenate([known, fresh])
        with self._lock:
            self.memo[key] = full
        return full

    def prune(self, keep: Sequence[Dictionary]) -> None:
        """Drop memo entries except those of ``keep``."""
        keys = {d.fingerprint for d in keep}
        with self._lock:
            self.memo = {k: v for k, v in self.memo.items() if k in keys}


def evaluate_cumulative_loss(candidate: Dictionary, cache: CumulativeLossCache,
                             learner) -> float:
    """Sum over stored tasks of the learner's average loss under ``candidate``."""
    if not cache.tasks:
        return 0.0
    return float(np.sum(cache.per_task_losses(candidate, learner)))


@dataclass
class ChainState:
    current: Dictionary
    cumulative_loss: float = 0.0
    accept_count: int = 0
    proposal_count: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.proposal_count if self.proposal_count else math.nan


def mh_chain(state: ChainState, config: MhConfig, cache: CumulativeLossCache, learner,
             rng: np.random.Generator, *, task_index: int = 0,
             proposal: Optional[Callable[[Dictionary, np.random.Generator], Dictionary]]
             = None) -> ChainState:
    """``config.n_steps`` Metropolis-Hastings steps targeting
    ``exp(-eta * cumulative loss)`` times the prior.

    ``proposal`` replaces the default normalized-Gaussian proposal; it must be
    symmetric for the likelihood-ratio acceptance rule to be correct.
    Returns a new state; counts accumulate from ``state``.  Each step appends
    ``(task_index, step, accepted, cum_loss_current)`` to ``diagnostics``.
    """
    current = state.current
    cur_loss = evaluate_cumulative_loss(current, cache, learner)
    accepts, proposals = state.accept_count, state.proposal_count
    diag = list(state.diagnostics)
    for step in range(1, config.n_steps + 1):
        if proposal is None:
            cand = propose(current, config.proposal_std, rng)
        else:
            cand = proposal(current, rng)
        cand_loss = evaluate_cumulative_loss(cand, cache, learner)
        accepted = rng.random() < acceptance_probability(config.eta, cur_loss, cand_loss)
        proposals += 1
        if accepted:
            current, cur_loss = cand, cand_loss
            accepts += 1
        diag.append((task_index, step, bool(accepted), cur_loss))
    return ChainState(current, cur_loss, accepts, proposals, diag)


def ewa_ll_dictionary_run(tasks: Sequence[TaskDataset], learner, config: MhConfig,
                          K: Optional[int] = None, *, initial: Optional[Dictionary] = None,
                          rng: Optional[np.random.Generator] = None,
                          prune_cache: bool = True) -> LifelongRunResult:
    """EWA-LL for dictionary learning.

    Per task: run the learner with the current dictionary, store the task,
    then run the MH chain (started from the current dictionary) to obtain the
    next one.  ``drawn`` holds the dictionary used on each task and
    ``extras`` the per-task acceptance rates and the chain diagnostics.
    """
    if not tasks:
        raise InputError("need at least one task")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    d = tasks[0].dimension
    if K is None:
        K = learner.hypothesis_class.dimension
    current = sample_sphere_prior(d, K, rng) if initial is None else initial
    cache = CumulativeLossCache()
    result = LifelongRunResult()
    rates, diagnostics = [], []
    for task in tasks:
        result.records.append(learner.run(task, current))
        result.drawn.append(current)
        cache.add_task(task)
        state = mh_chain(ChainState(current), config, cache, learner, rng,
                         task_index=task.task_index)
        rates.append(state.acceptance_rate)
        diagnostics.extend(state.diagnostics)
        current = state.current
        if prune_cache:
            cache.prune([current])
    result.extras["acceptance_rate"] = np.array(rates)
    result.extras["chain"] = diagnostics
    result.extras["final"] = current
    result.extras["cache"] = cache
    return result


def write_chain_csv(diagnostics, path) -> None:
    """``task,mh_step,accepted,cum_loss_current`` rows."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "mh_step", "accepted", "cum_loss_current"])
            for t, step, acc, loss in diagnostics:
                w.writerow([t, step, int(acc), repr(float(loss))])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
