"""Synthetic dictionary-learning study: data generation, the oracle that knows
the true dictionary, the EWA-LL run on the same data, and trace I/O.

Data: columns of D uniform on the unit sphere of R^d, task vectors theta_t and
inputs x with i.i.d. U[-1, 1] coordinates, ``y = <theta_t, D^T x> + noise``.
Random draws (one generator seeded by ``seed``): D, then all theta_t, then
all inputs, then all noise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ewall.core import InputError, LossFunction, TaskDataset
from ewall.dictionary import Dictionary, MhConfig, ewa_ll_dictionary_run, sample_sphere_prior
from ewall.within_task import LinearHypothesisClass, OnlineGradient, oga_run

CSV_HEADER = ["task", "round", "loss_ewall", "cumloss_ewall", "loss_oracle",
              "cumloss_oracle"]


@dataclass(frozen=True)
class SyntheticConfig:
    K: int = 2
    d: int = 5
    T: int = 150
    m: int = 100
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("K", "d", "T", "m"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise InputError("noise_std must be finite and nonnegative")


def generate_synthetic(config: SyntheticConfig
                       ) -> tuple[list[TaskDataset], Dictionary, list[np.ndarray]]:
    rng = np.random.default_rng(config.seed)
    K, d, T, m = config.K, config.d, config.T, config.m
    truth = sample_sphere_prior(d, K, rng)
    thetas = rng.uniform(-1.0, 1.0, (T, K))
    X = rng.uniform(-1.0, 1.0, (T, m, d))
    noise = rng.normal(0.0, 1.0, (T, m)) * config.noise_std
    Y = np.einsum("tk,tik->ti", thetas, X @ truth.matrix) + noise
    tasks = [TaskDataset(X[t], Y[t], task_index=t + 1) for t in range(T)]
    return tasks, truth, [thetas[t].copy() for t in range(T)]


def clip_bound_from_labels(tasks: Sequence[TaskDataset], quantile: float = 0.999) -> float:
    """Label clipping bound B_y: the given quantile of |y| over all tasks."""
    y = np.concatenate([t.y for t in tasks])
    b = float(np.quantile(np.abs(y), quantile))
    if not b > 0:
        raise InputError("labels are all zero; no clipping bound")
    return b


def dictionary_oga_step(B: float, Phi: float, m: int, K: int) -> float:
    """B / (Phi sqrt(2 m K)), the within-task step for the dictionary setting."""
    if not (B > 0 and Phi > 0) or m < 1 or K < 1:
        raise InputError("B, Phi must be positive and m, K >= 1")
    return B / (Phi * math.sqrt(2.0 * m * K))


# --------------------------------------------------------------------------
# traces


def _running(values: Optional[np.ndarray]) -> Optional[np.ndarray]:
    return None if values is None else np.cumsum(values)


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(eq=False)
class ExperimentTrace:
    """Per-round losses (flattened in task-major order) with cumulative sums.

    ``loss_ewall`` or ``loss_oracle`` may be None when only one side was run.
    """

    task: np.ndarray
    round: np.ndarray
    loss_ewall: Optional[np.ndarray] = None
    loss_oracle: Optional[np.ndarray] = None
    cumloss_ewall: Optional[np.ndarray] = None
    cumloss_oracle: Optional[np.ndarray] = None
    acceptance_rate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    truth_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.task = np.asarray(self.task, dtype=int)
        self.round = np.asarray(self.round, dtype=int)
        n = self.task.size
        for name in ("loss_ewall", "loss_oracle", "cumloss_ewall", "cumloss_oracle"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != (n,):
                    raise InputError(f"{name} has shape {v.shape}, expected ({n},)")
                setattr(self, name, v)
        if self.cumloss_ewall is None:
            self.cumloss_ewall = _running(self.loss_ewall)
        if self.cumloss_oracle is None:
            self.cumloss_oracle = _running(self.loss_oracle)
        self.acceptance_rate = np.asarray(self.acceptance_rate, dtype=float)

    @classmethod
    def empty(cls) -> "ExperimentTrace":
        return cls(np.zeros(0, int), np.zeros(0, int))

    @classmethod
    def from_task_losses(cls, per_task: Sequence[np.ndarray], *, ewall: bool,
                         **kw) -> "ExperimentTrace":
        task = np.concatenate([np.full(len(l), t + 1) for t, l in enumerate(per_task)])
        rnd = np.concatenate([np.arange(1, len(l) + 1) for l in per_task])
        flat = np.concatenate([np.asarray(l, dtype=float) for l in per_task])
        key = "loss_ewall" if ewall else "loss_oracle"
        return cls(task, rnd, **{key: flat}, **kw)

    def __len__(self):
        return self.task.size

    @property
    def T(self) -> int:
        return int(self.task.max()) if self.task.size else 0

    def per_task(self, column: str) -> np.ndarray:
        """(T, m) matrix of a loss column; tasks must have equal length."""
        v = getattr(self, column)
        if v is None:
            raise InputError(f"trace has no {column} column")
        return v.reshape(self.T, -1)

    def head(self, n_tasks: int) -> "ExperimentTrace":
        """The first ``n_tasks`` tasks (cumulative columns kept as they are)."""
        keep = self.task <= n_tasks
        sub = {k: (None if getattr(self, k) is None else getattr(self, k)[keep])
               for k in ("loss_ewall", "loss_oracle", "cumloss_ewall", "cumloss_oracle")}
        return ExperimentTrace(self.task[keep], self.round[keep], **sub,
                               acceptance_rate=self.acceptance_rate[:n_tasks],
                               truth_fingerprint=self.truth_fingerprint,
                               metadata=dict(self.metadata))

    def merge(self, other: "ExperimentTrace") -> "ExperimentTrace":
        """Combine the EWA-LL columns of ``self`` with the oracle columns of ``other``."""
        if not (np.array_equal(self.task, other.task)
                and np.array_equal(self.round, other.round)):
            raise InputError("traces cover different (task, round) sequences")
        return ExperimentTrace(
            self.task, self.round, self.loss_ewall, other.loss_oracle,
            self.cumloss_ewall, other.cumloss_oracle,
            self.acceptance_rate if self.acceptance_rate.size else other.acceptance_rate,
            self.truth_fingerprint or other.truth_fingerprint,
            {**other.metadata, **self.metadata})

    def series_equal(self, other: "ExperimentTrace") -> bool:
        return (np.array_equal(self.task, other.task)
                and np.array_equal(self.round, other.round)
                and all(_same(getattr(self, k), getattr(other, k))
                        for k in ("loss_ewall", "loss_oracle", "cumloss_ewall",
                                  "cumloss_oracle")))

    def __eq__(self, other):
        if not isinstance(other, ExperimentTrace):
            return NotImplemented
        return (self.series_equal(other)
                and np.array_equal(self.acceptance_rate, other.acceptance_rate)
                and self.truth_fingerprint == other.truth_fingerprint
                and self.metadata == other.metadata)


def run_oracle(tasks: Sequence[TaskDataset], truth: Dictionary, loss: LossFunction,
               step: float = 0.1, norm_bound: Optional[float] = None) -> ExperimentTrace:
    """OGA on features ``D^T x`` of the true dictionary, restarted at theta = 0
    on every task.  ``norm_bound`` defaults to sqrt(K)."""
    if not step > 0:
        raise InputError("step must be positive")
    B = math.sqrt(truth.K) if norm_bound is None else norm_bound
    cls = LinearHypothesisClass(truth.K, B)
    losses = [oga_run(t, truth, cls, loss, step).losses for t in tasks]
    return ExperimentTrace.from_task_losses(
        losses, ewall=False, truth_fingerprint=truth.fingerprint.hex(),
        metadata={"oracle_step": step})


def run_figure2_experiment(config: SyntheticConfig, mh: MhConfig, *,
                           within_step: Optional[float] = None,
                           oracle_step: float = 0.1, clip_quantile: float = 0.999,
                           return_data: bool = False):
    """Generate data, run EWA-LL for dictionaries and the oracle, merge traces.

    ``within_step`` is the OGA step used inside EWA-LL; by default
    ``B / (Phi sqrt(2 m K))`` with B = sqrt(K).  The MH chain draws from a
    generator seeded by ``mh.seed``.  With ``return_data`` the generated
    ``(tasks, truth, thetas)`` are returned alongside the trace.
    """
    tasks, truth, thetas = generate_synthetic(config)
    B_y = clip_bound_from_labels(tasks, clip_quantile)
    loss = LossFunction.squared(B_y)
    B = math.sqrt(config.K)
    step = (dictionary_oga_step(B, loss.lipschitz_const, config.m, config.K)
            if within_step is None else within_step)
    learner = OnlineGradient(LinearHypothesisClass(config.K, B), loss, step)
    result = ewa_ll_dictionary_run(tasks, learner, mh, config.K,
                                   rng=np.random.default_rng(mh.seed))
    ewall = ExperimentTrace.from_task_losses(
        [r.losses for r in result.records], ewall=True,
        acceptance_rate=result.extras["acceptance_rate"],
        metadata={"K": config.K, "d": config.d, "T": config.T, "m": config.m,
                  "noise_std": config.noise_std, "seed": config.seed,
                  "clip_bound": B_y, "clip_quantile": clip_quantile,
                  "within_step": step, "norm_bound": B, "eta": mh.eta,
                  "n_mh": mh.n_steps, "proposal_std": mh.proposal_std,
                  "mh_seed": mh.seed})
    trace = ewall.merge(run_oracle(tasks, truth, loss, oracle_step, B))
    if return_data:
        return trace, (tasks, truth, thetas)
    return trace


# --------------------------------------------------------------------------
# files


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def emit_csv(trace: ExperimentTrace, path) -> None:
    path = Path(path)
    cols = [trace.loss_ewall, trace.cumloss_ewall, trace.loss_oracle, trace.cumloss_oracle]
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for i in range(len(trace)):
                w.writerow([int(trace.task[i]), int(trace.round[i])]
                           + [_cell(None if c is None else c[i]) for c in cols])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_csv(path) -> ExperimentTrace:
    """Parse a result CSV back into a trace (series columns only)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if not rows or rows[0] != CSV_HEADER:
        raise InputError(f"{path}: expected header {','.join(CSV_HEADER)}")
    body = rows[1:]
    if any(len(r) != len(CSV_HEADER) for r in body):
        raise InputError(f"{path}: ragged row")
    try:
        task = np.array([int(r[0]) for r in body], dtype=int)
        rnd = np.array([int(r[1]) for r in body], dtype=int)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc

    def column(j):
        cells = [r[j] for r in body]
        if body and all(c == "" for c in cells):
            return None
        if not body:
            return None
        try:
            return np.array([float(c) for c in cells])
        except ValueError as exc:
            raise InputError(f"{path}: column {CSV_HEADER[j]}: {exc}") from exc

    return ExperimentTrace(task, rnd, column(2), column(4), column(3), column(5))


def emit_plot_data(trace: ExperimentTrace, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (series) and ``<path>.json`` (metadata,
    acceptance rates and truth fingerprint).  Returns both paths."""
    base = Path(path)
    series, meta = base.with_suffix(".csv"), base.with_suffix(".json")
    emit_csv(trace, series)
    doc = {"metadata": trace.metadata,
           "acceptance_rate": [float(a) for a in trace.acceptance_rate],
           "truth_fingerprint": trace.truth_fingerprint,
           "series": series.name,
           "columns": CSV_HEADER}
    try:
        meta.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{meta}: {exc.strerror or exc}") from exc
    return series, meta


def read_plot_data(path) -> ExperimentTrace:
    base = Path(path)
    meta = base.with_suffix(".json")
    try:
        doc = json.loads(meta.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"{meta}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{meta}: {exc}") from exc
    trace = read_csv(base.with_suffix(".csv"))
    trace.acceptance_rate = np.array(doc.get("acceptance_rate", []), dtype=float)
    trace.truth_fingerprint = doc.get("truth_fingerprint", "")
    trace.metadata = doc.get("metadata", {})
    return trace


def write_truth(path, truth: Dictionary, thetas: Sequence[np.ndarray]) -> None:
    """JSON sidecar with the ground-truth dictionary and task vectors."""
    path = Path(path)
    doc = {"dictionary": truth.matrix.tolist(),
           "fingerprint": truth.fingerprint.hex(),
           "thetas": [np.asarray(t, dtype=float).tolist() for t in thetas]}
    try:
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_truth(path) -> tuple[Dictionary, list[np.ndarray]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Dictionary(np.array(doc["dictionary"])), [np.array(t) for t in doc["thetas"]]
