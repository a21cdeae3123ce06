"""Shared data model: tasks, losses and per-task run records."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np


class EwallError(Exception):
    """Base class for errors raised by this package."""


class InputError(EwallError, ValueError):
    """Malformed or out-of-domain input."""


class NumericError(EwallError, ArithmeticError):
    """A computation produced a non-finite or degenerate value."""


class ContractError(EwallError):
    """An algorithm was invoked outside the assumptions it requires."""


class Observation(NamedTuple):
    x: np.ndarray
    y: float


@dataclass(frozen=True, eq=False)
class TaskDataset:
    """One task: ordered inputs ``X`` of shape (m, d) and labels ``y`` of shape (m,).

    ``input_norm_bound``, when set, is checked against every row of ``X``.
    """

    X: np.ndarray
    y: np.ndarray
    task_index: int = 1
    input_norm_bound: Optional[float] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise InputError(f"task inputs must be 2-D, got shape {X.shape}")
        if X.shape[0] == 0:
            raise InputError("task must contain at least one observation")
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
        if X.shape[1] == 0:
            raise InputError("input dimension must be at least 1")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InputError("task contains non-finite values")
        if self.task_index < 1:
            raise InputError("task_index is 1-based")
        if self.input_norm_bound is not None:
            norms = np.linalg.norm(X, axis=1)
            if np.any(norms > self.input_norm_bound * (1 + 1e-12)):
                raise InputError(
                    f"input norm {norms.max():.6g} exceeds declared bound "
                    f"{self.input_norm_bound}"
                )
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def dimension(self) -> int:
        return self.X.shape[1]

    @property
    def observations(self) -> list[Observation]:
        return [Observation(x, float(label)) for x, label in zip(self.X, self.y)]

    def __len__(self) -> int:
        return self.m

    def __iter__(self) -> Iterator[Observation]:
        return iter(self.observations)

    def __eq__(self, other):
        if not isinstance(other, TaskDataset):
            return NotImplemented
        return (
            self.task_index == other.task_index
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


class LossKind(str, enum.Enum):
    SQUARED = "squared"
    ABSOLUTE = "absolute"
    HINGE = "hinge"
    ZERO_ONE = "zero_one"


# Worst case value bound and Lipschitz constant over predictions clipped to
# [-B, B] with |y| <= B (regression) or y in {-1, +1} (classification).
def _worst_case(kind: LossKind, B: float) -> tuple[float, float]:
    if kind is LossKind.SQUARED:
        return 4.0 * B * B, 4.0 * B
    if kind is LossKind.ABSOLUTE:
        return 2.0 * B, 1.0
    if kind is LossKind.HINGE:
        return 1.0 + B, 1.0
    return 1.0, math.inf


@dataclass(frozen=True)
class LossFunction:
    """A loss ``l(prediction, label)`` with its declared constants.

    Predictions are clipped to ``[-clip_bound, clip_bound]`` before evaluation
    when ``clip_bound`` is set. ``value_bound`` is C, ``lipschitz_const`` is
    Phi and ``expconcavity`` is zeta_0.  When a clip bound is given the
    declared constants are checked against the worst case for that range.
    """

    kind: LossKind
    clip_bound: Optional[float] = None
    lipschitz_const: Optional[float] = None
    value_bound: Optional[float] = None
    expconcavity: Optional[float] = None

    def __post_init__(self):
        kind = LossKind(self.kind)
        object.__setattr__(self, "kind", kind)
        for name in ("clip_bound", "lipschitz_const", "value_bound", "expconcavity"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InputError(f"{name} must be positive, got {v}")
        if self.clip_bound is not None:
            c_min, phi_min = _worst_case(kind, self.clip_bound)
            if self.value_bound is not None and self.value_bound < c_min * (1 - 1e-12):
                raise InputError(
                    f"value_bound {self.value_bound} is below the worst-case loss "
                    f"{c_min} for {kind.value} loss clipped at {self.clip_bound}"
                )
            if (
                self.lipschitz_const is not None
                and self.lipschitz_const < phi_min * (1 - 1e-12)
            ):
                raise InputError(
                    f"lipschitz_const {self.lipschitz_const} is below {phi_min} "
                    f"for {kind.value} loss clipped at {self.clip_bound}"
                )

    @classmethod
    def squared(cls, clip_bound: Optional[float] = None) -> "LossFunction":
        """Squared loss; with a clip bound B the defaults C=4B^2, Phi=4B, zeta_0=1/(8B)."""
        if clip_bound is None:
            return cls(LossKind.SQUARED)
        B = float(clip_bound)
        return cls(LossKind.SQUARED, B, 4.0 * B, 4.0 * B * B, 1.0 / (8.0 * B))

    @classmethod
    def absolute(cls, clip_bound: Optional[float] = None) -> "LossFunction":
        if clip_bound is None:
            return cls(LossKind.ABSOLUTE, lipschitz_const=1.0)
        B = float(clip_bound)
        return cls(LossKind.ABSOLUTE, B, 1.0, 2.0 * B)

    @classmethod
    def hinge(cls, clip_bound: Optional[float] = None) -> "LossFunction":
        if clip_bound is None:
            return cls(LossKind.HINGE, lipschitz_const=1.0)
        B = float(clip_bound)
        return cls(LossKind.HINGE, B, 1.0, 1.0 + B)

    @classmethod
    def zero_one(cls) -> "LossFunction":
        return cls(LossKind.ZERO_ONE, value_bound=1.0)

    @property
    def is_convex(self) -> bool:
        return self.kind is not LossKind.ZERO_ONE

    def clip(self, prediction):
        if self.clip_bound is None:
            return prediction
        return np.clip(prediction, -self.clip_bound, self.clip_bound)

    def value(self, prediction, label):
        """Vectorized loss of (already clipped or raw) predictions; clips first."""
        a = self.clip(np.asarray(prediction, dtype=float))
        y = np.asarray(label, dtype=float)
        if self.kind is LossKind.SQUARED:
            return (a - y) ** 2
        if self.kind is LossKind.ABSOLUTE:
            return np.abs(a - y)
        if self.kind is LossKind.HINGE:
            return np.maximum(0.0, 1.0 - y * a)
        return (np.where(a >= 0, 1.0, -1.0) != np.sign(y)).astype(float)

    def derivative(self, prediction, label):
        """Subgradient in the prediction, taken at the clipped prediction.

        Clipping is treated as the identity for the gradient so that a learner
        whose raw output leaves the clip range is still pulled back.
        """
        a = self.clip(np.asarray(prediction, dtype=float))
        y = np.asarray(label, dtype=float)
        if self.kind is LossKind.SQUARED:
            return 2.0 * (a - y)
        if self.kind is LossKind.ABSOLUTE:
            return np.sign(a - y)
        if self.kind is LossKind.HINGE:
            return np.where(y * a < 1.0, -y, 0.0)
        raise ContractError("zero_one loss has no useful subgradient")


def evaluate_loss(loss: LossFunction, prediction: float, label: float) -> float:
    """``l(clip(prediction), label)`` for a single pair."""
    if not (math.isfinite(prediction) and math.isfinite(label)):
        raise InputError(f"non-finite prediction/label ({prediction}, {label})")
    return float(loss.value(prediction, label))


def average_loss(losses: Iterable[float]) -> float:
    arr = np.asarray(list(losses) if not isinstance(losses, np.ndarray) else losses,
                     dtype=float)
    if arr.size == 0:
        raise InputError("cannot average an empty loss vector")
    if not np.all(np.isfinite(arr)):
        raise InputError("losses must be finite")
    return float(np.mean(arr))


@dataclass(frozen=True, eq=False)
class TaskRunRecord:
    """Predictions and losses of one within-task run.

    ``hypotheses`` optionally holds the hypothesis used to predict each round
    (before that round's label was revealed).
    """

    task_index: int
    predictions: np.ndarray
    losses: np.ndarray
    average_loss: float
    hypotheses: Optional[list] = field(default=None, repr=False)

    @classmethod
    def from_losses(cls, task_index, predictions, losses, hypotheses=None):
        predictions = np.asarray(predictions, dtype=float)
        losses = np.asarray(losses, dtype=float)
        return cls(task_index, predictions, losses, average_loss(losses), hypotheses)

    def __eq__(self, other):
        if not isinstance(other, TaskRunRecord):
            return NotImplemented
        return (
            self.task_index == other.task_index
            and np.array_equal(self.predictions, other.predictions)
            and np.array_equal(self.losses, other.losses)
            and self.average_loss == other.average_loss
        )

    __hash__ = None


def check_same_dimension(tasks: Sequence[TaskDataset]) -> int:
    if not tasks:
        raise InputError("need at least one task")
    d = tasks[0].dimension
    for t in tasks:
        if t.dimension != d:
            raise InputError(
                f"task {t.task_index} has dimension {t.dimension}, expected {d}"
            )
    return d


def write_tasks_csv(tasks: Sequence[TaskDataset], path) -> None:
    """Write tasks as ``task,round,x1,...,xd,y`` rows (round is 1-based)."""
    d = check_same_dimension(tasks)
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "round", *[f"x{j + 1}" for j in range(d)], "y"])
            for task in tasks:
                for i, (x, label) in enumerate(zip(task.X, task.y), start=1):
                    w.writerow([task.task_index, i, *map(repr, map(float, x)),
                                repr(float(label))])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_tasks_csv(path, input_norm_bound: Optional[float] = None) -> list[TaskDataset]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        if header[:2] != ["task", "round"] or header[-1] != "y" or len(header) < 4:
            raise InputError(f"{path}: bad header {header}")
        d = len(header) - 3
        rows: dict[int, list[list[float]]] = {}
        last = (0, 0)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 3:
                raise InputError(f"{path}:{lineno}: expected {d + 3} fields")
            t, r = int(row[0]), int(row[1])
            if (t, r) <= last:
                raise InputError(f"{path}:{lineno}: rows must be sorted by (task, round)")
            if t != last[0] and r != 1:
                raise InputError(f"{path}:{lineno}: round numbering must start at 1")
            if t == last[0] and r != last[1] + 1:
                raise InputError(f"{path}:{lineno}: round {r} out of sequence")
            last = (t, r)
            rows.setdefault(t, []).append([float(v) for v in row[2:]])
    tasks = []
    for t, data in rows.items():
        arr = np.array(data)
        tasks.append(TaskDataset(arr[:, :d], arr[:, d], task_index=t,
                                 input_norm_bound=input_norm_bound))
    return tasks
