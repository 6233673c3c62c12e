"""The five list tasks and the train / out-of-distribution samplers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class TaskKind(str, Enum):
    CUMULATIVE_SUM = "cumulative_sum"
    CUMULATIVE_MIN = "cumulative_min"
    CUMULATIVE_MEDIAN = "cumulative_median"
    SORTING = "sorting"
    CUMULATIVE_MAX_SUBARRAY = "cumulative_max_subarray"


TASKS = tuple(TaskKind)


def _cumulative_median(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(1, x.shape[-1] + 1):
        out[..., i - 1] = np.median(x[..., :i], axis=-1)
    return out


def _cumulative_max_subarray(x: np.ndarray) -> np.ndarray:
    # Kadane, carried along the last axis
    best = np.empty_like(x)
    ending = x[..., 0].copy()
    best[..., 0] = ending
    for i in range(1, x.shape[-1]):
        ending = np.maximum(x[..., i], ending + x[..., i])
        best[..., i] = np.maximum(best[..., i - 1], ending)
    return best


def task_oracle(task, x) -> np.ndarray:
    """Exact target for ``x`` (shape (m,) or (B, m))."""
    task = TaskKind(task)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("task input must contain at least one value")
    if task is TaskKind.CUMULATIVE_SUM:
        return np.cumsum(x, axis=-1)
    if task is TaskKind.CUMULATIVE_MIN:
        return np.minimum.accumulate(x, axis=-1)
    if task is TaskKind.CUMULATIVE_MEDIAN:
        return _cumulative_median(x)
    if task is TaskKind.SORTING:
        return np.sort(x, axis=-1)
    return _cumulative_max_subarray(x)


@dataclass
class TaskBatch:
    """Inputs and targets of one length; ``gammas`` holds per-sample (lower, upper)."""

    task: TaskKind
    inputs: np.ndarray
    targets: np.ndarray
    gammas: np.ndarray
    scale: float = 1.0

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def length(self) -> int:
        return self.inputs.shape[1]

    def records(self):
        for x, y, (lo, hi) in zip(self.inputs, self.targets, self.gammas):
            yield {
                "task": self.task.value,
                "length": int(x.size),
                "gamma_l": float(lo),
                "gamma_u": float(hi),
                "scale": float(self.scale),
                "input": x.tolist(),
                "target": y.tolist(),
            }


def _draw(rng: np.random.Generator, gammas: np.ndarray, m: int) -> np.ndarray:
    lo, hi = gammas[:, :1], gammas[:, 1:]
    return lo + (hi - lo) * rng.random((gammas.shape[0], m))


def _train_gammas(rng, count: int, bound: float) -> np.ndarray:
    return np.sort(rng.uniform(-bound, bound, size=(count, 2)), axis=1)


def _ood_gammas(rng, count: int, c: float, bound: float) -> np.ndarray:
    out = np.empty((0, 2))
    while out.shape[0] < count:
        g = np.sort(rng.uniform(-bound * c, bound * c, size=(count, 2)), axis=1)
        keep = (g[:, 0] < -bound) | (g[:, 1] > bound)
        out = np.concatenate([out, g[keep]])
    return out[:count]


def _lengths(rng, count: int, length: int | None, max_len: int) -> np.ndarray:
    if length is not None:
        if not 1 <= length <= max_len:
            raise ValueError(f"length {length} outside 1..{max_len}")
        return np.full(count, length)
    return rng.integers(1, max_len + 1, size=count)


def _group(task, rng, gammas, lengths, scale) -> list[TaskBatch]:
    batches = []
    for m in np.unique(lengths):
        idx = np.flatnonzero(lengths == m)
        x = _draw(rng, gammas[idx], int(m))
        batches.append(TaskBatch(TaskKind(task), x, task_oracle(task, x), gammas[idx], scale))
    return batches


def sample_train(
    task,
    max_len: int,
    count: int,
    seed: int,
    length: int | None = None,
    bound: float = 2.0,
) -> list[TaskBatch]:
    """In-distribution samples, grouped by length.

    Per sample the bounds are two Uniform[-bound, bound] draws put in order,
    and entries are i.i.d. uniform between them. ``length=None`` draws each
    sample's length uniformly from 1..max_len.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    lengths = _lengths(rng, count, length, max_len)
    return _group(task, rng, _train_gammas(rng, count, bound), lengths, 1.0)


def sample_test_ood(
    task,
    max_len: int,
    count: int,
    c: float,
    seed: int,
    length: int | None = None,
    bound: float = 2.0,
) -> list[TaskBatch]:
    """Samples with bounds drawn from [-bound*c, bound*c], rejecting pairs inside [-bound, bound]."""
    if not c > 1:
        raise ValueError(f"OOD scale factor must exceed 1, got {c}")
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    lengths = _lengths(rng, count, length, max_len)
    return _group(task, rng, _ood_gammas(rng, count, c, bound), lengths, float(c))


def in_domain_fraction(batches, bound: float = 2.0) -> float:
    """Fraction of samples with every entry inside [-bound, bound]."""
    if isinstance(batches, TaskBatch):
        batches = [batches]
    inside = total = 0
    for b in batches:
        inside += int(np.all(np.abs(b.inputs) <= bound, axis=1).sum())
        total += len(b)
    if total == 0:
        raise ValueError("no samples")
    return inside / total


def dump_jsonl(batches, path) -> None:
    with open(path, "w") as fh:
        for b in batches:
            for rec in b.records():
                fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
