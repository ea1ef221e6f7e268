"""Adaptive multi-task weighting: losses, perplexity progress, task weights.

Per-token negative log-probabilities are in nats; sequence loss is their sum
and perplexity the exponential of their mean.  Learning progress is the drop
in a sample's perplexity between two checkpoints; it maps to an instance
weight clip(exp(-beta * progress), w_min, w_max), so samples the model has
already mastered are down-weighted.  Task weights come from the difficulty
signal d = 1 - metric, normalised as d^alpha / sum(d^alpha); when every task
is perfect the 0/0 collapses to uniform weights.

Task weights are used in two roles: as loss multipliers in the weighted
objective (the default) and as sampling probabilities via sample_task.  The
module holds no hidden state; callers supply checkpoints' NLL traces and a
seeded random source.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import (
    EmptySequence,
    InvalidMetric,
    InvalidValue,
    InvalidWeights,
    UnknownCheckpoint,
    UnknownTask,
)

__all__ = [
    "SampleRecord",
    "WeightingConfig",
    "TaskState",
    "sequence_nll",
    "perplexity",
    "progress",
    "mean_progress",
    "instance_weight",
    "task_weights",
    "task_states",
    "weighted_loss",
    "sample_task",
    "read_trace",
    "write_trace",
]


def _check_nlls(tokens: Sequence[float], context: str) -> None:
    if len(tokens) == 0:
        raise EmptySequence(f"{context}: per-token NLL list is empty")
    for x in tokens:
        if not math.isfinite(x) or x < 0:
            raise InvalidValue(f"{context}: NLL entries must be finite and >= 0, got {x}")


@dataclass
class SampleRecord:
    """Per-sample token NLL traces keyed by checkpoint tag."""

    task: str
    sample: str
    nll_by_checkpoint: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lengths = set()
        for tag, nlls in self.nll_by_checkpoint.items():
            _check_nlls(nlls, f"{self.task}/{self.sample}@{tag}")
            lengths.add(len(nlls))
        if len(lengths) > 1:
            raise InvalidValue(
                f"{self.task}/{self.sample}: NLL traces disagree on token count "
                f"{sorted(lengths)}"
            )


@dataclass(frozen=True)
class WeightingConfig:
    """Sensitivity and bounds for instance weights, exponent for task weights."""

    beta: float = 1.0
    w_min: float = 0.1
    w_max: float = 10.0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise InvalidValue(f"beta must be positive, got {self.beta}")
        if self.w_min <= 0:
            raise InvalidValue(f"w_min must be positive, got {self.w_min}")
        if self.w_max < self.w_min:
            raise InvalidValue(f"w_max {self.w_max} < w_min {self.w_min}")
        if self.alpha < 1:
            raise InvalidValue(f"alpha must be >= 1, got {self.alpha}")


@dataclass(frozen=True)
class TaskState:
    """One task's metric, derived difficulty, and normalised weight."""

    task: str
    metric: float
    difficulty: float
    weight: float


def sequence_nll(tokens: Sequence[float]) -> float:
    """Total sequence loss: the sum of per-token NLLs."""
    _check_nlls(tokens, "sequence_nll")
    return math.fsum(tokens)


def perplexity(tokens: Sequence[float]) -> float:
    """exp of the mean per-token NLL; >= 1 whenever entries are >= 0."""
    _check_nlls(tokens, "perplexity")
    return math.exp(math.fsum(tokens) / len(tokens))


def progress(s: SampleRecord, prev_tag: str, curr_tag: str) -> float:
    """Perplexity drop on one sample between two checkpoints (positive = improved)."""
    for tag in (prev_tag, curr_tag):
        if tag not in s.nll_by_checkpoint:
            raise UnknownCheckpoint(
                f"{s.task}/{s.sample}: no NLL trace for checkpoint {tag!r} "
                f"(have {sorted(s.nll_by_checkpoint)})"
            )
    return perplexity(s.nll_by_checkpoint[prev_tag]) - perplexity(
        s.nll_by_checkpoint[curr_tag]
    )


def mean_progress(
    records: Iterable[SampleRecord], prev_tag: str, curr_tag: str
) -> float:
    """Mini-batch progress estimate: the mean per-sample perplexity drop.

    The cheap stand-in for exact per-sample progress at scale; exact mode
    (``progress`` per record) stays the default elsewhere.
    """
    deltas = [progress(r, prev_tag, curr_tag) for r in records]
    if not deltas:
        raise EmptySequence("mean_progress: no sample records")
    return math.fsum(deltas) / len(deltas)


def instance_weight(delta: float, cfg: WeightingConfig = WeightingConfig()) -> float:
    """clip(exp(-beta * delta), w_min, w_max)."""
    exponent = -cfg.beta * delta
    try:
        raw = math.exp(exponent)
    except OverflowError:
        raw = math.inf
    return min(max(raw, cfg.w_min), cfg.w_max)


def task_weights(metrics: Mapping[str, float], alpha: float = 1.0) -> dict[str, float]:
    """Difficulty-normalised task weights: (1-M)^alpha / sum over tasks.

    All-perfect task sets (every difficulty zero) fall back to uniform
    weights, the symmetric resolution of the 0/0.
    """
    if not metrics:
        raise InvalidValue("task_weights requires at least one task")
    if alpha < 1:
        raise InvalidValue(f"alpha must be >= 1, got {alpha}")
    for task, m in metrics.items():
        if not 0.0 <= m <= 1.0:
            raise InvalidMetric(f"task {task!r}: metric {m} outside [0, 1]")
    powered = {t: (1.0 - m) ** alpha for t, m in metrics.items()}
    total = math.fsum(powered.values())
    if total == 0.0:
        return {t: 1.0 / len(metrics) for t in metrics}
    return {t: p / total for t, p in powered.items()}


def task_states(
    metrics: Mapping[str, float], alpha: float = 1.0
) -> list[TaskState]:
    """TaskState rows (metric, difficulty, weight) sorted by task id."""
    lambdas = task_weights(metrics, alpha)
    return [
        TaskState(task=t, metric=metrics[t], difficulty=1.0 - metrics[t], weight=lambdas[t])
        for t in sorted(metrics)
    ]


def weighted_loss(
    batch: Sequence[tuple[str, float, float]], lambdas: Mapping[str, float]
) -> float:
    """Weighted multi-task objective over one batch.

    ``batch`` entries are (task, instance weight, loss).  The per-task
    expectation is approximated by the batch mean within each task, then
    tasks are combined with their lambda multipliers.
    """
    per_task: dict[str, list[float]] = {}
    for task, w, loss in batch:
        if task not in lambdas:
            raise UnknownTask(f"batch references task {task!r} with no weight")
        if not (math.isfinite(w) and math.isfinite(loss)):
            raise InvalidValue(f"task {task!r}: weight and loss must be finite")
        per_task.setdefault(task, []).append(w * loss)
    return math.fsum(
        lambdas[task] * math.fsum(vals) / len(vals) for task, vals in per_task.items()
    )


def sample_task(lambdas: Mapping[str, float], rng: random.Random) -> str:
    """Draw one task id with probability lambda_t from the supplied source."""
    if not lambdas:
        raise InvalidWeights("cannot sample from an empty weight map")
    total = math.fsum(lambdas.values())
    if abs(total - 1.0) > 1e-9 or any(w < 0 for w in lambdas.values()):
        raise InvalidWeights(f"task weights must sum to 1 (got {total})")
    u = rng.random()
    acc = 0.0
    tasks = sorted(lambdas)
    for t in tasks:
        acc += lambdas[t]
        if u < acc:
            return t
    return tasks[-1]  # guard against accumulated rounding at u ~ 1


# ── NLL trace files ─────────────────────────────────────────────────────────
#
# Line-delimited JSON: {"task": ..., "sample": ..., "ckpt": ..., "nll": [...]}

def read_trace(path: str | os.PathLike) -> list[SampleRecord]:
    """Parse a trace file, merging lines into per-(task, sample) records."""
    merged: dict[tuple[str, str], dict[str, tuple[float, ...]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                task, sample = str(doc["task"]), str(doc["sample"])
                ckpt = str(doc["ckpt"])
                nll = tuple(float(x) for x in doc["nll"])
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidValue(f"{path}:{lineno}: malformed trace line: {exc}") from exc
            traces = merged.setdefault((task, sample), {})
            if ckpt in traces:
                raise InvalidValue(
                    f"{path}:{lineno}: duplicate trace for {task}/{sample}@{ckpt}"
                )
            traces[ckpt] = nll
    return [
        SampleRecord(task=task, sample=sample, nll_by_checkpoint=traces)
        for (task, sample), traces in sorted(merged.items())
    ]


def write_trace(records: Iterable[SampleRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            for ckpt in sorted(r.nll_by_checkpoint):
                f.write(
                    json.dumps(
                        {
                            "task": r.task,
                            "sample": r.sample,
                            "ckpt": ckpt,
                            "nll": list(r.nll_by_checkpoint[ckpt]),
                        }
                    )
                    + "\n"
                )
