"""Per-task scores and normalization against fine-tuned references."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..adapters import CLASSIFICATION, AdapterSet, MergeCoefficients, TaskHead
from ..toynet import BaseModel, evaluate_split

HIGHER, LOWER = "higher", "lower"


def metric_for(kind: str) -> tuple[str, str]:
    return ("accuracy", HIGHER) if kind == CLASSIFICATION else ("rmse", LOWER)


def normalized_score(score: float, reference: float, direction: str) -> float | None:
    """Percent of the reference; ``None`` when a ratio denominator is zero."""
    if direction == HIGHER:
        return None if reference == 0.0 else 100.0 * score / reference
    if direction == LOWER:
        return None if score == 0.0 else 100.0 * reference / score
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class EvalResult:
    task_id: str
    metric: str
    score: float
    direction: str
    reference: float | None = None
    normalized: float | None = None
    loss: float | None = None


def average_normalized(results: Sequence[EvalResult]) -> float | None:
    values = [r.normalized for r in results]
    if not values or any(v is None for v in values):
        return None
    return math.fsum(values) / len(values)


def evaluate(
    model: BaseModel,
    sets: Sequence[AdapterSet],
    coeffs: MergeCoefficients | None,
    tasks,
    heads: Mapping[str, TaskHead],
    references: Mapping[str, float] | None = None,
    split: str = "test",
) -> list[EvalResult]:
    """Score every task with its own head on the model given by ``sets``/``coeffs``."""
    results = []
    for task in tasks:
        tokens, targets = task.splits[split]
        loss, score = evaluate_split(model, sets, coeffs, heads[task.task_id], tokens, targets, task.kind)
        name, direction = metric_for(task.kind)
        ref = None if references is None else references.get(task.task_id)
        norm = None if ref is None else normalized_score(score, ref, direction)
        results.append(EvalResult(task.task_id, name, score, direction, ref, norm, loss))
    return results


def mean_loss(results: Sequence[EvalResult]) -> float:
    return math.fsum(r.loss for r in results) / len(results)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def results_csv(rows: Mapping[str, Sequence[EvalResult]], value: str = "normalized") -> str:
    """One row per method: per-task values then ``Avg`` (normalized only)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    methods = list(rows)
    task_ids = [r.task_id for r in rows[methods[0]]] if methods else []
    header = ["method"] + task_ids + (["Avg"] if value == "normalized" else [])
    writer.writerow(header)
    for method in methods:
        res = rows[method]
        cells = [_fmt(getattr(r, value)) for r in res]
        if value == "normalized":
            cells.append(_fmt(average_normalized(res)))
        writer.writerow([method] + cells)
    return buf.getvalue()


def direction_row(results: Sequence[EvalResult]) -> list[str]:
    return [f"{r.metric} ({'up' if r.direction == HIGHER else 'down'})" for r in results]


def scores_array(results: Sequence[EvalResult]) -> np.ndarray:
    return np.array([r.score for r in results])
