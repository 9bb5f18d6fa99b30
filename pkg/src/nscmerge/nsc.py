"""Null-space compression merging and the entropy-minimization comparator.

Both learn one coefficient per (task, LoRA layer) by gradient descent on a
label-free objective evaluated on the merged model:

* ``nsc``: mean null-space ratio of each task's activations with respect to
  that task's own down-projections, over the target layers;
* ``entropy``: mean softmax entropy of each task's head outputs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .adapters import CLASSIFICATION, AdapterSet, MergeCoefficients
from .autograd import Tensor
from .linalg import LinalgError
from .nullspace import NullRatioContext
from .optim import AdamW
from .toynet import BaseModel, apply_head, grad_wrt_coeffs, lora_terms, run_graph, select_layers

logger = logging.getLogger(__name__)

OBJECTIVES = ("nsc", "entropy")


@dataclass(frozen=True)
class NscConfig:
    steps: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_init: float = 0.4
    target_blocks: str = "last-quarter"
    target_proj: str = "o"
    weight_decay: float = 0.0
    freeze_non_target: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def target_layers(self, model: BaseModel) -> tuple[str, ...]:
        return select_layers(model.config, self.target_blocks, self.target_proj)


class UnlabeledPool:
    """Round-robin minibatch sampler over one task's unlabeled inputs.

    The pool is reshuffled from its own generator each time it is exhausted;
    a minibatch never straddles two shuffles.
    """

    def __init__(self, inputs: np.ndarray, seed: int):
        self.inputs = np.asarray(inputs)
        if len(self.inputs) == 0:
            raise ValueError("unlabeled pool is empty")
        self._rng = np.random.default_rng([seed, 0x5A3D])
        self._order = self._rng.permutation(len(self.inputs))
        self._cursor = 0

    def sample(self, b: int) -> np.ndarray:
        b = min(b, len(self.inputs))
        if self._cursor + b > len(self._order):
            self._order = self._rng.permutation(len(self.inputs))
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + b]
        self._cursor += b
        return self.inputs[idx]


def make_pools(inputs: Mapping[str, np.ndarray], seed: int) -> dict[str, UnlabeledPool]:
    """One pool per task; task ``k`` in iteration order uses seed ``(seed, k)``."""
    return {task: UnlabeledPool(x, seed * 104729 + k) for k, (task, x) in enumerate(inputs.items())}


class GramCacheError(LinalgError):
    pass


def prepare_gram_caches(sets: Sequence[AdapterSet], target_layers) -> dict[tuple[str, str], NullRatioContext]:
    caches = {}
    for s in sets:
        for layer in target_layers:
            try:
                caches[(s.task_id, layer)] = NullRatioContext.from_adapter(s.adapters[layer])
            except LinalgError as exc:
                raise GramCacheError(f"Gram matrix of task {s.task_id}, layer {layer} is singular") from exc
            except KeyError as exc:
                raise GramCacheError(f"task {s.task_id} has no adapter at target layer {layer}") from exc
    return caches


def _ratio_graph(z: Tensor, az: Tensor, gram_inv: np.ndarray) -> Tensor:
    """Differentiable row-wise null-space ratio; zero rows give 1."""
    captured = ag.reduce_sum((az @ Tensor(gram_inv)) * az, axis=-1)
    sq = ag.reduce_sum(z * z, axis=-1)
    zero = (sq.data == 0.0).astype(np.float64)
    return ag.clamped_sqrt(1.0 - captured / (sq + zero))


def nsc_loss(
    model: BaseModel,
    sets: Sequence[AdapterSet],
    coeffs: MergeCoefficients,
    lam: Tensor,
    batches: Mapping[str, np.ndarray],
    caches: Mapping[tuple[str, str], NullRatioContext],
    target_layers: Sequence[str],
) -> Tensor:
    terms = lora_terms(model, sets, coeffs, lam)
    out, rows = _joint_forward(model, sets, batches, terms)
    t = model.config.seq_len
    per_task = []
    for k, s in enumerate(sets):
        tok = slice(rows[k].start * t, rows[k].stop * t)
        layer_means = []
        for layer in target_layers:
            slot = [i for i, other in enumerate(sets) if layer in other.adapters].index(k)
            z = out.z[layer][tok]
            az = out.az[layer][slot][tok]
            omega = _ratio_graph(z, az, caches[(s.task_id, layer)].gram_inv)
            layer_means.append(ag.mean(omega))
        per_task.append(ag.mean(ag.stack(layer_means)))
    return ag.mean(ag.stack(per_task))


def _joint_forward(model, sets, batches, terms):
    """Run every task's minibatch through the merged model in one pass.

    Samples never interact (attention is per sequence), so this equals one
    forward per task. Returns the graph and each task's sample-row slice.
    """
    rows, chunks, start = [], [], 0
    for s in sets:
        x = np.asarray(batches[s.task_id])
        rows.append(slice(start, start + len(x)))
        chunks.append(x)
        start += len(x)
    return run_graph(model, np.concatenate(chunks, axis=0), terms), rows


def entropy_loss(
    model: BaseModel,
    sets: Sequence[AdapterSet],
    coeffs: MergeCoefficients,
    lam: Tensor,
    batches: Mapping[str, np.ndarray],
) -> Tensor:
    for s in sets:
        if s.head is None or s.head.kind != CLASSIFICATION:
            raise ValueError(f"entropy objective needs a classification head; task {s.task_id} has none")
    terms = lora_terms(model, sets, coeffs, lam)
    out, rows = _joint_forward(model, sets, batches, terms)
    per_task = []
    for s, r in zip(sets, rows):
        logits = apply_head(out.features[r], s.head)
        logp = ag.log_softmax(logits, axis=-1)
        per_task.append(ag.mean(-ag.reduce_sum(ag.exp(logp) * logp, axis=-1)))
    return ag.mean(ag.stack(per_task))


def nsc_objective(model, sets, coeffs: MergeCoefficients, caches, batches, target_layers) -> float:
    lam = Tensor(coeffs.values)
    return float(nsc_loss(model, sets, coeffs, lam, batches, caches, target_layers).data)


def entropy_objective(model, sets, coeffs: MergeCoefficients, batches) -> float:
    return float(entropy_loss(model, sets, coeffs, Tensor(coeffs.values), batches).data)


class OptimizationAborted(FloatingPointError):
    def __init__(self, message: str, trajectory: list):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class OptimizeResult:
    coefficients: MergeCoefficients
    trajectory: list[float]
    lambda_history: list[np.ndarray] = field(default_factory=list, repr=False)

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        layers = self.coefficients.layer_ids
        writer.writerow(["step", "objective"] + [f"mean_lambda[{l}]" for l in layers])
        for step, (value, lam) in enumerate(zip(self.trajectory, self.lambda_history), 1):
            writer.writerow([step, repr(float(value))] + [repr(float(v)) for v in lam.mean(axis=0)])
        return buf.getvalue()


def optimize(
    model: BaseModel,
    sets: Sequence[AdapterSet],
    pools: Mapping[str, np.ndarray],
    config: NscConfig,
    objective: str = "nsc",
    *,
    recompute_gram: bool = False,
) -> OptimizeResult:
    """Learn per-task, per-layer merge coefficients.

    Every step draws one minibatch per task, evaluates the objective on the
    model rebuilt from the current coefficients and takes an AdamW step on
    all coefficients. ``trajectory[t]`` is the objective before step t's
    update. ``pools`` maps task id to that task's unlabeled inputs.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    task_ids = [s.task_id for s in sets]
    layer_ids = model.config.layer_ids
    if objective == "entropy":
        kinds = {s.head.kind if s.head else None for s in sets}
        if kinds != {CLASSIFICATION}:
            raise ValueError("entropy objective refuses pools with non-classification tasks")
    targets = config.target_layers(model)
    caches = prepare_gram_caches(sets, targets) if objective == "nsc" else {}
    samplers = make_pools({t: pools[t] for t in task_ids}, config.seed)

    lam = Tensor(np.full((len(task_ids), len(layer_ids)), float(config.lambda_init)), requires_grad=True)
    opt = AdamW([lam], lr=config.learning_rate, weight_decay=config.weight_decay)
    frozen = np.array([l not in targets for l in layer_ids]) if config.freeze_non_target else None
    trajectory: list[float] = []
    history: list[np.ndarray] = []
    for step in range(config.steps):
        batches = {t: samplers[t].sample(config.batch_size) for t in task_ids}
        coeffs = MergeCoefficients(tuple(task_ids), layer_ids, lam.data)
        if objective == "nsc":
            if recompute_gram:
                caches = prepare_gram_caches(sets, targets)

            def fn(m, ss, cc, lt, bb):
                return nsc_loss(m, ss, cc, lt, bb, caches, targets)

        else:

            def fn(m, ss, cc, lt, bb):
                return entropy_loss(m, ss, cc, lt, bb)

        try:
            value, grad = grad_wrt_coeffs(model, sets, coeffs, batches, fn)
        except FloatingPointError as exc:
            raise OptimizationAborted(str(exc), trajectory) from exc
        if not math.isfinite(value):
            raise OptimizationAborted(f"non-finite objective at step {step + 1}", trajectory)
        if frozen is not None:
            grad = grad.copy()
            grad[:, frozen] = 0.0
        trajectory.append(value)
        lam.grad = grad
        opt.step()
        history.append(lam.data.copy())
        logger.debug("step %d objective %.6f", step + 1, value)
    return OptimizeResult(MergeCoefficients(tuple(task_ids), layer_ids, lam.data.copy()), trajectory, history)
