"""LoRA adapter data model, the merged-update rule and adapter-set storage."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .container import ContainerError, ManifestError, ShapeMismatchError, load_tensors, save_tensors
from .linalg import as_matrix

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class LoraAdapter:
    """One low-rank update ``delta = b @ a`` with ``b`` d_out x r and ``a`` r x d_in.

    Any LoRA ``alpha / r`` scaling is expected to be folded into ``b``.
    """

    layer_id: str
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        b = as_matrix(self.b, name=f"{self.layer_id}.B")
        a = as_matrix(self.a, name=f"{self.layer_id}.A")
        if b.shape[1] != a.shape[0]:
            raise ShapeMismatchError(
                f"{self.layer_id}: B is {b.shape}, A is {a.shape}; inner ranks differ"
            )
        rank = a.shape[0]
        if rank < 1 or rank > min(a.shape[1], b.shape[0]):
            raise ShapeMismatchError(f"{self.layer_id}: rank {rank} outside [1, min(d_in, d_out)]")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]


def delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.b @ adapter.a


@dataclass(frozen=True)
class TaskHead:
    """Task-specific output layer applied to pooled backbone features."""

    kind: str
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown head kind {self.kind!r}")
        w = as_matrix(self.weight, name="head.W")
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise ShapeMismatchError(f"head bias has {b.shape[0]} entries, weight has {w.shape[0]} rows")
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class AdapterSet:
    task_id: str
    adapters: Mapping[str, LoraAdapter]
    head: TaskHead | None = None

    def __post_init__(self):
        if not self.task_id or "/" in self.task_id:
            raise ValueError(f"invalid task id {self.task_id!r}")
        for key, adapter in self.adapters.items():
            if key != adapter.layer_id:
                raise ValueError(f"adapter stored under {key!r} has layer_id {adapter.layer_id!r}")
        object.__setattr__(self, "adapters", dict(self.adapters))

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(self.adapters)

    def __getitem__(self, layer_id: str) -> LoraAdapter:
        return self.adapters[layer_id]


@dataclass(frozen=True)
class MergeCoefficients:
    """Table of merge coefficients, one row per task and one column per layer."""

    task_ids: tuple[str, ...]
    layer_ids: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (len(self.task_ids), len(self.layer_ids)):
            raise ValueError(
                f"coefficient table has shape {vals.shape}, expected "
                f"({len(self.task_ids)}, {len(self.layer_ids)})"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficient table contains non-finite entries")
        vals.flags.writeable = False
        object.__setattr__(self, "task_ids", tuple(self.task_ids))
        object.__setattr__(self, "layer_ids", tuple(self.layer_ids))
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, task_ids: Sequence[str], layer_ids: Sequence[str], value: float) -> "MergeCoefficients":
        return cls(tuple(task_ids), tuple(layer_ids), np.full((len(task_ids), len(layer_ids)), float(value)))

    def get(self, task_id: str, layer_id: str) -> float:
        return float(self.values[self.task_ids.index(task_id), self.layer_ids.index(layer_id)])

    def scaled(self, factor: float) -> "MergeCoefficients":
        return MergeCoefficients(self.task_ids, self.layer_ids, self.values * factor)

    def to_text(self) -> str:
        lines = [f"{t}/{l} = {float(self.values[i, j])!r}" for i, t in enumerate(self.task_ids) for j, l in enumerate(self.layer_ids)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MergeCoefficients":
        entries: dict[tuple[str, str], float] = {}
        tasks: list[str] = []
        layers: list[str] = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed coefficient line {raw!r}")
            task, _, layer = key.strip().partition("/")
            if task not in tasks:
                tasks.append(task)
            if layer not in layers:
                layers.append(layer)
            entries[(task, layer)] = float(value)
        values = np.empty((len(tasks), len(layers)))
        for i, t in enumerate(tasks):
            for j, l in enumerate(layers):
                if (t, l) not in entries:
                    raise ValueError(f"missing coefficient for {t}/{l}")
                values[i, j] = entries[(t, l)]
        return cls(tuple(tasks), tuple(layers), values)


def merged_update(sets: Sequence[AdapterSet], coeffs: MergeCoefficients, layer: str) -> np.ndarray:
    """Return ``sum_k coeffs[k, layer] * B_k A_k`` at one layer."""
    if not sets:
        raise ValueError("merged_update needs at least one adapter set")
    total = None
    shape = None
    for s in sets:
        adapter = s.adapters[layer]
        lam = coeffs.get(s.task_id, layer)
        if shape is None:
            shape = (adapter.d_out, adapter.d_in)
        elif (adapter.d_out, adapter.d_in) != shape:
            raise ShapeMismatchError(
                f"layer {layer}: task {s.task_id} has shape {(adapter.d_out, adapter.d_in)}, expected {shape}"
            )
        term = lam * delta(adapter)
        total = term if total is None else total + term
    return total


def _head_tensors(task_id: str, head: TaskHead) -> dict[str, np.ndarray]:
    return {f"{task_id}/head/W": head.weight, f"{task_id}/head/b": head.bias}


def save_adapter_set(adapter_set: AdapterSet, path) -> Path:
    tensors: dict[str, np.ndarray] = {}
    for layer_id, adapter in adapter_set.adapters.items():
        tensors[f"{adapter_set.task_id}/{layer_id}/A"] = adapter.a
        tensors[f"{adapter_set.task_id}/{layer_id}/B"] = adapter.b
    meta = {"task_id": adapter_set.task_id, "layers": list(adapter_set.layer_ids)}
    if adapter_set.head is not None:
        tensors.update(_head_tensors(adapter_set.task_id, adapter_set.head))
        meta["head_kind"] = adapter_set.head.kind
    return save_tensors(path, tensors, meta)


def load_adapter_set(path) -> AdapterSet:
    tensors, meta = load_tensors(path)
    try:
        task_id = meta["task_id"]
        layers = meta["layers"]
    except (KeyError, TypeError) as exc:
        raise ManifestError("adapter manifest lacks task_id/layers metadata") from exc
    expected = {f"{task_id}/{l}/{part}" for l in layers for part in ("A", "B")}
    head_kind = meta.get("head_kind")
    if head_kind is not None:
        expected |= {f"{task_id}/head/W", f"{task_id}/head/b"}
    if set(tensors) != expected:
        raise ManifestError(
            f"adapter tensors do not match declared layers: missing {sorted(expected - set(tensors))}, "
            f"unexpected {sorted(set(tensors) - expected)}"
        )
    adapters = {}
    for l in layers:
        try:
            adapters[l] = LoraAdapter(l, tensors[f"{task_id}/{l}/B"], tensors[f"{task_id}/{l}/A"])
        except ShapeMismatchError:
            raise
        except Exception as exc:  # invalid values surface as container errors
            raise ContainerError(f"layer {l}: {exc}") from exc
    head = None
    if head_kind is not None:
        head = TaskHead(head_kind, tensors[f"{task_id}/head/W"], tensors[f"{task_id}/head/b"])
    return AdapterSet(task_id, adapters, head)


def stack_layer_ids(sets: Iterable[AdapterSet]) -> tuple[str, ...]:
    """Layer ids shared by every set, in the order of the first set."""
    sets = list(sets)
    if not sets:
        return ()
    first = sets[0].layer_ids
    for s in sets[1:]:
        if set(s.layer_ids) != set(first):
            raise ShapeMismatchError(f"task {s.task_id} covers different layers than {sets[0].task_id}")
    return first
