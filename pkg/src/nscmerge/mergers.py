"""Learning-free merging baselines operating on per-layer task updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .adapters import AdapterSet, LoraAdapter, ShapeMismatchError, delta, stack_layer_ids
from .config import read_kv
from .linalg import numerical_rank, svd

METHODS = ("ta", "ties", "dare_ties", "svd", "linear", "knots_ties")


@dataclass(frozen=True)
class MergeSpec:
    method: str = "ta"
    scale: float = 1.0
    ties_keep_fraction: float = 0.20
    dare_drop_prob: float = 0.9
    svd_rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        method = self.method.replace("-", "_")
        if method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        object.__setattr__(self, "method", method)
        if not 0.0 < self.ties_keep_fraction <= 1.0:
            raise ValueError("ties_keep_fraction must lie in (0, 1]")
        if not 0.0 <= self.dare_drop_prob < 1.0:
            raise ValueError("dare_drop_prob must lie in [0, 1)")
        if self.svd_rank is not None and self.svd_rank < 1:
            raise ValueError("svd_rank must be positive")

    @classmethod
    def from_file(cls, path) -> "MergeSpec":
        return cls.from_mapping(read_kv(path))

    @classmethod
    def from_mapping(cls, kv) -> "MergeSpec":
        known = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, value in kv.items():
            if key not in known:
                raise ValueError(f"unknown merge option {key!r}")
            if key == "method":
                args[key] = value
            elif key in ("svd_rank", "seed"):
                args[key] = None if value.lower() == "none" else int(value)
            else:
                args[key] = float(value)
        return cls(**args)


def _check_shapes(deltas: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not deltas:
        raise ValueError("need at least one task update")
    deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
    for d in deltas[1:]:
        if d.shape != deltas[0].shape:
            raise ShapeMismatchError(f"task updates have shapes {deltas[0].shape} and {d.shape}")
    return deltas


def ta_merge(deltas: Sequence[np.ndarray], scale: float) -> np.ndarray:
    deltas = _check_shapes(deltas)
    return scale * np.sum(deltas, axis=0)


def _trim(values: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ``ceil(keep_fraction * n)`` largest-magnitude entries."""
    flat = values.reshape(-1)
    k = min(flat.size, math.ceil(keep_fraction * flat.size - 1e-9))
    if k >= flat.size:
        return values.copy()
    keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(values.shape)


def elect_and_mean(trimmed: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Sign election and disjoint mean over already-trimmed updates.

    Returns ``(merged, elected_sign)``. Coordinates whose retained sum is
    exactly zero get sign 0 and output 0.
    """
    stack = np.stack(trimmed)
    sign = np.sign(stack.sum(axis=0))
    agree = (np.sign(stack) == sign) & (stack != 0.0)
    count = agree.sum(axis=0)
    total = np.where(agree, stack, 0.0).sum(axis=0)
    merged = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return merged, sign


def ties_merge(deltas: Sequence[np.ndarray], scale: float, keep_fraction: float = 0.20) -> np.ndarray:
    deltas = _check_shapes(deltas)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    merged, _ = elect_and_mean([_trim(d, keep_fraction) for d in deltas])
    return scale * merged


def dare_sparsify(delta: np.ndarray, drop_prob: float, seed: int) -> np.ndarray:
    """Drop each entry with probability ``drop_prob``, rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError("drop_prob must lie in [0, 1)")
    delta = np.asarray(delta, dtype=np.float64)
    keep = np.random.default_rng(seed).random(delta.shape) >= drop_prob
    return np.where(keep, delta / (1.0 - drop_prob), 0.0)


def dare_ties_merge(deltas: Sequence[np.ndarray], scale: float, drop_prob: float = 0.9, seed: int = 0) -> np.ndarray:
    """DARE sparsification per task, then TIES sign election and disjoint mean."""
    deltas = _check_shapes(deltas)
    sparse = [dare_sparsify(d, drop_prob, seed + 7919 * k) for k, d in enumerate(deltas)]
    merged, _ = elect_and_mean(sparse)
    return scale * merged


def svd_merge(deltas: Sequence[np.ndarray], scale: float, target_rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``target_rank`` LoRA factors of ``scale * sum(deltas)``."""
    total = ta_merge(deltas, scale)
    if not 1 <= target_rank <= min(total.shape):
        raise ValueError(f"target_rank {target_rank} outside [1, {min(total.shape)}]")
    res = svd(total)
    b = res.u[:, :target_rank] * res.s[:target_rank]
    a = res.vt[:target_rank]
    return b, a


def linear_merge(adapters: Sequence[LoraAdapter], coeffs: Sequence[float], layer_id: str | None = None) -> LoraAdapter:
    """Concatenate scaled factors so that ``B' A' = sum_k lam_k B_k A_k`` exactly.

    A negative coefficient puts its sign on the B side. When the stacked
    rank would exceed ``min(d_in, d_out)`` the same product is returned in
    exact SVD factors instead.
    """
    if len(adapters) != len(coeffs) or not adapters:
        raise ValueError("need one coefficient per adapter")
    d_out, d_in = adapters[0].d_out, adapters[0].d_in
    for ad in adapters:
        if (ad.d_out, ad.d_in) != (d_out, d_in):
            raise ShapeMismatchError(f"adapter {ad.layer_id} is {ad.d_out}x{ad.d_in}, expected {d_out}x{d_in}")
    bs, as_ = [], []
    for ad, lam in zip(adapters, coeffs):
        root = math.sqrt(abs(lam))
        bs.append(math.copysign(root, lam) * ad.b)
        as_.append(root * ad.a)
    layer_id = layer_id or adapters[0].layer_id
    b, a = np.hstack(bs), np.vstack(as_)
    if a.shape[0] > min(d_in, d_out):
        return factorize(layer_id, b @ a)
    return LoraAdapter(layer_id, b, a)


def knots_ties_merge(deltas: Sequence[np.ndarray], scale: float, keep_fraction: float = 0.20) -> np.ndarray:
    """TIES over per-task coefficients in the shared right-singular basis.

    Updates are stacked along the output dimension, so every task shares the
    basis ``Vt`` and owns a d_out x p block of ``U diag(S)``.
    """
    deltas = _check_shapes(deltas)
    d_out = deltas[0].shape[0]
    res = svd(np.vstack(deltas))
    coef = res.u * res.s
    blocks = [coef[k * d_out : (k + 1) * d_out] for k in range(len(deltas))]
    merged = ties_merge(blocks, 1.0, keep_fraction)
    return scale * (merged @ res.vt)


def grid_search_scale(
    loss_at: Callable[[float], float],
    coarse_max: float = 1.5,
    coarse_step: float = 0.1,
    fine_step: float = 0.01,
) -> tuple[float, list[tuple[float, float]]]:
    """Coarse sweep over [0, coarse_max], then a fine sweep around the best value.

    Returns the best scale and every ``(scale, loss)`` evaluated, in order.
    Ties keep the earliest scale.
    """
    history: list[tuple[float, float]] = []
    cache: dict[float, float] = {}

    def probe(s: float) -> float:
        s = round(s, 10)
        if s not in cache:
            cache[s] = float(loss_at(s))
            history.append((s, cache[s]))
        return cache[s]

    n_coarse = int(round(coarse_max / coarse_step))
    coarse = [i * coarse_step for i in range(n_coarse + 1)]
    best = min(coarse, key=lambda s: (probe(s), s))
    n_fine = int(round(coarse_step / fine_step))
    fine = [best + i * fine_step for i in range(-n_fine + 1, n_fine) if best + i * fine_step >= 0.0]
    best = min(fine, key=lambda s: (probe(s), s))
    return round(best, 10), history


def factorize(layer_id: str, update: np.ndarray) -> LoraAdapter:
    """Exact low-rank factors ``(U S, Vt)`` of a dense update at its numerical rank."""
    res = svd(update)
    rank = max(1, numerical_rank(res.s))
    return LoraAdapter(layer_id, res.u[:, :rank] * res.s[:rank], res.vt[:rank])


def merge_adapter_sets(sets: Sequence[AdapterSet], spec: MergeSpec, task_id: str = "merged") -> AdapterSet:
    """Apply one baseline layer by layer and return the result as a single adapter set.

    Coefficient-free methods use ``spec.scale`` as the global merge scale;
    ``linear`` gives every task coefficient ``spec.scale``.
    """
    layers = stack_layer_ids(sets)
    out = {}
    for j, layer in enumerate(layers):
        adapters = [s.adapters[layer] for s in sets]
        deltas = [delta(a) for a in adapters]
        if spec.method == "ta":
            out[layer] = factorize(layer, ta_merge(deltas, spec.scale))
        elif spec.method == "ties":
            out[layer] = factorize(layer, ties_merge(deltas, spec.scale, spec.ties_keep_fraction))
        elif spec.method == "dare_ties":
            out[layer] = factorize(layer, dare_ties_merge(deltas, spec.scale, spec.dare_drop_prob, spec.seed * 1009 + j))
        elif spec.method == "svd":
            rank = spec.svd_rank or max(a.rank for a in adapters)
            b, a = svd_merge(deltas, spec.scale, min(rank, min(deltas[0].shape)))
            out[layer] = LoraAdapter(layer, b, a)
        elif spec.method == "linear":
            out[layer] = linear_merge(adapters, [spec.scale] * len(adapters), layer)
        elif spec.method == "knots_ties":
            out[layer] = factorize(layer, knots_ties_merge(deltas, spec.scale, spec.ties_keep_fraction))
        else:  # pragma: no cover - guarded by MergeSpec
            raise ValueError(spec.method)
    return AdapterSet(task_id, out)


def concat_sets(sets: Sequence[AdapterSet], coeffs, task_id: str = "merged") -> AdapterSet:
    """Fold per-task, per-layer coefficients into one exact concatenated adapter set."""
    out = {}
    for layer in stack_layer_ids(sets):
        members = [s for s in sets if layer in s.adapters]
        out[layer] = linear_merge([s.adapters[layer] for s in members], [coeffs.get(s.task_id, layer) for s in members], layer)
    return AdapterSet(task_id, out)
