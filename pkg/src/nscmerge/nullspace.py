"""Null-space ratio of activations with respect to a LoRA down-projection.

For an r x d down-projection ``A`` and a feature ``z`` the ratio is the share
of ``z``'s norm that ``A`` discards::

    omega(z) = ||Proj_null(A) z|| / ||z||
             = sqrt(1 - z^T A^T (A A^T)^{-1} A z / ||z||^2)

The second form only needs the cached r x r Gram inverse and ``A z``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .adapters import LoraAdapter
from .linalg import LinalgError, NotPositiveDefiniteError, gram_inverse, numerical_rank, svd

# Below this squared ratio the 1 - x form loses most significant digits, so
# the null component is formed explicitly (still O(r d), through the cache).
_REFINE_BELOW = 1e-4


class RankDeficientError(LinalgError):
    pass


@dataclass(frozen=True)
class NullRatioContext:
    a: np.ndarray
    gram_inv: np.ndarray

    @classmethod
    def from_matrix(cls, a, jitter: float | None = 0.0) -> "NullRatioContext":
        """Cache ``(A A^T)^{-1}``; falls back to the default jitter if ``A`` is singular."""
        a = np.asarray(a, dtype=np.float64)
        try:
            g = gram_inverse(a, jitter)
        except NotPositiveDefiniteError:
            if jitter is None:
                raise
            g = gram_inverse(a, None)
        a = np.array(a)
        a.flags.writeable = False
        return cls(a, g)

    @classmethod
    def from_adapter(cls, adapter: LoraAdapter, jitter: float | None = 0.0) -> "NullRatioContext":
        return cls.from_matrix(adapter.a, jitter)


def null_ratio_oracle(a, z) -> float:
    """Definition form: project onto an explicit SVD null-space basis of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise ValueError("null ratio is undefined for a zero-norm feature")
    res = svd(a, full=True)
    rank = numerical_rank(res.s)
    basis = res.vt[rank:]  # rows span the null space
    if basis.shape[0] == 0:
        return 0.0
    return min(1.0, float(np.linalg.norm(basis @ z)) / norm)


def null_ratio_fast(ctx: NullRatioContext, z) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if not np.any(z):
        raise ValueError("null ratio is undefined for a zero-norm feature")
    ratios, _ = null_ratios(ctx, z[None, :])
    return float(ratios[0])


def null_ratios(ctx: NullRatioContext, zs) -> tuple[np.ndarray, int]:
    """Row-wise ratios for an n x d batch.

    Zero rows get ratio 1; their count is returned alongside the ratios.
    """
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[1] != ctx.a.shape[1]:
        raise ValueError(f"expected features of width {ctx.a.shape[1]}, got shape {zs.shape}")
    az = zs @ ctx.a.T
    proj_coef = az @ ctx.gram_inv
    captured = np.einsum("ij,ij->i", proj_coef, az)
    sq = np.einsum("ij,ij->i", zs, zs)
    zero = sq == 0.0
    safe = np.where(zero, 1.0, sq)
    rad = 1.0 - captured / safe
    small = (rad < _REFINE_BELOW) & ~zero
    if np.any(small):
        resid = zs[small] - proj_coef[small] @ ctx.a
        rad[small] = np.einsum("ij,ij->i", resid, resid) / sq[small]
    rad = np.where(zero, 1.0, rad)
    return np.sqrt(np.clip(rad, 0.0, 1.0)), int(np.count_nonzero(zero))


def _pairwise_mean(values: np.ndarray) -> float:
    # numpy's add.reduce is pairwise for contiguous float arrays
    return float(np.sum(np.ascontiguousarray(values, dtype=np.float64))) / values.size


@dataclass(frozen=True)
class RatioReport:
    per_layer: Mapping[str, float]
    overall: float
    batch_sizes: Mapping[str, int] = field(default_factory=dict)
    zero_norm: Mapping[str, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_id", "mean_omega", "batch_size"])
        for layer, value in self.per_layer.items():
            writer.writerow([layer, repr(float(value)), self.batch_sizes.get(layer, 0)])
        return buf.getvalue()


def mean_null_ratio(traces: Mapping[str, np.ndarray], contexts: Mapping[str, NullRatioContext], target_layers) -> RatioReport:
    """Batch-mean ratio per target layer and the unweighted mean across them.

    ``traces`` maps layer id to the n x d activations fed to that layer.
    """
    target_layers = list(target_layers)
    if not target_layers:
        raise ValueError("mean_null_ratio needs at least one target layer")
    per_layer: dict[str, float] = {}
    sizes: dict[str, int] = {}
    zeros: dict[str, int] = {}
    for layer in target_layers:
        zs = np.asarray(traces[layer], dtype=np.float64)
        if zs.shape[0] == 0:
            raise ValueError(f"empty activation batch at layer {layer}")
        ratios, n_zero = null_ratios(contexts[layer], zs)
        per_layer[layer] = _pairwise_mean(ratios)
        sizes[layer] = zs.shape[0]
        zeros[layer] = n_zero
    overall = _pairwise_mean(np.array(list(per_layer.values())))
    return RatioReport(per_layer, overall, sizes, zeros)


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def _smallest_singular(m: np.ndarray, what: str) -> float:
    s = svd(m).s
    if s[0] == 0.0 or s[-1] <= 1e-12 * s[0]:
        raise RankDeficientError(f"{what} is rank deficient (sigma_min={s[-1]:.3g}, sigma_max={s[0]:.3g})")
    return float(s[-1])


def check_adapter_bound(adapter: LoraAdapter, z) -> BoundCheck:
    """Check ``||B A z|| >= s_min(B) s_min(A) sqrt(1 - omega^2) ||z||``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise ValueError("bound check needs a non-zero feature")
    c = _smallest_singular(adapter.b, "B") * _smallest_singular(adapter.a, "A")
    omega = null_ratio_fast(NullRatioContext.from_adapter(adapter), z)
    lhs = float(np.linalg.norm(adapter.b @ (adapter.a @ z)))
    rhs = c * math.sqrt(max(0.0, 1.0 - omega * omega)) * norm
    return BoundCheck(lhs, rhs, lhs >= rhs - 1e-9)
