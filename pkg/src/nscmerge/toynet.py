"""A small pre-norm transformer with LoRA attachment points.

The network embeds integer token sequences, runs ``blocks`` pre-norm
attention + GELU-MLP blocks, applies a final layer norm and mean-pools over
positions. Task heads (see :class:`~nscmerge.adapters.TaskHead`) sit on top of
the pooled features.

LoRA-equipped projections are evaluated in low-rank form::

    y = x W0^T + sum_k lam_k * (x A_k^T) B_k^T

so the products ``A_k z`` needed for null-space ratios come for free.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .adapters import CLASSIFICATION, REGRESSION, AdapterSet, LoraAdapter, MergeCoefficients, TaskHead
from .autograd import Tensor
from .container import ManifestError, load_tensors, save_tensors
from .nullspace import NullRatioContext, mean_null_ratio
from .optim import AdamW

logger = logging.getLogger(__name__)

PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ToyModelConfig:
    blocks: int = 4
    model_dim: int = 32
    heads: int = 2
    mlp_dim: int = 64
    seq_len: int = 8
    vocab: int = 16
    lora_targets: tuple[str, ...] = PROJECTIONS
    lora_rank: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim={self.model_dim} is not divisible by heads={self.heads}")
        if not 1 <= self.lora_rank <= self.model_dim:
            raise ValueError(f"lora_rank={self.lora_rank} must lie in [1, model_dim]")
        bad = set(self.lora_targets) - set(PROJECTIONS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")
        object.__setattr__(self, "lora_targets", tuple(p for p in PROJECTIONS if p in self.lora_targets))

    @property
    def layer_ids(self) -> tuple[str, ...]:
        """LoRA-equipped projections, block-major."""
        return tuple(f"b{i}.{p}" for i in range(self.blocks) for p in self.lora_targets)

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "mlp_dim": self.mlp_dim,
            "seq_len": self.seq_len,
            "vocab": self.vocab,
            "lora_targets": list(self.lora_targets),
            "lora_rank": self.lora_rank,
        }


def select_layers(config: ToyModelConfig, blocks: str = "last-quarter", projections: str = "o") -> tuple[str, ...]:
    """Resolve a block selector and projection letters to LoRA layer ids.

    ``blocks`` is ``all``, ``last-quarter``, ``last-half`` or ``last-N``.
    """
    n = config.blocks
    if blocks == "all":
        chosen = range(n)
    elif blocks == "last-quarter":
        chosen = range(n - max(1, math.ceil(n / 4)), n)
    elif blocks == "last-half":
        chosen = range(n - max(1, math.ceil(n / 2)), n)
    elif blocks.startswith("last-") and blocks[5:].isdigit():
        count = int(blocks[5:])
        if not 1 <= count <= n:
            raise ValueError(f"block selector {blocks!r} out of range for {n} blocks")
        chosen = range(n - count, n)
    else:
        raise ValueError(f"unknown block selector {blocks!r}")
    projs = [p for p in PROJECTIONS if p in projections.lower()]
    if not projs:
        raise ValueError(f"no projections selected by {projections!r}")
    layers = tuple(f"b{i}.{p}" for i in chosen for p in projs if p in config.lora_targets)
    if not layers:
        raise ValueError("selection matches no LoRA-equipped layer")
    return layers


@dataclass(frozen=True)
class BaseModel:
    config: ToyModelConfig
    weights: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        frozen = {}
        for name, w in self.weights.items():
            arr = np.array(w, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"base weight {name} has non-finite entries")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "weights", frozen)


def init_base_model(config: ToyModelConfig, seed: int) -> BaseModel:
    rng = np.random.default_rng([seed, 0xBA5E])
    d, f = config.model_dim, config.mlp_dim
    w = {
        "embed": rng.normal(0.0, 1.0, (config.vocab, d)),
        "pos": rng.normal(0.0, 1.0, (config.seq_len, d)),
    }
    for i in range(config.blocks):
        for p in PROJECTIONS:
            w[f"b{i}.{p}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        w[f"b{i}.mlp1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (f, d))
        w[f"b{i}.mlp2"] = rng.normal(0.0, 1.0 / math.sqrt(f), (d, f))
    return BaseModel(config, w)


def save_base_model(model: BaseModel, path) -> Path:
    return save_tensors(path, {f"base/{k}": v for k, v in model.weights.items()}, {"config": model.config.to_dict()})


def load_base_model(path) -> BaseModel:
    tensors, meta = load_tensors(path)
    try:
        cfg = dict(meta["config"])
        cfg["lora_targets"] = tuple(cfg["lora_targets"])
        config = ToyModelConfig(**cfg)
    except (KeyError, TypeError) as exc:
        raise ManifestError("base-model manifest lacks a valid config") from exc
    model = BaseModel(config, {k.removeprefix("base/"): v for k, v in tensors.items()})
    reference = init_base_model(config, 0)
    for name, arr in reference.weights.items():
        if name not in model.weights or model.weights[name].shape != arr.shape:
            raise ManifestError(f"base-model tensor {name} missing or mis-shaped")
    return model


@dataclass(frozen=True)
class ActivationTrace:
    """Incoming activations at every LoRA layer; one row per token position."""

    inputs: Mapping[str, np.ndarray]

    @property
    def batch_size(self) -> int:
        return next(iter(self.inputs.values())).shape[0] if self.inputs else 0


@dataclass
class GraphOutput:
    """Differentiable forward result.

    ``z[layer]`` is the flattened input to the layer and ``az[layer][k]`` is
    ``z @ A_k^T`` for the k-th adapter set.
    """

    features: Tensor
    z: dict[str, Tensor]
    az: dict[str, list[Tensor]]


def _as_tokens(tokens, config: ToyModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != config.seq_len:
        raise ValueError(f"token batch must be (n, {config.seq_len}), got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise ValueError(f"token ids must lie in [0, {config.vocab})")
    return tokens


def run_graph(
    model: BaseModel,
    tokens,
    lora: Mapping[str, Sequence[tuple[Tensor, Tensor, Tensor]]],
    dense: Mapping[str, Tensor] | None = None,
) -> GraphOutput:
    """Forward pass building an autodiff graph.

    ``lora`` maps a layer id to ``(coefficient, A, B)`` triples added in
    low-rank form. ``dense`` optionally replaces base weights by name
    (projections, MLP matrices, ``embed``, ``pos``), e.g. with trainable
    tensors.
    """
    cfg = model.config
    tokens = _as_tokens(tokens, cfg)
    n, t = tokens.shape
    d, h = cfg.model_dim, cfg.heads
    dh = d // h
    w = model.weights
    dense = dense or {}
    zs: dict[str, Tensor] = {}
    azs: dict[str, list[Tensor]] = {}

    def weight(name: str) -> Tensor:
        return dense[name] if name in dense else Tensor(w[name])

    def project(x: Tensor, name: str) -> Tensor:
        y = x @ weight(name).T
        terms = lora.get(name)
        if terms is not None or name in cfg.layer_ids:
            zs[name] = x
            azs[name] = []
        for lam, a, b in terms or ():
            ax = x @ a.T
            azs[name].append(ax)
            y = y + lam * (ax @ b.T)
        return y

    if "embed" in dense or "pos" in dense:
        x = weight("embed")[tokens] + ag.reshape(weight("pos")[:t], (1, t, d))
    else:
        x = Tensor(w["embed"][tokens] + w["pos"][None, :t, :])
    x = ag.reshape(x, (n * t, d))
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.blocks):
        hdn = ag.layer_norm(x)
        heads = []
        for p in ("q", "k", "v"):
            y = project(hdn, f"b{i}.{p}")
            heads.append(ag.transpose(ag.reshape(y, (n, t, h, dh)), (0, 2, 1, 3)))
        q, k, v = heads
        attn = ag.softmax((q @ k.T) * scale, axis=-1)
        ctx = ag.reshape(ag.transpose(attn @ v, (0, 2, 1, 3)), (n * t, d))
        x = x + project(ctx, f"b{i}.o")
        hdn = ag.layer_norm(x)
        mlp = ag.gelu(hdn @ weight(f"b{i}.mlp1").T) @ weight(f"b{i}.mlp2").T
        x = x + mlp
    x = ag.layer_norm(x)
    feats = ag.mean(ag.reshape(x, (n, t, d)), axis=1)
    return GraphOutput(feats, zs, azs)


def apply_head(features: Tensor, head: TaskHead | Sequence[Tensor]) -> Tensor:
    if isinstance(head, TaskHead):
        weight, bias = Tensor(head.weight), Tensor(head.bias)
    else:
        weight, bias = head
    return features @ weight.T + bias


def _check_sets(model: BaseModel, sets: Sequence[AdapterSet], coeffs: MergeCoefficients) -> None:
    cfg = model.config
    for s in sets:
        if s.task_id not in coeffs.task_ids:
            raise ValueError(f"no coefficients for task {s.task_id}")
        for layer, adapter in s.adapters.items():
            if layer not in cfg.layer_ids:
                raise ValueError(f"task {s.task_id}: layer {layer} is not LoRA-equipped in this model")
            if layer not in coeffs.layer_ids:
                raise ValueError(f"no coefficient for layer {layer}")
            if (adapter.d_out, adapter.d_in) != model.weights[layer].shape:
                raise ValueError(
                    f"task {s.task_id}: layer {layer} adapter is {adapter.d_out}x{adapter.d_in}, "
                    f"base weight is {model.weights[layer].shape}"
                )


def lora_terms(
    model: BaseModel, sets: Sequence[AdapterSet], coeffs: MergeCoefficients, lam: Tensor
) -> dict[str, list[tuple[Tensor, Tensor, Tensor]]]:
    """Low-rank terms for :func:`run_graph`, reading coefficients from ``lam``.

    ``lam`` has the shape of ``coeffs.values`` and may require gradients.
    """
    _check_sets(model, sets, coeffs)
    terms: dict[str, list] = {}
    for layer in model.config.layer_ids:
        for s in sets:
            adapter = s.adapters.get(layer)
            if adapter is None:
                continue
            i, j = coeffs.task_ids.index(s.task_id), coeffs.layer_ids.index(layer)
            terms.setdefault(layer, []).append((lam[i, j], Tensor(adapter.a), Tensor(adapter.b)))
    return terms


def forward(
    model: BaseModel,
    sets: Sequence[AdapterSet],
    coeffs: MergeCoefficients | None,
    tokens,
    head: TaskHead | None = None,
    capture: bool = True,
) -> tuple[np.ndarray, ActivationTrace | None]:
    """Evaluate the merged model ``W0 + sum_k lam_k B_k A_k``.

    Returns pooled features (or head outputs when ``head`` is given) and the
    captured activations at every LoRA layer.
    """
    if sets:
        terms = lora_terms(model, sets, coeffs, Tensor(coeffs.values))
    else:
        terms = {}
    out = run_graph(model, tokens, terms)
    result = out.features if head is None else apply_head(out.features, head)
    trace = ActivationTrace({k: v.data for k, v in out.z.items()}) if capture else None
    return result.data, trace


def forward_dense(model: BaseModel, deltas: Mapping[str, np.ndarray], tokens, head: TaskHead | None = None):
    """Forward with merged updates materialized into dense projection weights."""
    dense = {k: Tensor(model.weights[k] + v) for k, v in deltas.items()}
    out = run_graph(model, tokens, {}, dense=dense)
    result = out.features if head is None else apply_head(out.features, head)
    return result.data, ActivationTrace({k: v.data for k, v in out.z.items()})


class NonFiniteGradientError(FloatingPointError):
    pass


Objective = Callable[[BaseModel, Sequence[AdapterSet], MergeCoefficients, Tensor, object], Tensor]


def grad_wrt_coeffs(
    model: BaseModel,
    sets: Sequence[AdapterSet],
    coeffs: MergeCoefficients,
    batch,
    objective: Objective,
) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of ``objective`` w.r.t. every coefficient.

    ``objective(model, sets, coeffs, lam, batch)`` must build its scalar from
    ``lam``, a differentiable copy of ``coeffs.values``.
    """
    lam = Tensor(coeffs.values.copy(), requires_grad=True)
    value = objective(model, sets, coeffs, lam, batch)
    if value.data.shape != ():
        raise ValueError(f"objective must be scalar, got shape {value.data.shape}")
    value.backward()
    grad = lam.grad if lam.grad is not None else np.zeros_like(lam.data)
    bad = np.argwhere(~np.isfinite(grad))
    if bad.size:
        i, j = bad[0]
        raise NonFiniteGradientError(
            f"non-finite gradient for task {coeffs.task_ids[i]}, layer {coeffs.layer_ids[j]}"
        )
    return float(value.data), grad


# ---------------------------------------------------------------- training


def task_loss(outputs: Tensor, targets, kind: str) -> Tensor:
    if kind == CLASSIFICATION:
        labels = np.asarray(targets, dtype=np.int64)
        logp = ag.log_softmax(outputs, axis=-1)
        return -ag.mean(logp[np.arange(labels.shape[0]), labels])
    if kind == REGRESSION:
        diff = outputs - Tensor(np.asarray(targets, dtype=np.float64).reshape(outputs.shape))
        return ag.mean(diff * diff)
    raise ValueError(f"unknown task kind {kind!r}")


def task_metric(outputs: np.ndarray, targets, kind: str) -> float:
    """Accuracy for classification, RMSE for regression."""
    if kind == CLASSIFICATION:
        return float(np.mean(np.argmax(outputs, axis=-1) == np.asarray(targets)))
    diff = outputs - np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    return float(np.sqrt(np.mean(diff * diff)))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    metric: float
    mean_omega: float


def _adapter_set_from(task, cfg: ToyModelConfig, params: Mapping[str, tuple[Tensor, Tensor]], head: tuple[Tensor, Tensor]) -> AdapterSet:
    adapters = {l: LoraAdapter(l, b.data, a.data) for l, (a, b) in params.items()}
    return AdapterSet(task.task_id, adapters, TaskHead(task.kind, head[0].data, head[1].data))


def evaluate_split(model: BaseModel, sets, coeffs, head: TaskHead, tokens, targets, kind: str, chunk: int = 512):
    """Return ``(loss, metric)`` of one head on a labelled split."""
    outs = []
    for start in range(0, len(tokens), chunk):
        out, _ = forward(model, sets, coeffs, tokens[start : start + chunk], head=head, capture=False)
        outs.append(out)
    outputs = np.concatenate(outs, axis=0)
    loss = float(task_loss(Tensor(outputs), targets, kind).data)
    return loss, task_metric(outputs, targets, kind)


def adapter_omega(model: BaseModel, adapter_set: AdapterSet, tokens) -> float:
    """Mean null-space ratio over all LoRA layers of one task's own model."""
    coeffs = MergeCoefficients.constant([adapter_set.task_id], model.config.layer_ids, 1.0)
    _, trace = forward(model, [adapter_set], coeffs, tokens)
    contexts = {l: NullRatioContext.from_adapter(a) for l, a in adapter_set.adapters.items()}
    return mean_null_ratio(trace.inputs, contexts, adapter_set.layer_ids).overall


def train_lora(
    model: BaseModel,
    task,
    epochs: int = 30,
    seed: int = 0,
    *,
    lr: float = 1e-3,
    batch_size: int = 32,
    weight_decay: float = 1e-6,
    omega_samples: int = 256,
) -> tuple[AdapterSet, list[EpochRecord]]:
    """Fine-tune a LoRA adapter set and a task head on ``task``.

    ``task`` needs ``task_id``, ``kind``, ``out_dim`` and ``splits`` with
    ``"train"`` and ``"val"`` entries of ``(tokens, targets)``. B starts at
    zero and A at N(0, 1/d_in), so epoch 0 of the history is the base model.
    """
    cfg = model.config
    rng = np.random.default_rng([seed, 0x10DA])
    params: dict[str, tuple[Tensor, Tensor]] = {}
    for layer in cfg.layer_ids:
        d_out, d_in = model.weights[layer].shape
        a = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (cfg.lora_rank, d_in)), requires_grad=True)
        b = Tensor(np.zeros((d_out, cfg.lora_rank)), requires_grad=True)
        if np.linalg.matrix_rank(a.data) < cfg.lora_rank:
            raise RuntimeError(f"singular LoRA initialization at {layer}")
        params[layer] = (a, b)
    head = (
        Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.model_dim), (task.out_dim, cfg.model_dim)), requires_grad=True),
        Tensor(np.zeros(task.out_dim), requires_grad=True),
    )
    flat = [t for pair in params.values() for t in pair] + list(head)
    opt = AdamW(flat, lr=lr, weight_decay=weight_decay)

    x_train, y_train = task.splits["train"]
    x_val, y_val = task.splits["val"]
    x_omega = x_val[:omega_samples]
    one = Tensor(np.float64(1.0))

    def snapshot() -> AdapterSet:
        return _adapter_set_from(task, cfg, params, head)

    def record(epoch: int, train_loss: float) -> EpochRecord:
        current = snapshot()
        coeffs = MergeCoefficients.constant([task.task_id], cfg.layer_ids, 1.0)
        val_loss, metric = evaluate_split(model, [current], coeffs, current.head, x_val, y_val, task.kind)
        return EpochRecord(epoch, train_loss, val_loss, metric, adapter_omega(model, current, x_omega))

    init_set = snapshot()
    coeffs1 = MergeCoefficients.constant([task.task_id], cfg.layer_ids, 1.0)
    init_loss, _ = evaluate_split(model, [init_set], coeffs1, init_set.head, x_train, y_train, task.kind)
    history = [record(0, init_loss)]

    n = len(x_train)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            terms = {l: [(one, a, b)] for l, (a, b) in params.items()}
            out = apply_head(run_graph(model, x_train[idx], terms).features, head)
            loss = task_loss(out, y_train[idx], task.kind)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            if not math.isfinite(losses[-1]) or losses[-1] > 1e6:
                raise TrainingDiverged(f"{task.task_id}: loss {losses[-1]:.3g} at epoch {epoch}", history)
        history.append(record(epoch, float(np.mean(losses))))
        logger.debug("%s epoch %d: %s", task.task_id, epoch, history[-1])
    return snapshot(), history
